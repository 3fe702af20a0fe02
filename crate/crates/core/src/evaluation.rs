//! Evaluation: voxel fidelity (PSNR, 3D SSIM), structure consistency
//! (Dice of a nearest-intensity segmentation against the phantom labels),
//! latent informativeness (logistic probes on frozen anatomical latents),
//! and the cross-modal swap study.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::{codebook_stats, CodebookStats};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::objectives::{ssim3d, SSIM_WINDOW};
use crate::tensor::Tensor;
use crate::volume::{intensity_table, LabelMap, Modality, PairedSample};

/// Reported ceiling for PSNR, standing in for the infinite value of a
/// perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Minimum samples per class in a probe's training set.
pub const PROBE_MIN_PER_CLASS: usize = 20;

/// Bins of the intensity histogram used to recognize a volume's modality.
pub const HISTOGRAM_BINS: usize = 32;

/// Ridge penalty of the logistic probes, on standardized features.
const PROBE_RIDGE: f64 = 1e-2;

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr<T: Copy + Into<f64>>(x: &[T], x_hat: &[T], data_range: f64) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return shape_err(format!("psnr: lengths {} and {}", x.len(), x_hat.len()));
    }
    let sse: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sse / x.len() as f64, data_range))
}

/// PSNR over the voxels where `mask` is set.
pub fn psnr_masked<T: Copy + Into<f64>>(x: &[T], x_hat: &[T], mask: &[bool], data_range: f64) -> Result<f64> {
    if x.len() != x_hat.len() || x.len() != mask.len() {
        return shape_err(format!(
            "psnr: lengths {}, {} and mask {}",
            x.len(),
            x_hat.len(),
            mask.len()
        ));
    }
    let (mut sse, mut n) = (0.0f64, 0usize);
    for ((&a, &b), &m) in x.iter().zip(x_hat).zip(mask) {
        if m {
            let d = a.into() - b.into();
            sse += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("psnr: empty mask".into()));
    }
    Ok(psnr_from_mse(sse / n as f64, data_range))
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// PSNR as written to reports: capped so it stays finite.
pub fn report_db(v: f64) -> f64 {
    v.min(PSNR_CAP_DB)
}

/// Label every voxel with the structure whose generator intensity for
/// `modality` is nearest (ties go to the lower label).
pub fn segment_reconstruction(
    x_hat: &[f32],
    shape: [usize; 3],
    modality: Modality,
    n_structures: u8,
) -> Result<LabelMap> {
    let mu = intensity_table(modality);
    let mu = &mu[..=n_structures as usize];
    let labels = x_hat
        .iter()
        .map(|&v| {
            let mut best = 0u8;
            for (l, &m) in mu.iter().enumerate().skip(1) {
                if (v - m).abs() < (v - mu[best as usize]).abs() {
                    best = l as u8;
                }
            }
            best
        })
        .collect();
    LabelMap::new(shape, labels, n_structures)
}

/// Dice overlap of `label` between two label maps; 1 when both lack it.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("dice: shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Per-sample channel means (global average pooling) of `N x C x ...`.
pub fn gap_features(z: &Tensor) -> Vec<Vec<f64>> {
    let (n, c) = (z.dim(0), z.dim(1));
    let s = z.spatial_len();
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let at = (i * c + ch) * s;
                    z.data()[at..at + s].iter().map(|&v| v as f64).sum::<f64>() / s as f64
                })
                .collect()
        })
        .collect()
}

/// Normalized intensity histogram over `[0, 1]` with `bins` bins.
pub fn intensity_histogram(v: &[f32], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0f64; bins];
    for &x in v {
        let b = ((x.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = v.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Binary logistic regression on standardized features, fitted by damped
/// Newton iterations with a small ridge penalty. Fully deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Feature weights followed by the bias.
    pub weights: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Solve `a x = b` (`a` is `n x n`, row-major) by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Invalid(format!("probe: {} samples, {} labels", x.len(), y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("probe: ragged feature rows".into()));
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; d + 1],
        };
        let rows: Vec<Vec<f64>> = x.iter().map(|r| probe.design_row(r)).collect();
        let targets: Vec<f64> = y.iter().map(|&b| b as u8 as f64).collect();
        let p = d + 1;
        let objective = |w: &[f64]| {
            let nll: f64 = rows
                .iter()
                .zip(&targets)
                .map(|(r, &t)| {
                    let z: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
                    // log(1 + e^z) - t z, computed stably
                    z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z
                })
                .sum();
            nll + 0.5 * PROBE_RIDGE * w[..d].iter().map(|v| v * v).sum::<f64>()
        };
        let mut current = objective(&probe.weights);
        for _ in 0..100 {
            let w = &probe.weights;
            let mut grad = vec![0.0; p];
            let mut hess = vec![0.0; p * p];
            for (r, &t) in rows.iter().zip(&targets) {
                let z: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
                let s = sigmoid(z);
                let h = s * (1.0 - s);
                for i in 0..p {
                    grad[i] += (s - t) * r[i];
                    for j in 0..p {
                        hess[i * p + j] += h * r[i] * r[j];
                    }
                }
            }
            for i in 0..d {
                grad[i] += PROBE_RIDGE * w[i];
                hess[i * p + i] += PROBE_RIDGE;
            }
            hess[d * p + d] += 1e-9;
            let Some(step) = solve(hess, grad, p) else { break };
            // Backtrack until the objective does not increase.
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<f64> = w.iter().zip(&step).map(|(a, b)| a - t * b).collect();
                let val = objective(&cand);
                if val <= current {
                    probe.weights = cand;
                    current = val;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            let size = step.iter().fold(0.0f64, |m, v| m.max((t * v).abs()));
            if !accepted || size < 1e-10 {
                break;
            }
        }
        Ok(probe)
    }

    fn design_row(&self, r: &[f64]) -> Vec<f64> {
        let mut row: Vec<f64> = r
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        row.push(1.0);
        row
    }

    pub fn probability(&self, r: &[f64]) -> f64 {
        let z: f64 = self.design_row(r).iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        sigmoid(z)
    }

    pub fn predict(&self, r: &[f64]) -> bool {
        self.probability(r) > 0.5
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        if x.is_empty() {
            return f64::NAN;
        }
        let hits = x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count();
        hits as f64 / x.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Fit a logistic probe on frozen training features and score it on the
/// held-out ones.
pub fn latent_probe(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    test_x: &[Vec<f64>],
    test_y: &[bool],
) -> Result<ProbeResult> {
    let pos = train_y.iter().filter(|&&b| b).count();
    let neg = train_y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("probe: training split holds a single class".into()));
    }
    if pos.min(neg) < PROBE_MIN_PER_CLASS {
        return Err(Error::Invalid(format!(
            "probe: need >= {PROBE_MIN_PER_CLASS} training samples per class, got {neg}/{pos}"
        )));
    }
    if test_x.len() != test_y.len() {
        return Err(Error::Invalid("probe: test features and labels differ in length".into()));
    }
    let probe = LogisticProbe::fit(train_x, train_y)?;
    Ok(ProbeResult {
        train_accuracy: probe.accuracy(train_x, train_y),
        test_accuracy: probe.accuracy(test_x, test_y),
        n_train: train_x.len(),
        n_test: test_x.len(),
    })
}

/// Frozen-encoder features of every volume of one modality.
#[derive(Clone, Debug, Default)]
pub struct LatentSet {
    /// GAP of the continuous anatomical latent, per sample.
    pub features: Vec<Vec<f64>>,
    /// Codebook indices of every latent position, all samples concatenated.
    pub indices: Vec<u32>,
    pub attributes: Vec<bool>,
}

/// Encode every `modality` volume of `pairs` one at a time.
pub fn encode_latents(model: &Model, pairs: &[PairedSample], modality: Modality) -> Result<LatentSet> {
    let mut set = LatentSet::default();
    for p in pairs {
        let (z, idx) = model.anatomical_latents(&p.volume(modality).to_tensor())?;
        set.features.extend(gap_features(&z));
        set.indices.extend(idx);
        set.attributes.push(p.attribute);
    }
    Ok(set)
}

/// Probe of each modality's attribute plus the modality itself, from
/// anatomical latents (a low modality accuracy means the anatomy stream
/// carries little contrast information).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub attribute_a: ProbeResult,
    pub attribute_b: ProbeResult,
    pub modality: ProbeResult,
}

pub fn probe_eval(train: &[LatentSet; 2], test: &[LatentSet; 2]) -> Result<ProbeReport> {
    let attr = |m: usize| latent_probe(&train[m].features, &train[m].attributes, &test[m].features, &test[m].attributes);
    let stack = |sets: &[LatentSet; 2]| {
        let x: Vec<Vec<f64>> = sets.iter().flat_map(|s| s.features.iter().cloned()).collect();
        let y: Vec<bool> = sets
            .iter()
            .enumerate()
            .flat_map(|(m, s)| std::iter::repeat_n(m == 1, s.features.len()))
            .collect();
        (x, y)
    };
    let (tx, ty) = stack(train);
    let (ex, ey) = stack(test);
    Ok(ProbeReport {
        attribute_a: attr(0)?,
        attribute_b: attr(1)?,
        modality: latent_probe(&tx, &ty, &ex, &ey)?,
    })
}

fn histogram_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapDirection {
    pub source: Modality,
    pub target: Modality,
    /// Mean L1 between the swapped decode and the true target volume.
    pub swap_l1: f64,
    pub swap_ssim: f64,
    /// SSIM of the source's own reconstruction against the target volume.
    pub baseline_ssim: f64,
    /// Fraction of swapped decodes whose intensity histogram is closer to
    /// the target's reconstruction than to the source's.
    pub modality_transfer_score: f64,
}

/// Both swap directions over `pairs`: anatomy of the source modality decoded
/// with the FiLM parameters of the other. Histograms are compared against
/// reconstructions rather than raw volumes so that decoder smoothing affects
/// both references alike.
pub fn swap_eval(model: &Model, pairs: &[PairedSample]) -> Result<Vec<SwapDirection>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("swap evaluation needs at least one pair".into()));
    }
    let mut out = Vec::new();
    for source in Modality::ALL {
        let target = source.other();
        let (mut l1, mut ss, mut base, mut hits) = (0.0, 0.0, 0.0, 0usize);
        for p in pairs {
            let xs = p.volume(source).to_tensor();
            let xt = p.volume(target).to_tensor();
            let swapped = model.swap(&xs, &xt, &[target])?;
            let own = model.reconstruct(&xs, &[source])?;
            let other = model.reconstruct(&xt, &[target])?;
            l1 += swapped.data().iter().zip(xt.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / xt.numel() as f64;
            ss += ssim3d(&swapped, &xt, SSIM_WINDOW, 1.0)?;
            base += ssim3d(&own, &xt, SSIM_WINDOW, 1.0)?;
            let hist = |t: &Tensor| intensity_histogram(t.data(), HISTOGRAM_BINS);
            let h = hist(&swapped);
            hits += (histogram_l1(&h, &hist(&other)) < histogram_l1(&h, &hist(&own))) as usize;
        }
        let n = pairs.len() as f64;
        out.push(SwapDirection {
            source,
            target,
            swap_l1: l1 / n,
            swap_ssim: ss / n,
            baseline_ssim: base / n,
            modality_transfer_score: hits as f64 / n,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub subject_id: u32,
    pub modality: Modality,
    pub psnr: f64,
    pub psnr_masked: f64,
    pub ssim: f64,
    pub dice_mean: f64,
    /// Dice of labels `1..=n_structures`, in label order.
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub modality: Modality,
    pub psnr_mean: f64,
    /// PSNR restricted to voxels inside the head.
    pub psnr_masked_mean: f64,
    pub ssim_mean: f64,
    /// Mean Dice of labels `1..=n_structures`, in label order.
    pub dice_per_structure: Vec<f64>,
    pub dice_mean: f64,
    /// Held-out accuracy of the attribute probe on this modality's latents.
    pub probe_accuracy: Option<f64>,
}

/// Everything `evaluate` measures on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: String,
    pub n_samples: usize,
    pub modalities: Vec<ModalityReport>,
    pub swap: Vec<SwapDirection>,
    /// Usage and perplexity of the codes assigned on the split.
    pub codebook: CodebookStats,
    pub probe: Option<ProbeReport>,
    #[serde(skip)]
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn modality(&self, m: Modality) -> &ModalityReport {
        self.modalities.iter().find(|r| r.modality == m).expect("both modalities reported")
    }

    pub fn mean_psnr(&self) -> f64 {
        self.modalities.iter().map(|r| r.psnr_mean).sum::<f64>() / self.modalities.len() as f64
    }

    pub fn mean_swap_l1(&self) -> f64 {
        self.swap.iter().map(|s| s.swap_l1).sum::<f64>() / self.swap.len().max(1) as f64
    }
}

/// Reconstruction metrics of every volume of `pairs`, plus the triptych
/// inputs of the first `keep` subjects per modality.
pub fn reconstruction_metrics(
    model: &Model,
    pairs: &[PairedSample],
    keep: usize,
) -> Result<(Vec<SampleMetrics>, Vec<(u32, Modality, Tensor, Tensor)>)> {
    let mut samples = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let head: Vec<bool> = p.labels.labels().iter().map(|&l| l != 0).collect();
        for m in Modality::ALL {
            let v = p.volume(m);
            let x = v.to_tensor();
            let x_hat = model.reconstruct(&x, &[m])?;
            let seg = segment_reconstruction(x_hat.data(), v.shape(), m, p.labels.n_structures())?;
            let dices = (1..=p.labels.n_structures())
                .map(|l| dice(&seg, &p.labels, l))
                .collect::<Result<Vec<_>>>()?;
            samples.push(SampleMetrics {
                subject_id: v.subject_id,
                modality: m,
                psnr: report_db(psnr(x.data(), x_hat.data(), 1.0)?),
                psnr_masked: report_db(psnr_masked(x.data(), x_hat.data(), &head, 1.0)?),
                ssim: ssim3d(&x, &x_hat, SSIM_WINDOW, 1.0)?,
                dice_mean: dices.iter().sum::<f64>() / dices.len() as f64,
                dice: dices,
            });
            if i < keep {
                kept.push((v.subject_id, m, x, x_hat));
            }
        }
    }
    Ok((samples, kept))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per-modality means of per-sample metrics.
pub fn aggregate(samples: &[SampleMetrics]) -> Vec<ModalityReport> {
    Modality::ALL
        .iter()
        .map(|&m| {
            let rows: Vec<&SampleMetrics> = samples.iter().filter(|s| s.modality == m).collect();
            let n_struct = rows.iter().map(|r| r.dice.len()).max().unwrap_or(0);
            let dice_per_structure: Vec<f64> = (0..n_struct)
                .map(|l| mean(rows.iter().filter_map(|r| r.dice.get(l).copied())))
                .collect();
            ModalityReport {
                modality: m,
                psnr_mean: mean(rows.iter().map(|r| r.psnr)),
                psnr_masked_mean: mean(rows.iter().map(|r| r.psnr_masked)),
                ssim_mean: mean(rows.iter().map(|r| r.ssim)),
                dice_mean: mean(dice_per_structure.iter().copied()),
                dice_per_structure,
                probe_accuracy: None,
            }
        })
        .collect()
}

/// What [`evaluate`] computes besides reconstruction metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Fit probes on the train split and score them on the evaluated split.
    pub probes: bool,
    pub swap: bool,
    /// Subjects whose triptychs are kept in [`Evaluation::triptychs`].
    pub images: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            probes: true,
            swap: true,
            images: 0,
        }
    }
}

/// A report plus the volumes kept for qualitative inspection.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// `(subject, modality, ground truth, reconstruction)`.
    pub triptychs: Vec<(u32, Modality, Tensor, Tensor)>,
}

/// Run every metric on `pairs`. `train` feeds the probes (attribute and
/// modality from anatomical latents; modality from intensity histograms).
pub fn evaluate(
    model: &Model,
    checkpoint: &str,
    split: &str,
    train: &[PairedSample],
    pairs: &[PairedSample],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("split `{split}` holds no samples")));
    }
    let (samples, triptychs) = reconstruction_metrics(model, pairs, opts.images)?;
    let mut modalities = aggregate(&samples);
    let test = [
        encode_latents(model, pairs, Modality::A)?,
        encode_latents(model, pairs, Modality::B)?,
    ];
    let indices: Vec<u32> = test.iter().flat_map(|s| s.indices.iter().copied()).collect();
    let codebook = codebook_stats(&indices, model.config.quantizer.codes);
    let probe = if opts.probes {
        let tr = [
            encode_latents(model, train, Modality::A)?,
            encode_latents(model, train, Modality::B)?,
        ];
        let report = probe_eval(&tr, &test)?;
        modalities[0].probe_accuracy = Some(report.attribute_a.test_accuracy);
        modalities[1].probe_accuracy = Some(report.attribute_b.test_accuracy);
        Some(report)
    } else {
        None
    };
    let swap = if opts.swap {
        swap_eval(model, pairs)?
    } else {
        Vec::new()
    };
    Ok(Evaluation {
        report: EvalReport {
            checkpoint: checkpoint.to_string(),
            split: split.to_string(),
            n_samples: samples.len(),
            modalities,
            swap,
            codebook,
            probe,
            samples,
        },
        triptychs,
    })
}

/// Codebook usage over every latent position of `pairs` (both modalities).
pub fn codebook_usage(model: &Model, pairs: &[PairedSample]) -> Result<CodebookStats> {
    let mut indices = Vec::new();
    for m in Modality::ALL {
        indices.extend(encode_latents(model, pairs, m)?.indices);
    }
    Ok(codebook_stats(&indices, model.config.quantizer.codes))
}

pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";

/// Per-sample metrics as CSV.
pub fn samples_csv(samples: &[SampleMetrics]) -> String {
    let n_struct = samples.iter().map(|s| s.dice.len()).max().unwrap_or(0);
    let mut out = String::from("subject_id,modality,psnr,psnr_masked,ssim,dice_mean");
    for l in 1..=n_struct {
        out.push_str(&format!(",dice_{l}"));
    }
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{:?},{:.6},{:.6},{:.6},{:.6}",
            s.subject_id, s.modality, s.psnr, s.psnr_masked, s.ssim, s.dice_mean
        ));
        for d in &s.dice {
            out.push_str(&format!(",{d:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Write `report.json`, `samples.csv` and one PNG triptych per kept volume
/// into `dir`. Returns the written paths.
pub fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let report = dir.join(REPORT_FILE);
    let mut json = serde_json::to_vec_pretty(&eval.report)?;
    json.push(b'\n');
    fs::write(&report, json).map_err(|e| Error::io(&report, e))?;
    written.push(report);
    let csv = dir.join(SAMPLES_FILE);
    fs::write(&csv, samples_csv(&eval.report.samples)).map_err(|e| Error::io(&csv, e))?;
    written.push(csv);
    for (subject, m, x, x_hat) in &eval.triptychs {
        let path = dir.join(format!("sub-{subject:04}_{m:?}.png"));
        write_triptych(&path, x, x_hat)?;
        written.push(path);
    }
    Ok(written)
}

/// Grayscale PNG of the central axial slice: ground truth, reconstruction
/// and absolute error, side by side.
pub fn write_triptych(path: &Path, x: &Tensor, x_hat: &Tensor) -> Result<()> {
    if x.shape() != x_hat.shape() || x.ndim() != 5 {
        return shape_err(format!("triptych: {:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let [d, h, w] = x.dhw();
    let at = (d / 2) * h * w;
    let gt = &x.data()[at..at + h * w];
    let rec = &x_hat.data()[at..at + h * w];
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut img = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        let row = y * w..(y + 1) * w;
        img.extend(gt[row.clone()].iter().map(|&v| to_u8(v)));
        img.extend(rec[row.clone()].iter().map(|&v| to_u8(v)));
        img.extend(gt[row.clone()].iter().zip(&rec[row]).map(|(&a, &b)| to_u8((a - b).abs())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut enc = png::Encoder::new(BufWriter::new(file), (3 * w) as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img).map_err(png_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::volume::{generate_phantom_pair, generate_subject, PhantomDesign};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cases() {
        let x = vec![0.25f32; 64];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(report_db(psnr(&x, &x, 1.0).unwrap()), PSNR_CAP_DB);
        let zeros = vec![0.0f64; 512];
        let tenth = vec![0.1f64; 512];
        assert!((psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() <= 1e-9);
        assert!(psnr(&x, &x[..10], 1.0).is_err());
    }

    #[test]
    fn masked_psnr_ignores_outside() {
        let x = [0.0f64, 0.0, 0.5, 0.5];
        let y = [0.1f64, 0.1, 0.9, 0.9];
        let m = [true, true, false, false];
        assert!((psnr_masked(&x, &y, &m, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_masked(&x, &y, &[false; 4], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn psnr_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..512).map(|_| rng.random()).collect();
            let b: Vec<f32> = (0..512).map(|_| rng.random()).collect();
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }
    }

    fn labels(v: Vec<u8>) -> LabelMap {
        let n = v.len();
        LabelMap::new([1, 1, n], v, 2).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = labels([vec![1u8; 100], vec![0; 100]].concat());
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = labels([vec![0u8; 100], vec![1; 100]].concat());
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let c = labels([vec![0u8; 50], vec![1; 100], vec![0; 50]].concat());
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &b, 2).unwrap(), 1.0);
        let short = labels(vec![0u8; 10]);
        assert!(dice(&a, &short, 1).is_err());
    }

    #[test]
    fn clean_phantom_segments_exactly() {
        for seed in 0..3 {
            let p = generate_subject(seed, [32, 48, 32], 6, 0, 0, &PhantomDesign::clean()).unwrap();
            for m in Modality::ALL {
                let seg = segment_reconstruction(p.volume(m).data(), p.shape(), m, 6).unwrap();
                assert_eq!(seg.labels(), p.labels.labels(), "seed {seed} {m:?}");
            }
        }
    }

    #[test]
    fn noisy_phantom_segments_nearly_exactly() {
        let p = generate_phantom_pair(3, [32, 48, 32], 6).unwrap();
        for m in Modality::ALL {
            let seg = segment_reconstruction(p.volume(m).data(), p.shape(), m, 6).unwrap();
            for l in 1..=6 {
                let d = dice(&seg, &p.labels, l).unwrap();
                assert!(d >= 0.99, "{m:?} label {l}: {d}");
            }
        }
    }

    #[test]
    fn background_volume_segments_to_background() {
        let seg = segment_reconstruction(&[0.0; 64], [4, 4, 4], Modality::A, 4).unwrap();
        assert!(seg.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn probe_separable_reaches_full_train_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let label = i % 2 == 0;
            let shift = if label { 0.05 } else { -0.05 };
            x.push(vec![shift + rng.random_range(0.0..0.01), rng.random::<f64>()]);
            y.push(label);
        }
        let r = latent_probe(&x, &y, &x, &y).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn probe_on_constant_latents_predicts_majority() {
        let x = vec![vec![0.3, -1.0]; 70];
        let y: Vec<bool> = (0..70).map(|i| i < 45).collect();
        let r = latent_probe(&x, &y, &x, &y).unwrap();
        assert!((r.test_accuracy - 45.0 / 70.0).abs() < 1e-12);
    }

    #[test]
    fn probe_on_coin_flips_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect::<Vec<Vec<f64>>>();
        let (tx, ex) = (feats(&mut rng, 200), feats(&mut rng, 200));
        let ty: Vec<bool> = (0..200).map(|_| rng.random()).collect();
        let ey: Vec<bool> = (0..200).map(|_| rng.random()).collect();
        let r = latent_probe(&tx, &ty, &ex, &ey).unwrap();
        assert!((0.38..=0.62).contains(&r.test_accuracy), "{}", r.test_accuracy);
    }

    #[test]
    fn probe_rejects_degenerate_training_sets() {
        let x = vec![vec![1.0]; 50];
        assert!(latent_probe(&x, &[true; 50], &x, &[true; 50]).is_err());
        let y: Vec<bool> = (0..50).map(|i| i < 10).collect();
        assert!(latent_probe(&x, &y, &x, &y).is_err());
    }

    #[test]
    fn identity_film_makes_swap_degenerate() {
        let mut cfg = tiny_config();
        cfg.decoder.film = false;
        let model = Model::new(&cfg, 3).unwrap();
        let p = generate_phantom_pair(1, [16, 16, 16], 4).unwrap();
        let (a, b) = (p.vol_a.to_tensor(), p.vol_b.to_tensor());
        let swapped = model.swap(&a, &b, &[Modality::B]).unwrap();
        let own = model.reconstruct(&a, &[Modality::A]).unwrap();
        assert_eq!(swapped.data(), own.data());
        for d in swap_eval(&model, &[p]).unwrap() {
            assert_eq!(d.modality_transfer_score, 0.0);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_complete() {
        let model = Model::new(&tiny_config(), 5).unwrap();
        let pairs: Vec<_> = (0..3).map(|s| generate_phantom_pair(s, [16, 16, 16], 4).unwrap()).collect();
        let opts = EvalOptions {
            probes: false,
            swap: true,
            images: 1,
        };
        let a = evaluate(&model, "tiny", "test", &pairs, &pairs, &opts).unwrap();
        let b = evaluate(&model, "tiny", "test", &pairs, &pairs, &opts).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.n_samples, 6);
        for r in &a.report.modalities {
            assert!(r.psnr_mean.is_finite() && r.ssim_mean.is_finite());
            assert_eq!(r.dice_per_structure.len(), 4);
        }
        assert_eq!(a.report.swap.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let files = write_evaluation(&a, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let csv = fs::read_to_string(dir.path().join(SAMPLES_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn metrics_do_not_depend_on_sample_order() {
        let model = Model::new(&tiny_config(), 5).unwrap();
        let pairs: Vec<_> = (0..3).map(|s| generate_phantom_pair(s, [16, 16, 16], 4).unwrap()).collect();
        let rev: Vec<_> = pairs.iter().rev().cloned().collect();
        let opts = EvalOptions {
            probes: false,
            swap: false,
            images: 0,
        };
        let a = evaluate(&model, "c", "test", &[], &pairs, &opts).unwrap().report;
        let b = evaluate(&model, "c", "test", &[], &rev, &opts).unwrap().report;
        for (x, y) in a.modalities.iter().zip(&b.modalities) {
            assert!((x.psnr_mean - y.psnr_mean).abs() < 1e-9);
            assert!((x.ssim_mean - y.ssim_mean).abs() < 1e-9);
            assert!((x.dice_mean - y.dice_mean).abs() < 1e-12);
        }
        assert_eq!(a.codebook, b.codebook);
    }
}
