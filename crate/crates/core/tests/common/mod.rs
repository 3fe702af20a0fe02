//! Independent reference implementations and fixtures shared by the
//! integration tests. Every oracle here is written directly from the metric
//! or operator definition, in `f64`, without reusing library internals.

#![allow(dead_code)]

use std::path::Path;

use dsvq::attention::{Axis, AxisAttentionParams};
use dsvq::autograd::ParamStore;
use dsvq::codebook::QuantizerConfig;
use dsvq::decoder::DecoderConfig;
use dsvq::encoder::EncoderConfig;
use dsvq::model::ModelConfig;
use dsvq::nn::Conv;
use dsvq::training::TrainConfig;
use dsvq::volume::{generate_phantom_pair, PairedSample};
use dsvq::Tensor;

/// A small but complete model for 16^3 inputs.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: vec![4, 8, 8, 8],
            heads: 2,
            c_anat: 4,
            c_mod: 2,
            head_hidden: 4,
            attention: true,
        },
        decoder: DecoderConfig {
            base_channels: 8,
            channels: vec![8, 4, 4, 2],
            attention_stages: 2,
            heads: 2,
            c_s: 3,
            film_hidden: 4,
            film: true,
            attention: true,
        },
        quantizer: QuantizerConfig {
            codes: 16,
            ..QuantizerConfig::default()
        },
        classifier_hidden: 4,
    }
}

/// Training config around [`tiny_model`] with a short schedule.
pub fn tiny_train(steps_3d: usize, steps_2d: usize) -> TrainConfig {
    let m = tiny_model();
    TrainConfig {
        steps_3d,
        steps_2d,
        batch_3d: 2,
        batch_2d: 4,
        encoder: m.encoder,
        decoder: m.decoder,
        quantizer: m.quantizer,
        classifier_hidden: m.classifier_hidden,
        checkpoint_every: 0,
        log_every: 0,
        ..TrainConfig::desk()
    }
}

/// Tiny JSON config file equivalent to [`tiny_train`].
pub fn write_tiny_config(path: &Path, steps_3d: usize, steps_2d: usize) {
    let cfg = tiny_train(steps_3d, steps_2d);
    std::fs::write(path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

pub fn phantoms(n: u64, shape: [usize; 3]) -> Vec<PairedSample> {
    (0..n).map(|s| generate_phantom_pair(s, shape, 4).unwrap()).collect()
}

/// `10 log10(R^2 / MSE)` in `f64`.
pub fn psnr_oracle(x: &[f64], y: &[f64], range: f64) -> f64 {
    let mut sse = 0.0;
    for i in 0..x.len() {
        sse += (x[i] - y[i]).powi(2);
    }
    let mse = sse / x.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * range.log10() - 10.0 * mse.log10()
    }
}

/// `2 |A & B| / (|A| + |B|)` by explicit voxel sets.
pub fn dice_oracle(a: &[u8], b: &[u8], label: u8) -> f64 {
    let sa: Vec<usize> = (0..a.len()).filter(|&i| a[i] == label).collect();
    let sb: Vec<usize> = (0..b.len()).filter(|&i| b[i] == label).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.iter().filter(|i| sb.binary_search(i).is_ok()).count();
    2.0 * inter as f64 / (sa.len() + sb.len()) as f64
}

fn conv1x1(store: &ParamStore, c: &Conv, x: &[f64]) -> Vec<f64> {
    let w = store.get(c.w);
    let b = store.get(c.b);
    let (cout, cin) = (w.dim(0), w.dim(1));
    (0..cout)
        .map(|o| b.data()[o] as f64 + (0..cin).map(|i| w.data()[o * cin + i] as f64 * x[i]).sum::<f64>())
        .collect()
}

/// Axis attention of one `1 x C x D x H x W` map, voxel by voxel: project,
/// then for every line along `axis` and every head a softmax over the
/// line's positions, then the output projection.
pub fn axis_attention_oracle(store: &ParamStore, p: &AxisAttentionParams, x: &Tensor, axis: Axis) -> Vec<f64> {
    let c = x.dim(1);
    let [d, h, w] = x.dhw();
    let s = d * h * w;
    let voxel = |z: usize, y: usize, xx: usize| -> Vec<f64> {
        let at = (z * h + y) * w + xx;
        (0..c).map(|ch| x.data()[ch * s + at] as f64).collect()
    };
    let coords: Vec<[usize; 3]> = (0..d)
        .flat_map(|z| (0..h).flat_map(move |y| (0..w).map(move |xx| [z, y, xx])))
        .collect();
    let proj: Vec<[Vec<f64>; 3]> = coords
        .iter()
        .map(|&[z, y, xx]| {
            let v = voxel(z, y, xx);
            [conv1x1(store, &p.query, &v), conv1x1(store, &p.key, &v), conv1x1(store, &p.value, &v)]
        })
        .collect();
    let ax = match axis {
        Axis::D => 0,
        Axis::H => 1,
        Axis::W => 2,
    };
    let dims = [d, h, w];
    let flat = |co: [usize; 3]| (co[0] * h + co[1]) * w + co[2];
    let dk = p.d_k;
    let mut out = vec![0.0f64; c * s];
    for (pos, &co) in coords.iter().enumerate() {
        let mut attended = vec![0.0f64; p.heads * dk];
        for head in 0..p.heads {
            let hs = head * dk..(head + 1) * dk;
            let line: Vec<usize> = (0..dims[ax])
                .map(|j| {
                    let mut o = co;
                    o[ax] = j;
                    flat(o)
                })
                .collect();
            let scores: Vec<f64> = line
                .iter()
                .map(|&j| {
                    let q = &proj[pos][0][hs.clone()];
                    let k = &proj[j][1][hs.clone()];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (wgt, &j) in e.iter().zip(&line) {
                for (t, ch) in hs.clone().enumerate() {
                    attended[head * dk + t] += wgt / z * proj[j][2][ch];
                }
            }
        }
        let y = conv1x1(store, &p.output, &attended);
        for ch in 0..c {
            out[ch * s + pos] = y[ch];
        }
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Bit patterns of a tensor, for exact comparisons.
pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
