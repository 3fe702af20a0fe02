//! Training objectives: reconstruction (L1 + SSIM), gradient reversal, the
//! adversarial modality classifier and the weighted total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;
use crate::volume::Modality;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 7;

/// Box window extent per axis: `window`, or 1 along singleton axes.
fn window_for(dims: [usize; 3], window: usize) -> Result<[usize; 3]> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Invalid(format!("SSIM window must be odd, got {window}")));
    }
    let mut w = [1; 3];
    for ax in 0..3 {
        if dims[ax] > 1 {
            if window > dims[ax] {
                return Err(Error::Invalid(format!(
                    "SSIM window {window} exceeds extent {} along {}",
                    dims[ax],
                    ["D", "H", "W"][ax]
                )));
            }
            w[ax] = window;
        }
    }
    Ok(w)
}

/// Sliding sums of length `w` along `axis` ("valid" positions only).
fn box_along(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut od = dims;
    od[axis] = dims[axis] - w + 1;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let ostrides = [od[1] * od[2], od[2], 1];
    let mut out = vec![0.0; od.iter().product()];
    let n = dims[axis];
    let mut line = vec![0.0; n + 1];
    for a in 0..if axis == 0 { 1 } else { dims[0] } {
        for b in 0..if axis == 1 { 1 } else { dims[1] } {
            for c in 0..if axis == 2 { 1 } else { dims[2] } {
                let base = a * strides[0] + b * strides[1] + c * strides[2];
                let obase = a * ostrides[0] + b * ostrides[1] + c * ostrides[2];
                line[0] = 0.0;
                for i in 0..n {
                    line[i + 1] = line[i] + data[base + i * strides[axis]];
                }
                for i in 0..od[axis] {
                    out[obase + i * ostrides[axis]] = line[i + w] - line[i];
                }
            }
        }
    }
    (out, od)
}

/// Adjoint of [`box_along`]: scatter each valid-position value back over its
/// window, producing a map of the original extent `n` along `axis`.
fn box_along_t(data: &[f64], od: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut dims = od;
    dims[axis] = od[axis] + w - 1;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let ostrides = [od[1] * od[2], od[2], 1];
    let mut out = vec![0.0; dims.iter().product()];
    let m = od[axis];
    let mut line = vec![0.0; m + 1];
    for a in 0..if axis == 0 { 1 } else { dims[0] } {
        for b in 0..if axis == 1 { 1 } else { dims[1] } {
            for c in 0..if axis == 2 { 1 } else { dims[2] } {
                let base = a * strides[0] + b * strides[1] + c * strides[2];
                let obase = a * ostrides[0] + b * ostrides[1] + c * ostrides[2];
                line[0] = 0.0;
                for i in 0..m {
                    line[i + 1] = line[i] + data[obase + i * ostrides[axis]];
                }
                // out[j] = sum of in[i] for max(0, j-w+1) <= i <= min(j, m-1)
                for j in 0..dims[axis] {
                    let lo = j.saturating_sub(w - 1);
                    let hi = j.min(m - 1) + 1;
                    out[base + j * strides[axis]] = line[hi] - line[lo];
                }
            }
        }
    }
    (out, dims)
}

fn box3(data: &[f64], dims: [usize; 3], win: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let (a, d) = box_along(data, dims, 0, win[0]);
    let (b, d) = box_along(&a, d, 1, win[1]);
    box_along(&b, d, 2, win[2])
}

fn box3_t(data: &[f64], od: [usize; 3], win: [usize; 3]) -> Vec<f64> {
    let (a, d) = box_along_t(data, od, 2, win[2]);
    let (b, d) = box_along_t(&a, d, 1, win[1]);
    box_along_t(&b, d, 0, win[0]).0
}

/// Local SSIM statistics of one image pair.
struct SsimImage {
    mean: f64,
    /// `dS/dx` for each voxel of `x` (scaled by 1 / positions).
    grad_x: Option<Vec<f64>>,
}

fn ssim_image(x: &[f64], y: &[f64], dims: [usize; 3], win: [usize; 3], range: f64, want_grad: bool) -> SsimImage {
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let m = win.iter().product::<usize>() as f64;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (sx, od) = box3(x, dims, win);
    let (sy, _) = box3(y, dims, win);
    let (sxx, _) = box3(&sq(x, x), dims, win);
    let (syy, _) = box3(&sq(y, y), dims, win);
    let (sxy, _) = box3(&sq(x, y), dims, win);
    let p = sx.len();
    let mut total = 0.0;
    let (mut ga, mut gb, mut gc) = if want_grad {
        (vec![0.0; p], vec![0.0; p], vec![0.0; p])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..p {
        let mx = sx[i] / m;
        let my = sy[i] / m;
        let vx = sxx[i] / m - mx * mx;
        let vy = syy[i] / m - my * my;
        let cxy = sxy[i] / m - mx * my;
        let n1 = 2.0 * mx * my + c1;
        let n2 = 2.0 * cxy + c2;
        let d1 = mx * mx + my * my + c1;
        let d2 = vx + vy + c2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        if want_grad {
            let ds_dmx = s * (2.0 * my / n1 - 2.0 * mx / d1);
            let ds_dvx = -s / d2;
            let ds_dcxy = 2.0 * s / n2;
            // d mx/dx_q = 1/M, d vx/dx_q = 2 (x_q - mx)/M, d cxy/dx_q = (y_q - my)/M
            ga[i] = ds_dmx - 2.0 * ds_dvx * mx - ds_dcxy * my;
            gb[i] = ds_dvx;
            gc[i] = ds_dcxy;
        }
    }
    let grad_x = want_grad.then(|| {
        let scale = 1.0 / (m * p as f64);
        let ta = box3_t(&ga, od, win);
        let tb = box3_t(&gb, od, win);
        let tc = box3_t(&gc, od, win);
        (0..x.len())
            .map(|q| scale * (ta[q] + 2.0 * x[q] * tb[q] + y[q] * tc[q]))
            .collect()
    });
    SsimImage {
        mean: total / p as f64,
        grad_x,
    }
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, [usize; 3])> {
    if x.shape() != y.shape() || x.ndim() != 5 {
        return shape_err(format!("SSIM needs equal N x C x D x H x W shapes: {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok((x.dim(0) * x.dim(1), x.dhw()))
}

/// Mean local SSIM with a uniform box window (extent 1 along singleton axes),
/// valid positions only, population statistics, averaged over images.
pub fn ssim3d(x: &Tensor, y: &Tensor, window: usize, data_range: f64) -> Result<f64> {
    let (n, dims) = check_pair(x, y)?;
    let win = window_for(dims, window)?;
    let s: usize = dims.iter().product();
    let mut total = 0.0;
    for i in 0..n {
        let xi: Vec<f64> = x.data()[i * s..(i + 1) * s].iter().map(|&v| v as f64).collect();
        let yi: Vec<f64> = y.data()[i * s..(i + 1) * s].iter().map(|&v| v as f64).collect();
        total += ssim_image(&xi, &yi, dims, win, data_range, false).mean;
    }
    Ok(total / n as f64)
}

/// `mean|x - x_hat| + lambda_ssim (1 - ssim3d(x, x_hat))`.
pub fn rec_loss(x: &Tensor, x_hat: &Tensor, lambda_ssim: f64) -> Result<f64> {
    let (_, _) = check_pair(x, x_hat)?;
    let l1 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / x.numel() as f64;
    if lambda_ssim == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + lambda_ssim * (1.0 - ssim3d(x, x_hat, SSIM_WINDOW, 1.0)?))
}

impl Graph {
    /// SSIM of `pred` against a fixed `target`, differentiable in `pred`.
    pub fn ssim(&mut self, pred: Var, target: &Tensor, window: usize, data_range: f64) -> Result<Var> {
        let pt = self.value(pred);
        let (n, dims) = check_pair(pt, target)?;
        let win = window_for(dims, window)?;
        let s: usize = dims.iter().product();
        let want_grad = self.is_tracking() && self.requires_grad(pred);
        let mut total = 0.0;
        let mut grad = if want_grad { Vec::with_capacity(pt.numel()) } else { Vec::new() };
        for i in 0..n {
            let xi: Vec<f64> = pt.data()[i * s..(i + 1) * s].iter().map(|&v| v as f64).collect();
            let yi: Vec<f64> = target.data()[i * s..(i + 1) * s].iter().map(|&v| v as f64).collect();
            let r = ssim_image(&xi, &yi, dims, win, data_range, want_grad);
            total += r.mean;
            if let Some(gx) = r.grad_x {
                grad.extend(gx.into_iter().map(|v| (v / n as f64) as f32));
            }
        }
        let shape = pt.shape().to_vec();
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.custom(&[pred], value, move |ctx| {
            let g = ctx.grad.item();
            let data = grad.iter().map(|&v| v * g).collect();
            vec![Some(Tensor::from_vec(&shape, data).unwrap())]
        }))
    }

    /// Identity forward; backward multiplies the gradient by `-lambda`.
    pub fn grad_reverse(&mut self, v: Var, lambda: f32) -> Var {
        let value = self.value(v).clone();
        self.custom(&[v], value, move |ctx| vec![Some(ctx.grad.map(|g| -(lambda * g)))])
    }
}

/// `mean|x - x_hat| + lambda_ssim (1 - SSIM)` as a graph node.
pub fn rec_loss_graph(g: &mut Graph, x_hat: Var, x: &Tensor, lambda_ssim: f32) -> Result<Var> {
    let l1 = g.l1_loss(x_hat, x)?;
    if lambda_ssim == 0.0 {
        return Ok(l1);
    }
    let s = g.ssim(x_hat, x, SSIM_WINDOW, 1.0)?;
    let t = g.weighted_sum(&[(l1, 1.0), (s, -lambda_ssim)])?;
    Ok(g.add_scalar(t, lambda_ssim))
}

/// `GAP -> Linear -> SiLU -> Linear` to two modality logits.
#[derive(Clone, Debug)]
pub struct ModalityClassifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl ModalityClassifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c_anat: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, "clf.hidden", c_anat, hidden, rng),
            out: Linear::new(store, "clf.out", hidden, Modality::ALL.len(), rng),
        }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, z_anat: Var) -> Result<Var> {
        let p = g.gap(z_anat)?;
        let h = self.hidden.forward(g, store, p)?;
        let h = g.silu(h);
        self.out.forward(g, store, h)
    }
}

/// Cross-entropy of the classifier on `grad_reverse(z_anat)`: the classifier
/// minimizes it, the encoder receives the reversed gradient.
pub fn adv_loss(
    g: &mut Graph,
    store: &ParamStore,
    clf: &ModalityClassifier,
    z_anat: Var,
    modalities: &[Modality],
    grl_lambda: f32,
) -> Result<Var> {
    let r = g.grad_reverse(z_anat, grl_lambda);
    let logits = clf.logits(g, store, r)?;
    let labels: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
    g.cross_entropy(logits, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ssim: f32,
    pub lambda_vq: f32,
    pub lambda_cross: f32,
    pub lambda_adv: f32,
    /// Final gradient-reversal scale.
    pub grl_lambda: f32,
    /// Fraction of 3D steps over which the reversal scale ramps up from 0.
    pub grl_warmup: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 1.0,
            lambda_vq: 1.0,
            lambda_cross: 0.5,
            lambda_adv: 0.1,
            grl_lambda: 1.0,
            grl_warmup: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, errors: &mut Vec<String>) {
        for (name, v) in [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_vq", self.lambda_vq),
            ("lambda_cross", self.lambda_cross),
            ("lambda_adv", self.lambda_adv),
            ("grl_lambda", self.grl_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errors.push(format!("weights.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.grl_warmup) {
            errors.push(format!("weights.grl_warmup must be in [0, 1], got {}", self.grl_warmup));
        }
    }

    /// Reversal scale after `step` of `total` 3D steps (linear warm-up).
    pub fn grl_at(&self, step: usize, total: usize) -> f32 {
        let ramp = self.grl_warmup as f64 * total as f64;
        if ramp <= 0.0 {
            return self.grl_lambda;
        }
        (self.grl_lambda as f64 * (step as f64 / ramp).min(1.0)) as f32
    }
}

/// Unweighted loss terms of one step; absent terms were not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub rec: Option<Var>,
    pub vq: Option<Var>,
    pub cross: Option<Var>,
    pub adv: Option<Var>,
}

/// Per-term values for logging (0 for absent terms).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_vq: f64,
    pub l_cross: f64,
    pub l_adv: f64,
    pub total: f64,
}

/// `L_rec + l_vq L_VQ + l_cross L_cross + l_adv L_adv`. Terms with zero
/// weight are left out of the sum entirely; a non-finite term is an error
/// naming it.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut parts = Vec::new();
    let mut b = LossBreakdown::default();
    for (name, term, weight, slot) in [
        ("l_rec", terms.rec, 1.0, &mut b.l_rec),
        ("l_vq", terms.vq, w.lambda_vq, &mut b.l_vq),
        ("l_cross", terms.cross, w.lambda_cross, &mut b.l_cross),
        ("l_adv", terms.adv, w.lambda_adv, &mut b.l_adv),
    ] {
        if let Some(v) = term {
            let value = g.value(v).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(name));
            }
            *slot = value;
            if weight != 0.0 {
                parts.push((v, weight));
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::Invalid("total loss has no terms".into()));
    }
    let total = g.weighted_sum(&parts)?;
    b.total = g.value(total).item() as f64;
    if !b.total.is_finite() {
        return Err(Error::NonFinite("total"));
    }
    Ok((total, b))
}
