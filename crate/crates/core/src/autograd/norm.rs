use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

impl Graph {
    /// Layer normalization over the channel axis at every voxel of an
    /// `N x C x ...` map, followed by a per-channel affine `gamma, beta: C`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = (xt.dim(0), xt.dim(1));
        if gt.shape() != [c] || bt.shape() != [c] {
            return shape_err(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                xt.shape(),
                gt.shape(),
                bt.shape()
            ));
        }
        let s = xt.spatial_len();
        let mut out = vec![0.0f32; xt.numel()];
        let mut mean = vec![0.0f32; s];
        let mut var = vec![0.0f32; s];
        for i in 0..n {
            let xs = &xt.data()[i * c * s..(i + 1) * c * s];
            stats(xs, c, s, &mut mean, &mut var);
            let os = &mut out[i * c * s..(i + 1) * c * s];
            for ch in 0..c {
                let (g, b) = (gt.data()[ch], bt.data()[ch]);
                for p in 0..s {
                    let inv = 1.0 / (var[p] + LN_EPS).sqrt();
                    os[ch * s + p] = g * (xs[ch * s + p] - mean[p]) * inv + b;
                }
            }
        }
        let out = Tensor::from_vec(xt.shape(), out)?;
        Ok(self.custom(&[x, gamma, beta], out, move |ctx| {
            let (xt, gt, grad) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = vec![0.0f32; xt.numel()];
            let mut gg = vec![0.0f64; c];
            let mut gb = vec![0.0f64; c];
            let mut mean = vec![0.0f32; s];
            let mut var = vec![0.0f32; s];
            let mut sum_dxh = vec![0.0f32; s];
            let mut sum_dxh_xh = vec![0.0f32; s];
            for i in 0..n {
                let xs = &xt.data()[i * c * s..(i + 1) * c * s];
                let gs = &grad.data()[i * c * s..(i + 1) * c * s];
                stats(xs, c, s, &mut mean, &mut var);
                sum_dxh.fill(0.0);
                sum_dxh_xh.fill(0.0);
                for ch in 0..c {
                    let g = gt.data()[ch];
                    let (mut acc_g, mut acc_b) = (0.0f64, 0.0f64);
                    for p in 0..s {
                        let inv = 1.0 / (var[p] + LN_EPS).sqrt();
                        let xh = (xs[ch * s + p] - mean[p]) * inv;
                        let dy = gs[ch * s + p];
                        acc_g += (dy * xh) as f64;
                        acc_b += dy as f64;
                        let dxh = dy * g;
                        sum_dxh[p] += dxh;
                        sum_dxh_xh[p] += dxh * xh;
                    }
                    gg[ch] += acc_g;
                    gb[ch] += acc_b;
                }
                let gxs = &mut gx[i * c * s..(i + 1) * c * s];
                let cf = c as f32;
                for ch in 0..c {
                    let g = gt.data()[ch];
                    for p in 0..s {
                        let inv = 1.0 / (var[p] + LN_EPS).sqrt();
                        let xh = (xs[ch * s + p] - mean[p]) * inv;
                        let dxh = gs[ch * s + p] * g;
                        gxs[ch * s + p] = inv / cf * (cf * dxh - sum_dxh[p] - xh * sum_dxh_xh[p]);
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(xt.shape(), gx).unwrap()),
                Some(Tensor::from_vec(&[c], gg.into_iter().map(|v| v as f32).collect()).unwrap()),
                Some(Tensor::from_vec(&[c], gb.into_iter().map(|v| v as f32).collect()).unwrap()),
            ]
        }))
    }
}

/// Per-position mean and (biased) variance over `c` channels.
fn stats(xs: &[f32], c: usize, s: usize, mean: &mut [f32], var: &mut [f32]) {
    mean.fill(0.0);
    var.fill(0.0);
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(&xs[ch * s..(ch + 1) * s]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= c as f32;
    }
    for ch in 0..c {
        for ((acc, v), m) in var.iter_mut().zip(&xs[ch * s..(ch + 1) * s]).zip(mean.iter()) {
            let d = v - m;
            *acc += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= c as f32;
    }
}
