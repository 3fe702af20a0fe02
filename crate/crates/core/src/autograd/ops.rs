use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.custom(&[a, b], out, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.custom(&[a, b], out, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.custom(&[a, b], out, |ctx| {
            let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let gx = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
            let gy = g.data().iter().zip(x.data()).map(|(g, x)| g * x).collect();
            vec![
                Some(Tensor::from_vec(x.shape(), gx).unwrap()),
                Some(Tensor::from_vec(y.shape(), gy).unwrap()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.custom(&[a], out, move |ctx| vec![Some(ctx.grad.map(|g| g * s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.custom(&[a], out, |ctx| vec![Some(ctx.grad.clone())])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.custom(&[a], out, |ctx| {
            let x = ctx.inputs[0];
            let data = x
                .data()
                .iter()
                .zip(ctx.grad.data())
                .map(|(&x, &g)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(Tensor::from_vec(x.shape(), data).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.custom(&[a], out, |ctx| {
            let y = ctx.output;
            let data = y
                .data()
                .iter()
                .zip(ctx.grad.data())
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect();
            vec![Some(Tensor::from_vec(y.shape(), data).unwrap())]
        })
    }

    /// Mean over all elements, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.numel();
        let out = Tensor::scalar(x.mean() as f32);
        self.custom(&[a], out, move |ctx| {
            let g = ctx.grad.item() / n as f32;
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    /// Sum of scalars with fixed weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut total = 0.0f32;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return shape_err(format!("weighted_sum expects scalars, got {:?}", t.shape()));
            }
            total += w * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f32> = terms.iter().map(|t| t.1).collect();
        Ok(self.custom(&vars, Tensor::scalar(total), move |ctx| {
            let g = ctx.grad.item();
            weights
                .iter()
                .zip(&ctx.inputs)
                .map(|(w, x)| Some(Tensor::full(x.shape(), g * w)))
                .collect()
        }))
    }

    /// `y = x W^T + b` for `x: N x In`, `w: Out x In`, `b: Out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.ndim() != 2 || wt.ndim() != 2 || xt.dim(1) != wt.dim(1) {
            return shape_err(format!("linear: x {:?}, w {:?}", xt.shape(), wt.shape()));
        }
        let (n, fin, fout) = (xt.dim(0), xt.dim(1), wt.dim(0));
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, 1.0, xt.data(), false, wt.data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [fout] {
                return shape_err(format!("linear bias {:?}, expected [{fout}]", bt.shape()));
            }
            for row in out.chunks_mut(fout) {
                for (o, bb) in row.iter_mut().zip(bt.data()) {
                    *o += bb;
                }
            }
        }
        let out = Tensor::from_vec(&[n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.custom(&inputs, out, move |ctx| {
            let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = vec![0.0; n * fin];
            gemm(n, fout, fin, 1.0, g.data(), false, w.data(), false, 0.0, &mut gx);
            let mut gw = vec![0.0; fout * fin];
            gemm(fout, n, fin, 1.0, g.data(), true, x.data(), false, 0.0, &mut gw);
            let mut res = vec![
                Some(Tensor::from_vec(&[n, fin], gx).unwrap()),
                Some(Tensor::from_vec(&[fout, fin], gw).unwrap()),
            ];
            if has_bias {
                let mut gb = vec![0.0; fout];
                for row in g.data().chunks(fout) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                res.push(Some(Tensor::from_vec(&[fout], gb).unwrap()));
            }
            res
        }))
    }

    /// Global average pooling `N x C x ... -> N x C`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 3 {
            return shape_err(format!("gap expects N x C x ..., got {:?}", t.shape()));
        }
        let (n, c, s) = (t.dim(0), t.dim(1), t.spatial_len());
        let data = t
            .data()
            .chunks(s)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / s as f64) as f32)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.custom(&[x], out, move |ctx| {
            let mut g = Vec::with_capacity(n * c * s);
            for &v in ctx.grad.data() {
                g.extend(std::iter::repeat_n(v / s as f32, s));
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), g).unwrap())]
        }))
    }

    /// Concatenate `N x A` and `N x B` along features.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ndim() != 2 || y.ndim() != 2 || x.dim(0) != y.dim(0) {
            return shape_err(format!("concat_features: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let (n, fa, fb) = (x.dim(0), x.dim(1), y.dim(1));
        let mut data = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            data.extend_from_slice(&x.data()[i * fa..(i + 1) * fa]);
            data.extend_from_slice(&y.data()[i * fb..(i + 1) * fb]);
        }
        let out = Tensor::from_vec(&[n, fa + fb], data)?;
        Ok(self.custom(&[a, b], out, move |ctx| {
            let g = ctx.grad.data();
            let mut ga = Vec::with_capacity(n * fa);
            let mut gb = Vec::with_capacity(n * fb);
            for row in g.chunks(fa + fb) {
                ga.extend_from_slice(&row[..fa]);
                gb.extend_from_slice(&row[fa..]);
            }
            vec![
                Some(Tensor::from_vec(&[n, fa], ga).unwrap()),
                Some(Tensor::from_vec(&[n, fb], gb).unwrap()),
            ]
        }))
    }

    /// Columns `start..start + len` of an `N x F` matrix.
    pub fn narrow_features(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || start + len > t.dim(1) {
            return shape_err(format!("narrow_features {start}+{len} of {:?}", t.shape()));
        }
        let (n, f) = (t.dim(0), t.dim(1));
        let data = t
            .data()
            .chunks(f)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::from_vec(&[n, len], data)?;
        Ok(self.custom(&[x], out, move |ctx| {
            let mut g = vec![0.0; n * f];
            for (i, row) in ctx.grad.data().chunks(len).enumerate() {
                g[i * f + start..i * f + start + len].copy_from_slice(row);
            }
            vec![Some(Tensor::from_vec(&[n, f], g).unwrap())]
        }))
    }

    /// Samples of `x` in the order given by `index` (rows may repeat).
    pub fn select_batch(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.dim(0);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return shape_err(format!("select_batch index {bad} >= {n}"));
        }
        let per = t.numel() / n.max(1);
        let mut data = Vec::with_capacity(index.len() * per);
        for &i in index {
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::from_vec(&shape, data)?;
        let index = index.to_vec();
        Ok(self.custom(&[x], out, move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            let gd = g.data_mut();
            for (j, &i) in index.iter().enumerate() {
                let src = &ctx.grad.data()[j * per..(j + 1) * per];
                for (a, b) in gd[i * per..(i + 1) * per].iter_mut().zip(src) {
                    *a += b;
                }
            }
            vec![Some(g)]
        }))
    }

    /// Concatenate along the batch axis.
    pub fn cat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let counts: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
        let out = Tensor::cat_batch(&tensors)?;
        Ok(self.custom(parts, out, move |ctx| {
            let mut off = 0;
            counts
                .iter()
                .zip(&ctx.inputs)
                .map(|(&c, x)| {
                    let g = ctx.grad.data()[off..off + c].to_vec();
                    off += c;
                    Some(Tensor::from_vec(x.shape(), g).unwrap())
                })
                .collect()
        }))
    }

    /// Per-sample, per-channel affine map `gamma * h + beta` with
    /// `h: N x C x ...` and `gamma, beta: N x C`.
    pub fn film(&mut self, h: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ht, gt, bt) = (self.value(h), self.value(gamma), self.value(beta));
        let (n, c) = (ht.dim(0), ht.dim(1));
        if gt.shape() != [n, c] || bt.shape() != [n, c] {
            return shape_err(format!(
                "film: h {:?}, gamma {:?}, beta {:?}",
                ht.shape(),
                gt.shape(),
                bt.shape()
            ));
        }
        let s = ht.spatial_len();
        let mut out = ht.data().to_vec();
        for (nc, ch) in out.chunks_mut(s).enumerate() {
            let (g, b) = (gt.data()[nc], bt.data()[nc]);
            for v in ch {
                *v = g * *v + b;
            }
        }
        let out = Tensor::from_vec(ht.shape(), out)?;
        Ok(self.custom(&[h, gamma, beta], out, move |ctx| {
            let (ht, gt, grad) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gh = grad.data().to_vec();
            let mut gg = vec![0.0; n * c];
            let mut gb = vec![0.0; n * c];
            for nc in 0..n * c {
                let range = nc * s..(nc + 1) * s;
                let (mut sg, mut sb) = (0.0f64, 0.0f64);
                for (gv, hv) in grad.data()[range.clone()].iter().zip(&ht.data()[range.clone()]) {
                    sg += (gv * hv) as f64;
                    sb += *gv as f64;
                }
                gg[nc] = sg as f32;
                gb[nc] = sb as f32;
                let gamma = gt.data()[nc];
                for v in &mut gh[range] {
                    *v *= gamma;
                }
            }
            vec![
                Some(Tensor::from_vec(ht.shape(), gh).unwrap()),
                Some(Tensor::from_vec(&[n, c], gg).unwrap()),
                Some(Tensor::from_vec(&[n, c], gb).unwrap()),
            ]
        }))
    }

    /// Mean absolute difference against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        same_shape(p, target, "l1_loss")?;
        let n = p.numel();
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let out = Tensor::scalar((sum / n as f64) as f32);
        let target = target.clone();
        Ok(self.custom(&[pred], out, move |ctx| {
            let g = ctx.grad.item() / n as f32;
            let data = ctx.inputs[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        g
                    } else if d < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(Tensor::from_vec(target.shape(), data).unwrap())]
        }))
    }

    /// Mean squared difference, differentiable in both arguments.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mse")?;
        let n = x.numel();
        let sum: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| ((p - q) as f64).powi(2))
            .sum();
        let out = Tensor::scalar((sum / n as f64) as f32);
        Ok(self.custom(&[a, b], out, move |ctx| {
            let k = 2.0 * ctx.grad.item() / n as f32;
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let gx: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| k * (p - q)).collect();
            let gy = gx.iter().map(|v| -v).collect();
            vec![
                Some(Tensor::from_vec(x.shape(), gx).unwrap()),
                Some(Tensor::from_vec(y.shape(), gy).unwrap()),
            ]
        }))
    }

    /// Mean softmax cross-entropy of `N x K` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.dim(0) != labels.len() {
            return shape_err(format!(
                "cross_entropy: logits {:?}, {} labels",
                t.shape(),
                labels.len()
            ));
        }
        let (n, k) = (t.dim(0), t.dim(1));
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err(format!("label {bad} >= {k} classes"));
        }
        let probs = softmax_rows(t.data(), k);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * k + l] as f64).max(1e-30).ln())
            .sum::<f64>()
            / n as f64;
        let labels = labels.to_vec();
        Ok(self.custom(&[logits], Tensor::scalar(loss as f32), move |ctx| {
            let g = ctx.grad.item() / n as f32;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] -= 1.0;
            }
            for v in &mut d {
                *v *= g;
            }
            vec![Some(Tensor::from_vec(&[n, k], d).unwrap())]
        }))
    }
}

pub(crate) fn softmax_rows(x: &[f32], k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f32 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}
