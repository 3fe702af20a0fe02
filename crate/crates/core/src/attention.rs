//! Axis-wise self-attention, the factorized multi-axis block, and the
//! analytic cost model comparing it with full volumetric attention.
//!
//! Attention along an axis treats every line of voxels parallel to that axis
//! as an independent sequence. Projections are shared across lines and no
//! positional encoding is used, so each line is processed as a set.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::nn::{ChannelNorm, Conv, SpatialMode};
use crate::tensor::Tensor;

/// Spatial axis of an `N x C x D x H x W` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::D, Axis::H, Axis::W];

    pub fn index(self) -> usize {
        match self {
            Axis::D => 0,
            Axis::H => 1,
            Axis::W => 2,
        }
    }

    pub fn name(self) -> &'static str {
        ["D", "H", "W"][self.index()]
    }
}

/// Query/key/value/output projections of one axis attention.
#[derive(Clone, Debug)]
pub struct AxisAttentionParams {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub output: Conv,
    pub channels: usize,
    pub heads: usize,
    pub d_k: usize,
}

impl AxisAttentionParams {
    /// `heads` heads of width `channels / heads`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return shape_err(format!("{channels} channels cannot be split into {heads} heads"));
        }
        let d_k = channels / heads;
        let inner = heads * d_k;
        let mut proj = |suffix: &str, cin: usize, cout: usize| {
            Conv::with_gain(store, &format!("{name}.{suffix}"), cin, cout, 1, 1, 3.0, rng)
        };
        Ok(Self {
            query: proj("q", channels, inner),
            key: proj("k", channels, inner),
            value: proj("v", channels, inner),
            output: proj("o", inner, channels),
            channels,
            heads,
            d_k,
        })
    }

    pub fn inner(&self) -> usize {
        self.heads * self.d_k
    }
}

/// Self-attention over every line parallel to `axis`, projected back to the
/// input channel count.
pub fn axis_attention(g: &mut Graph, store: &ParamStore, x: Var, axis: Axis, p: &AxisAttentionParams) -> Result<Var> {
    let xt = g.value(x);
    if xt.ndim() != 5 || xt.dim(1) != p.channels {
        return shape_err(format!(
            "axis attention expects {} channels, got input {:?}",
            p.channels,
            xt.shape()
        ));
    }
    let mode = SpatialMode::Volumetric;
    let q = p.query.forward(g, store, x, mode)?;
    let k = p.key.forward(g, store, x, mode)?;
    let v = p.value.forward(g, store, x, mode)?;
    let a = g.line_attention(q, k, v, axis, p.heads)?;
    p.output.forward(g, store, a, mode)
}

/// The composite `Attn_W(Attn_H(Attn_D(.)))`, each sub-operation preceded
/// by a channel layer norm. In planar mode the perpendicular axis is skipped.
#[derive(Clone, Debug)]
pub struct MultiAxisAttention {
    pub axes: [AxisAttentionParams; 3],
    pub norms: [ChannelNorm; 3],
}

impl MultiAxisAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut axes = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        for a in Axis::ALL {
            norms.push(ChannelNorm::new(store, &format!("{name}.norm_{}", a.name()), channels));
            axes.push(AxisAttentionParams::new(
                store,
                &format!("{name}.attn_{}", a.name()),
                channels,
                heads,
                rng,
            )?);
        }
        Ok(Self {
            axes: axes.try_into().expect("three axes"),
            norms: norms.try_into().expect("three norms"),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: SpatialMode) -> Result<Var> {
        let mut h = x;
        for a in Axis::ALL {
            if mode.flat_axis() == Some(a.index()) {
                continue;
            }
            let n = self.norms[a.index()].forward(g, store, h)?;
            h = axis_attention(g, store, n, a, &self.axes[a.index()])?;
        }
        Ok(h)
    }
}

/// One encoder stage: `r(x) + A(SiLU(conv(x)))`, where `r` is the identity
/// or, when the stage changes resolution or width, a strided 1x1x1
/// projection.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub conv: Conv,
    pub residual: Option<Conv>,
    pub attention: MultiAxisAttention,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, 3, stride, rng);
        let residual = (cin != cout || stride != 1)
            .then(|| Conv::with_gain(store, &format!("{name}.skip"), cin, cout, 1, stride, 3.0, rng));
        let attention = MultiAxisAttention::new(store, &format!("{name}.mha"), cout, heads, rng)?;
        Ok(Self {
            conv,
            residual,
            attention,
        })
    }
}

/// Apply one block. With `attention` false the block is `r(x) + SiLU(conv(x))`.
pub fn multi_axis_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &BlockParams,
    mode: SpatialMode,
    attention: bool,
) -> Result<Var> {
    let c = p.conv.forward(g, store, x, mode)?;
    let c = g.silu(c);
    let r = match &p.residual {
        Some(skip) => skip.forward(g, store, x, mode)?,
        None => x,
    };
    let a = if attention {
        p.attention.forward(g, store, c, mode)?
    } else {
        c
    };
    g.add(r, a)
}

/// Full volumetric vs. axis-factorized attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    Factorized,
}

/// Score-matrix multiply count in units of one `d_k * n_h` dot product:
/// `(DHW)^2` for full attention, `DHW (D + H + W)` factorized.
pub fn attention_cost(shape: [usize; 3], mode: AttentionMode) -> u128 {
    let [d, h, w] = shape.map(|n| n as u128);
    let n = d * h * w;
    match mode {
        AttentionMode::Full => n * n,
        AttentionMode::Factorized => n * (d + h + w),
    }
}

/// Wall-clock seconds of one factorized attention pass (scores, softmax and
/// value mixing along all three axes) over a random `1 x C x D x H x W` map.
/// Projections are excluded so the measurement isolates the quadratic part.
pub fn time_factorized_attention<R: Rng + ?Sized>(
    shape: [usize; 3],
    heads: usize,
    d_k: usize,
    min_seconds: f64,
    rng: &mut R,
) -> Result<f64> {
    let [d, h, w] = shape;
    let dims = [1, heads * d_k, d, h, w];
    let mut g = Graph::inference();
    let q = g.constant(Tensor::randn(&dims, 1.0, rng));
    let k = g.constant(Tensor::randn(&dims, 1.0, rng));
    let v = g.constant(Tensor::randn(&dims, 1.0, rng));
    let mut reps = 0u32;
    let mut spent = 0.0f64;
    loop {
        let mut g2 = Graph::inference();
        let (q2, k2, v2) = (
            g2.constant(g.value(q).clone()),
            g2.constant(g.value(k).clone()),
            g2.constant(g.value(v).clone()),
        );
        let t = Instant::now();
        for a in Axis::ALL {
            g2.line_attention(q2, k2, v2, a, heads)?;
        }
        spent += t.elapsed().as_secs_f64();
        reps += 1;
        if spent >= min_seconds && reps >= 3 {
            return Ok(spent / reps as f64);
        }
    }
}

/// Permute one sample's `C x D x H x W` block into `C x L x M`: `L` positions
/// along `axis`, `M` lines, with lines contiguous so that every inner loop
/// below runs over independent lines.
fn to_line_major(x: &[f32], c: usize, dhw: [usize; 3], axis: usize, out: &mut [f32]) {
    let [d, h, w] = dhw;
    let s = d * h * w;
    match axis {
        0 => out[..c * s].copy_from_slice(&x[..c * s]),
        1 => {
            // [c][z][y][x] -> [c][y][z * w + x]
            for ch in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        let src = &x[ch * s + (z * h + y) * w..][..w];
                        out[ch * s + y * d * w + z * w..][..w].copy_from_slice(src);
                    }
                }
            }
        }
        _ => {
            // [c][z][y][x] -> [c][x][z * h + y]
            for ch in 0..c {
                for zy in 0..d * h {
                    let src = &x[ch * s + zy * w..][..w];
                    for (xi, &v) in src.iter().enumerate() {
                        out[ch * s + xi * d * h + zy] = v;
                    }
                }
            }
        }
    }
}

/// Inverse of [`to_line_major`], accumulating into `out`.
fn add_from_line_major(lm: &[f32], c: usize, dhw: [usize; 3], axis: usize, out: &mut [f32]) {
    let [d, h, w] = dhw;
    let s = d * h * w;
    match axis {
        0 => {
            for (o, v) in out[..c * s].iter_mut().zip(&lm[..c * s]) {
                *o += v;
            }
        }
        1 => {
            for ch in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        let src = &lm[ch * s + y * d * w + z * w..][..w];
                        for (o, v) in out[ch * s + (z * h + y) * w..][..w].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
        }
        _ => {
            for ch in 0..c {
                for zy in 0..d * h {
                    let dst = &mut out[ch * s + zy * w..][..w];
                    for (xi, o) in dst.iter_mut().enumerate() {
                        *o += lm[ch * s + xi * d * h + zy];
                    }
                }
            }
        }
    }
}

/// `acc[..] += a * b[..]` over lines.
#[inline]
fn axpy(acc: &mut [f32], a: &[f32], b: &[f32]) {
    for ((o, &x), &y) in acc.iter_mut().zip(a).zip(b) {
        *o += x * y;
    }
}

/// Attention weights `P` (`L x L x M`) of one head from line-major `q, k`
/// (`d_k x L x M`), softmax over the key index.
fn attention_weights(q: &[f32], k: &[f32], l: usize, m: usize, dk: usize, p: &mut [f32]) {
    let scale = 1.0 / (dk as f32).sqrt();
    let mut mx = vec![0.0f32; m];
    let mut z = vec![0.0f32; m];
    for i in 0..l {
        let row = &mut p[i * l * m..(i + 1) * l * m];
        row.fill(0.0);
        for jj in 0..l {
            let s = &mut row[jj * m..(jj + 1) * m];
            for c in 0..dk {
                axpy(s, &q[(c * l + i) * m..][..m], &k[(c * l + jj) * m..][..m]);
            }
            for v in s.iter_mut() {
                *v *= scale;
            }
        }
        mx.copy_from_slice(&row[..m]);
        for jj in 1..l {
            for (a, &v) in mx.iter_mut().zip(&row[jj * m..(jj + 1) * m]) {
                *a = a.max(v);
            }
        }
        z.fill(0.0);
        for jj in 0..l {
            for ((v, &a), zz) in row[jj * m..(jj + 1) * m].iter_mut().zip(&mx).zip(z.iter_mut()) {
                *v = (*v - a).exp();
                *zz += *v;
            }
        }
        for jj in 0..l {
            for (v, &zz) in row[jj * m..(jj + 1) * m].iter_mut().zip(&z) {
                *v /= zz;
            }
        }
    }
}

impl Graph {
    /// Multi-head scaled dot-product attention along every line parallel to
    /// `axis`. `q, k, v: N x (heads * d_k) x D x H x W`; the output has the
    /// same shape.
    pub fn line_attention(&mut self, q: Var, k: Var, v: Var, axis: Axis, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.ndim() != 5 || qt.shape() != kt.shape() || qt.shape() != vt.shape() {
            return shape_err(format!(
                "line attention: q {:?}, k {:?}, v {:?}",
                qt.shape(),
                kt.shape(),
                vt.shape()
            ));
        }
        let (n, inner) = (qt.dim(0), qt.dim(1));
        if heads == 0 || inner % heads != 0 {
            return shape_err(format!("line attention: {inner} channels, {heads} heads"));
        }
        let dk = inner / heads;
        let dhw = qt.dhw();
        let ax = axis.index();
        let s = qt.spatial_len();
        let (l, m) = (dhw[ax], s / dhw[ax].max(1));
        let block = inner * s;
        let hb = dk * s;
        let mut out = vec![0.0f32; qt.numel()];
        let (mut ql, mut kl, mut vl) = (vec![0.0f32; block], vec![0.0f32; block], vec![0.0f32; block]);
        let mut ol = vec![0.0f32; block];
        let mut p = vec![0.0f32; l * l * m];
        for b in 0..n {
            let r = b * block..(b + 1) * block;
            to_line_major(&qt.data()[r.clone()], inner, dhw, ax, &mut ql);
            to_line_major(&kt.data()[r.clone()], inner, dhw, ax, &mut kl);
            to_line_major(&vt.data()[r.clone()], inner, dhw, ax, &mut vl);
            ol.fill(0.0);
            for h in 0..heads {
                let (qh, kh, vh) = (&ql[h * hb..][..hb], &kl[h * hb..][..hb], &vl[h * hb..][..hb]);
                attention_weights(qh, kh, l, m, dk, &mut p);
                let oh = &mut ol[h * hb..][..hb];
                for c in 0..dk {
                    for i in 0..l {
                        let o = &mut oh[(c * l + i) * m..][..m];
                        for jj in 0..l {
                            axpy(o, &p[(i * l + jj) * m..][..m], &vh[(c * l + jj) * m..][..m]);
                        }
                    }
                }
            }
            add_from_line_major(&ol, inner, dhw, ax, &mut out[r]);
        }
        let shape = qt.shape().to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.custom(&[q, k, v], out, move |ctx| {
            let (qt, kt, vt, go) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
            let mut gq = vec![0.0f32; qt.numel()];
            let mut gk = vec![0.0f32; qt.numel()];
            let mut gv = vec![0.0f32; qt.numel()];
            let (mut ql, mut kl, mut vl) = (vec![0.0f32; block], vec![0.0f32; block], vec![0.0f32; block]);
            let mut dol = vec![0.0f32; block];
            let (mut gql, mut gkl, mut gvl) = (vec![0.0f32; block], vec![0.0f32; block], vec![0.0f32; block]);
            let mut p = vec![0.0f32; l * l * m];
            let mut ds = vec![0.0f32; l * l * m];
            let mut rowdot = vec![0.0f32; m];
            let scale = 1.0 / (dk as f32).sqrt();
            for b in 0..n {
                let r = b * block..(b + 1) * block;
                to_line_major(&qt.data()[r.clone()], inner, dhw, ax, &mut ql);
                to_line_major(&kt.data()[r.clone()], inner, dhw, ax, &mut kl);
                to_line_major(&vt.data()[r.clone()], inner, dhw, ax, &mut vl);
                to_line_major(&go.data()[r.clone()], inner, dhw, ax, &mut dol);
                gql.fill(0.0);
                gkl.fill(0.0);
                gvl.fill(0.0);
                for h in 0..heads {
                    let (qh, kh, vh) = (&ql[h * hb..][..hb], &kl[h * hb..][..hb], &vl[h * hb..][..hb]);
                    let doh = &dol[h * hb..][..hb];
                    attention_weights(qh, kh, l, m, dk, &mut p);
                    // dP[i, j] = sum_c dO[c, i] V[c, j]
                    ds.fill(0.0);
                    for i in 0..l {
                        for jj in 0..l {
                            let d = &mut ds[(i * l + jj) * m..][..m];
                            for c in 0..dk {
                                axpy(d, &doh[(c * l + i) * m..][..m], &vh[(c * l + jj) * m..][..m]);
                            }
                        }
                    }
                    // dS = P (dP - sum_j P dP) * scale
                    for i in 0..l {
                        rowdot.fill(0.0);
                        for jj in 0..l {
                            let at = (i * l + jj) * m;
                            axpy(&mut rowdot, &p[at..][..m], &ds[at..][..m]);
                        }
                        for jj in 0..l {
                            let at = (i * l + jj) * m;
                            for ((d, &pp), &rd) in ds[at..][..m].iter_mut().zip(&p[at..][..m]).zip(&rowdot) {
                                *d = pp * (*d - rd) * scale;
                            }
                        }
                    }
                    let (gqh, gkh, gvh) = (&mut gql[h * hb..][..hb], &mut gkl[h * hb..][..hb], &mut gvl[h * hb..][..hb]);
                    for c in 0..dk {
                        for i in 0..l {
                            for jj in 0..l {
                                let at = (i * l + jj) * m;
                                // dV[c, j] += P[i, j] dO[c, i]
                                axpy(&mut gvh[(c * l + jj) * m..][..m], &p[at..][..m], &doh[(c * l + i) * m..][..m]);
                                // dQ[c, i] += dS[i, j] K[c, j]
                                axpy(&mut gqh[(c * l + i) * m..][..m], &ds[at..][..m], &kh[(c * l + jj) * m..][..m]);
                                // dK[c, j] += dS[i, j] Q[c, i]
                                axpy(&mut gkh[(c * l + jj) * m..][..m], &ds[at..][..m], &qh[(c * l + i) * m..][..m]);
                            }
                        }
                    }
                }
                add_from_line_major(&gql, inner, dhw, ax, &mut gq[r.clone()]);
                add_from_line_major(&gkl, inner, dhw, ax, &mut gk[r.clone()]);
                add_from_line_major(&gvl, inner, dhw, ax, &mut gv[r]);
            }
            let t = |d: Vec<f32>| Some(Tensor::from_vec(&shape, d).unwrap());
            vec![t(gq), t(gk), t(gv)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_identity(store: &mut ParamStore, c: &Conv) {
        let t = store.get_mut(c.w);
        let n = t.dim(0);
        t.data_mut().fill(0.0);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        store.get_mut(c.b).data_mut().fill(0.0);
    }

    fn identity_params(store: &mut ParamStore, channels: usize, heads: usize) -> AxisAttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AxisAttentionParams::new(store, "a", channels, heads, &mut rng).unwrap();
        for c in [&p.query, &p.key, &p.value, &p.output] {
            set_identity(store, c);
        }
        p
    }

    fn run_axis(store: &ParamStore, x: &Tensor, axis: Axis, p: &AxisAttentionParams) -> Tensor {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = axis_attention(&mut g, store, xv, axis, p).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_position_axis_is_identity() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 4, 1, 3, 5], 1.0, &mut rng);
        let y = run_axis(&store, &x, Axis::D, &p);
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn constant_along_axis_is_identity() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Values depend on (h, w) only, so every D-line is constant.
        let plane = Tensor::randn(&[1, 4, 1, 3, 2], 1.0, &mut rng);
        let mut data = Vec::new();
        for c in 0..4 {
            for _ in 0..5 {
                data.extend_from_slice(&plane.data()[c * 6..(c + 1) * 6]);
            }
        }
        let x = Tensor::from_vec(&[1, 4, 5, 3, 2], data).unwrap();
        let y = run_axis(&store, &x, Axis::D, &p);
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut store = ParamStore::new();
        let p = identity_params(&mut store, 4, 2);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
        assert!(matches!(
            axis_attention(&mut g, &store, x, Axis::H, &p),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn locality_along_orthogonal_axes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AxisAttentionParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 4, 3, 4, 5], 1.0, &mut rng);
        let base = run_axis(&store, &x, Axis::H, &p);
        let mut x2 = x.clone();
        // Perturb voxel (d=1, h=2, w=3) in channel 0.
        let at = (4 + 2) * 5 + 3;
        x2.data_mut()[at] += 0.5;
        let pert = run_axis(&store, &x2, Axis::H, &p);
        for c in 0..4 {
            for d in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let i = ((c * 3 + d) * 4 + h) * 5 + w;
                        let changed = (base.data()[i] - pert.data()[i]).abs() > 0.0;
                        if d != 1 || w != 3 {
                            assert!(!changed, "({c},{d},{h},{w}) changed");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariant_along_axis() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AxisAttentionParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 4, 2, 2, 5], 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for c in 0..4 * 2 * 2 {
                for (i, &src) in perm.iter().enumerate() {
                    out.data_mut()[c * 5 + i] = t.data()[c * 5 + src];
                }
            }
            out
        };
        let a = permute(&run_axis(&store, &x, Axis::W, &p));
        let b = run_axis(&store, &permute(&x), Axis::W, &p);
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn line_attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [2, 4, 3, 2, 3];
        let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&shape, 1.0, &mut rng)).collect();
        let w = Tensor::randn(&shape, 1.0, &mut rng);
        for axis in Axis::ALL {
            let err = check(&inputs, 1e-2, 60, |g, v| {
                let y = g.line_attention(v[0], v[1], v[2], axis, 2).unwrap();
                let wv = g.constant(w.clone());
                let y = g.mul(y, wv).unwrap();
                g.mean_all(y)
            });
            assert!(err < 2e-3, "{axis:?}: {err}");
        }
    }

    fn block_fixture(seed: u64) -> (ParamStore, BlockParams, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = BlockParams::new(&mut store, "b", 2, 4, 1, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 2, 4, 4, 4], 1.0, &mut rng);
        (store, p, x)
    }

    fn run_block(store: &ParamStore, p: &BlockParams, x: &Tensor, attention: bool) -> Tensor {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = multi_axis_block(&mut g, store, xv, p, SpatialMode::Volumetric, attention).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zeroed_attention_gives_pure_residual() {
        let (mut store, p, x) = block_fixture(6);
        for a in &p.attention.axes {
            for c in [&a.query, &a.key, &a.value, &a.output] {
                store.get_mut(c.w).data_mut().fill(0.0);
                store.get_mut(c.b).data_mut().fill(0.0);
            }
        }
        let y = run_block(&store, &p, &x, true);
        let skip = p.residual.as_ref().unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let r = skip.forward(&mut g, &store, xv, SpatialMode::Volumetric).unwrap();
        assert_eq!(&y, g.value(r));
    }

    #[test]
    fn disabled_attention_is_conv_plus_residual() {
        let (store, p, x) = block_fixture(7);
        let y = run_block(&store, &p, &x, false);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let c = p.conv.forward(&mut g, &store, xv, SpatialMode::Volumetric).unwrap();
        let c = g.silu(c);
        let r = p.residual.as_ref().unwrap().forward(&mut g, &store, xv, SpatialMode::Volumetric).unwrap();
        let want = g.add(r, c).unwrap();
        assert_eq!(&y, g.value(want));
    }

    #[test]
    fn block_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = BlockParams::new(&mut store, "b", 2, 2, 1, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let err = check(&[x], 1e-2, 128, |g, v| {
            let y = multi_axis_block(g, &store, v[0], &p, SpatialMode::Volumetric, true).unwrap();
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv).unwrap();
            g.mean_all(y)
        });
        assert!(err < 1e-3 * 5.0, "{err}");
    }

    #[test]
    fn cost_examples() {
        assert_eq!(attention_cost([8, 8, 8], AttentionMode::Full), 262_144);
        assert_eq!(attention_cost([8, 8, 8], AttentionMode::Factorized), 12_288);
        assert_eq!(attention_cost([1, 1, 1], AttentionMode::Full), 1);
        assert_eq!(attention_cost([1, 1, 1], AttentionMode::Factorized), 3);
        let f = |s| attention_cost(s, AttentionMode::Factorized);
        let full = |s| attention_cost(s, AttentionMode::Full);
        assert_eq!(f([6, 10, 14]) * 16, f([12, 20, 28]));
        assert_eq!(full([6, 10, 14]) * 64, full([12, 20, 28]));
    }

    #[test]
    fn planar_mode_skips_flat_axis() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = MultiAxisAttention::new(&mut store, "m", 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 4, 3, 1, 5], 1.0, &mut rng);
        let mode = SpatialMode::Planar {
            plane: crate::volume::Plane::Coronal,
            reduction: Default::default(),
        };
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let y = m.forward(&mut g, &store, xv, mode).unwrap();
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        assert!(grads.param(m.axes[1].query.w).is_none());
        assert!(grads.param(m.axes[0].query.w).is_some());
        assert!(grads.param(m.axes[2].query.w).is_some());
    }
}
