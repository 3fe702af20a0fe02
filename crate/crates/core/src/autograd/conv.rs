//! 3D convolution via im2col + GEMM, kernel reduction for planar inputs,
//! and nearest-neighbour upsampling.

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Stride and zero padding per spatial axis `[D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn same() -> Self {
        Self {
            stride: [1; 3],
            pad: [1; 3],
        }
    }

    pub fn pointwise() -> Self {
        Self {
            stride: [1; 3],
            pad: [0; 3],
        }
    }
}

/// How a 3x3x3 kernel collapses onto a plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelReduction {
    /// Keep the central slice along the dropped axis.
    #[default]
    Center,
    /// Sum the kernel along the dropped axis.
    Sum,
}

#[derive(Clone, Copy)]
struct Dims {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn p(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Output positions `o` with `0 <= o*s + k - p < n`, as a half-open range.
fn valid_range(out: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  <=>  o >= ceil((p - k) / s)
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o*s + k - p <= n - 1  <=>  o <= (n - 1 + p - k) / s
    let hi = if n + p < k + 1 {
        0
    } else {
        ((n - 1 + p - k) / s + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Target size in floats of one im2col chunk; keeps it cache resident.
const CHUNK_FLOATS: usize = 48 * 1024;

/// Lower bound on output positions per chunk: narrow GEMMs are far below
/// peak throughput, so wide-`K` layers trade cache residency for width.
const MIN_CHUNK_COLS: usize = 4096;

/// Output rows `(o_d, o_h)` per chunk, each row holding `ow` positions.
fn rows_per_chunk(d: &Dims) -> usize {
    let row = d.k() * d.output[2];
    (CHUNK_FLOATS / row.max(1)).max(MIN_CHUNK_COLS.div_ceil(d.output[2])).max(1)
}

/// Fill `col` (`K x (r1 - r0) * ow`) for output rows `r0..r1`.
fn im2col(x: &[f32], d: &Dims, r0: usize, r1: usize, col: &mut [f32]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let [_, oh, ow] = d.output;
    let pc = (r1 - r0) * ow;
    let mut row = 0;
    for ci in 0..d.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let (w0, w1) = valid_range(ow, iw, sw, c, pw);
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    for r in r0..r1 {
                        let out = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        let (o_d, o_h) = (r / oh, r % oh);
                        let zd = (o_d * sd + a) as isize - pd as isize;
                        let zh = (o_h * sh + b) as isize - ph as isize;
                        if zd < 0 || zh < 0 || zd >= id as isize || zh >= ih as isize || w0 >= w1 {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &xc[(zd as usize * ih + zh as usize) * iw..];
                        out[..w0].fill(0.0);
                        out[w1..].fill(0.0);
                        if sw == 1 {
                            let start = w0 + c - pw;
                            out[w0..w1].copy_from_slice(&src[start..start + (w1 - w0)]);
                        } else {
                            for o_w in w0..w1 {
                                out[o_w] = src[o_w * sw + c - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add a `K x (r1 - r0) * ow` column chunk back into `x`.
fn col2im(col: &[f32], d: &Dims, r0: usize, r1: usize, x: &mut [f32]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [sd, sh, sw] = d.stride;
    let [pd, ph, pw] = d.pad;
    let [_, oh, ow] = d.output;
    let pc = (r1 - r0) * ow;
    let mut row = 0;
    for ci in 0..d.cin {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let (w0, w1) = valid_range(ow, iw, sw, c, pw);
                    let src = &col[row * pc..(row + 1) * pc];
                    for r in r0..r1 {
                        let (o_d, o_h) = (r / oh, r % oh);
                        let zd = (o_d * sd + a) as isize - pd as isize;
                        let zh = (o_h * sh + b) as isize - ph as isize;
                        if zd < 0 || zh < 0 || zd >= id as isize || zh >= ih as isize {
                            continue;
                        }
                        let base = (zd as usize * ih + zh as usize) * iw;
                        let s = &src[(r - r0) * ow..];
                        if sw == 1 {
                            let start = base + w0 + c - pw;
                            for (dst, v) in xc[start..start + (w1 - w0)].iter_mut().zip(&s[w0..w1]) {
                                *dst += v;
                            }
                        } else {
                            for o_w in w0..w1 {
                                xc[base + o_w * sw + c - pw] += s[o_w];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Graph {
    /// 3D cross-correlation. `x: N x Cin x D x H x W`,
    /// `w: Cout x Cin x kd x kh x kw`, `b: Cout`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.ndim() != 5 || wt.ndim() != 5 || xt.dim(1) != wt.dim(1) {
            return shape_err(format!("conv3d: x {:?}, w {:?}", xt.shape(), wt.shape()));
        }
        let (n, cout) = (xt.dim(0), wt.dim(0));
        let input = xt.dhw();
        let kernel = [wt.dim(2), wt.dim(3), wt.dim(4)];
        let mut output = [0; 3];
        for i in 0..3 {
            let span = input[i] + 2 * geo.pad[i];
            if span < kernel[i] || geo.stride[i] == 0 {
                return shape_err(format!(
                    "conv3d: kernel {kernel:?} does not fit input {input:?} with pad {:?}",
                    geo.pad
                ));
            }
            output[i] = (span - kernel[i]) / geo.stride[i] + 1;
        }
        let dims = Dims {
            cin: xt.dim(1),
            input,
            kernel,
            stride: geo.stride,
            pad: geo.pad,
            output,
        };
        let (k, p) = (dims.k(), dims.p());
        let in_per = dims.cin * input.iter().product::<usize>();
        let mut out = vec![0.0f32; n * cout * p];
        let rows = dims.output[0] * dims.output[1];
        let chunk = rows_per_chunk(&dims);
        let ow = dims.output[2];
        let mut col = if dims.is_pointwise() { Vec::new() } else { vec![0.0f32; k * chunk * ow] };
        for s in 0..n {
            let xs = &xt.data()[s * in_per..(s + 1) * in_per];
            let os = &mut out[s * cout * p..(s + 1) * cout * p];
            if dims.is_pointwise() {
                gemm(cout, k, p, 1.0, wt.data(), false, xs, false, 0.0, os);
                continue;
            }
            for r0 in (0..rows).step_by(chunk) {
                let r1 = (r0 + chunk).min(rows);
                let pc = (r1 - r0) * ow;
                im2col(xs, &dims, r0, r1, &mut col);
                gemm_strided(
                    cout,
                    k,
                    pc,
                    1.0,
                    (wt.data(), k, 1),
                    (&col, pc, 1),
                    0.0,
                    (&mut os[r0 * ow..], p),
                );
            }
        }
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [cout] {
                return shape_err(format!("conv3d bias {:?}, expected [{cout}]", bt.shape()));
            }
            for (i, ch) in out.chunks_mut(p).enumerate() {
                let bias = bt.data()[i % cout];
                for v in ch {
                    *v += bias;
                }
            }
        }
        let out = Tensor::from_vec(&[n, cout, output[0], output[1], output[2]], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let has_bias = b.is_some();
        Ok(self.custom(&inputs, out, move |ctx| {
            let (xt, wt, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut gx = vec![0.0f32; xt.numel()];
            let mut gw = vec![0.0f32; wt.numel()];
            let rows = dims.output[0] * dims.output[1];
            let chunk = rows_per_chunk(&dims);
            let ow = dims.output[2];
            let mut col = vec![0.0f32; k * chunk * ow];
            let mut gcol = vec![0.0f32; k * chunk * ow];
            for s in 0..n {
                let gs = &g.data()[s * cout * p..(s + 1) * cout * p];
                let xs = &xt.data()[s * in_per..(s + 1) * in_per];
                if dims.is_pointwise() {
                    gemm(cout, p, k, 1.0, gs, false, xs, true, 1.0, &mut gw);
                    gemm(k, cout, p, 1.0, wt.data(), true, gs, false, 0.0, &mut gx[s * in_per..(s + 1) * in_per]);
                    continue;
                }
                for r0 in (0..rows).step_by(chunk) {
                    let r1 = (r0 + chunk).min(rows);
                    let pc = (r1 - r0) * ow;
                    im2col(xs, &dims, r0, r1, &mut col);
                    // gw += g_chunk * col^T
                    gemm_strided(cout, pc, k, 1.0, (&gs[r0 * ow..], p, 1), (&col, 1, pc), 1.0, (&mut gw, k));
                    // gcol = w^T * g_chunk
                    gemm_strided(k, cout, pc, 1.0, (wt.data(), 1, k), (&gs[r0 * ow..], p, 1), 0.0, (&mut gcol, pc));
                    col2im(&gcol, &dims, r0, r1, &mut gx[s * in_per..(s + 1) * in_per]);
                }
            }
            let mut res = vec![
                Some(Tensor::from_vec(xt.shape(), gx).unwrap()),
                Some(Tensor::from_vec(wt.shape(), gw).unwrap()),
            ];
            if has_bias {
                let mut gb = vec![0.0f64; cout];
                for (i, ch) in g.data().chunks(p).enumerate() {
                    gb[i % cout] += ch.iter().map(|&v| v as f64).sum::<f64>();
                }
                res.push(Some(
                    Tensor::from_vec(&[cout], gb.into_iter().map(|v| v as f32).collect()).unwrap(),
                ));
            }
            res
        }))
    }

    /// Collapse a `Cout x Cin x kd x kh x kw` kernel to extent 1 along
    /// spatial `axis` (0 = D, 1 = H, 2 = W).
    pub fn reduce_kernel(&mut self, w: Var, axis: usize, mode: KernelReduction) -> Result<Var> {
        let wt = self.value(w);
        if wt.ndim() != 5 || axis > 2 {
            return shape_err(format!("reduce_kernel: w {:?}, axis {axis}", wt.shape()));
        }
        let shape = wt.shape().to_vec();
        let ax = axis + 2;
        let extent = shape[ax];
        let outer: usize = shape[..ax].iter().product();
        let inner: usize = shape[ax + 1..].iter().product();
        let center = extent / 2;
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                if mode == KernelReduction::Center && j != center {
                    continue;
                }
                let src = &wt.data()[(o * extent + j) * inner..(o * extent + j + 1) * inner];
                for (a, b) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[ax] = 1;
        let out = Tensor::from_vec(&oshape, out)?;
        Ok(self.custom(&[w], out, move |ctx| {
            let mut g = vec![0.0f32; outer * extent * inner];
            for o in 0..outer {
                for j in 0..extent {
                    if mode == KernelReduction::Center && j != center {
                        continue;
                    }
                    g[(o * extent + j) * inner..(o * extent + j + 1) * inner]
                        .copy_from_slice(&ctx.grad.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_vec(&shape, g).unwrap())]
        }))
    }

    /// Nearest-neighbour upsampling by integer factors per spatial axis.
    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 5 || factors.contains(&0) {
            return shape_err(format!("upsample: x {:?}, factors {factors:?}", t.shape()));
        }
        let (nc, [d, h, w]) = (t.dim(0) * t.dim(1), t.dhw());
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut out = vec![0.0f32; nc * od * oh * ow];
        for c in 0..nc {
            let src = &t.data()[c * d * h * w..(c + 1) * d * h * w];
            let dst = &mut out[c * od * oh * ow..(c + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = &src[((z / fd) * h + y / fh) * w..];
                    let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                    for (xx, v) in drow.iter_mut().enumerate() {
                        *v = srow[xx / fw];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[t.dim(0), t.dim(1), od, oh, ow], out)?;
        let in_shape = t.shape().to_vec();
        Ok(self.custom(&[x], out, move |ctx| {
            let mut g = vec![0.0f32; nc * d * h * w];
            for c in 0..nc {
                let src = &ctx.grad.data()[c * od * oh * ow..(c + 1) * od * oh * ow];
                let dst = &mut g[c * d * h * w..(c + 1) * d * h * w];
                for z in 0..od {
                    for y in 0..oh {
                        let drow = &mut dst[((z / fd) * h + y / fh) * w..];
                        let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                        for (xx, v) in srow.iter().enumerate() {
                            drow[xx / fw] += v;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&in_shape, g).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution in f64.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, geo: ConvGeometry) -> Vec<f64> {
        let (n, cin, [d, h, ww]) = (x.dim(0), x.dim(1), x.dhw());
        let (cout, kd, kh, kw) = (w.dim(0), w.dim(2), w.dim(3), w.dim(4));
        let od = (d + 2 * geo.pad[0] - kd) / geo.stride[0] + 1;
        let oh = (h + 2 * geo.pad[1] - kh) / geo.stride[1] + 1;
        let ow = (ww + 2 * geo.pad[2] - kw) / geo.stride[2] + 1;
        let mut out = Vec::new();
        for s in 0..n {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b.data()[co] as f64;
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let iz = (z * geo.stride[0] + a) as isize - geo.pad[0] as isize;
                                            let iy = (y * geo.stride[1] + bb) as isize - geo.pad[1] as isize;
                                            let ix = (xx * geo.stride[2] + c) as isize - geo.pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= ww as isize {
                                                continue;
                                            }
                                            let xi = (((s * cin + ci) * d + iz as usize) * h + iy as usize) * ww + ix as usize;
                                            let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                            acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                        }
                                    }
                                }
                            }
                            out.push(acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for (shape, geo, k) in [
            ([2, 3, 5, 4, 6], ConvGeometry::same(), [3, 3, 3]),
            ([1, 2, 6, 4, 4], ConvGeometry { stride: [2; 3], pad: [1; 3] }, [3, 3, 3]),
            ([2, 3, 4, 4, 2], ConvGeometry { stride: [2, 2, 2], pad: [0; 3] }, [1, 1, 1]),
            ([1, 2, 1, 5, 4], ConvGeometry { stride: [1, 2, 2], pad: [0, 1, 1] }, [1, 3, 3]),
            ([1, 4, 3, 3, 3], ConvGeometry::pointwise(), [1, 1, 1]),
            // spans many im2col chunks
            ([1, 4, 5, 30, 40], ConvGeometry::same(), [3, 3, 3]),
        ] {
            let x = Tensor::randn(&shape, 1.0, &mut r);
            let w = Tensor::randn(&[3, shape[1], k[0], k[1], k[2]], 0.3, &mut r);
            let b = Tensor::randn(&[3], 0.3, &mut r);
            let want = conv_oracle(&x, &w, &b, geo);
            let mut g = Graph::inference();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = g.conv3d(xv, wv, Some(bv), geo).unwrap();
            let got = g.value(y).data();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for (geo, shape) in [
            (ConvGeometry::same(), [2, 2, 4, 3, 4]),
            (ConvGeometry { stride: [2; 3], pad: [1; 3] }, [2, 2, 4, 3, 4]),
            (ConvGeometry::same(), [1, 2, 3, 40, 200]),
        ] {
            let x = Tensor::randn(&shape, 1.0, &mut r);
            let w = Tensor::randn(&[3, 2, 3, 3, 3], 0.3, &mut r);
            let b = Tensor::randn(&[3], 0.3, &mut r);
            let err = check(&[x, w, b], 1e-2, 60, |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), geo).unwrap();
                let y = g.silu(y);
                g.mean_all(y)
            });
            assert!(err < 1e-3, "rel err {err}");
        }
    }

    #[test]
    fn reduce_kernel_center_and_sum() {
        let w = Tensor::from_vec(&[1, 1, 3, 1, 1], vec![1.0, 2.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let wv = g.leaf(w);
        let c = g.reduce_kernel(wv, 0, KernelReduction::Center).unwrap();
        let s = g.reduce_kernel(wv, 0, KernelReduction::Sum).unwrap();
        assert_eq!(g.value(c).data(), &[2.0]);
        assert_eq!(g.value(s).data(), &[7.0]);
        let t = g.weighted_sum(&[(c, 1.0), (s, 1.0)]).unwrap();
        let gr = g.backward(t);
        assert_eq!(gr.get(wv).unwrap().data(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn upsample_gradient_and_values() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 2, 2, 1, 3], 1.0, &mut r);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = g.upsample_nearest(xv, [2, 1, 2]).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 4, 1, 6]);
        assert_eq!(g.value(y).data()[0], x.data()[0]);
        assert_eq!(g.value(y).data()[1], x.data()[0]);
        assert_eq!(g.value(y).data()[2], x.data()[1]);
        let err = check(&[x], 1e-2, 50, |g, v| {
            let y = g.upsample_nearest(v[0], [2, 2, 1]).unwrap();
            let y = g.silu(y);
            g.mean_all(y)
        });
        assert!(err < 1e-3);
    }
}
