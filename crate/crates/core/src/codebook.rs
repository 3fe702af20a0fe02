//! Shared anatomical codebook: nearest-neighbour quantization with a
//! straight-through gradient, the VQ / commitment loss, EMA re-estimation
//! and usage statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    /// Number of codes K.
    pub codes: usize,
    /// Commitment weight.
    pub commitment_beta: f32,
    pub decay: f32,
    /// Laplace smoothing constant of the EMA cluster sizes.
    pub epsilon: f32,
    /// Move embeddings by EMA (true) or by the codebook-pull gradient.
    pub ema: bool,
    /// Std of the noise added to data-initialized codes.
    pub init_noise: f32,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codes: 512,
            commitment_beta: 0.25,
            decay: 0.99,
            epsilon: 1e-5,
            ema: true,
            init_noise: 1e-2,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.codes == 0 {
            errors.push("quantizer.codes must be >= 1".into());
        }
        if !(self.decay >= 0.0 && self.decay < 1.0) {
            errors.push(format!("quantizer.decay must be in [0, 1), got {}", self.decay));
        }
        if !(self.epsilon >= 0.0) || !(self.commitment_beta >= 0.0) {
            errors.push("quantizer.epsilon and commitment_beta must be >= 0".into());
        }
    }
}

/// Embedding table plus EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K x C`.
    pub embeddings: Tensor,
    /// `K`, non-negative.
    pub cluster_size: Tensor,
    /// `K x C`.
    pub embed_sum: Tensor,
    pub decay: f32,
    pub epsilon: f32,
}

impl Codebook {
    /// Uniform `(-1/K, 1/K)` table with unit cluster sizes, so that
    /// `embeddings == embed_sum / cluster_size` from the start.
    pub fn new<R: Rng + ?Sized>(codes: usize, dim: usize, decay: f32, epsilon: f32, rng: &mut R) -> Self {
        let embeddings = Tensor::uniform(&[codes, dim], 1.0 / codes.max(1) as f32, rng);
        Self::from_embeddings(embeddings, decay, epsilon)
    }

    pub fn from_embeddings(embeddings: Tensor, decay: f32, epsilon: f32) -> Self {
        let k = embeddings.dim(0);
        Self {
            cluster_size: Tensor::full(&[k], 1.0),
            embed_sum: embeddings.clone(),
            embeddings,
            decay,
            epsilon,
        }
    }

    pub fn codes(&self) -> usize {
        self.embeddings.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim(1)
    }

    pub fn embedding(&self, k: usize) -> &[f32] {
        let c = self.dim();
        &self.embeddings.data()[k * c..(k + 1) * c]
    }

    /// Index of the nearest code under squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, v: &[f32]) -> Result<usize> {
        if self.codes() == 0 {
            return Err(Error::EmptyCodebook);
        }
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for k in 0..self.codes() {
            let d: f32 = self.embedding(k).iter().zip(v).map(|(e, z)| (z - e) * (z - e)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        Ok(best)
    }

    /// Re-seed every code with a training vector drawn with replacement plus
    /// Gaussian noise, and reset the EMA statistics to match.
    pub fn init_from_vectors<R: Rng + ?Sized>(&mut self, vectors: &[f32], noise: f32, rng: &mut R) -> Result<()> {
        let c = self.dim();
        if vectors.is_empty() || !vectors.len().is_multiple_of(c) {
            return shape_err(format!("{} values are not a set of {c}-vectors", vectors.len()));
        }
        let m = vectors.len() / c;
        let k = self.codes();
        let mut e = Vec::with_capacity(k * c);
        for _ in 0..k {
            let i = rng.random_range(0..m);
            for &v in &vectors[i * c..(i + 1) * c] {
                let z: f32 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                e.push(v + noise * z);
            }
        }
        *self = Self::from_embeddings(Tensor::from_vec(&[k, c], e)?, self.decay, self.epsilon);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.cluster_size.is_finite() && self.embed_sum.is_finite()
    }
}

/// Quantized map, chosen indices and the loss value.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub z_tilde: Tensor,
    /// One index per latent location, ordered batch-major then spatially.
    pub indices: Vec<u32>,
    pub vq_loss: f64,
}

/// Rearrange an `N x C x S...` map into `(N * S) x C` row vectors.
pub fn to_vectors(z: &Tensor) -> Vec<f32> {
    let (n, c, s) = (z.dim(0), z.dim(1), z.spatial_len());
    let mut out = vec![0.0f32; z.numel()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..s {
                out[(b * s + p) * c + ch] = z.data()[(b * c + ch) * s + p];
            }
        }
    }
    out
}

fn lookup(cb: &Codebook, shape: &[usize], indices: &[u32]) -> Tensor {
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let mut out = vec![0.0f32; n * c * s];
    for b in 0..n {
        for p in 0..s {
            let e = cb.embedding(indices[b * s + p] as usize);
            for ch in 0..c {
                out[(b * c + ch) * s + p] = e[ch];
            }
        }
    }
    Tensor::from_vec(shape, out).expect("shape from input")
}

fn assign(z: &Tensor, cb: &Codebook) -> Result<Vec<u32>> {
    if cb.codes() == 0 {
        return Err(Error::EmptyCodebook);
    }
    if z.ndim() < 2 || z.dim(1) != cb.dim() {
        return shape_err(format!("latent {:?} vs codebook dim {}", z.shape(), cb.dim()));
    }
    let c = cb.dim();
    to_vectors(z)
        .chunks_exact(c)
        .map(|v| cb.nearest(v).map(|k| k as u32))
        .collect()
}

/// Nearest-code quantization of an `N x C x ...` latent map, with the loss
/// value in the codebook-gradient form (both terms).
pub fn quantize(z: &Tensor, cb: &Codebook, beta: f32) -> Result<QuantizationResult> {
    let indices = assign(z, cb)?;
    let z_tilde = lookup(cb, z.shape(), &indices);
    let vq_loss = vq_loss(z, &z_tilde, beta)?;
    Ok(QuantizationResult {
        z_tilde,
        indices,
        vq_loss,
    })
}

/// `mean((sg[z] - z~)^2) + beta * mean((z - sg[z~])^2)`. Both terms have the
/// same value; they differ only in where gradient flows.
pub fn vq_loss(z: &Tensor, z_tilde: &Tensor, beta: f32) -> Result<f64> {
    if z.shape() != z_tilde.shape() {
        return shape_err(format!("vq_loss: {:?} vs {:?}", z.shape(), z_tilde.shape()));
    }
    let sq: f64 = z
        .data()
        .iter()
        .zip(z_tilde.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    let mse = sq / z.numel().max(1) as f64;
    Ok(mse * (1.0 + beta as f64))
}

/// Graph outputs of quantization.
pub struct QuantizedVars {
    pub z_tilde: Var,
    pub indices: Vec<u32>,
    /// Loss node: commitment term, plus the codebook-pull term when the
    /// embeddings are passed in (gradient mode).
    pub loss: Var,
    /// `(N * S) x C` encoder vectors, for the EMA update.
    pub vectors: Vec<f32>,
}

impl Graph {
    /// Forward value `z_tilde`; backward copies the incoming gradient to `z`
    /// unchanged.
    pub fn straight_through(&mut self, z: Var, z_tilde: Tensor) -> Result<Var> {
        if self.value(z).shape() != z_tilde.shape() {
            return shape_err(format!(
                "straight-through: {:?} vs {:?}",
                self.value(z).shape(),
                z_tilde.shape()
            ));
        }
        Ok(self.custom(&[z], z_tilde, |ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Codes gathered from the `K x C` table `embed` into the layout of a
    /// latent map of `shape`; gradient scatters back into the table.
    pub fn gather_codes(&mut self, embed: Var, shape: &[usize], indices: &[u32]) -> Result<Var> {
        let et = self.value(embed);
        let (k, c) = (et.dim(0), et.dim(1));
        let s: usize = shape[2..].iter().product();
        if shape[1] != c || indices.len() != shape[0] * s || indices.iter().any(|&i| i as usize >= k) {
            return shape_err(format!("gather_codes: table {:?}, map {shape:?}", et.shape()));
        }
        let cb = Codebook::from_embeddings(et.clone(), 0.0, 0.0);
        let value = lookup(&cb, shape, indices);
        let idx = indices.to_vec();
        let n = shape[0];
        Ok(self.custom(&[embed], value, move |ctx| {
            let mut g = vec![0.0f32; k * c];
            for b in 0..n {
                for p in 0..s {
                    let code = idx[b * s + p] as usize;
                    for ch in 0..c {
                        g[code * c + ch] += ctx.grad.data()[(b * c + ch) * s + p];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[k, c], g).unwrap())]
        }))
    }
}

/// Quantize inside a graph. `embed` is the embedding table as a graph node
/// in gradient mode, `None` in EMA mode (codebook-pull term dropped).
pub fn quantize_graph(g: &mut Graph, z: Var, cb: &Codebook, beta: f32, embed: Option<Var>) -> Result<QuantizedVars> {
    let zt = g.value(z).clone();
    let indices = assign(&zt, cb)?;
    let tilde = lookup(cb, zt.shape(), &indices);
    let z_tilde = g.straight_through(z, tilde.clone())?;
    let sg_tilde = g.constant(tilde);
    let commit = g.mse(z, sg_tilde)?;
    let loss = match embed {
        Some(e) => {
            let codes = g.gather_codes(e, zt.shape(), &indices)?;
            let sg_z = g.detach(z);
            let pull = g.mse(codes, sg_z)?;
            g.weighted_sum(&[(pull, 1.0), (commit, beta)])?
        }
        None => g.scale(commit, beta),
    };
    Ok(QuantizedVars {
        z_tilde,
        indices,
        loss,
        vectors: to_vectors(&zt),
    })
}

/// One EMA step from `(M x C)` vectors and their assigned codes:
/// `n <- d n + (1 - d) count`, `m <- d m + (1 - d) sum`, `e = m / n~` with
/// Laplace-smoothed `n~ = (n + eps) N / (N + K eps)`, `N = sum n`.
pub fn ema_update(cb: &mut Codebook, vectors: &[f32], indices: &[u32]) -> Result<()> {
    let (k, c) = (cb.codes(), cb.dim());
    if vectors.len() != indices.len() * c {
        return shape_err(format!("{} vectors for {} indices", vectors.len() / c.max(1), indices.len()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
        return Err(Error::Invalid(format!("code index {bad} >= {k}")));
    }
    let mut count = vec![0.0f64; k];
    let mut sum = vec![0.0f64; k * c];
    for (v, &i) in vectors.chunks_exact(c).zip(indices) {
        let i = i as usize;
        count[i] += 1.0;
        for (s, &x) in sum[i * c..(i + 1) * c].iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let d = cb.decay as f64;
    for i in 0..k {
        let n = &mut cb.cluster_size.data_mut()[i];
        *n = (d * *n as f64 + (1.0 - d) * count[i]) as f32;
    }
    for (m, s) in cb.embed_sum.data_mut().iter_mut().zip(&sum) {
        *m = (d * *m as f64 + (1.0 - d) * s) as f32;
    }
    let total: f64 = cb.cluster_size.data().iter().map(|&n| n as f64).sum();
    let eps = cb.epsilon as f64;
    let denom = total + k as f64 * eps;
    for i in 0..k {
        let n = cb.cluster_size.data()[i] as f64;
        let smoothed = (n + eps) * total / denom;
        if smoothed > 0.0 {
            for ch in 0..c {
                let m = cb.embed_sum.data()[i * c + ch] as f64;
                cb.embeddings.data_mut()[i * c + ch] = (m / smoothed) as f32;
            }
        }
    }
    if !cb.is_finite() {
        return Err(Error::NonFinite("codebook"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    /// Fraction of codes with at least one assignment.
    pub usage: f64,
    /// `exp` of the entropy of the empirical code distribution.
    pub perplexity: f64,
}

pub fn codebook_stats(indices: &[u32], codes: usize) -> CodebookStats {
    let mut count = vec![0usize; codes];
    for &i in indices {
        if let Some(c) = count.get_mut(i as usize) {
            *c += 1;
        }
    }
    let total: usize = count.iter().sum();
    let used = count.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = count
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    CodebookStats {
        usage: used as f64 / codes.max(1) as f64,
        perplexity: entropy.exp(),
    }
}
