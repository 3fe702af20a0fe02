//! The full autoencoder: dual-stream encoder, shared anatomical codebook,
//! FiLM decoder and the adversarial modality classifier, with every tensor
//! (including codebook EMA state) held in one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::codebook::{quantize, quantize_graph, Codebook, QuantizedVars, QuantizerConfig};
use crate::decoder::{Decoder, DecoderConfig, FilmSet};
use crate::encoder::{Encoder, EncoderConfig, LatentVars};
use crate::error::{shape_err, Error, Result};
use crate::nn::SpatialMode;
use crate::objectives::{ssim3d, ModalityClassifier, SSIM_WINDOW};
use crate::tensor::Tensor;
use crate::volume::{Modality, PairedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub quantizer: QuantizerConfig,
    /// Hidden width of the modality classifier.
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            classifier_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        self.encoder.validate(errors);
        self.decoder.validate(errors);
        self.quantizer.validate(errors);
        if self.classifier_hidden == 0 {
            errors.push("classifier_hidden must be >= 1".into());
        }
    }
}

/// Store handles of the codebook and its EMA state.
#[derive(Clone, Copy, Debug)]
pub struct CodebookParams {
    /// `K x C_a`; trainable only when the quantizer does not use EMA.
    pub embeddings: ParamId,
    pub cluster_size: ParamId,
    pub embed_sum: ParamId,
    /// Scalar flag: 1 once the codes have been seeded from data.
    pub initialized: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub codebook: CodebookParams,
    pub decoder: Decoder,
    pub classifier: ModalityClassifier,
}

/// Graph handles of one forward pass through the autoencoder.
pub struct Forward {
    pub latents: LatentVars,
    pub quant: QuantizedVars,
    pub film: Option<FilmSet>,
    pub x_hat: Var,
}

impl Model {
    /// Build every parameter from a seeded generator, in a fixed order.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.encoder, &mut rng)?;
        let q = &config.quantizer;
        let cb = Codebook::new(q.codes, config.encoder.c_anat, q.decay, q.epsilon, &mut rng);
        let embeddings = store.add("vq.embeddings", cb.embeddings.clone());
        store.set_trainable(embeddings, !q.ema);
        let codebook = CodebookParams {
            embeddings,
            cluster_size: store.add_buffer("vq.cluster_size", cb.cluster_size),
            embed_sum: store.add_buffer("vq.embed_sum", cb.embed_sum),
            initialized: store.add_buffer("vq.initialized", Tensor::scalar(0.0)),
        };
        let decoder = Decoder::new(
            &mut store,
            &config.decoder,
            config.encoder.c_anat,
            config.encoder.c_mod,
            &mut rng,
        )?;
        let classifier = ModalityClassifier::new(&mut store, config.encoder.c_anat, config.classifier_hidden, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            codebook,
            decoder,
            classifier,
        })
    }

    /// Snapshot of the codebook and its EMA statistics.
    pub fn codebook(&self) -> Codebook {
        let q = &self.config.quantizer;
        Codebook {
            embeddings: self.store.get(self.codebook.embeddings).clone(),
            cluster_size: self.store.get(self.codebook.cluster_size).clone(),
            embed_sum: self.store.get(self.codebook.embed_sum).clone(),
            decay: q.decay,
            epsilon: q.epsilon,
        }
    }

    pub fn set_codebook(&mut self, cb: &Codebook) {
        *self.store.get_mut(self.codebook.embeddings) = cb.embeddings.clone();
        *self.store.get_mut(self.codebook.cluster_size) = cb.cluster_size.clone();
        *self.store.get_mut(self.codebook.embed_sum) = cb.embed_sum.clone();
    }

    pub fn codebook_initialized(&self) -> bool {
        self.store.get(self.codebook.initialized).item() != 0.0
    }

    pub fn mark_codebook_initialized(&mut self) {
        *self.store.get_mut(self.codebook.initialized) = Tensor::scalar(1.0);
    }

    pub fn encode(&self, g: &mut Graph, x: Var, mode: SpatialMode) -> Result<LatentVars> {
        self.encoder.encode(g, &self.store, x, mode)
    }

    /// FiLM parameters for a batch, or `None` when the decoder is configured
    /// without modulation.
    pub fn film(&self, g: &mut Graph, z_mod: Var, modalities: &[Modality]) -> Result<Option<FilmSet>> {
        if !self.config.decoder.film {
            return Ok(None);
        }
        self.decoder.film(g, &self.store, z_mod, modalities).map(Some)
    }

    pub fn decode(&self, g: &mut Graph, z: Var, film: Option<&FilmSet>, mode: SpatialMode) -> Result<Var> {
        self.decoder.decode(g, &self.store, z, film, mode)
    }

    /// Quantize `z_anat` against the current codebook. In gradient mode the
    /// embedding table joins the graph so the codebook-pull term trains it.
    pub fn quantize(&self, g: &mut Graph, z_anat: Var) -> Result<QuantizedVars> {
        let cb = self.codebook();
        let embed = (!self.config.quantizer.ema).then(|| g.param(&self.store, self.codebook.embeddings));
        quantize_graph(g, z_anat, &cb, self.config.quantizer.commitment_beta, embed)
    }

    /// Encode, quantize and decode with the batch's own FiLM parameters.
    pub fn forward(&self, g: &mut Graph, x: Var, modalities: &[Modality], mode: SpatialMode) -> Result<Forward> {
        let latents = self.encode(g, x, mode)?;
        let quant = self.quantize(g, latents.anat)?;
        let film = self.film(g, latents.modality, modalities)?;
        let x_hat = self.decode(g, quant.z_tilde, film.as_ref(), mode)?;
        Ok(Forward {
            latents,
            quant,
            film,
            x_hat,
        })
    }

    /// Inference-mode reconstruction of an `N x 1 x D x H x W` batch.
    pub fn reconstruct(&self, x: &Tensor, modalities: &[Modality]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv, modalities, SpatialMode::Volumetric)?;
        Ok(g.value(f.x_hat).clone())
    }

    /// Decode the anatomy of `x_anat` with the FiLM parameters computed from
    /// `x_style` (whose modalities are `style_modalities`).
    pub fn swap(&self, x_anat: &Tensor, x_style: &Tensor, style_modalities: &[Modality]) -> Result<Tensor> {
        if x_anat.shape() != x_style.shape() {
            return shape_err(format!("swap: {:?} vs {:?}", x_anat.shape(), x_style.shape()));
        }
        let mut g = Graph::inference();
        let xa = g.constant(x_anat.clone());
        let xs = g.constant(x_style.clone());
        let anat = self.encode(&mut g, xa, SpatialMode::Volumetric)?;
        let style = self.encode(&mut g, xs, SpatialMode::Volumetric)?;
        let q = self.quantize(&mut g, anat.anat)?;
        let film = self.film(&mut g, style.modality, style_modalities)?;
        let out = self.decode(&mut g, q.z_tilde, film.as_ref(), SpatialMode::Volumetric)?;
        Ok(g.value(out).clone())
    }

    /// Continuous (pre-quantization) anatomical latents and code indices.
    pub fn anatomical_latents(&self, x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let latents = self.encoder.encode_tensor(&self.store, x)?;
        let q = quantize(&latents.z_anat, &self.codebook(), self.config.quantizer.commitment_beta)?;
        Ok((latents.z_anat, q.indices))
    }
}

/// Graph-level swap term over a batch laid out as `[A_1..A_n, B_1..B_n]`:
/// every sample is decoded from its own anatomy with the FiLM parameters of
/// its partner and compared (L1) with the partner's volume. Averaging over
/// the whole batch averages the two swap directions.
pub fn swapped_decode_loss(
    g: &mut Graph,
    model: &Model,
    z_tilde: Var,
    film: Option<&FilmSet>,
    target_swapped: &Tensor,
    mode: SpatialMode,
) -> Result<(Var, Var)> {
    let n2 = g.value(z_tilde).dim(0);
    if !n2.is_multiple_of(2) {
        return shape_err(format!("paired batch must be even, got {n2}"));
    }
    let partner = partner_index(n2);
    let swapped = match film {
        Some(f) => Some(f.select(g, &partner)?),
        None => None,
    };
    let x_swap = model.decode(g, z_tilde, swapped.as_ref(), mode)?;
    Ok((g.l1_loss(x_swap, target_swapped)?, x_swap))
}

/// `i <-> i + n` for a batch of `2n`.
pub fn partner_index(n2: usize) -> Vec<usize> {
    let n = n2 / 2;
    (0..n2).map(|i| if i < n { i + n } else { i - n }).collect()
}

/// Cross-modal swap loss of one pair: mean L1 between each modality and its
/// reconstruction from the other modality's anatomy, averaged over both
/// directions.
pub fn cross_modal_loss(model: &Model, pair: &PairedSample) -> Result<f64> {
    let (x_a, x_b) = (pair.vol_a.to_tensor(), pair.vol_b.to_tensor());
    cross_modal_loss_tensors(model, &x_a, &x_b, [pair.vol_a.modality, pair.vol_b.modality])
}

/// [`cross_modal_loss`] on raw `1 x 1 x D x H x W` tensors.
pub fn cross_modal_loss_tensors(model: &Model, x_1: &Tensor, x_2: &Tensor, m: [Modality; 2]) -> Result<f64> {
    let mut total = 0.0;
    for (src, dst, dst_m) in [(x_1, x_2, m[1]), (x_2, x_1, m[0])] {
        let swapped = model.swap(src, dst, &[dst_m])?;
        let l1 = swapped
            .data()
            .iter()
            .zip(dst.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / dst.numel() as f64;
        total += l1;
    }
    Ok(total / 2.0)
}

/// SSIM between a swapped reconstruction and its target, for reporting.
pub fn swap_ssim(swapped: &Tensor, target: &Tensor) -> Result<f64> {
    ssim3d(swapped, target, SSIM_WINDOW, 1.0)
}
