//! Hierarchical decoder with per-stage FiLM modulation from the modality
//! stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiAxisAttention;
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{ChannelNorm, Conv, Linear, SpatialMode};
use crate::tensor::Tensor;
use crate::volume::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Width entering the first upsampling stage.
    pub base_channels: usize,
    /// Output width of each x2 upsampling stage.
    pub channels: Vec<usize>,
    /// Number of leading (lowest-resolution) stages with attention.
    pub attention_stages: usize,
    pub heads: usize,
    /// Modality embedding width.
    pub c_s: usize,
    pub film_hidden: usize,
    /// Apply FiLM modulation. When false the decoder ignores the modality.
    pub film: bool,
    /// Attention in the low-resolution stages.
    pub attention: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 256,
            channels: vec![128, 64, 32, 16],
            attention_stages: 2,
            heads: 4,
            c_s: 16,
            film_hidden: 64,
            film: true,
            attention: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.channels.is_empty() || self.base_channels == 0 || self.channels.contains(&0) {
            errors.push("decoder widths must be >= 1 with at least one stage".into());
        }
        if self.attention_stages > self.channels.len() {
            errors.push(format!(
                "decoder.attention_stages {} exceeds {} stages",
                self.attention_stages,
                self.channels.len()
            ));
        }
        for &c in self.channels.iter().take(self.attention_stages) {
            if self.heads == 0 || c % self.heads != 0 {
                errors.push(format!("decoder stage width {c} not divisible by {} heads", self.heads));
            }
        }
        if self.c_s == 0 || self.film_hidden == 0 {
            errors.push("decoder.c_s and film_hidden must be >= 1".into());
        }
    }
}

/// One learned vector per modality.
#[derive(Clone, Debug)]
pub struct ModalityEmbedding {
    /// `2 x C_s`, row = modality code.
    pub table: ParamId,
}

impl ModalityEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c_s: usize, rng: &mut R) -> Self {
        Self {
            table: store.add("dec.modality_embedding", Tensor::randn(&[Modality::ALL.len(), c_s], 1.0, rng)),
        }
    }
}

/// `u_m = GAP(z_mod) ++ s_m`, one row per sample.
pub fn build_condition(
    g: &mut Graph,
    store: &ParamStore,
    z_mod: Var,
    modalities: &[Modality],
    emb: &ModalityEmbedding,
) -> Result<Var> {
    if g.value(z_mod).dim(0) != modalities.len() {
        return shape_err(format!(
            "{} modality labels for a batch of {}",
            modalities.len(),
            g.value(z_mod).dim(0)
        ));
    }
    let pooled = g.gap(z_mod)?;
    let table = g.param(store, emb.table);
    let rows: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
    let s = g.select_batch(table, &rows)?;
    g.concat_features(pooled, s)
}

/// Two-layer MLP producing `(gamma, beta)` for one decoder stage.
#[derive(Clone, Debug)]
pub struct FilmHead {
    pub hidden: Linear,
    pub out: Linear,
    pub channels: usize,
}

/// Per-stage modulation: `gamma, beta: N x C_stage`.
#[derive(Clone, Copy, Debug)]
pub struct Film {
    pub gamma: Var,
    pub beta: Var,
}

/// One [`Film`] per decoder stage.
#[derive(Clone, Debug)]
pub struct FilmSet {
    pub layers: Vec<Film>,
}

impl FilmSet {
    /// `gamma = 1, beta = 0` for every stage: modulation is the identity.
    pub fn identity(g: &mut Graph, batch: usize, channels: &[usize]) -> Self {
        Self {
            layers: channels
                .iter()
                .map(|&c| Film {
                    gamma: g.constant(Tensor::full(&[batch, c], 1.0)),
                    beta: g.constant(Tensor::zeros(&[batch, c])),
                })
                .collect(),
        }
    }

    /// Batch rows reordered / selected (e.g. to swap between modalities).
    pub fn select(&self, g: &mut Graph, index: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for f in &self.layers {
            layers.push(Film {
                gamma: g.select_batch(f.gamma, index)?,
                beta: g.select_batch(f.beta, index)?,
            });
        }
        Ok(Self { layers })
    }
}

/// `(gamma, beta) = (1 + r[..C], r[C..])` with `r = MLP(u)` per stage.
pub fn film_params(g: &mut Graph, store: &ParamStore, u: Var, heads: &[FilmHead]) -> Result<FilmSet> {
    let mut layers = Vec::with_capacity(heads.len());
    for h in heads {
        let z = h.hidden.forward(g, store, u)?;
        let z = g.silu(z);
        let r = h.out.forward(g, store, z)?;
        let gamma = g.narrow_features(r, 0, h.channels)?;
        let gamma = g.add_scalar(gamma, 1.0);
        let beta = g.narrow_features(r, h.channels, h.channels)?;
        layers.push(Film { gamma, beta });
    }
    Ok(FilmSet { layers })
}

/// `gamma * h + beta` per channel.
pub fn film_modulate(g: &mut Graph, h: Var, film: &Film) -> Result<Var> {
    g.film(h, film.gamma, film.beta)
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv: Conv,
    pub norm: ChannelNorm,
    pub attention: Option<MultiAxisAttention>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub conv_in: Conv,
    pub stages: Vec<DecoderStage>,
    pub conv_out: Conv,
    pub embedding: ModalityEmbedding,
    pub film_heads: Vec<FilmHead>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &DecoderConfig,
        c_anat: usize,
        c_mod: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let conv_in = Conv::new(store, "dec.conv_in", c_anat, config.base_channels, 3, 1, rng);
        let mut stages = Vec::with_capacity(config.channels.len());
        let mut cin = config.base_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("dec.stage{i}");
            stages.push(DecoderStage {
                conv: Conv::new(store, &format!("{name}.conv"), cin, c, 3, 1, rng),
                norm: ChannelNorm::new(store, &format!("{name}.norm"), c),
                attention: if i < config.attention_stages {
                    Some(MultiAxisAttention::new(store, &format!("{name}.mha"), c, config.heads, rng)?)
                } else {
                    None
                },
            });
            cin = c;
        }
        let conv_out = Conv::with_gain(store, "dec.conv_out", cin, 1, 3, 1, 3.0, rng);
        let embedding = ModalityEmbedding::new(store, config.c_s, rng);
        let u = c_mod + config.c_s;
        let film_heads = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| FilmHead {
                hidden: Linear::new(store, &format!("dec.film{i}.hidden"), u, config.film_hidden, rng),
                out: Linear::zeros(store, &format!("dec.film{i}.out"), config.film_hidden, 2 * c),
                channels: c,
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            conv_in,
            stages,
            conv_out,
            embedding,
            film_heads,
        })
    }

    /// FiLM parameters for a batch from its modality latents and labels.
    pub fn film(&self, g: &mut Graph, store: &ParamStore, z_mod: Var, modalities: &[Modality]) -> Result<FilmSet> {
        let u = build_condition(g, store, z_mod, modalities, &self.embedding)?;
        film_params(g, store, u, &self.film_heads)
    }

    /// Reconstruct `N x 1 x 16D x 16H x 16W` intensities in `(0, 1)`.
    /// `film = None` runs the modulation-free path.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        film: Option<&FilmSet>,
        mode: SpatialMode,
    ) -> Result<Var> {
        if let Some(f) = film {
            if f.layers.len() != self.stages.len() {
                return shape_err(format!("{} FiLM layers for {} stages", f.layers.len(), self.stages.len()));
            }
        }
        let mut h = self.conv_in.forward(g, store, z, mode)?;
        h = g.silu(h);
        for (i, stage) in self.stages.iter().enumerate() {
            h = g.upsample_nearest(h, mode.per_axis(2))?;
            h = stage.conv.forward(g, store, h, mode)?;
            h = stage.norm.forward(g, store, h)?;
            if let Some(f) = film {
                h = film_modulate(g, h, &f.layers[i])?;
            }
            h = g.silu(h);
            if let (Some(attn), true) = (&stage.attention, self.config.attention) {
                let a = attn.forward(g, store, h, mode)?;
                h = g.add(h, a)?;
            }
        }
        let out = self.conv_out.forward(g, store, h, mode)?;
        Ok(g.sigmoid(out))
    }

    /// Channel width of every modulated stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.config.channels.clone()
    }
}
