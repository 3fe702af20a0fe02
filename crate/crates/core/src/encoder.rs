//! Four-stage attention backbone and the anatomy / modality heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_axis_block, BlockParams};
use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, SpatialMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Anatomical latent channels.
    pub c_anat: usize,
    /// Modality latent channels.
    pub c_mod: usize,
    /// Hidden width of the two heads.
    pub head_hidden: usize,
    /// Factorized attention inside every stage.
    pub attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            heads: 4,
            c_anat: 8,
            c_mod: 8,
            head_hidden: 64,
            attention: true,
        }
    }
}

impl EncoderConfig {
    pub fn n_stages(&self) -> usize {
        self.channels.len()
    }

    /// Total downsampling per axis.
    pub fn factor(&self) -> usize {
        1 << self.n_stages()
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.channels.is_empty() {
            errors.push("encoder.channels must list at least one stage".into());
        }
        if self.heads == 0 {
            errors.push("encoder.heads must be >= 1".into());
        }
        for &c in &self.channels {
            if self.heads > 0 && c % self.heads != 0 {
                errors.push(format!("encoder stage width {c} not divisible by {} heads", self.heads));
            }
        }
        if self.c_anat == 0 || self.c_mod == 0 || self.head_hidden == 0 {
            errors.push("encoder.c_anat, c_mod and head_hidden must be >= 1".into());
        }
    }
}

/// `conv3 -> SiLU -> conv1`.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv,
    pub proj: Conv,
}

impl Head {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, hidden, 3, 1, rng),
            proj: Conv::with_gain(store, &format!("{name}.proj"), hidden, cout, 1, 1, 3.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: SpatialMode) -> Result<Var> {
        let h = self.conv.forward(g, store, x, mode)?;
        let h = g.silu(h);
        self.proj.forward(g, store, h, mode)
    }
}

/// Graph handles of the two latents.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub anat: Var,
    pub modality: Var,
}

/// Materialized latents `N x C x D/16 x H/16 x W/16`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z_anat: Tensor,
    pub z_mod: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<BlockParams>,
    pub anat_head: Head,
    pub mod_head: Head,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut stages = Vec::with_capacity(config.n_stages());
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            stages.push(BlockParams::new(store, &format!("enc.stage{i}"), cin, c, 2, config.heads, rng)?);
            cin = c;
        }
        Ok(Self {
            anat_head: Head::new(store, "enc.anat", cin, config.head_hidden, config.c_anat, rng),
            mod_head: Head::new(store, "enc.mod", cin, config.head_hidden, config.c_mod, rng),
            config: config.clone(),
            stages,
        })
    }

    /// Check that every (non-flat) spatial dim is divisible by the total
    /// downsampling factor.
    pub fn check_input(&self, dhw: [usize; 3], mode: SpatialMode) -> Result<()> {
        let f = self.config.factor();
        for (ax, &n) in dhw.iter().enumerate() {
            let need = if mode.flat_axis() == Some(ax) { 1 } else { f };
            if n == 0 || n % need != 0 {
                return Err(Error::Indivisible {
                    axis: ["D", "H", "W"][ax],
                    extent: n,
                    divisor: need,
                });
            }
        }
        Ok(())
    }

    /// Shared feature map `N x C_last x D/16 x H/16 x W/16`.
    pub fn backbone_forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: SpatialMode) -> Result<Var> {
        let xt = g.value(x);
        if xt.ndim() != 5 || xt.dim(1) != 1 {
            return Err(Error::Shape(format!("encoder expects N x 1 x D x H x W, got {:?}", xt.shape())));
        }
        self.check_input(xt.dhw(), mode)?;
        let mut h = x;
        for stage in &self.stages {
            h = multi_axis_block(g, store, h, stage, mode, self.config.attention)?;
        }
        Ok(h)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: SpatialMode) -> Result<LatentVars> {
        let f = self.backbone_forward(g, store, x, mode)?;
        Ok(LatentVars {
            anat: self.anat_head.forward(g, store, f, mode)?,
            modality: self.mod_head.forward(g, store, f, mode)?,
        })
    }

    /// Inference-mode encoding of a batch.
    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<LatentPair> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let l = self.encode(&mut g, store, xv, SpatialMode::Volumetric)?;
        Ok(LatentPair {
            z_anat: g.value(l.anat).clone(),
            z_mod: g.value(l.modality).clone(),
        })
    }
}
