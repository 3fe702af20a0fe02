//! Parameterized layers over [`Graph`] and the volumetric / planar mode
//! switch shared by the encoder and decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Graph, KernelReduction, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::volume::Plane;

/// Whether a forward pass runs on full volumes or on depth-1 slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpatialMode {
    #[default]
    Volumetric,
    /// Inputs have extent 1 along the plane's perpendicular axis: kernels are
    /// collapsed onto the plane, there is no stride or upsampling across it,
    /// and attention along it is skipped.
    Planar {
        plane: Plane,
        reduction: KernelReduction,
    },
}

impl SpatialMode {
    /// The perpendicular axis in planar mode.
    pub fn flat_axis(self) -> Option<usize> {
        match self {
            SpatialMode::Volumetric => None,
            SpatialMode::Planar { plane, .. } => Some(plane.axis()),
        }
    }

    /// Per-axis factor, with 1 along the flat axis.
    pub fn per_axis(self, factor: usize) -> [usize; 3] {
        let mut f = [factor; 3];
        if let Some(ax) = self.flat_axis() {
            f[ax] = 1;
        }
        f
    }
}

/// Fully connected layer on `N x In` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(in)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            w: store.add(format!("{name}.w"), Tensor::uniform(&[fan_out, fan_in], bound, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[fan_out, fan_in])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Cubic convolution (kernel 1 or 3) with "same" padding and an optional
/// isotropic stride.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// He-uniform init (bound `sqrt(6 / fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, cin, cout, kernel, stride, 6.0, rng)
    }

    /// Init with bound `sqrt(gain / fan_in)`; gain 3 gives unit-variance
    /// preserving linear layers.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let bound = (gain / fan_in as f32).sqrt();
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::uniform(&[cout, cin, kernel, kernel, kernel], bound, rng),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: SpatialMode) -> Result<Var> {
        let mut w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let mut pad = [self.kernel / 2; 3];
        let stride = mode.per_axis(self.stride);
        if let SpatialMode::Planar { plane, reduction } = mode {
            pad[plane.axis()] = 0;
            if self.kernel > 1 {
                w = g.reduce_kernel(w, plane.axis(), reduction)?;
            }
        }
        g.conv3d(x, w, Some(b), ConvGeometry { stride, pad })
    }
}

/// Channel layer norm with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm_channels(x, gamma, beta)
    }
}
