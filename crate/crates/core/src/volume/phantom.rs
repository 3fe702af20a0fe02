//! Deterministic paired-contrast ellipsoid phantoms.
//!
//! Label 1 is an outer head-like ellipsoid; labels `2..=n_structures` are
//! inner ellipsoids placed from a fixed template with jittered pose and
//! size. Label 2 is always the largest inner structure: its smallest
//! jittered volume exceeds the largest jittered volume of every other
//! template entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_divisible, LabelMap, Modality, PairedSample, Volume};
use crate::error::{Error, Result};

pub const MAX_STRUCTURES: u8 = 8;

/// Per-label mean intensity for each contrast, indexed by label.
/// Within a contrast all entries are at least 0.1 apart; labels 1 and 2
/// swap order between the contrasts.
const MU_A: [f32; 9] = [0.0, 0.3, 0.8, 0.5, 0.9, 0.2, 0.7, 0.4, 0.6];
const MU_B: [f32; 9] = [0.0, 0.3, 0.2, 0.8, 0.5, 0.9, 0.6, 0.7, 0.4];

/// Inner-structure template: centre offset and radii as fractions of the
/// head radii, per axis `[D, H, W]`.
const TEMPLATE: [([f32; 3], [f32; 3]); 7] = [
    ([0.0, -0.15, 0.0], [0.42, 0.34, 0.42]),
    ([0.30, 0.40, -0.35], [0.28, 0.22, 0.28]),
    ([-0.30, 0.40, 0.35], [0.28, 0.22, 0.28]),
    ([0.0, 0.60, 0.0], [0.22, 0.16, 0.30]),
    ([0.45, -0.50, 0.25], [0.20, 0.18, 0.20]),
    ([-0.45, -0.50, -0.25], [0.20, 0.18, 0.20]),
    ([0.0, 0.15, 0.55], [0.16, 0.24, 0.14]),
];

/// Mean intensity per label for `m`.
pub fn intensity_table(m: Modality) -> [f32; 9] {
    match m {
        Modality::A => MU_A,
        Modality::B => MU_B,
    }
}

/// Randomization ranges of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomDesign {
    /// Head radius as a fraction of each volume dim.
    pub head_radius: f32,
    /// Half-width of the uniform global head scale jitter.
    pub head_scale_jitter: f32,
    /// Half-width of the per-axis head radius jitter.
    pub head_axis_jitter: f32,
    /// Head centre shift, voxels.
    pub head_shift: f32,
    pub head_rotation_deg: f32,
    /// Inner centre shift as a fraction of the head radii.
    pub inner_shift: f32,
    pub inner_scale_jitter: f32,
    /// Scale jitter of the primary (largest) structure; the attribute is
    /// whether its scale lands above the median.
    pub primary_scale_jitter: f32,
    pub inner_rotation_deg: f32,
    /// Maximum relative deviation of the multiplicative bias field.
    pub bias_amplitude: f32,
    pub noise_sigma: f32,
}

impl Default for PhantomDesign {
    fn default() -> Self {
        Self {
            head_radius: 0.42,
            head_scale_jitter: 0.04,
            head_axis_jitter: 0.03,
            head_shift: 1.0,
            head_rotation_deg: 5.0,
            inner_shift: 0.05,
            inner_scale_jitter: 0.15,
            primary_scale_jitter: 0.2,
            inner_rotation_deg: 15.0,
            bias_amplitude: 0.02,
            noise_sigma: 0.01,
        }
    }
}

impl PhantomDesign {
    /// Same geometry distribution with no bias field and no noise.
    pub fn clean() -> Self {
        Self {
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
    /// Rotation in the H-W plane, radians.
    angle: f32,
}

impl Ellipsoid {
    fn contains(&self, p: [f32; 3]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let d = p[0] - self.center[0];
        let h = p[1] - self.center[1];
        let w = p[2] - self.center[2];
        let hr = c * h + s * w;
        let wr = -s * h + c * w;
        let q = (d / self.radii[0]).powi(2) + (hr / self.radii[1]).powi(2) + (wr / self.radii[2]).powi(2);
        q <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, half_width: f32) -> f32 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..half_width)
    }
}

/// The spec-level generator: subject id is the low 32 bits of `seed`.
pub fn generate_phantom_pair(seed: u64, shape: [usize; 3], n_structures: u8) -> Result<PairedSample> {
    generate_subject(seed, shape, n_structures, seed as u32, 0, &PhantomDesign::default())
}

/// Generate one paired sample. Identical arguments give identical output.
pub fn generate_subject(
    seed: u64,
    shape: [usize; 3],
    n_structures: u8,
    subject_id: u32,
    visit_id: u32,
    design: &PhantomDesign,
) -> Result<PairedSample> {
    if shape.iter().any(|&n| n < 16) {
        return Err(Error::Shape(format!("phantom dims must be >= 16, got {shape:?}")));
    }
    check_divisible(shape, 16)?;
    if !(2..=MAX_STRUCTURES).contains(&n_structures) {
        return Err(Error::Invalid(format!(
            "n_structures must be in [2, {MAX_STRUCTURES}], got {n_structures}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let head_scale = 1.0 + jitter(&mut rng, design.head_scale_jitter);
    let mut head = Ellipsoid {
        center: [0.0; 3],
        radii: [0.0; 3],
        angle: jitter(&mut rng, design.head_rotation_deg).to_radians(),
    };
    for ax in 0..3 {
        let n = shape[ax] as f32;
        head.center[ax] = (n - 1.0) / 2.0 + jitter(&mut rng, design.head_shift);
        head.radii[ax] = n * design.head_radius * head_scale * (1.0 + jitter(&mut rng, design.head_axis_jitter));
    }

    let mut inner = Vec::with_capacity(n_structures as usize - 1);
    let mut primary_scale = 1.0;
    for (i, (offset, radii)) in TEMPLATE.iter().take(n_structures as usize - 1).enumerate() {
        let half = if i == 0 {
            design.primary_scale_jitter
        } else {
            design.inner_scale_jitter
        };
        let scale = 1.0 + jitter(&mut rng, half);
        if i == 0 {
            primary_scale = scale;
        }
        let mut e = Ellipsoid {
            center: [0.0; 3],
            radii: [0.0; 3],
            angle: jitter(&mut rng, design.inner_rotation_deg).to_radians(),
        };
        for ax in 0..3 {
            let shift = offset[ax] + jitter(&mut rng, design.inner_shift);
            e.center[ax] = head.center[ax] + shift * head.radii[ax];
            e.radii[ax] = radii[ax] * head.radii[ax] * scale;
        }
        inner.push(e);
    }

    let [d, h, w] = shape;
    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f32, y as f32, x as f32];
                if !head.contains(p) {
                    continue;
                }
                let mut l = 1u8;
                for (i, e) in inner.iter().enumerate() {
                    if e.contains(p) {
                        l = i as u8 + 2;
                    }
                }
                labels[(z * h + y) * w + x] = l;
            }
        }
    }

    let vol_a = render(&labels, shape, Modality::A, design, &mut rng, subject_id, visit_id)?;
    let vol_b = render(&labels, shape, Modality::B, design, &mut rng, subject_id, visit_id)?;
    let labels = LabelMap::new(shape, labels, n_structures)?;
    // The primary structure's volume is monotone in its scale, and the scale
    // is uniform around 1, so "above the median design volume" is scale > 1.
    let attribute = primary_scale > 1.0;
    PairedSample::new(vol_a, vol_b, labels, attribute, seed)
}

fn render(
    labels: &[u8],
    shape: [usize; 3],
    m: Modality,
    design: &PhantomDesign,
    rng: &mut ChaCha8Rng,
    subject_id: u32,
    visit_id: u32,
) -> Result<Volume> {
    let mu = intensity_table(m);
    let coef: Vec<f32> = (0..6).map(|_| jitter(rng, design.bias_amplitude / 6.0)).collect();
    let noise = Normal::new(0.0f32, design.noise_sigma.max(0.0))
        .map_err(|e| Error::Invalid(format!("noise sigma: {e}")))?;
    let [d, h, w] = shape;
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f32 / (n - 1) as f32 - 1.0 } else { 0.0 };
    let mut data = vec![0.0f32; labels.len()];
    for z in 0..d {
        let ud = norm(z, d);
        for y in 0..h {
            let uh = norm(y, h);
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let l = labels[idx];
                if l == 0 {
                    continue;
                }
                let uw = norm(x, w);
                let terms = [
                    ud,
                    uh,
                    uw,
                    ud * ud - 1.0 / 3.0,
                    uh * uh - 1.0 / 3.0,
                    uw * uw - 1.0 / 3.0,
                ];
                let bias = 1.0 + coef.iter().zip(terms).map(|(c, t)| c * t).sum::<f32>();
                let eps = if design.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                data[idx] = (mu[l as usize] * bias + eps).clamp(0.0, 1.0);
            }
        }
    }
    Volume::new(shape, data, m, subject_id, visit_id)
}
