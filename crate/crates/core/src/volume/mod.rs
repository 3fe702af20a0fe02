//! Volume data model, phantom generator, preprocessing and file formats.

mod dataset;
mod io;
mod phantom;
mod preprocess;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{
    load_split, read_labels, read_manifest, read_volume, write_labels, write_manifest, write_volume,
    ManifestEntry, Split, LABEL_MAGIC, NQV_MAGIC, NQV_VERSION,
};
pub use dataset::{
    attribute_imbalance, generate_dataset, partition, DatasetSpec, DatasetSummary, ATTRIBUTE_TOLERANCE, MANIFEST_FILE,
};
pub use phantom::{generate_phantom_pair, generate_subject, intensity_table, PhantomDesign};
pub use preprocess::crop_and_pad;

/// Image contrast of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::A, Modality::B];

    pub fn code(self) -> u8 {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::A),
            1 => Ok(Modality::B),
            other => Err(Error::Invalid(format!("unknown modality code {other}"))),
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn other(self) -> Self {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::A => f.write_str("A"),
            Modality::B => f.write_str("B"),
        }
    }
}

/// A single-modality intensity grid `D x H x W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    pub modality: Modality,
    pub subject_id: u32,
    pub visit_id: u32,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        data: Vec<f32>,
        modality: Modality,
        subject_id: u32,
        visit_id: u32,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "volume {shape:?} needs {} voxels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            data,
            modality,
            subject_id,
            visit_id,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> f32 {
        let [_, hh, ww] = self.shape;
        self.data[(d * hh + h) * ww + w]
    }

    /// The volume as a `1 x 1 x D x H x W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::from_vec(&[1, 1, d, h, w], self.data.clone()).expect("shape checked at construction")
    }

    /// Stack volumes of equal shape into an `N x 1 x D x H x W` batch.
    pub fn batch(volumes: &[&Volume]) -> Result<Tensor> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::Shape("empty volume batch".into()))?;
        let [d, h, w] = first.shape;
        let mut data = Vec::with_capacity(volumes.len() * first.len());
        for v in volumes {
            if v.shape != first.shape {
                return Err(Error::Shape(format!(
                    "batch mixes shapes {:?} and {:?}",
                    first.shape, v.shape
                )));
            }
            data.extend_from_slice(&v.data);
        }
        Tensor::from_vec(&[volumes.len(), 1, d, h, w], data)
    }

    /// The exact cross-section perpendicular to `plane`'s axis at `index`.
    pub fn sample_slice(&self, plane: Plane, index: usize) -> Result<Slice2d> {
        let axis = plane.axis();
        let extent = self.shape[axis];
        if index >= extent {
            return Err(Error::SliceBounds {
                plane: plane.name(),
                index,
                extent,
            });
        }
        let [d, h, w] = self.shape;
        let (rows, cols, data): (usize, usize, Vec<f32>) = match plane {
            Plane::Axial => (h, w, self.data[index * h * w..(index + 1) * h * w].to_vec()),
            Plane::Coronal => {
                let mut out = Vec::with_capacity(d * w);
                for z in 0..d {
                    out.extend_from_slice(&self.data[(z * h + index) * w..(z * h + index + 1) * w]);
                }
                (d, w, out)
            }
            Plane::Sagittal => {
                let mut out = Vec::with_capacity(d * h);
                for z in 0..d {
                    for y in 0..h {
                        out.push(self.data[(z * h + y) * w + index]);
                    }
                }
                (d, h, out)
            }
        };
        Ok(Slice2d {
            plane,
            index,
            rows,
            cols,
            data,
        })
    }
}

/// Anatomical plane of a 2D cross-section.
///
/// Axial slices are perpendicular to D, coronal to H, sagittal to W.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Index of the spatial axis the plane is perpendicular to.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// A 2D cross-section, row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2d {
    pub plane: Plane,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Slice2d {
    /// The slice as a depth-1 feature map `1 x 1 x D x H x W` with extent 1
    /// along the plane's perpendicular axis.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = [1, 1, 0, 0, 0];
        let mut k = 0;
        let dims = [self.rows, self.cols];
        for (ax, s) in shape[2..].iter_mut().enumerate() {
            if ax == self.plane.axis() {
                *s = 1;
            } else {
                *s = dims[k];
                k += 1;
            }
        }
        Tensor::from_vec(&shape, self.data.clone()).expect("slice dims consistent")
    }
}

/// Integer structure labels sharing a paired sample's grid.
/// Label 0 is background; labels run up to and including `n_structures`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    labels: Vec<u8>,
    n_structures: u8,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], labels: Vec<u8>, n_structures: u8) -> Result<Self> {
        if n_structures < 2 {
            return Err(Error::Invalid(format!("n_structures must be >= 2, got {n_structures}")));
        }
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "label map {shape:?} needs {} voxels, got {}",
                shape.iter().product::<usize>(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > n_structures) {
            return Err(Error::Invalid(format!("label {bad} exceeds n_structures {n_structures}")));
        }
        Ok(Self {
            shape,
            labels,
            n_structures,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n_structures(&self) -> u8 {
        self.n_structures
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Two contrasts of one subject over a shared label map.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub vol_a: Volume,
    pub vol_b: Volume,
    pub labels: LabelMap,
    /// Synthetic binary subject attribute used by the latent probe.
    pub attribute: bool,
    pub seed: u64,
}

impl PairedSample {
    pub fn new(vol_a: Volume, vol_b: Volume, labels: LabelMap, attribute: bool, seed: u64) -> Result<Self> {
        if vol_a.modality != Modality::A || vol_b.modality != Modality::B {
            return Err(Error::Invalid("pair must hold modality A then B".into()));
        }
        if vol_a.shape() != vol_b.shape() || vol_a.shape() != labels.shape() {
            return Err(Error::Shape(format!(
                "pair shapes differ: {:?}, {:?}, labels {:?}",
                vol_a.shape(),
                vol_b.shape(),
                labels.shape()
            )));
        }
        if vol_a.subject_id != vol_b.subject_id {
            return Err(Error::Invalid(format!(
                "pair subjects differ: {} vs {}",
                vol_a.subject_id, vol_b.subject_id
            )));
        }
        Ok(Self {
            vol_a,
            vol_b,
            labels,
            attribute,
            seed,
        })
    }

    pub fn volume(&self, m: Modality) -> &Volume {
        match m {
            Modality::A => &self.vol_a,
            Modality::B => &self.vol_b,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.vol_a.shape()
    }
}

/// Check that every dim is positive and divisible by `divisor`.
pub fn check_divisible(shape: [usize; 3], divisor: usize) -> Result<()> {
    for (axis, &n) in ["D", "H", "W"].iter().zip(&shape) {
        if n == 0 || n % divisor != 0 {
            return Err(Error::Indivisible {
                axis,
                extent: n,
                divisor,
            });
        }
    }
    Ok(())
}
