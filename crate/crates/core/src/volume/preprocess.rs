use super::{check_divisible, Volume};
use crate::error::{Error, Result};

/// Crop to the bounding box of nonzero voxels, then zero-pad symmetrically
/// to `target`. On odd remainders the extra voxel goes to the trailing side.
/// An all-zero volume becomes an all-zero volume of the target shape.
pub fn crop_and_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_divisible(target, 16)?;
    let [d, h, w] = v.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v.at(z, y, x) != 0.0 {
                    for (ax, i) in [z, y, x].into_iter().enumerate() {
                        lo[ax] = lo[ax].min(i);
                        hi[ax] = hi[ax].max(i + 1);
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f32; target.iter().product()];
    if lo[0] == usize::MAX {
        return Volume::new(target, out, v.modality, v.subject_id, v.visit_id);
    }
    let mut lead = [0usize; 3];
    for ax in 0..3 {
        let extent = hi[ax] - lo[ax];
        if extent > target[ax] {
            return Err(Error::BoundingBox {
                axis: ["D", "H", "W"][ax],
                extent,
                target: target[ax],
            });
        }
        lead[ax] = (target[ax] - extent) / 2;
    }
    let [_, th, tw] = target;
    let row = hi[2] - lo[2];
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            let src = (z * h + y) * w + lo[2];
            let oz = z - lo[0] + lead[0];
            let oy = y - lo[1] + lead[1];
            let dst = (oz * th + oy) * tw + lead[2];
            out[dst..dst + row].copy_from_slice(&v.data()[src..src + row]);
        }
    }
    Volume::new(target, out, v.modality, v.subject_id, v.visit_id)
}
