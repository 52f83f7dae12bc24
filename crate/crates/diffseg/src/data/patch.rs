//! Random patch extraction with foreground biasing, plus training-time
//! augmentations (flips, right-angle rotations, intensity scale/shift).

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::Real;

use super::VolumeRecord;

/// A spatially aligned image/label crop.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Array4<Real>,
    pub labels: Array3<u8>,
}

fn crop(record: &VolumeRecord, origin: [usize; 3], size: [usize; 3]) -> Patch {
    let image = record
        .image
        .data
        .slice(s![
            ..,
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ])
        .to_owned();
    let labels = record
        .labels
        .data
        .slice(s![
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ])
        .to_owned();
    Patch { image, labels }
}

/// Draw `n` random crops. With probability `fg_bias` the crop is chosen so
/// its center lies on a foreground voxel; otherwise the offset is uniform.
pub fn sample_patches(
    record: &VolumeRecord,
    patch_size: [usize; 3],
    n: usize,
    seed: u64,
    fg_bias: f64,
) -> Result<Vec<Patch>> {
    let shape = record.spatial_shape();
    for a in 0..3 {
        if patch_size[a] == 0 || patch_size[a] > shape[a] {
            return Err(Error::Shape(format!(
                "patch {patch_size:?} does not fit volume {shape:?}"
            )));
        }
    }
    if !(0.0..=1.0).contains(&fg_bias) {
        return Err(Error::Config(format!("fg_bias must be in [0,1], got {fg_bias}")));
    }

    let fg: Vec<[usize; 3]> = record
        .labels
        .data
        .indexed_iter()
        .filter(|(_, &v)| v > 0)
        .map(|((z, y, x), _)| [z, y, x])
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let origin = if !fg.is_empty() && rng.gen::<f64>() < fg_bias {
            // clamp so the chosen foreground voxel stays at the patch center
            // (or as close as the boundary allows)
            let c = fg[rng.gen_range(0..fg.len())];
            let mut o = [0usize; 3];
            for a in 0..3 {
                let half = patch_size[a] / 2;
                o[a] = c[a]
                    .saturating_sub(half)
                    .min(shape[a] - patch_size[a]);
            }
            o
        } else {
            [
                rng.gen_range(0..=shape[0] - patch_size[0]),
                rng.gen_range(0..=shape[1] - patch_size[1]),
                rng.gen_range(0..=shape[2] - patch_size[2]),
            ]
        };
        out.push(crop(record, origin, patch_size));
    }
    Ok(out)
}

fn flip_patch(patch: &mut Patch, axis: usize) {
    patch.image.invert_axis(Axis(axis + 1));
    patch.labels.invert_axis(Axis(axis));
}

/// 90° rotation in the plane of spatial axes (a, b): transpose then flip.
fn rotate_patch(patch: &mut Patch, a: usize, b: usize) {
    patch.image.swap_axes(a + 1, b + 1);
    patch.labels.swap_axes(a, b);
    flip_patch(patch, a);
    // keep memory standard so later reshapes stay cheap and byte-stable
    patch.image = patch.image.as_standard_layout().to_owned();
    patch.labels = patch.labels.as_standard_layout().to_owned();
}

/// Geometric + intensity augmentation. Labels see only the geometric part.
///
/// Independently: each axis flips with p = 0.5; with p = 0.5 one right-angle
/// rotation in a random spatial plane; multiplicative intensity scale drawn
/// from [0.9, 1.1] and additive shift from [-0.1, 0.1].
pub fn augment(patch: &Patch, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = patch.clone();
    for axis in 0..3 {
        if rng.gen::<f64>() < 0.5 {
            flip_patch(&mut out, axis);
        }
    }
    if rng.gen::<f64>() < 0.5 {
        let planes = [(0usize, 1usize), (0, 2), (1, 2)];
        let (a, b) = planes[rng.gen_range(0..3)];
        // rotation in-plane requires square extents; skip otherwise
        if out.labels.shape()[a] == out.labels.shape()[b] {
            rotate_patch(&mut out, a, b);
        }
    }
    let scale = rng.gen_range(0.9..=1.1) as Real;
    let shift = rng.gen_range(-0.1..=0.1) as Real;
    out.image.mapv_inplace(|v| v * scale + shift);
    out
}
