//! Sliding-window tiling for volumes larger than the network patch size,
//! with weighted stitching of overlapping tile predictions.
//!
//! Tile positions are computed from a fractional overlap; the last tile on
//! each axis is clamped flush to the volume boundary. Stitching accumulates
//! `weight * prediction` and normalizes per voxel, so constant inputs come
//! out constant regardless of tile layout.

use ndarray::{s, Array3, Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Blending profile applied to each tile before accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blend {
    /// Uniform weight 1 everywhere in the tile.
    Constant,
    /// Separable Gaussian centered in the tile, sigma = patch/8 per axis,
    /// floored at 1e-3 so border voxels keep nonzero weight.
    Gaussian,
}

#[derive(Debug, Clone)]
pub struct TilingPlan {
    pub patch_size: [usize; 3],
    pub overlap: f64,
    /// Origin (low corner) of each tile, z-major order.
    pub positions: Vec<[usize; 3]>,
    pub blend: Blend,
}

fn axis_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).ceil() as usize).max(1);
    let mut starts = Vec::new();
    let mut pos = 0usize;
    loop {
        if pos + patch >= extent {
            starts.push(extent - patch);
            break;
        }
        starts.push(pos);
        pos += stride;
    }
    starts
}

/// Enumerate tile origins covering `vol_shape` with the given fractional
/// overlap in [0, 1).
pub fn plan_tiles(
    vol_shape: [usize; 3],
    patch_size: [usize; 3],
    overlap: f64,
    blend: Blend,
) -> Result<TilingPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!(
            "tile overlap must be in [0, 1), got {overlap}"
        )));
    }
    for a in 0..3 {
        if patch_size[a] == 0 || vol_shape[a] == 0 {
            return Err(Error::Shape("zero extent in tiling plan".into()));
        }
        if patch_size[a] > vol_shape[a] {
            return Err(Error::Shape(format!(
                "patch {:?} exceeds volume {:?}; pad the volume first",
                patch_size, vol_shape
            )));
        }
    }
    let sz = axis_starts(vol_shape[0], patch_size[0], overlap);
    let sy = axis_starts(vol_shape[1], patch_size[1], overlap);
    let sx = axis_starts(vol_shape[2], patch_size[2], overlap);
    let mut positions = Vec::with_capacity(sz.len() * sy.len() * sx.len());
    for &z in &sz {
        for &y in &sy {
            for &x in &sx {
                positions.push([z, y, x]);
            }
        }
    }
    Ok(TilingPlan {
        patch_size,
        overlap,
        positions,
        blend,
    })
}

fn blend_weights<S: Scalar>(patch: [usize; 3], blend: Blend) -> Array3<S> {
    match blend {
        Blend::Constant => Array3::ones((patch[0], patch[1], patch[2])),
        Blend::Gaussian => {
            let axis = |n: usize| -> Vec<f64> {
                let c = (n as f64 - 1.0) / 2.0;
                let sigma = (n as f64 / 8.0).max(1e-6);
                (0..n)
                    .map(|i| {
                        let d = (i as f64 - c) / sigma;
                        (-0.5 * d * d).exp().max(1e-3)
                    })
                    .collect()
            };
            let (wz, wy, wx) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
            Array3::from_shape_fn((patch[0], patch[1], patch[2]), |(z, y, x)| {
                S::from_double(wz[z] * wy[y] * wx[x])
            })
        }
    }
}

/// Extract the tile at `origin` from a (C, D, H, W) volume.
pub fn extract_tile<S: Scalar>(
    volume: ArrayView4<S>,
    origin: [usize; 3],
    patch: [usize; 3],
) -> Array4<S> {
    volume
        .slice(s![
            ..,
            origin[0]..origin[0] + patch[0],
            origin[1]..origin[1] + patch[1],
            origin[2]..origin[2] + patch[2]
        ])
        .to_owned()
}

/// Combine per-tile predictions back into a full (C, D, H, W) volume.
///
/// `tiles` must be in the same order as `plan.positions`.
pub fn stitch<S: Scalar>(
    plan: &TilingPlan,
    tiles: &[Array4<S>],
    channels: usize,
    vol_shape: [usize; 3],
) -> Result<Array4<S>> {
    if tiles.len() != plan.positions.len() {
        return Err(Error::Shape(format!(
            "expected {} tiles, got {}",
            plan.positions.len(),
            tiles.len()
        )));
    }
    let p = plan.patch_size;
    let mut acc = Array4::<S>::zeros((channels, vol_shape[0], vol_shape[1], vol_shape[2]));
    let mut wsum = Array3::<S>::zeros((vol_shape[0], vol_shape[1], vol_shape[2]));
    let weight = blend_weights::<S>(p, plan.blend);
    for (tile, &orig) in tiles.iter().zip(&plan.positions) {
        if tile.dim() != (channels, p[0], p[1], p[2]) {
            return Err(Error::Shape("tile shape mismatch in stitch".into()));
        }
        let mut acc_s = acc.slice_mut(s![
            ..,
            orig[0]..orig[0] + p[0],
            orig[1]..orig[1] + p[1],
            orig[2]..orig[2] + p[2]
        ]);
        for c in 0..channels {
            ndarray::Zip::from(acc_s.index_axis_mut(ndarray::Axis(0), c))
                .and(tile.index_axis(ndarray::Axis(0), c))
                .and(&weight)
                .for_each(|a, &t, &w| *a = *a + t * w);
        }
        let mut wsum_s = wsum.slice_mut(s![
            orig[0]..orig[0] + p[0],
            orig[1]..orig[1] + p[1],
            orig[2]..orig[2] + p[2]
        ]);
        wsum_s += &weight;
    }
    for c in 0..channels {
        ndarray::Zip::from(acc.index_axis_mut(ndarray::Axis(0), c))
            .and(&wsum)
            .for_each(|a, &w| {
                if w > S::zero() {
                    *a = *a / w;
                }
            });
    }
    Ok(acc)
}

/// Pad a (C, D, H, W) volume with zeros, split symmetrically (extra voxel on
/// the high side), so every spatial extent reaches at least `patch`.
/// Returns the padded volume and the low-side offsets for cropping back.
pub fn pad_to_patch<S: Scalar>(
    volume: ArrayView4<S>,
    patch: [usize; 3],
) -> (Array4<S>, [usize; 3]) {
    let (c, d, h, w) = volume.dim();
    let dims = [d, h, w];
    let mut lo = [0usize; 3];
    let mut out_dims = dims;
    for a in 0..3 {
        if dims[a] < patch[a] {
            let pad = patch[a] - dims[a];
            lo[a] = pad / 2;
            out_dims[a] = patch[a];
        }
    }
    let mut out = Array4::<S>::zeros((c, out_dims[0], out_dims[1], out_dims[2]));
    out.slice_mut(s![
        ..,
        lo[0]..lo[0] + d,
        lo[1]..lo[1] + h,
        lo[2]..lo[2] + w
    ])
    .assign(&volume);
    (out, lo)
}

/// Inverse of [`pad_to_patch`]: crop back to the original spatial shape.
pub fn crop_from_patch<S: Scalar>(
    padded: ArrayView4<S>,
    lo: [usize; 3],
    orig: [usize; 3],
) -> Array4<S> {
    padded
        .slice(s![
            ..,
            lo[0]..lo[0] + orig[0],
            lo[1]..lo[1] + orig[1],
            lo[2]..lo[2] + orig[2]
        ])
        .to_owned()
}
