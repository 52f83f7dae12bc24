//! Dice score and 95% Hausdorff distance (HD95) on binary masks, plus a
//! per-region evaluation report over label volumes.
//!
//! HD95 is the 95th percentile (linear interpolation between order
//! statistics) of the pooled symmetric surface-to-surface nearest-neighbor
//! distances, in millimetres under the volume's voxel spacing. Surface
//! voxels are mask voxels with at least one face-adjacent background
//! neighbor; the volume border counts as background. Nearest distances are
//! computed with an exact separable Euclidean distance transform, so the
//! result matches brute-force pairwise search.
//!
//! Empty-mask convention: both masks empty gives dice 1.0 and hd95 0.0;
//! exactly one empty gives dice 0.0 and an undefined hd95 (`None`), which
//! reports as a sentinel and is excluded from averages.

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{Decoded, LabelVolume};
use crate::error::{Error, Result};

/// Dice = 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
pub fn dice_score(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "dice_score shape mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        inter += (a && b) as u64;
        total += a as u64 + b as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mask voxels with a face-adjacent background neighbor (border counts as
/// background).
fn surface_voxels(mask: ArrayView3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] {
                    continue;
                }
                let exposed = (z == 0 || !mask[[z - 1, y, x]])
                    || (z + 1 == d || !mask[[z + 1, y, x]])
                    || (y == 0 || !mask[[z, y - 1, x]])
                    || (y + 1 == h || !mask[[z, y + 1, x]])
                    || (x == 0 || !mask[[z, y, x - 1]])
                    || (x + 1 == w || !mask[[z, y, x + 1]]);
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// One pass of the exact 1-D squared distance transform (lower envelope of
/// parabolas) over samples at physical coordinates `i * spacing`.
fn dt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let x = |i: usize| i as f64 * spacing;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                // the only parabola so far is at infinity; replace it
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = x(q) - x(p);
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the
/// nearest seed voxel, under anisotropic spacing.
fn edt_squared(seeds: &[[usize; 3]], shape: (usize, usize, usize), spacing: [f64; 3]) -> Array3<f64> {
    let (d, h, w) = shape;
    let mut dist = Array3::<f64>::from_elem(shape, f64::INFINITY);
    for &[z, y, x] in seeds {
        dist[[z, y, x]] = 0.0;
    }
    // transform each axis in turn; the composition is exact
    let mut buf_in = vec![0.0f64; d.max(h).max(w)];
    let mut buf_out = vec![0.0f64; d.max(h).max(w)];
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                buf_in[z] = dist[[z, y, x]];
            }
            dt_1d(&buf_in[..d], spacing[0], &mut buf_out[..d]);
            for z in 0..d {
                dist[[z, y, x]] = buf_out[z];
            }
        }
    }
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                buf_in[y] = dist[[z, y, x]];
            }
            dt_1d(&buf_in[..h], spacing[1], &mut buf_out[..h]);
            for y in 0..h {
                dist[[z, y, x]] = buf_out[y];
            }
        }
    }
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                buf_in[x] = dist[[z, y, x]];
            }
            dt_1d(&buf_in[..w], spacing[2], &mut buf_out[..w]);
            for x in 0..w {
                dist[[z, y, x]] = buf_out[x];
            }
        }
    }
    dist
}

/// p-th percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95% Hausdorff distance in mm. `None` when exactly one mask is empty;
/// 0.0 when both are empty.
pub fn hd95(
    pred: ArrayView3<bool>,
    gt: ArrayView3<bool>,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "hd95 shape mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let pred_empty = !pred.iter().any(|&v| v);
    let gt_empty = !gt.iter().any(|&v| v);
    match (pred_empty, gt_empty) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let shape = pred.dim();
    let dist_to_gt = edt_squared(&sg, shape, spacing);
    let dist_to_pred = edt_squared(&sp, shape, spacing);
    let mut pooled: Vec<f64> = Vec::with_capacity(sp.len() + sg.len());
    pooled.extend(sp.iter().map(|&[z, y, x]| dist_to_gt[[z, y, x]].sqrt()));
    pooled.extend(sg.iter().map(|&[z, y, x]| dist_to_pred[[z, y, x]].sqrt()));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(Some(percentile(&pooled, 95.0)))
}

/// Evaluation region: a named union of class labels. Regions may overlap
/// or nest (e.g. whole structure ⊇ core ⊇ innermost).
#[derive(Debug, Clone, Serialize)]
pub struct RegionDef {
    pub name: String,
    pub labels: Vec<u8>,
}

/// Named set of evaluation regions.
#[derive(Debug, Clone, Serialize)]
pub struct RegionSpec {
    pub regions: Vec<RegionDef>,
}

impl RegionSpec {
    /// One region per foreground class: labels 1..num_classes, each named
    /// `class-k` and nesting all classes ≥ k.
    pub fn nested(num_classes: usize) -> Self {
        let regions = (1..num_classes)
            .map(|k| RegionDef {
                name: format!("class-{k}"),
                labels: (k as u8..num_classes as u8).collect(),
            })
            .collect();
        RegionSpec { regions }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionScore {
    pub region: String,
    pub dice: f64,
    /// mm; `None` when exactly one mask is empty (excluded from averages).
    pub hd95: Option<f64>,
}

fn region_mask(labels: ArrayView3<u8>, def: &RegionDef) -> Array3<bool> {
    labels.map(|v| def.labels.contains(v))
}

/// Per-region Dice and HD95 plus an unweighted `Average` row. The average
/// skips undefined HD95 entries.
pub fn region_report(
    pred: &Decoded,
    gt: &LabelVolume,
    spec: &RegionSpec,
) -> Result<Vec<RegionScore>> {
    if spec.regions.is_empty() {
        return Err(Error::Empty("region spec has no regions".into()));
    }
    let scores: Vec<RegionScore> = spec
        .regions
        .par_iter()
        .enumerate()
        .map(|(idx, def)| -> Result<RegionScore> {
            if def.labels.is_empty() {
                return Err(Error::UnknownRegion(def.name.clone()));
            }
            let pred_mask = match pred {
                Decoded::Labels(labels) => {
                    if labels.dim() != gt.data.dim() {
                        return Err(Error::Shape("prediction/label shape mismatch".into()));
                    }
                    region_mask(labels.view(), def)
                }
                Decoded::Masks(masks) => {
                    // threshold decode: channel idx+1 is the evaluation mask
                    // for the idx-th (nested) region
                    let ch = idx + 1;
                    if ch >= masks.shape()[0] {
                        return Err(Error::UnknownRegion(def.name.clone()));
                    }
                    masks.index_axis(ndarray::Axis(0), ch).map(|&v| v != 0)
                }
            };
            let gt_mask = region_mask(gt.data.view(), def);
            Ok(RegionScore {
                region: def.name.clone(),
                dice: dice_score(pred_mask.view(), gt_mask.view())?,
                hd95: hd95(pred_mask.view(), gt_mask.view(), gt.spacing)?,
            })
        })
        .collect::<Result<_>>()?;

    let n = scores.len() as f64;
    let avg_dice = scores.iter().map(|s| s.dice).sum::<f64>() / n;
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.hd95).collect();
    let avg_hd = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let mut out = scores;
    out.push(RegionScore {
        region: "Average".into(),
        dice: avg_dice,
        hd95: avg_hd,
    });
    Ok(out)
}

/// Delimited-text rendering of a score table (regions as columns, one
/// Dice row and one HD95 row). Undefined HD95 prints as `n/a`.
pub fn format_table(scores: &[RegionScore]) -> String {
    let mut header = String::from("metric");
    let mut dice = String::from("dice");
    let mut hd = String::from("hd95_mm");
    for s in scores {
        header.push('\t');
        header.push_str(&s.region);
        dice.push_str(&format!("\t{:.4}", s.dice));
        match s.hd95 {
            Some(v) => hd.push_str(&format!("\t{v:.4}")),
            None => hd.push_str("\tn/a"),
        }
    }
    format!("{header}\n{dice}\n{hd}\n")
}
