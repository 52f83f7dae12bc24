//! Synthetic phantom volumes: nested labeled structures with
//! class-dependent modality intensities plus Gaussian noise. A desk-scale
//! stand-in for clinical datasets that keeps every pipeline stage honest.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::LabelVolume;
use crate::error::{Error, Result};
use crate::model::ImageVolume;
use crate::Real;

use super::VolumeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Concentric ellipsoids: class k+1 strictly inside class k.
    NestedEllipsoids,
    /// Concentric axis-aligned boxes with the same nesting.
    NestedBoxes,
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    /// Total classes including background; >= 2.
    pub num_classes: usize,
    pub modalities: usize,
    pub family: ShapeFamily,
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: [32, 32, 32],
            num_classes: 3,
            modalities: 1,
            family: ShapeFamily::NestedEllipsoids,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Class-dependent base intensity for modality `m`: distinct per class and
/// modality so segmentation is learnable from intensity alone.
fn base_intensity(class: usize, modality: usize, num_classes: usize) -> Real {
    let c = class as f64 / (num_classes - 1) as f64;
    // modality 0 ramps up with class, odd modalities ramp down, so the
    // channels carry complementary information
    let v = if modality % 2 == 0 { 0.2 + 0.7 * c } else { 0.9 - 0.7 * c };
    v as Real
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumeRecord> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "phantom needs >= 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.modalities < 1 {
        return Err(Error::Config("phantom needs >= 1 modality".into()));
    }
    let [d, h, w] = spec.grid;
    // the innermost structure must still hold at least one voxel
    if d < 2 * spec.num_classes || h < 2 * spec.num_classes || w < 2 * spec.num_classes {
        return Err(Error::Config(format!(
            "grid {:?} too small for {} nested classes",
            spec.grid, spec.num_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // jittered center keeps cases distinct; margin guarantees the outermost
    // structure stays inside the grid
    let center = [
        d as f64 / 2.0 + rng.gen_range(-(d as f64) / 10.0..=d as f64 / 10.0),
        h as f64 / 2.0 + rng.gen_range(-(h as f64) / 10.0..=h as f64 / 10.0),
        w as f64 / 2.0 + rng.gen_range(-(w as f64) / 10.0..=w as f64 / 10.0),
    ];
    let max_radius = [
        d as f64 * 0.35 * rng.gen_range(0.85..=1.0),
        h as f64 * 0.35 * rng.gen_range(0.85..=1.0),
        w as f64 * 0.35 * rng.gen_range(0.85..=1.0),
    ];

    let fg = spec.num_classes - 1;
    let mut labels = Array3::<u8>::zeros((d, h, w));
    // paint outermost first; inner classes overwrite
    for k in 1..=fg {
        // radius shrinks linearly with depth but never below ~1.5 voxels
        let shrink = 1.0 - (k - 1) as f64 / fg as f64 * 0.8;
        let r = [
            (max_radius[0] * shrink).max(1.5),
            (max_radius[1] * shrink).max(1.5),
            (max_radius[2] * shrink).max(1.5),
        ];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let dz = (z as f64 + 0.5 - center[0]) / r[0];
                    let dy = (y as f64 + 0.5 - center[1]) / r[1];
                    let dx = (x as f64 + 0.5 - center[2]) / r[2];
                    let inside = match spec.family {
                        ShapeFamily::NestedEllipsoids => dz * dz + dy * dy + dx * dx <= 1.0,
                        ShapeFamily::NestedBoxes => {
                            dz.abs() <= 1.0 && dy.abs() <= 1.0 && dx.abs() <= 1.0
                        }
                    };
                    if inside {
                        labels[[z, y, x]] = k as u8;
                    }
                }
            }
        }
    }
    // construction guarantee: the voxel nearest the center carries the
    // innermost class, and the margin keeps background present
    let cz = (center[0] as usize).min(d - 1);
    let cy = (center[1] as usize).min(h - 1);
    let cx = (center[2] as usize).min(w - 1);
    labels[[cz, cy, cx]] = fg as u8;
    debug_assert_eq!(labels[[0, 0, 0]], 0);

    let mut image = Array4::<Real>::zeros((spec.modalities, d, h, w));
    for m in 0..spec.modalities {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let class = labels[[z, y, x]] as usize;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    image[[m, z, y, x]] =
                        base_intensity(class, m, spec.num_classes) + (spec.noise * noise) as Real;
                }
            }
        }
    }

    VolumeRecord::new(
        ImageVolume::new(image, [1.0; 3]),
        LabelVolume::with_unit_spacing(labels),
        format!("phantom-{:08x}", spec.seed),
    )
}
