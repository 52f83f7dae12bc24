//! Volume I/O, synthetic phantom generation, patch sampling, and training
//! augmentations.

mod io;
mod manifest;
mod patch;
mod phantom;

pub use io::{read_volume, write_volume, VolumeHeader};
pub use manifest::{build_manifest, load_manifest, save_manifest, Manifest, ManifestEntry, Split};
pub use patch::{augment, sample_patches, Patch};
pub use phantom::{generate_phantom, PhantomSpec, ShapeFamily};

use crate::codec::LabelVolume;
use crate::error::{Error, Result};
use crate::model::ImageVolume;
use crate::Real;

/// One dataset case: a multi-modality image and its label map on the same
/// grid.
#[derive(Debug, Clone)]
pub struct VolumeRecord {
    pub image: ImageVolume<Real>,
    pub labels: LabelVolume,
    pub case_id: String,
}

impl VolumeRecord {
    pub fn new(image: ImageVolume<Real>, labels: LabelVolume, case_id: String) -> Result<Self> {
        let (_, d, h, w) = image.data.dim();
        if (d, h, w) != labels.shape() {
            return Err(Error::Shape(format!(
                "image spatial shape {:?} != label shape {:?}",
                (d, h, w),
                labels.shape()
            )));
        }
        Ok(VolumeRecord {
            image,
            labels,
            case_id,
        })
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let (_, d, h, w) = self.image.data.dim();
        [d, h, w]
    }
}

/// Per-modality z-score over nonzero voxels, in place. Modalities that are
/// all zero (or constant over their nonzero support) are left untouched.
pub fn normalize_zscore(image: &mut ImageVolume<Real>) {
    let channels = image.data.shape()[0];
    for c in 0..channels {
        let mut ch = image.data.index_axis_mut(ndarray::Axis(0), c);
        let mut n = 0usize;
        let mut mean = 0.0f64;
        let mut m2 = 0.0f64;
        for &v in ch.iter() {
            if v != 0.0 {
                n += 1;
                let d = v as f64 - mean;
                mean += d / n as f64;
                m2 += d * (v as f64 - mean);
            }
        }
        if n < 2 {
            continue;
        }
        let std = (m2 / n as f64).sqrt();
        if std < 1e-12 {
            continue;
        }
        let (mean, inv_std) = (mean as Real, (1.0 / std) as Real);
        ch.mapv_inplace(|v| if v != 0.0 { (v - mean) * inv_std } else { 0.0 });
    }
}
