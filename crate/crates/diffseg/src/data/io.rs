//! Bit-exact volume serialization: a JSON sidecar header next to raw
//! little-endian payload files in C order.
//!
//! `write_volume(record, base)` produces `base.json` plus `base.img.raw`
//! (float32 image) and `base.lbl.raw` (uint8 labels); `read_volume(base)`
//! reverses it exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::codec::LabelVolume;
use crate::error::{Error, Result};
use crate::model::ImageVolume;
use crate::Real;

use super::VolumeRecord;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadInfo {
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub case_id: String,
    /// Spatial shape (D, H, W).
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub modalities: usize,
    /// Always "little"; recorded so the format is self-describing.
    pub byte_order: String,
    pub image: PayloadInfo,
    pub labels: PayloadInfo,
}

fn header_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(record: &VolumeRecord, base: &Path) -> Result<()> {
    let [d, h, w] = record.spatial_shape();
    let modalities = record.image.data.shape()[0];
    let img_name = format!(
        "{}.img.raw",
        base.file_name().unwrap_or_default().to_string_lossy()
    );
    let lbl_name = format!(
        "{}.lbl.raw",
        base.file_name().unwrap_or_default().to_string_lossy()
    );
    let header = VolumeHeader {
        case_id: record.case_id.clone(),
        shape: [d, h, w],
        spacing: record.labels.spacing,
        modalities,
        byte_order: "little".into(),
        image: PayloadInfo {
            dtype: "float32".into(),
            file: img_name.clone(),
        },
        labels: PayloadInfo {
            dtype: "uint8".into(),
            file: lbl_name.clone(),
        },
    };
    let hp = header_path(base);
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Decode {
            path: hp.clone(),
            reason: e.to_string(),
        })?;
    write_bytes(&hp, json.as_bytes())?;

    let img = record
        .image
        .data
        .as_standard_layout();
    let mut img_bytes = Vec::with_capacity(img.len() * 4);
    for v in img.iter() {
        img_bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let dir = base.parent().unwrap_or_else(|| Path::new("."));
    write_bytes(&dir.join(&img_name), &img_bytes)?;

    let lbl = record.labels.data.as_standard_layout();
    let lbl_bytes: Vec<u8> = lbl.iter().copied().collect();
    write_bytes(&dir.join(&lbl_name), &lbl_bytes)?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(base: &Path) -> Result<VolumeRecord> {
    let hp = header_path(base);
    let raw = read_bytes(&hp)?;
    let header: VolumeHeader =
        serde_json::from_slice(&raw).map_err(|e| Error::Decode {
            path: hp.clone(),
            reason: format!("invalid header: {e}"),
        })?;
    if header.byte_order != "little" {
        return Err(Error::Decode {
            path: hp.clone(),
            reason: format!("unsupported byte order {:?}", header.byte_order),
        });
    }
    if header.image.dtype != "float32" {
        return Err(Error::Decode {
            path: hp.clone(),
            reason: format!("unsupported image dtype {:?}", header.image.dtype),
        });
    }
    if header.labels.dtype != "uint8" {
        return Err(Error::Decode {
            path: hp,
            reason: format!("unsupported label dtype {:?}", header.labels.dtype),
        });
    }
    let [d, h, w] = header.shape;
    let voxels = d * h * w;
    let dir = base.parent().unwrap_or_else(|| Path::new("."));

    let img_path = dir.join(&header.image.file);
    let img_bytes = read_bytes(&img_path)?;
    let expect = header.modalities * voxels * 4;
    if img_bytes.len() != expect {
        return Err(Error::Decode {
            path: img_path,
            reason: format!(
                "payload size {} != expected {} (modalities {} × {} voxels × 4B)",
                img_bytes.len(),
                expect,
                header.modalities,
                voxels
            ),
        });
    }
    let values: Vec<Real> = img_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
        .collect();
    let image = Array4::from_shape_vec((header.modalities, d, h, w), values)
        .map_err(|e| Error::Decode {
            path: img_path,
            reason: e.to_string(),
        })?;

    let lbl_path = dir.join(&header.labels.file);
    let lbl_bytes = read_bytes(&lbl_path)?;
    if lbl_bytes.len() != voxels {
        return Err(Error::Decode {
            path: lbl_path,
            reason: format!("payload size {} != expected {voxels}", lbl_bytes.len()),
        });
    }
    let labels = Array3::from_shape_vec((d, h, w), lbl_bytes).map_err(|e| Error::Decode {
        path: lbl_path,
        reason: e.to_string(),
    })?;

    VolumeRecord::new(
        ImageVolume::new(image, header.spacing),
        LabelVolume::new(labels, header.spacing),
        header.case_id,
    )
}
