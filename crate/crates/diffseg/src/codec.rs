//! Conversion between discrete label maps and the multi-channel continuous
//! signal the diffusion model denoises.
//!
//! Channel `c` corresponds to label value `c`; the encoded signal lives in
//! [0, 1] so that sigmoid outputs double as predicted signal and as
//! per-class probabilities.

use ndarray::{Array3, Array4, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Discrete label map with voxel spacing metadata (mm per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub data: Array3<u8>,
    pub spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, spacing: [f64; 3]) -> Self {
        assert!(spacing.iter().all(|s| *s > 0.0), "spacing must be positive");
        LabelVolume { data, spacing }
    }

    pub fn with_unit_spacing(data: Array3<u8>) -> Self {
        LabelVolume::new(data, [1.0; 3])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// N-channel continuous embedding of a label map, shape (N, D, W, H).
#[derive(Debug, Clone)]
pub struct OneHotVolume<S: Scalar> {
    pub data: Array4<S>,
    pub num_classes: usize,
}

/// How to collapse a predicted probability volume back to labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Per-voxel argmax over channels; ties break to the lowest index.
    Argmax,
    /// Per-channel binary masks `pred_c >= tau`; supports overlapping regions.
    PerChannelThreshold(f64),
}

#[derive(Debug, Clone)]
pub enum Decoded {
    Labels(Array3<u8>),
    /// One binary mask per channel, shape (N, D, W, H), entries in {0, 1}.
    Masks(Array4<u8>),
}

pub fn encode_one_hot<S: Scalar>(
    labels: &LabelVolume,
    num_classes: usize,
) -> Result<OneHotVolume<S>> {
    let (d, w, h) = labels.shape();
    if let Some(&bad) = labels.data.iter().find(|&&v| (v as usize) >= num_classes) {
        return Err(Error::LabelOutOfRange {
            value: bad as u32,
            num_classes,
        });
    }
    let mut data = Array4::<S>::zeros((num_classes, d, w, h));
    for ((i, j, k), &v) in labels.data.indexed_iter() {
        data[[v as usize, i, j, k]] = S::one();
    }
    Ok(OneHotVolume { data, num_classes })
}

/// Per-voxel argmax over channels, lowest index winning ties.
pub fn decode_argmax<S: Scalar>(pred: ArrayView4<S>) -> Array3<u8> {
    let (n, d, w, h) = pred.dim();
    assert!(n > 0 && n <= 256, "channel count must fit in u8 labels");
    let mut out = Array3::<u8>::zeros((d, w, h));
    for i in 0..d {
        for j in 0..w {
            for k in 0..h {
                let mut best = 0usize;
                let mut best_v = pred[[0, i, j, k]];
                for c in 1..n {
                    let v = pred[[c, i, j, k]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out[[i, j, k]] = best as u8;
            }
        }
    }
    out
}

/// Per-channel binary masks `pred_c >= tau`.
pub fn decode_threshold<S: Scalar>(pred: ArrayView4<S>, tau: f64) -> Array4<u8> {
    let tau = S::from_double(tau);
    pred.map(|&v| u8::from(v >= tau))
}

pub fn decode<S: Scalar>(pred: &OneHotVolume<S>, mode: DecodeMode) -> Decoded {
    match mode {
        DecodeMode::Argmax => Decoded::Labels(decode_argmax(pred.data.view())),
        DecodeMode::PerChannelThreshold(tau) => {
            Decoded::Masks(decode_threshold(pred.data.view(), tau))
        }
    }
}

/// Per-channel voxel counts of an encoded volume (diagnostics and tests).
pub fn channel_sums<S: Scalar>(vol: &OneHotVolume<S>) -> Vec<f64> {
    vol.data
        .axis_iter(Axis(0))
        .map(|ch| ch.iter().map(|v| v.to_double()).sum())
        .collect()
}
