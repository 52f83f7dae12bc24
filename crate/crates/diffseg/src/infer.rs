//! Per-case inference: sliding-window tiling over the volume, a fused
//! reverse-diffusion prediction per tile, weighted stitching back.

use ndarray::{Array4, ArrayView4};

use crate::diffusion::{DdimPlan, NoiseSchedule};
use crate::error::Result;
use crate::model::{DiffUnet, ImageVolume, MultiScaleFeatures};
use crate::scalar::Scalar;
use crate::sliding::{crop_from_patch, extract_tile, pad_to_patch, plan_tiles, stitch, Blend};
use crate::suf::{run_suf_inference, FusionConfig};

/// How the per-step predictions collapse to one output volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Uncertainty-weighted fusion over all steps.
    Suf,
    /// Unweighted fusion (all weights 1).
    Simple,
    /// Final-step mean only, no fusion.
    LastStep,
}

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub ddim_steps: usize,
    pub eta: f64,
    /// Stochastic trajectories per tile.
    pub num_samples: usize,
    pub fusion: FusionMode,
    /// Zero the feature-encoder fusion (the "basic" ablation arm) when false.
    pub use_fe: bool,
    pub patch_size: [usize; 3],
    pub overlap: f64,
    pub blend: Blend,
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            ddim_steps: 10,
            eta: 0.0,
            num_samples: 4,
            fusion: FusionMode::Suf,
            use_fe: true,
            patch_size: [96, 96, 96],
            overlap: 0.5,
            blend: Blend::Gaussian,
            seed: 0,
        }
    }
}

/// Fused class-probability volume, shape (N, D, H, W), for one case.
pub fn infer_volume<S: Scalar>(
    model: &DiffUnet<S>,
    image: &ImageVolume<S>,
    sched: &NoiseSchedule<S>,
    opts: &InferOptions,
) -> Result<Array4<S>> {
    let (_, d, h, w) = image.data.dim();
    let orig = [d, h, w];
    let (padded, lo) = pad_to_patch(image.data.view(), opts.patch_size);
    let padded_shape = [padded.shape()[1], padded.shape()[2], padded.shape()[3]];
    let plan = plan_tiles(padded_shape, opts.patch_size, opts.overlap, opts.blend)?;
    let ddim = DdimPlan::evenly_spaced(sched.total_steps, opts.ddim_steps, opts.eta)?;
    let n = model.config.num_classes;
    let p = opts.patch_size;

    let fusion_cfg = FusionConfig {
        num_samples: opts.num_samples,
        scale: None,
        normalize: true,
        uniform_weights: opts.fusion == FusionMode::Simple,
    };

    let mut tiles = Vec::with_capacity(plan.positions.len());
    for (idx, &origin) in plan.positions.iter().enumerate() {
        let tile_img = ImageVolume::new(extract_tile(padded.view(), origin, p), image.spacing);
        let fe = if opts.use_fe {
            Some(model.feature_encoder_forward(&tile_img)?)
        } else {
            None
        };
        let fe_ref: Option<&MultiScaleFeatures<S>> = fe.as_ref();
        let denoiser = |x_t: ArrayView4<S>, t: usize| {
            model.denoising_forward(&tile_img, x_t, t, fe_ref)
        };
        // decorrelate tile seeds while keeping them reproducible
        let tile_seed = opts
            .seed
            .wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let out = run_suf_inference(
            &denoiser,
            (n, p[0], p[1], p[2]),
            &ddim,
            sched,
            &fusion_cfg,
            tile_seed,
        )?;
        let fused = match opts.fusion {
            FusionMode::Suf | FusionMode::Simple => out.fused,
            FusionMode::LastStep => out
                .steps
                .last()
                .expect("plan guarantees at least one step")
                .mean
                .clone(),
        };
        tiles.push(fused);
    }
    let stitched = stitch(&plan, &tiles, n, padded_shape)?;
    Ok(crop_from_patch(stitched.view(), lo, orig))
}
