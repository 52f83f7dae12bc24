//! Step-Uncertainty based Fusion: run S stochastic reverse trajectories,
//! form per-step mean predictions and entropy uncertainty, weight each step
//! by its index and certainty, and combine.
//!
//! The weighted sum is normalized by the accumulated weight per voxel and
//! channel so the fused output stays a probability; the raw (unnormalized)
//! sum is available behind a flag.

use ndarray::{Array4, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::{sample_loop, DdimPlan, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::act::sigmoid_scalar;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Stochastic predictions per step used for the uncertainty estimate.
    pub num_samples: usize,
    /// Divisor of the step index inside the sigmoid; defaults to the
    /// number of DDIM steps so the argument sweeps (1/K, 1].
    pub scale: Option<f64>,
    /// Normalize the weighted sum by the accumulated weights.
    pub normalize: bool,
    /// Force all weights to one (the "simple fusion" ablation arm).
    pub uniform_weights: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            num_samples: 4,
            scale: None,
            normalize: true,
            uniform_weights: false,
        }
    }
}

/// Per-step aggregation of the S trajectory predictions.
#[derive(Debug, Clone)]
pub struct StepPrediction<S: Scalar> {
    /// 1-based step index; 1 is the noisiest step, K the cleanest.
    pub step_index: usize,
    pub samples: Vec<Array4<S>>,
    pub mean: Array4<S>,
    pub uncertainty: Array4<S>,
    pub weight: Array4<S>,
}

/// Elementwise arithmetic mean of the sample volumes.
pub fn mean_prediction<S: Scalar>(samples: &[Array4<S>]) -> Result<Array4<S>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("mean_prediction over no samples".into()))?;
    let mut acc = first.clone();
    for s in &samples[1..] {
        if s.dim() != first.dim() {
            return Err(Error::Shape("sample shape mismatch in mean_prediction".into()));
        }
        acc += s;
    }
    let inv = S::from_double(1.0 / samples.len() as f64);
    acc.mapv_inplace(|v| v * inv);
    Ok(acc)
}

/// Entropy-style uncertainty -p * ln(p), with 0 ln 0 = 0.
pub fn uncertainty_map<S: Scalar>(mean: ArrayView4<S>) -> Array4<S> {
    mean.mapv(|p| {
        if p <= S::zero() {
            S::zero()
        } else {
            -p * p.ln()
        }
    })
}

/// Per-voxel fusion weight exp(sigmoid(i / scale) * (1 - u)).
pub fn fusion_weight<S: Scalar>(
    step_index: usize,
    uncertainty: ArrayView4<S>,
    scale: f64,
) -> Array4<S> {
    let sig = sigmoid_scalar(S::from_double(step_index as f64 / scale));
    uncertainty.mapv(|u| (sig * (S::one() - u)).exp())
}

/// Weighted combination of the per-step means.
pub fn fuse<S: Scalar>(steps: &[StepPrediction<S>], normalize: bool) -> Result<Array4<S>> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Empty("fuse over no steps".into()))?;
    let mut num = Array4::<S>::zeros(first.mean.raw_dim());
    let mut den = Array4::<S>::zeros(first.mean.raw_dim());
    for step in steps {
        if step.mean.dim() != first.mean.dim() {
            return Err(Error::Shape("step shape mismatch in fuse".into()));
        }
        ndarray::Zip::from(&mut num)
            .and(&mut den)
            .and(&step.mean)
            .and(&step.weight)
            .for_each(|n, d, &m, &w| {
                *n = *n + w * m;
                *d = *d + w;
            });
    }
    if normalize {
        ndarray::Zip::from(&mut num).and(&den).for_each(|n, &d| {
            *n = *n / d;
        });
    }
    Ok(num)
}

/// Fused output plus the per-step diagnostics that produced it.
pub struct SufOutput<S: Scalar> {
    pub fused: Array4<S>,
    pub steps: Vec<StepPrediction<S>>,
}

/// Run S independently seeded reverse trajectories synchronized on the same
/// DDIM timesteps, aggregate per step, and fuse.
pub fn run_suf_inference<S, M>(
    model: &M,
    shape: (usize, usize, usize, usize),
    plan: &DdimPlan,
    sched: &NoiseSchedule<S>,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<SufOutput<S>>
where
    S: Scalar,
    M: Denoiser<S> + Sync,
{
    if cfg.num_samples < 1 {
        return Err(Error::Config("fusion needs at least one sample".into()));
    }
    // trajectories are independent; run them in parallel and aggregate
    // in fixed order so the result is deterministic
    let trajectories: Vec<Vec<Array4<S>>> = (0..cfg.num_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
            sample_loop(model, shape, plan, sched, &mut rng)
        })
        .collect::<Result<_>>()?;

    let k = plan.len();
    let scale = cfg.scale.unwrap_or(k as f64);
    let mut steps = Vec::with_capacity(k);
    for i in 0..k {
        let samples: Vec<Array4<S>> = trajectories.iter().map(|t| t[i].clone()).collect();
        let mean = mean_prediction(&samples)?;
        let uncertainty = uncertainty_map(mean.view());
        let step_index = i + 1;
        let weight = if cfg.uniform_weights {
            Array4::<S>::ones(mean.raw_dim())
        } else {
            fusion_weight(step_index, uncertainty.view(), scale)
        };
        steps.push(StepPrediction {
            step_index,
            samples,
            mean,
            uncertainty,
            weight,
        });
    }
    let fused = fuse(&steps, cfg.normalize)?;
    Ok(SufOutput { fused, steps })
}
