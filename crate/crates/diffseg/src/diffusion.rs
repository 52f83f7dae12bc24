//! Noise schedule, forward noising, and the DDIM reverse sampler for
//! models that predict the clean signal directly.

use ndarray::{Array4, ArrayView4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Precomputed beta / alpha / alpha_bar tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<S: Scalar> {
    pub total_steps: usize,
    pub beta: Vec<S>,
    pub alpha: Vec<S>,
    pub alpha_bar: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Linear beta schedule from `beta_start` to `beta_end` over `total_steps`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta bounds: need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = Vec::with_capacity(total_steps);
        let mut alpha = Vec::with_capacity(total_steps);
        let mut alpha_bar = Vec::with_capacity(total_steps);
        let mut prod = 1.0f64;
        for t in 0..total_steps {
            let frac = if total_steps == 1 {
                0.0
            } else {
                t as f64 / (total_steps - 1) as f64
            };
            let b = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - b;
            beta.push(S::from_double(b));
            alpha.push(S::from_double(1.0 - b));
            alpha_bar.push(S::from_double(prod));
        }
        debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
        Ok(NoiseSchedule {
            total_steps,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// alpha_bar at `t`, where t = -1 denotes the clean endpoint (alpha_bar = 1).
    pub fn alpha_bar_at(&self, t: i64) -> S {
        if t < 0 {
            S::one()
        } else {
            self.alpha_bar[t as usize]
        }
    }
}

/// Strictly decreasing timestep subsequence for DDIM sampling.
#[derive(Debug, Clone)]
pub struct DdimPlan {
    pub timesteps: Vec<usize>,
    pub eta: f64,
}

impl DdimPlan {
    /// `steps` evenly spaced timesteps over the schedule, noisiest first.
    /// With total_steps=1000 and steps=10 this yields 999, 899, ..., 99;
    /// the final reverse step lands on the clean endpoint t = -1.
    pub fn evenly_spaced(total_steps: usize, steps: usize, eta: f64) -> Result<Self> {
        if steps < 1 || steps > total_steps {
            return Err(Error::Config(format!(
                "DDIM steps must be in 1..=total_steps, got {steps} of {total_steps}"
            )));
        }
        if eta < 0.0 {
            return Err(Error::Config("eta must be >= 0".into()));
        }
        let timesteps: Vec<usize> = (0..steps)
            .map(|j| (steps - j) * total_steps / steps - 1)
            .collect();
        debug_assert!(timesteps.windows(2).all(|w| w[1] < w[0]));
        Ok(DdimPlan { timesteps, eta })
    }

    /// Successive (t, t_prev) pairs; the last pair has t_prev = -1.
    pub fn step_pairs(&self) -> Vec<(usize, i64)> {
        let mut pairs = Vec::with_capacity(self.timesteps.len());
        for (j, &t) in self.timesteps.iter().enumerate() {
            let t_prev = match self.timesteps.get(j + 1) {
                Some(&next) => next as i64,
                None => -1,
            };
            pairs.push((t, t_prev));
        }
        pairs
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

/// Forward noising: x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn q_sample<S: Scalar>(
    x0: ArrayView4<S>,
    t: usize,
    eps: ArrayView4<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Array4<S>> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    if t >= sched.total_steps {
        return Err(Error::Config(format!(
            "t={t} out of range for schedule of {} steps",
            sched.total_steps
        )));
    }
    let ab = sched.alpha_bar[t];
    let c0 = ab.sqrt();
    let ce = (S::one() - ab).sqrt();
    Ok(&x0.mapv(|v| v * c0) + &eps.mapv(|v| v * ce))
}

/// One DDIM reverse step from t to t_prev given a predicted clean signal.
///
/// The implied noise is reconstructed from (x_t, x0_hat); with eta = 0 the
/// update is deterministic. `noise` is only consumed when eta > 0.
pub fn ddim_step<S: Scalar>(
    x_t: ArrayView4<S>,
    x0_hat: ArrayView4<S>,
    t: usize,
    t_prev: i64,
    sched: &NoiseSchedule<S>,
    eta: f64,
    noise: Option<ArrayView4<S>>,
) -> Result<Array4<S>> {
    if (t as i64) <= t_prev {
        return Err(Error::StepOrdering { t, t_prev });
    }
    if x_t.dim() != x0_hat.dim() {
        return Err(Error::Shape(format!(
            "x_t {:?} vs x0_hat {:?}",
            x_t.dim(),
            x0_hat.dim()
        )));
    }
    let ab_t = sched.alpha_bar[t].to_double();
    let ab_prev = sched.alpha_bar_at(t_prev).to_double();

    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    // direction coefficient sqrt(1 - ab_prev - sigma^2), clipped at 0
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();

    let c_hat = S::from_double(ab_prev.sqrt());
    let c_eps_inv = S::from_double(1.0 / (1.0 - ab_t).sqrt());
    let c_ab_t = S::from_double(ab_t.sqrt());
    let c_dir = S::from_double(dir);

    // eps_hat = (x_t - sqrt(ab_t) x0_hat) / sqrt(1 - ab_t)
    let mut out = Array4::<S>::zeros(x_t.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&x_t)
        .and(&x0_hat)
        .for_each(|o, &xt, &x0| {
            let eps_hat = (xt - c_ab_t * x0) * c_eps_inv;
            *o = c_hat * x0 + c_dir * eps_hat;
        });
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| {
            Error::Config("eta > 0 requires a noise array for ddim_step".into())
        })?;
        if n.dim() != x_t.dim() {
            return Err(Error::Shape("noise shape mismatch in ddim_step".into()));
        }
        let cs = S::from_double(sigma);
        out.zip_mut_with(&n, |o, &z| *o = *o + cs * z);
    }
    Ok(out)
}

/// A denoising function: maps (x_t, t) to predicted clean probabilities.
/// Conditioning on the image volume is captured by the closure.
pub trait Denoiser<S: Scalar> {
    fn predict(&self, x_t: ArrayView4<S>, t: usize) -> Result<Array4<S>>;
}

impl<S: Scalar, F> Denoiser<S> for F
where
    F: Fn(ArrayView4<S>, usize) -> Result<Array4<S>>,
{
    fn predict(&self, x_t: ArrayView4<S>, t: usize) -> Result<Array4<S>> {
        self(x_t, t)
    }
}

/// Run the reverse process from seeded Gaussian noise, recording the
/// predicted clean signal at every step (noisiest first).
pub fn sample_loop<S: Scalar, M: Denoiser<S>, R: Rng>(
    model: &M,
    shape: (usize, usize, usize, usize),
    plan: &DdimPlan,
    sched: &NoiseSchedule<S>,
    rng: &mut R,
) -> Result<Vec<Array4<S>>> {
    let mut x_t = Array4::<S>::zeros(shape);
    x_t.mapv_inplace(|_| S::standard_normal(rng));

    let mut preds = Vec::with_capacity(plan.len());
    for (t, t_prev) in plan.step_pairs() {
        let x0_hat = model.predict(x_t.view(), t)?;
        if x0_hat.dim() != shape {
            return Err(Error::Shape(format!(
                "model output {:?} does not match signal shape {:?}",
                x0_hat.dim(),
                shape
            )));
        }
        // keep the raw prediction; clamp to [0,1] before re-noising
        let clamped = x0_hat.mapv(|v| v.max(S::zero()).min(S::one()));
        let noise = if plan.eta > 0.0 {
            let mut n = Array4::<S>::zeros(shape);
            n.mapv_inplace(|_| S::standard_normal(rng));
            Some(n)
        } else {
            None
        };
        x_t = ddim_step(
            x_t.view(),
            clamped.view(),
            t,
            t_prev,
            sched,
            plan.eta,
            noise.as_ref().map(|n| n.view()),
        )?;
        preds.push(x0_hat);
    }
    Ok(preds)
}
