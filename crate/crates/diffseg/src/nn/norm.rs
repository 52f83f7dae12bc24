//! Group normalization over (C, D, H, W) volumes.

use ndarray::{Array1, Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::nn::params::{Grads, ParamId, Params};
use crate::scalar::Scalar;

const EPS: f64 = 1e-5;

/// Largest divisor of `channels` that is <= 8.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug)]
pub struct GroupNormCache<S: Scalar> {
    x_hat: Array4<S>,
    inv_std: Vec<S>,
}

impl GroupNorm {
    pub fn new<S: Scalar>(params: &mut Params<S>, name: &str, channels: usize) -> Self {
        let groups = default_groups(channels);
        GroupNorm {
            gamma: params.register(format!("{name}.g"), ndarray::ArrayD::ones(vec![channels])),
            beta: params.register(format!("{name}.b"), ndarray::ArrayD::zeros(vec![channels])),
            channels,
            groups,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &Params<S>,
        x: ArrayView4<S>,
    ) -> Result<(Array4<S>, GroupNormCache<S>)> {
        let (c, d, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "group norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let per = c / self.groups;
        let spatial = d * h * w;
        let m = per * spatial;
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);

        let mut x_hat = Array4::<S>::zeros((c, d, h, w));
        let mut y = Array4::<S>::zeros((c, d, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let c0 = g * per;
            let slab = x.slice(ndarray::s![c0..c0 + per, .., .., ..]);
            let mean: f64 = slab.iter().map(|v| v.to_double()).sum::<f64>() / m as f64;
            let var: f64 = slab
                .iter()
                .map(|v| {
                    let d = v.to_double() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let istd = S::from_double(1.0 / (var + EPS).sqrt());
            let mean_s = S::from_double(mean);
            inv_std.push(istd);
            for cc in 0..per {
                let ch = c0 + cc;
                let ga = gamma[[ch]];
                let be = beta[[ch]];
                let xs = x.index_axis(ndarray::Axis(0), ch);
                let mut xh = x_hat.index_axis_mut(ndarray::Axis(0), ch);
                let mut ys = y.index_axis_mut(ndarray::Axis(0), ch);
                ndarray::Zip::from(&mut xh)
                    .and(&mut ys)
                    .and(&xs)
                    .for_each(|xh, ys, &xv| {
                        let n = (xv - mean_s) * istd;
                        *xh = n;
                        *ys = ga * n + be;
                    });
            }
        }
        Ok((y, GroupNormCache { x_hat, inv_std }))
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &Params<S>,
        cache: &GroupNormCache<S>,
        dy: ArrayView4<S>,
        grads: &mut Grads<S>,
    ) -> Array4<S> {
        let (c, d, h, w) = dy.dim();
        let per = c / self.groups;
        let spatial = d * h * w;
        let m = per * spatial;
        let gamma = params.get(self.gamma);

        let mut dgamma = Array1::<S>::zeros(c);
        let mut dbeta = Array1::<S>::zeros(c);
        for ch in 0..c {
            let dys = dy.index_axis(ndarray::Axis(0), ch);
            let xh = cache.x_hat.index_axis(ndarray::Axis(0), ch);
            let mut dg = S::zero();
            let mut db = S::zero();
            ndarray::Zip::from(&dys).and(&xh).for_each(|&dyv, &xhv| {
                dg = dg + dyv * xhv;
                db = db + dyv;
            });
            dgamma[ch] = dg;
            dbeta[ch] = db;
        }

        let mut dx = Array4::<S>::zeros((c, d, h, w));
        let m_s = S::from_double(m as f64);
        for g in 0..self.groups {
            let c0 = g * per;
            // means of dy_hat and dy_hat * x_hat over the group,
            // where dy_hat = dy * gamma
            let mut sum_dyh = S::zero();
            let mut sum_dyh_xh = S::zero();
            for cc in 0..per {
                let ch = c0 + cc;
                let ga = gamma[[ch]];
                let dys = dy.index_axis(ndarray::Axis(0), ch);
                let xh = cache.x_hat.index_axis(ndarray::Axis(0), ch);
                ndarray::Zip::from(&dys).and(&xh).for_each(|&dyv, &xhv| {
                    let dyh = dyv * ga;
                    sum_dyh = sum_dyh + dyh;
                    sum_dyh_xh = sum_dyh_xh + dyh * xhv;
                });
            }
            let mean_dyh = sum_dyh / m_s;
            let mean_dyh_xh = sum_dyh_xh / m_s;
            let istd = cache.inv_std[g];
            for cc in 0..per {
                let ch = c0 + cc;
                let ga = gamma[[ch]];
                let dys = dy.index_axis(ndarray::Axis(0), ch);
                let xh = cache.x_hat.index_axis(ndarray::Axis(0), ch);
                let mut dxs = dx.index_axis_mut(ndarray::Axis(0), ch);
                ndarray::Zip::from(&mut dxs)
                    .and(&dys)
                    .and(&xh)
                    .for_each(|dxv, &dyv, &xhv| {
                        let dyh = dyv * ga;
                        *dxv = istd * (dyh - mean_dyh - xhv * mean_dyh_xh);
                    });
            }
        }
        grads.accumulate(self.gamma, dgamma.into_dyn());
        grads.accumulate(self.beta, dbeta.into_dyn());
        dx
    }
}
