//! Dense layer over 1-D vectors (time-embedding MLP and per-block
//! timestep projections).

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::nn::conv::kaiming;
use crate::nn::params::{Grads, ParamId, Params};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug)]
pub struct LinearCache<S: Scalar> {
    input: Array1<S>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut Params<S>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let mut init = kaiming::<S, R>(rng, in_dim);
        let w = ndarray::ArrayD::from_shape_simple_fn(vec![out_dim, in_dim], &mut init);
        drop(init);
        Linear {
            w: params.register(format!("{name}.w"), w),
            b: params.register(format!("{name}.b"), ndarray::ArrayD::zeros(vec![out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &Params<S>,
        x: ArrayView1<S>,
    ) -> (Array1<S>, LinearCache<S>) {
        let w: ndarray::ArrayView2<S> = params
            .get(self.w)
            .view()
            .into_dimensionality()
            .expect("linear weight rank");
        let b = params.get(self.b);
        let mut y = w.dot(&x);
        for (i, v) in y.iter_mut().enumerate() {
            *v = *v + b[[i]];
        }
        (
            y,
            LinearCache {
                input: x.to_owned(),
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &Params<S>,
        cache: &LinearCache<S>,
        dy: ArrayView1<S>,
        grads: &mut Grads<S>,
    ) -> Array1<S> {
        let w: ndarray::ArrayView2<S> = params
            .get(self.w)
            .view()
            .into_dimensionality()
            .expect("linear weight rank");
        let mut dw = Array2::<S>::zeros((self.out_dim, self.in_dim));
        for i in 0..self.out_dim {
            let dyi = dy[i];
            for j in 0..self.in_dim {
                dw[[i, j]] = dyi * cache.input[j];
            }
        }
        grads.accumulate(self.w, dw.into_dyn());
        grads.accumulate(self.b, dy.to_owned().into_dyn());
        w.t().dot(&dy)
    }
}
