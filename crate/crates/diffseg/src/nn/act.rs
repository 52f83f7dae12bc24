//! Elementwise activations with explicit backward passes.

use ndarray::{Array4, ArrayView4};

use crate::scalar::Scalar;

pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// SiLU (x * sigmoid(x)) forward; caches the input.
pub fn silu_forward<S: Scalar>(x: ArrayView4<S>) -> (Array4<S>, Array4<S>) {
    let y = x.mapv(|v| v * sigmoid_scalar(v));
    (y, x.to_owned())
}

pub fn silu_backward<S: Scalar>(cache_x: &Array4<S>, dy: ArrayView4<S>) -> Array4<S> {
    let mut dx = Array4::<S>::zeros(cache_x.raw_dim());
    ndarray::Zip::from(&mut dx)
        .and(cache_x)
        .and(&dy)
        .for_each(|dxv, &xv, &dyv| {
            let s = sigmoid_scalar(xv);
            *dxv = dyv * s * (S::one() + xv * (S::one() - s));
        });
    dx
}

/// Sigmoid forward; caches the output.
pub fn sigmoid_forward<S: Scalar>(x: ArrayView4<S>) -> Array4<S> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_backward<S: Scalar>(cache_y: &Array4<S>, dy: ArrayView4<S>) -> Array4<S> {
    let mut dx = Array4::<S>::zeros(cache_y.raw_dim());
    ndarray::Zip::from(&mut dx)
        .and(cache_y)
        .and(&dy)
        .for_each(|dxv, &yv, &dyv| {
            *dxv = dyv * yv * (S::one() - yv);
        });
    dx
}

/// SiLU over a 1-D vector (time-embedding path).
pub fn silu_vec_forward<S: Scalar>(x: ndarray::ArrayView1<S>) -> (ndarray::Array1<S>, ndarray::Array1<S>) {
    let y = x.mapv(|v| v * sigmoid_scalar(v));
    (y, x.to_owned())
}

pub fn silu_vec_backward<S: Scalar>(
    cache_x: &ndarray::Array1<S>,
    dy: ndarray::ArrayView1<S>,
) -> ndarray::Array1<S> {
    let mut dx = ndarray::Array1::<S>::zeros(cache_x.raw_dim());
    ndarray::Zip::from(&mut dx)
        .and(cache_x)
        .and(&dy)
        .for_each(|dxv, &xv, &dyv| {
            let s = sigmoid_scalar(xv);
            *dxv = dyv * s * (S::one() + xv * (S::one() - s));
        });
    dx
}
