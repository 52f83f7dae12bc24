//! 3D convolution and transposed convolution with explicit backward passes.
//!
//! Convolutions lower to a single matrix multiply over an im2col buffer;
//! the buffer is rebuilt in the backward pass from the cached input so the
//! forward cache stays small.

use ndarray::{Array1, Array2, Array4, ArrayView4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::{Grads, ParamId, Params};
use crate::scalar::Scalar;

/// Kaiming-normal initialization for a conv / linear weight.
pub fn kaiming<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize) -> impl FnMut() -> S + '_ {
    let std = S::from_double((2.0 / fan_in as f64).sqrt());
    move || S::standard_normal(rng) * std
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct Conv3dCache<S: Scalar> {
    input: Array4<S>,
    out_spatial: (usize, usize, usize),
}

fn out_len(d: usize, k: usize, s: usize, p: usize) -> usize {
    (d + 2 * p - k) / s + 1
}

impl Conv3d {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut Params<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let mut init = kaiming::<S, R>(rng, fan_in);
        let w = ndarray::ArrayD::from_shape_simple_fn(
            vec![cout, cin, kernel, kernel, kernel],
            &mut init,
        );
        drop(init);
        let b = ndarray::ArrayD::zeros(vec![cout]);
        Conv3d {
            w: params.register(format!("{name}.w"), w),
            b: params.register(format!("{name}.b"), b),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, input: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
        let (_, d, h, w) = input;
        (
            self.cout,
            out_len(d, self.kernel, self.stride, self.pad),
            out_len(h, self.kernel, self.stride, self.pad),
            out_len(w, self.kernel, self.stride, self.pad),
        )
    }

    fn im2col<S: Scalar>(&self, x: &ArrayView4<S>) -> Array2<S> {
        let (ci, d, h, w) = x.dim();
        let (od, oh, ow) = (
            out_len(d, self.kernel, self.stride, self.pad),
            out_len(h, self.kernel, self.stride, self.pad),
            out_len(w, self.kernel, self.stride, self.pad),
        );
        let k = self.kernel;
        let p = self.pad as isize;
        let s = self.stride as isize;
        let cols = od * oh * ow;
        let mut col = Array2::<S>::zeros((ci * k * k * k, cols));
        for c in 0..ci {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let mut row_view = col.row_mut(row);
                        let rv = row_view.as_slice_mut().unwrap();
                        for odp in 0..od {
                            let id = odp as isize * s + kd as isize - p;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for ohp in 0..oh {
                                let ih = ohp as isize * s + kh as isize - p;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base = (odp * oh + ohp) * ow;
                                for owp in 0..ow {
                                    let iw = owp as isize * s + kw as isize - p;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    rv[base + owp] =
                                        x[[c, id as usize, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<S: Scalar>(
        &self,
        dcol: &Array2<S>,
        in_shape: (usize, usize, usize, usize),
        out_spatial: (usize, usize, usize),
    ) -> Array4<S> {
        let (ci, d, h, w) = in_shape;
        let (od, oh, ow) = out_spatial;
        let k = self.kernel;
        let p = self.pad as isize;
        let s = self.stride as isize;
        let mut dx = Array4::<S>::zeros((ci, d, h, w));
        for c in 0..ci {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let rv = dcol.row(row);
                        let rv = rv.as_slice().unwrap();
                        for odp in 0..od {
                            let id = odp as isize * s + kd as isize - p;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for ohp in 0..oh {
                                let ih = ohp as isize * s + kh as isize - p;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base = (odp * oh + ohp) * ow;
                                for owp in 0..ow {
                                    let iw = owp as isize * s + kw as isize - p;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    dx[[c, id as usize, ih as usize, iw as usize]] +=
                                        rv[base + owp];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &Params<S>,
        x: ArrayView4<S>,
    ) -> Result<(Array4<S>, Conv3dCache<S>)> {
        let (ci, _, _, _) = x.dim();
        if ci != self.cin {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {ci}",
                self.cin
            )));
        }
        let (cout, od, oh, ow) = self.out_shape(x.dim());
        let k3 = self.kernel * self.kernel * self.kernel;
        let w2 = params
            .get(self.w)
            .view()
            .into_shape((self.cout, self.cin * k3))
            .expect("conv weight reshape");
        let cols = od * oh * ow;
        let mut y2 = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            let x2 = x.into_shape((ci, cols)).expect("1x1 input reshape");
            w2.dot(&x2)
        } else {
            let col = self.im2col(&x);
            w2.dot(&col)
        };
        let b = params.get(self.b);
        for c in 0..cout {
            let bc = b[[c]];
            y2.row_mut(c).mapv_inplace(|v| v + bc);
        }
        let y = y2
            .into_shape((cout, od, oh, ow))
            .expect("conv output reshape");
        Ok((
            y,
            Conv3dCache {
                input: x.to_owned(),
                out_spatial: (od, oh, ow),
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &Params<S>,
        cache: &Conv3dCache<S>,
        dy: ArrayView4<S>,
        grads: &mut Grads<S>,
    ) -> Array4<S> {
        let (od, oh, ow) = cache.out_spatial;
        let cols = od * oh * ow;
        let k3 = self.kernel * self.kernel * self.kernel;
        let dy2 = dy
            .into_shape((self.cout, cols))
            .expect("conv dy reshape");

        // bias gradient
        let mut db = Array1::<S>::zeros(self.cout);
        for c in 0..self.cout {
            db[c] = dy2.row(c).sum();
        }
        grads.accumulate(self.b, db.into_dyn());

        let w2 = params
            .get(self.w)
            .view()
            .into_shape((self.cout, self.cin * k3))
            .expect("conv weight reshape");

        let in_shape = cache.input.dim();
        let (dw2, dx) = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            let x2 = cache
                .input
                .view()
                .into_shape((self.cin, cols))
                .expect("1x1 input reshape");
            let dw2 = dy2.dot(&x2.t());
            let dx2 = w2.t().dot(&dy2);
            let dx = dx2
                .into_shape(in_shape)
                .expect("1x1 dx reshape");
            (dw2, dx)
        } else {
            let col = self.im2col(&cache.input.view());
            let dw2 = dy2.dot(&col.t());
            let dcol = w2.t().dot(&dy2);
            let dx = self.col2im(&dcol, in_shape, cache.out_spatial);
            (dw2, dx)
        };
        let dw = dw2
            .into_shape(vec![self.cout, self.cin, self.kernel, self.kernel, self.kernel])
            .expect("conv dw reshape");
        grads.accumulate(self.w, dw);
        dx
    }
}

/// Transposed 3D convolution with kernel 2 and stride 2 (exact 2x upsampling;
/// output voxels receive exactly one contribution each).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug)]
pub struct ConvTranspose3dCache<S: Scalar> {
    input: Array4<S>,
}

impl ConvTranspose3d {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut Params<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let mut init = kaiming::<S, R>(rng, cin);
        let w = ndarray::ArrayD::from_shape_simple_fn(vec![cin, cout, 2, 2, 2], &mut init);
        drop(init);
        let b = ndarray::ArrayD::zeros(vec![cout]);
        ConvTranspose3d {
            w: params.register(format!("{name}.w"), w),
            b: params.register(format!("{name}.b"), b),
            cin,
            cout,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &Params<S>,
        x: ArrayView4<S>,
    ) -> Result<(Array4<S>, ConvTranspose3dCache<S>)> {
        let (ci, d, h, w) = x.dim();
        if ci != self.cin {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {ci}",
                self.cin
            )));
        }
        let cols = d * h * w;
        let w2 = params
            .get(self.w)
            .view()
            .into_shape((self.cin, self.cout * 8))
            .expect("convT weight reshape");
        let x2 = x.into_shape((ci, cols)).expect("convT input reshape");
        // (cout*8, P) = w2^T . x2
        let ycols = w2.t().dot(&x2);
        let b = params.get(self.b);
        let mut y = Array4::<S>::zeros((self.cout, 2 * d, 2 * h, 2 * w));
        for co in 0..self.cout {
            let bc = b[[co]];
            for kd in 0..2 {
                for kh in 0..2 {
                    for kw in 0..2 {
                        let row = ycols.row(((co * 2 + kd) * 2 + kh) * 2 + kw);
                        let rv = row.as_slice().unwrap();
                        for dd in 0..d {
                            for hh in 0..h {
                                let base = (dd * h + hh) * w;
                                for ww in 0..w {
                                    y[[co, 2 * dd + kd, 2 * hh + kh, 2 * ww + kw]] =
                                        rv[base + ww] + bc;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((
            y,
            ConvTranspose3dCache {
                input: x.to_owned(),
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &Params<S>,
        cache: &ConvTranspose3dCache<S>,
        dy: ArrayView4<S>,
        grads: &mut Grads<S>,
    ) -> Array4<S> {
        let (ci, d, h, w) = cache.input.dim();
        let cols = d * h * w;

        // gather dy into (cout*8, P)
        let mut dycols = Array2::<S>::zeros((self.cout * 8, cols));
        let mut db = Array1::<S>::zeros(self.cout);
        for co in 0..self.cout {
            let mut bsum = S::zero();
            for kd in 0..2 {
                for kh in 0..2 {
                    for kw in 0..2 {
                        let mut row = dycols.row_mut(((co * 2 + kd) * 2 + kh) * 2 + kw);
                        let rv = row.as_slice_mut().unwrap();
                        for dd in 0..d {
                            for hh in 0..h {
                                let base = (dd * h + hh) * w;
                                for ww in 0..w {
                                    let v = dy[[co, 2 * dd + kd, 2 * hh + kh, 2 * ww + kw]];
                                    rv[base + ww] = v;
                                    bsum = bsum + v;
                                }
                            }
                        }
                    }
                }
            }
            db[co] = bsum;
        }
        grads.accumulate(self.b, db.into_dyn());

        let x2 = cache
            .input
            .view()
            .into_shape((ci, cols))
            .expect("convT input reshape");
        let dw2 = x2.dot(&dycols.t());
        grads.accumulate(
            self.w,
            dw2.into_shape(vec![self.cin, self.cout, 2, 2, 2])
                .expect("convT dw reshape"),
        );

        let w2 = params
            .get(self.w)
            .view()
            .into_shape((self.cin, self.cout * 8))
            .expect("convT weight reshape");
        let dx2 = w2.dot(&dycols);
        dx2.into_shape((ci, d, h, w)).expect("convT dx reshape")
    }
}
