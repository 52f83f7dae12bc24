//! Composite training objective: Dice + BCE + MSE over predicted clean
//! probabilities and one-hot targets, with analytic gradients in
//! prediction space for the hand-rolled backward pass.

use ndarray::{Array4, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DICE_SMOOTH: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub dice: f64,
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.dice.is_finite() && self.bce.is_finite() && self.mse.is_finite()
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} dice={:.6} bce={:.6} mse={:.6}",
            self.total, self.dice, self.bce, self.mse
        )
    }
}

fn check_shapes<S: Scalar>(pred: &ArrayView4<S>, target: &ArrayView4<S>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

/// Soft Dice loss averaged over channels (background included).
pub fn dice_loss<S: Scalar>(pred: ArrayView4<S>, target: ArrayView4<S>, smooth: f64) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let n = pred.dim().0;
    let mut acc = 0.0;
    for c in 0..n {
        let p = pred.index_axis(Axis(0), c);
        let t = target.index_axis(Axis(0), c);
        let inter: f64 = p.iter().zip(t.iter()).map(|(a, b)| (*a * *b).to_double()).sum();
        let psum: f64 = p.iter().map(|v| v.to_double()).sum();
        let tsum: f64 = t.iter().map(|v| v.to_double()).sum();
        acc += 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
    }
    Ok(acc / n as f64)
}

/// Binary cross-entropy averaged over all entries, probabilities clamped
/// away from {0, 1}.
pub fn bce_loss<S: Scalar>(pred: ArrayView4<S>, target: ArrayView4<S>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let e = pred.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let p = p.to_double().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let t = t.to_double();
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / e)
}

/// Mean squared error over all entries.
pub fn mse_loss<S: Scalar>(pred: ArrayView4<S>, target: ArrayView4<S>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let e = pred.len() as f64;
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let d = p.to_double() - t.to_double();
        acc += d * d;
    }
    Ok(acc / e)
}

/// Unweighted sum of the three terms.
pub fn total_loss<S: Scalar>(pred: ArrayView4<S>, target: ArrayView4<S>) -> Result<LossReport> {
    let dice = dice_loss(pred, target, DICE_SMOOTH)?;
    let bce = bce_loss(pred, target)?;
    let mse = mse_loss(pred, target)?;
    Ok(LossReport {
        dice,
        bce,
        mse,
        total: dice + bce + mse,
    })
}

/// Gradient of the Dice term with respect to `pred`.
pub fn dice_loss_grad<S: Scalar>(
    pred: ArrayView4<S>,
    target: ArrayView4<S>,
    smooth: f64,
) -> Result<Array4<S>> {
    check_shapes(&pred, &target)?;
    let n = pred.dim().0;
    let mut grad = Array4::<S>::zeros(pred.raw_dim());
    for c in 0..n {
        let p = pred.index_axis(Axis(0), c);
        let t = target.index_axis(Axis(0), c);
        let inter: f64 = p.iter().zip(t.iter()).map(|(a, b)| (*a * *b).to_double()).sum();
        let psum: f64 = p.iter().map(|v| v.to_double()).sum();
        let tsum: f64 = t.iter().map(|v| v.to_double()).sum();
        let denom = psum + tsum + smooth;
        let num = 2.0 * inter + smooth;
        // d/dp_j [ -(2 I + s)/(U + s) ] = -(2 t_j (U+s) - (2I+s)) / (U+s)^2
        let inv_d = 1.0 / denom;
        let num_over_d2 = num * inv_d * inv_d;
        let scale = 1.0 / n as f64;
        let mut g = grad.index_axis_mut(Axis(0), c);
        ndarray::Zip::from(&mut g).and(&t).for_each(|gv, &tv| {
            let d = (-2.0 * tv.to_double() * inv_d + num_over_d2) * scale;
            *gv = S::from_double(d);
        });
    }
    Ok(grad)
}

/// Gradient of the BCE term (pass-through where the clamp is active).
pub fn bce_loss_grad<S: Scalar>(pred: ArrayView4<S>, target: ArrayView4<S>) -> Result<Array4<S>> {
    check_shapes(&pred, &target)?;
    let e = pred.len() as f64;
    let mut grad = Array4::<S>::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .for_each(|g, &p, &t| {
            let p = p.to_double().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = t.to_double();
            *g = S::from_double((-t / p + (1.0 - t) / (1.0 - p)) / e);
        });
    Ok(grad)
}

/// Gradient of the MSE term.
pub fn mse_loss_grad<S: Scalar>(pred: ArrayView4<S>, target: ArrayView4<S>) -> Result<Array4<S>> {
    check_shapes(&pred, &target)?;
    let e = pred.len() as f64;
    let mut grad = Array4::<S>::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .for_each(|g, &p, &t| {
            *g = S::from_double(2.0 * (p.to_double() - t.to_double()) / e);
        });
    Ok(grad)
}

/// Total loss plus its gradient with respect to `pred`.
pub fn total_loss_and_grad<S: Scalar>(
    pred: ArrayView4<S>,
    target: ArrayView4<S>,
) -> Result<(LossReport, Array4<S>)> {
    let report = total_loss(pred, target)?;
    let mut grad = dice_loss_grad(pred, target, DICE_SMOOTH)?;
    grad += &bce_loss_grad(pred, target)?;
    grad += &mse_loss_grad(pred, target)?;
    Ok((report, grad))
}
