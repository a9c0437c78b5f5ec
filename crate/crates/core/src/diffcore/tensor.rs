//! Tensor alias and numerically careful primitives shared by the layer and
//! loss implementations.

use ndarray::{ArrayD, ArrayView1, ArrayViewMut1, Axis, Ix2, NdFloat};
use rand_distr::uniform::SampleUniform;

use crate::error::{Error, Result};

/// Dynamic-rank tensor. Element count always equals the product of the shape
/// dimensions (guaranteed by `ndarray`); exported operations keep elements
/// finite, which training loops assert at their boundaries.
pub type Tensor<F> = ArrayD<F>;

/// Float scalar the substrate is generic over. `f32` is the training
/// precision, `f64` the gradient-check precision.
pub trait Scalar: NdFloat + SampleUniform + serde::Serialize + Default {
    const LOG_CLAMP: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const LOG_CLAMP: Self = 1e-12;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const LOG_CLAMP: Self = 1e-12;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Numerically stable softmax of a single logit vector.
///
/// Subtracts the max logit before exponentiating, so extreme magnitudes do
/// not overflow. Output components lie in (0, 1) and sum to 1.
pub fn softmax_1d<F: Scalar>(logits: ArrayView1<'_, F>) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax on empty logit vector".into()));
    }
    for &v in logits.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
            });
        }
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = out.iter().cloned().fold(F::zero(), |a, b| a + b);
    for v in &mut out {
        *v = *v / sum;
    }
    Ok(out)
}

/// Row-wise softmax of a `(batch, classes)` logit matrix.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let mat = logits
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::ShapeMismatch {
            context: "softmax expects (batch, classes)".into(),
            expected: vec![0, 0],
            got: logits.shape().to_vec(),
        })?;
    if mat.ncols() == 0 {
        return Err(Error::EmptyInput("softmax with zero classes".into()));
    }
    let mut out = logits.clone();
    for mut row in out
        .view_mut()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .axis_iter_mut(Axis(0))
    {
        softmax_row_in_place(&mut row)?;
    }
    Ok(out)
}

fn softmax_row_in_place<F: Scalar>(row: &mut ArrayViewMut1<'_, F>) -> Result<()> {
    for &v in row.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
            });
        }
    }
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    Ok(())
}

/// `ln` with the argument clamped at [`Scalar::LOG_CLAMP`]. Returns the
/// clamped log and whether clamping fired, so callers can count occurrences.
pub fn clamped_ln<F: Scalar>(v: F) -> (F, bool) {
    if v < F::LOG_CLAMP {
        (F::LOG_CLAMP.ln(), true)
    } else {
        (v.ln(), false)
    }
}

/// Error if any element is non-finite.
pub fn ensure_finite<F: Scalar>(t: &Tensor<F>, context: &str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
        })
    }
}

/// Sum in index order. Used instead of `ndarray::sum` where the reduction
/// order is part of the determinism contract.
pub fn ordered_sum<F: Scalar>(t: &Tensor<F>) -> F {
    t.iter().fold(F::zero(), |a, &b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn softmax_symmetry() {
        let p = softmax_1d(arr1(&[0.0f64, 0.0]).view()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] -> [0.25, 0.75]
        let p = softmax_1d(arr1(&[0.0f64, 3.0f64.ln()]).view()).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_extreme_magnitude_no_overflow() {
        let p = softmax_1d(arr1(&[1000.0f32, 0.0]).view()).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[0] > 0.999_999);
        assert!(p[1] < 1e-6);
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_empty_is_error() {
        let empty: [f64; 0] = [];
        assert!(softmax_1d(arr1(&empty).view()).is_err());
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_1d(arr1(&[f64::NAN, 0.0]).view()).is_err());
    }

    #[test]
    fn clamped_ln_fires_below_threshold() {
        let (v, clamped) = clamped_ln(0.0f64);
        assert!(clamped);
        assert!((v - 1e-12f64.ln()).abs() < 1e-9);
        let (v, clamped) = clamped_ln(0.5f64);
        assert!(!clamped);
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }
}
