//! Finite-difference gradient checking.
//!
//! Central differences with step 1e-5 against the analytic backward pass, in
//! double precision. Every parameter element of small networks is swept;
//! large parameters are subsampled on a deterministic stride.

use crate::diffcore::network::Network;
use crate::diffcore::tensor::{softmax, Scalar, Tensor};
use crate::error::{Error, Result};

/// Differentiable scalar loss over a network output.
pub trait ScalarLoss<F: Scalar> {
    fn value(&self, output: &Tensor<F>) -> Result<F>;
    /// Gradient of the loss with respect to the network output.
    fn grad(&self, output: &Tensor<F>) -> Result<Tensor<F>>;
}

/// `0.5 * sum((y - target)^2)`.
pub struct SquaredError<F> {
    pub target: Tensor<F>,
}

impl<F: Scalar> ScalarLoss<F> for SquaredError<F> {
    fn value(&self, output: &Tensor<F>) -> Result<F> {
        if output.shape() != self.target.shape() {
            return Err(Error::ShapeMismatch {
                context: "squared error".into(),
                expected: self.target.shape().to_vec(),
                got: output.shape().to_vec(),
            });
        }
        let half = F::from_f64(0.5);
        Ok(output
            .iter()
            .zip(self.target.iter())
            .fold(F::zero(), |acc, (&y, &t)| acc + half * (y - t) * (y - t)))
    }

    fn grad(&self, output: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = output.clone();
        g.zip_mut_with(&self.target, |y, &t| *y = *y - t);
        Ok(g)
    }
}

/// Mean cross-entropy of `(batch, classes)` logits against integer labels.
pub struct CrossEntropy {
    pub labels: Vec<usize>,
}

impl<F: Scalar> ScalarLoss<F> for CrossEntropy {
    fn value(&self, output: &Tensor<F>) -> Result<F> {
        let probs = softmax(output)?;
        let n = self.labels.len();
        let mut acc = F::zero();
        for (i, &label) in self.labels.iter().enumerate() {
            acc = acc - probs[[i, label]].ln();
        }
        Ok(acc / F::from_f64(n as f64))
    }

    fn grad(&self, output: &Tensor<F>) -> Result<Tensor<F>> {
        let mut probs = softmax(output)?;
        let scale = F::one() / F::from_f64(self.labels.len() as f64);
        for (i, &label) in self.labels.iter().enumerate() {
            probs[[i, label]] = probs[[i, label]] - F::one();
        }
        probs.mapv_inplace(|v| v * scale);
        Ok(probs)
    }
}

/// A loss that ignores the output entirely (all gradients must come out 0).
pub struct ConstantLoss(pub f64);

impl<F: Scalar> ScalarLoss<F> for ConstantLoss {
    fn value(&self, _output: &Tensor<F>) -> Result<F> {
        Ok(F::from_f64(self.0))
    }
    fn grad(&self, output: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(Tensor::zeros(output.raw_dim()))
    }
}

/// Outcome of checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements_checked: usize,
    pub passed: bool,
}

/// Gradient-check report over all parameters of a network.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|p| p.passed)
    }

    /// Names of parameters (hence layers) that failed, for diagnostics.
    pub fn failures(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|p| !p.passed)
            .map(|p| p.name.as_str())
            .collect()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Checks the analytic parameter gradients of `net` under `loss` at `input`
/// against central finite differences (step `1e-5`).
///
/// At most `max_elems_per_param` elements are probed per parameter tensor,
/// spread on a deterministic stride. Passes iff every probed element's
/// relative error is within `tol`.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    loss: &dyn ScalarLoss<f64>,
    tol: f64,
    max_elems_per_param: usize,
) -> Result<CheckReport> {
    const STEP: f64 = 1e-5;
    let trace = net.trace(input)?;
    let seed = loss.grad(trace.output())?;
    let (grads, _) = net.backward(&trace, &seed, &[])?;

    // Analytic gradients in name order.
    let mut analytic: Vec<(String, Tensor<f64>)> = Vec::new();
    {
        let names: Vec<String> = net.layer_names().map(String::from).collect();
        for (i, g) in grads.by_layer.iter().enumerate() {
            if let Some(g) = g {
                analytic.push((format!("{}.w", names[i]), g.w.clone()));
                analytic.push((format!("{}.b", names[i]), g.b.clone()));
            }
        }
    }

    let mut per_param = Vec::new();
    let mut probe = net.clone();
    for (name, grad) in &analytic {
        let len = grad.len();
        let stride = len.div_ceil(max_elems_per_param).max(1);
        let mut max_err = 0.0f64;
        let mut checked = 0usize;
        let mut idx = 0usize;
        while idx < len {
            let mut lo = 0.0;
            let mut hi = 0.0;
            for (dir, out) in [(STEP, &mut hi), (-STEP, &mut lo)] {
                probe.visit_params_mut(|n, vals| {
                    if n == name {
                        vals[idx] += dir;
                    }
                });
                *out = loss.value(&probe.forward(input)?)?;
                probe.visit_params_mut(|n, vals| {
                    if n == name {
                        vals[idx] -= dir;
                    }
                });
            }
            let numeric = (hi - lo) / (2.0 * STEP);
            let a = grad.as_slice().unwrap()[idx];
            max_err = max_err.max(rel_err(a, numeric));
            checked += 1;
            idx += stride;
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_err,
            elements_checked: checked,
            passed: max_err <= tol,
        });
    }
    Ok(CheckReport { per_param, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::layers::{Layer, Linear};
    use ndarray::{arr1, arr2};

    fn small_linear_net() -> Network<f64> {
        let mut net = Network::new();
        net.push(
            "fc",
            Layer::Linear(Linear {
                w: arr2(&[[0.5, -0.3], [0.2, 0.7], [-0.1, 0.4]]),
                b: arr1(&[0.1, -0.2, 0.3]),
            }),
        );
        net
    }

    #[test]
    fn linear_layer_squared_loss_is_exact() {
        let net = small_linear_net();
        let input = arr2(&[[1.0, 2.0]]).into_dyn();
        let loss = SquaredError {
            target: arr2(&[[0.0, 1.0, -1.0]]).into_dyn(),
        };
        let report = grad_check(&net, &input, &loss, 1e-8, usize::MAX).unwrap();
        assert!(report.passed(), "failures: {:?}", report.failures());
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let net = small_linear_net();
        let input = arr2(&[[1.0, 2.0]]).into_dyn();
        let trace = net.trace(&input).unwrap();
        let loss = ConstantLoss(4.2);
        let seed = ScalarLoss::<f64>::grad(&loss, trace.output()).unwrap();
        let (grads, _) = net.backward(&trace, &seed, &[]).unwrap();
        for g in grads.by_layer.iter().flatten() {
            assert!(g.w.iter().all(|&v| v == 0.0));
            assert!(g.b.iter().all(|&v| v == 0.0));
        }
        let report = grad_check(&net, &input, &loss, 1e-10, usize::MAX).unwrap();
        assert!(report.passed());
    }
}
