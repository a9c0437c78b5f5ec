//! Optimizer rules (SGD with momentum/weight decay, Adam) applied as pure
//! functions of (parameters, gradients, state, rule).

use std::collections::BTreeMap;

use crate::diffcore::network::{Gradients, Network};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum UpdateRule {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl UpdateRule {
    pub fn adam(lr: f64) -> Self {
        UpdateRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Adam with the GAN-conventional first-moment decay 0.5.
    pub fn adam_gan(lr: f64) -> Self {
        UpdateRule::Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub enum OptState<F> {
    #[default]
    Empty,
    Momentum(Vec<F>),
    Adam {
        m: Vec<F>,
        v: Vec<F>,
        step: u64,
    },
}

/// Named map from layer identifier to parameter tensor, plus optimizer state
/// per parameter. This is the checkpointable, order-stable view of a model's
/// parameters.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<F> {
    pub entries: BTreeMap<String, ParamEntry<F>>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub value: Tensor<F>,
    pub state: OptState<F>,
}

impl<F: Scalar> ParameterSet<F> {
    pub fn from_network(net: &Network<F>) -> Self {
        let mut entries = BTreeMap::new();
        net.visit_params(|name, t| {
            entries.insert(
                name.to_string(),
                ParamEntry {
                    value: t.clone(),
                    state: OptState::Empty,
                },
            );
        });
        ParameterSet { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                state: OptState::Empty,
            },
        );
    }
}

/// One optimizer step on an element slice. Pure in (value, grad, state,
/// rule): identical inputs give bit-identical outputs.
pub fn update_slice<F: Scalar>(
    name: &str,
    value: &mut [F],
    grad: &[F],
    state: &mut OptState<F>,
    rule: &UpdateRule,
) -> Result<()> {
    if value.len() != grad.len() {
        return Err(Error::Parameter {
            name: name.into(),
            reason: format!(
                "gradient has {} elements, parameter has {}",
                grad.len(),
                value.len()
            ),
        });
    }
    match *rule {
        UpdateRule::Sgd {
            lr,
            momentum,
            weight_decay,
        } => {
            let lr = F::from_f64(lr);
            let wd = F::from_f64(weight_decay);
            if momentum == 0.0 {
                for (p, &g) in value.iter_mut().zip(grad) {
                    *p = *p - lr * (g + wd * *p);
                }
            } else {
                let mu = F::from_f64(momentum);
                if !matches!(state, OptState::Momentum(_)) {
                    *state = OptState::Momentum(vec![F::zero(); value.len()]);
                }
                let OptState::Momentum(vel) = state else {
                    unreachable!()
                };
                if vel.len() != value.len() {
                    return Err(Error::Parameter {
                        name: name.into(),
                        reason: "momentum state shape mismatch".into(),
                    });
                }
                for ((p, &g), v) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = mu * *v + (g + wd * *p);
                    *p = *p - lr * *v;
                }
            }
        }
        UpdateRule::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let (lr, b1, b2, eps) = (
                F::from_f64(lr),
                F::from_f64(beta1),
                F::from_f64(beta2),
                F::from_f64(eps),
            );
            if !matches!(state, OptState::Adam { .. }) {
                *state = OptState::Adam {
                    m: vec![F::zero(); value.len()],
                    v: vec![F::zero(); value.len()],
                    step: 0,
                };
            }
            let OptState::Adam { m, v, step } = state else {
                unreachable!()
            };
            if m.len() != value.len() {
                return Err(Error::Parameter {
                    name: name.into(),
                    reason: "adam state shape mismatch".into(),
                });
            }
            *step += 1;
            let t = *step as i32;
            let bias1 = F::one() - b1.powi(t);
            let bias2 = F::one() - b2.powi(t);
            for ((p, &g), (mi, vi)) in value.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (F::one() - b1) * g;
                *vi = b2 * *vi + (F::one() - b2) * g * g;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Applies `rule` to every parameter of `params` with its gradient from
/// `grads` (a name -> tensor map). Parameters without a gradient entry are
/// left untouched; a gradient with the wrong shape is an error naming the
/// parameter.
pub fn apply_update<F: Scalar>(
    params: &mut ParameterSet<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    rule: &UpdateRule,
) -> Result<()> {
    for (name, entry) in params.entries.iter_mut() {
        if let Some(g) = grads.get(name) {
            if g.shape() != entry.value.shape() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: format!(
                        "gradient shape {:?} does not match parameter shape {:?}",
                        g.shape(),
                        entry.value.shape()
                    ),
                });
            }
            let gs = g.as_standard_layout();
            update_slice(
                name,
                entry.value.as_slice_mut().unwrap(),
                gs.as_slice().unwrap(),
                &mut entry.state,
                rule,
            )?;
        }
    }
    Ok(())
}

/// Optimizer state for a whole network, aligned with its layer order.
#[derive(Debug, Clone, Default)]
pub struct NetOptState<F> {
    pub by_layer: Vec<(OptState<F>, OptState<F>)>,
}

impl<F: Scalar> NetOptState<F> {
    pub fn for_network(net: &Network<F>) -> Self {
        NetOptState {
            by_layer: (0..net.len()).map(|_| Default::default()).collect(),
        }
    }
}

/// In-place optimizer step on a network from layer-aligned gradients.
pub fn step_network<F: Scalar>(
    net: &mut Network<F>,
    grads: &Gradients<F>,
    state: &mut NetOptState<F>,
    rule: &UpdateRule,
) -> Result<()> {
    let names: Vec<String> = net.layer_names().map(String::from).collect();
    for i in 0..net.len() {
        let Some(g) = &grads.by_layer[i] else {
            continue;
        };
        let gw = g.w.as_standard_layout();
        let gb = g.b.as_standard_layout();
        let (sw, sb) = &mut state.by_layer[i];
        let Some((w, b)) = net.layer_params_mut(i) else {
            continue;
        };
        update_slice(
            &format!("{}.w", names[i]),
            w,
            gw.as_slice().unwrap(),
            sw,
            rule,
        )?;
        update_slice(
            &format!("{}.b", names[i]),
            b,
            gb.as_slice().unwrap(),
            sb,
            rule,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn one_param(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::default();
        p.insert("p.w", arr1(&[v]).into_dyn());
        p
    }

    fn grad_of(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("p.w".to_string(), arr1(&[v]).into_dyn());
        g
    }

    #[test]
    fn sgd_plain_closed_form() {
        let mut p = one_param(1.0);
        apply_update(
            &mut p,
            &grad_of(0.5),
            &UpdateRule::Sgd {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        assert!((p.entries["p.w"].value[[0]] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        // Two identical steps: second update is larger than the first.
        let rule = UpdateRule::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = one_param(1.0);
        apply_update(&mut p, &grad_of(1.0), &rule).unwrap();
        let after1 = p.entries["p.w"].value[[0]];
        apply_update(&mut p, &grad_of(1.0), &rule).unwrap();
        let after2 = p.entries["p.w"].value[[0]];
        let step1 = 1.0 - after1;
        let step2 = after1 - after2;
        // v1 = 1, step1 = 0.1; v2 = 0.9 + 1 = 1.9, step2 = 0.19.
        assert!((step1 - 0.1).abs() < 1e-12);
        assert!((step2 - 0.19).abs() < 1e-12);
        assert!(step2 > step1);
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = one_param(3.5);
        for _ in 0..3 {
            apply_update(&mut p, &grad_of(0.0), &UpdateRule::adam(0.1)).unwrap();
        }
        assert_eq!(p.entries["p.w"].value[[0]], 3.5);
    }

    #[test]
    fn update_is_pure_function_of_inputs() {
        let rule = UpdateRule::adam(0.01);
        let run = || {
            let mut p = one_param(1.25);
            for i in 0..5 {
                apply_update(&mut p, &grad_of(0.1 * (i as f64 + 1.0)), &rule).unwrap();
            }
            p.entries["p.w"].value[[0]].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut p = one_param(1.0);
        let mut g = BTreeMap::new();
        g.insert("p.w".to_string(), arr1(&[1.0, 2.0]).into_dyn());
        let err = apply_update(&mut p, &g, &UpdateRule::adam(0.1)).unwrap_err();
        assert!(err.to_string().contains("p.w"));
    }
}
