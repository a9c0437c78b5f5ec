//! Sequential network container: forward traces, exact backward passes with
//! optional gradient injection at a tapped layer, and the linearized
//! double-backward used by the WGAN gradient penalty.

use ndarray::Array1;

use crate::diffcore::layers::{Layer, LayerCache, ParamGrads};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A stack of named layers applied in order.
#[derive(Debug, Clone)]
pub struct Network<F> {
    layers: Vec<(String, Layer<F>)>,
}

/// Activations and per-layer caches from one forward pass.
pub struct ForwardTrace<F> {
    pub input: Tensor<F>,
    /// `outputs[i]` is the activation after layer `i`.
    pub outputs: Vec<Tensor<F>>,
    caches: Vec<LayerCache<F>>,
}

impl<F> ForwardTrace<F> {
    pub fn output(&self) -> &Tensor<F> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

/// Per-layer parameter gradients, aligned with the network's layer order.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub by_layer: Vec<Option<ParamGrads<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(net: &Network<F>) -> Self {
        Gradients {
            by_layer: net.layers.iter().map(|_| None).collect(),
        }
    }

    /// `self += other * scale`, layer by layer.
    pub fn add_scaled(&mut self, other: &Gradients<F>, scale: F) {
        for (dst, src) in self.by_layer.iter_mut().zip(&other.by_layer) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => {
                    d.w.zip_mut_with(&s.w, |a, &b| *a = *a + b * scale);
                    d.b.zip_mut_with(&s.b, |a, &b| *a = *a + b * scale);
                }
                (None, Some(s)) => {
                    *dst = Some(ParamGrads {
                        w: s.w.mapv(|v| v * scale),
                        b: s.b.mapv(|v| v * scale),
                    });
                }
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, scale: F) {
        for g in self.by_layer.iter_mut().flatten() {
            g.w.mapv_inplace(|v| v * scale);
            g.b.mapv_inplace(|v| v * scale);
        }
    }
}

impl<F: Scalar> Network<F> {
    pub fn new() -> Self {
        Network { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<F>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|(n, _)| n == name)
    }

    pub fn layer(&self, i: usize) -> &Layer<F> {
        &self.layers[i].1
    }

    /// Inference-mode forward.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut cur = x.clone();
        for (_, layer) in &self.layers {
            let (out, _) = layer.forward(&cur)?;
            cur = out;
        }
        Ok(cur)
    }

    /// Forward pass retaining everything backward passes need.
    pub fn trace(&self, x: &Tensor<F>) -> Result<ForwardTrace<F>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (_, layer) in &self.layers {
            let (out, cache) = layer.forward(&cur)?;
            outputs.push(out.clone());
            caches.push(cache);
            cur = out;
        }
        Ok(ForwardTrace {
            input: x.clone(),
            outputs,
            caches,
        })
    }

    /// Backward pass seeded with `grad_out` at the network output.
    ///
    /// `injections` adds extra gradient contributions at intermediate
    /// activations: `(i, g)` adds `g` to the gradient flowing into layer
    /// `i`'s output (used to feed the feature-matching term in at the
    /// discriminator's tapped layer). Returns parameter gradients and the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        grad_out: &Tensor<F>,
        injections: &[(usize, Tensor<F>)],
    ) -> Result<(Gradients<F>, Tensor<F>)> {
        if trace.outputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(
                "trace does not match network depth".into(),
            ));
        }
        let mut grad = grad_out.clone();
        let mut by_layer: Vec<Option<ParamGrads<F>>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            for (at, extra) in injections {
                if *at == i {
                    if extra.shape() != grad.shape() {
                        return Err(Error::ShapeMismatch {
                            context: format!("gradient injection at layer {i}"),
                            expected: grad.shape().to_vec(),
                            got: extra.shape().to_vec(),
                        });
                    }
                    grad.zip_mut_with(extra, |a, &b| *a = *a + b);
                }
            }
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.outputs[i - 1]
            };
            let (gi, pg) =
                self.layers[i]
                    .1
                    .backward(input, &trace.outputs[i], &trace.caches[i], &grad)?;
            by_layer[i] = pg;
            grad = gi;
        }
        Ok((Gradients { by_layer }, grad))
    }

    /// Jacobian-vector product along a primal trace: propagates `tangent`
    /// through the network with nonlinearity masks and pooling routes frozen
    /// from `primal`, biases skipped. The result is itself a trace so it can
    /// be differentiated by [`Network::backward_linearized`].
    pub fn linearized(&self, primal: &ForwardTrace<F>, tangent: &Tensor<F>) -> Result<ForwardTrace<F>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = tangent.clone();
        for (i, (_, layer)) in self.layers.iter().enumerate() {
            let primal_input = if i == 0 {
                &primal.input
            } else {
                &primal.outputs[i - 1]
            };
            let (out, cache) =
                layer.linearized(primal_input, &primal.outputs[i], &primal.caches[i], &cur)?;
            outputs.push(out.clone());
            caches.push(cache);
            cur = out;
        }
        Ok(ForwardTrace {
            input: tangent.clone(),
            outputs,
            caches,
        })
    }

    /// Backward pass through a linearized trace. Weight gradients come from
    /// the tangent activations; masks come from the primal trace; bias
    /// gradients are identically zero for the linearized chain and are
    /// returned as zeros.
    pub fn backward_linearized(
        &self,
        primal: &ForwardTrace<F>,
        tangent: &ForwardTrace<F>,
        grad_out: &Tensor<F>,
    ) -> Result<Gradients<F>> {
        let mut grad = grad_out.clone();
        let mut by_layer: Vec<Option<ParamGrads<F>>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let tangent_input = if i == 0 {
                &tangent.input
            } else {
                &tangent.outputs[i - 1]
            };
            let layer = &self.layers[i].1;
            // Nonlinearities mask by primal activations; linear layers take
            // their gradients from the tangent chain.
            let (gi, pg) = match layer {
                Layer::Relu | Layer::LeakyRelu(_) | Layer::Tanh | Layer::MaxPool2 => {
                    let primal_input = if i == 0 {
                        &primal.input
                    } else {
                        &primal.outputs[i - 1]
                    };
                    layer.backward(primal_input, &primal.outputs[i], &primal.caches[i], &grad)?
                }
                _ => layer.backward(
                    tangent_input,
                    &tangent.outputs[i],
                    &tangent.caches[i],
                    &grad,
                )?,
            };
            by_layer[i] = pg.map(|mut g| {
                g.b.fill(F::zero());
                g
            });
            grad = gi;
        }
        Ok(Gradients { by_layer })
    }

    /// Visits parameters in layer order as `(name, tensor)` pairs, names
    /// formatted `"{layer}.w"` / `"{layer}.b"`.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<F>)) {
        for (name, layer) in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    f(&format!("{name}.w"), &l.w.clone().into_dyn());
                    f(&format!("{name}.b"), &l.b.clone().into_dyn());
                }
                Layer::Conv2d(c) => {
                    f(&format!("{name}.w"), &c.w.clone().into_dyn());
                    f(&format!("{name}.b"), &c.b.clone().into_dyn());
                }
                Layer::ConvTranspose2d(t) => {
                    f(&format!("{name}.w"), &t.w.clone().into_dyn());
                    f(&format!("{name}.b"), &t.b.clone().into_dyn());
                }
                _ => {}
            }
        }
    }

    /// Mutates parameters in layer order. The callback receives flat mutable
    /// slices; shapes are fixed by the architecture.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [F])) {
        for (name, layer) in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    f(&format!("{name}.w"), l.w.as_slice_mut().unwrap());
                    f(&format!("{name}.b"), l.b.as_slice_mut().unwrap());
                }
                Layer::Conv2d(c) => {
                    f(&format!("{name}.w"), c.w.as_slice_mut().unwrap());
                    f(&format!("{name}.b"), c.b.as_slice_mut().unwrap());
                }
                Layer::ConvTranspose2d(t) => {
                    f(&format!("{name}.w"), t.w.as_slice_mut().unwrap());
                    f(&format!("{name}.b"), t.b.as_slice_mut().unwrap());
                }
                _ => {}
            }
        }
    }

    /// Flat views of the parameter tensors of layer `i` (weight, bias), if
    /// the layer has parameters. Paired with [`Gradients::by_layer`].
    pub fn layer_params_mut(&mut self, i: usize) -> Option<(&mut [F], &mut [F])> {
        match &mut self.layers[i].1 {
            Layer::Linear(l) => Some((l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap())),
            Layer::Conv2d(c) => Some((c.w.as_slice_mut().unwrap(), c.b.as_slice_mut().unwrap())),
            Layer::ConvTranspose2d(t) => {
                Some((t.w.as_slice_mut().unwrap(), t.b.as_slice_mut().unwrap()))
            }
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.len());
        n
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|(n, l)| (n.clone(), l.cast::<G>()))
                .collect(),
        }
    }

    /// Replaces the parameters of the named layer. Used by checkpoint
    /// loading; shapes must match exactly.
    pub fn set_layer_params(&mut self, name: &str, w: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
        let idx = self
            .layer_index(name)
            .ok_or_else(|| Error::Parameter {
                name: name.into(),
                reason: "no such layer".into(),
            })?;
        let check = |expected: &[usize], got: &[usize], which: &str| -> Result<()> {
            if expected != got {
                Err(Error::Parameter {
                    name: format!("{name}.{which}"),
                    reason: format!("shape mismatch: expected {expected:?}, got {got:?}"),
                })
            } else {
                Ok(())
            }
        };
        match &mut self.layers[idx].1 {
            Layer::Linear(l) => {
                check(&[l.w.nrows(), l.w.ncols()], w.shape(), "w")?;
                check(&[l.b.len()], b.shape(), "b")?;
                l.w.assign(&w.view().into_dimensionality().unwrap());
                l.b = Array1::from_iter(b.iter().cloned());
            }
            Layer::Conv2d(c) => {
                check(c.w.shape(), w.shape(), "w")?;
                check(&[c.b.len()], b.shape(), "b")?;
                c.w.assign(&w.view().into_dimensionality().unwrap());
                c.b = Array1::from_iter(b.iter().cloned());
            }
            Layer::ConvTranspose2d(t) => {
                check(t.w.shape(), w.shape(), "w")?;
                check(&[t.b.len()], b.shape(), "b")?;
                t.w.assign(&w.view().into_dimensionality().unwrap());
                t.b = Array1::from_iter(b.iter().cloned());
            }
            _ => {
                return Err(Error::Parameter {
                    name: name.into(),
                    reason: "layer has no parameters".into(),
                })
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Default for Network<F> {
    fn default() -> Self {
        Self::new()
    }
}
