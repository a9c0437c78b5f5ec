//! Layer zoo: linear, convolution, transposed convolution, 2x2 max pooling,
//! and pointwise nonlinearities.
//!
//! Convolutions use zero padding with explicit stride and are lowered to
//! GEMM via `im2col`/`col2im`. Every layer implements an exact analytic
//! backward pass, plus a *linearized* pass (Jacobian-vector product with the
//! nonlinearity masks frozen from a primal trace) which the WGAN gradient
//! penalty uses for its second-order term.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, Ix2, Ix4};

use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Parameters of a fully connected layer. Weight is `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Parameters of a 2-d convolution. Weight is `(out_ch, in_ch, kh, kw)`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

/// Parameters of a 2-d transposed convolution. Weight is
/// `(in_ch, out_ch, kh, kw)`; output size is `(h-1)*stride - 2*pad + kh`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub enum Layer<F> {
    Linear(Linear<F>),
    Conv2d(Conv2d<F>),
    ConvTranspose2d(ConvTranspose2d<F>),
    /// Max pooling, 2x2 window, stride 2.
    MaxPool2,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Flatten,
}

/// Per-layer auxiliary state captured by a forward trace.
#[derive(Debug, Clone)]
pub enum LayerCache<F> {
    None,
    /// im2col matrix of the layer input (convolution weight gradients).
    Cols(Array2<F>),
    /// Flat within-plane argmax per pooled output element.
    Argmax(Vec<u32>),
}

/// Gradients for one parameterized layer.
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> Layer<F> {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            Layer::Linear(_) | Layer::Conv2d(_) | Layer::ConvTranspose2d(_)
        )
    }

    /// Forward pass, returning the output and whatever the backward pass
    /// will need beyond the input/output activations themselves.
    pub fn forward(&self, x: &Tensor<F>) -> Result<(Tensor<F>, LayerCache<F>)> {
        match self {
            Layer::Linear(l) => {
                let xm = as_2d(x, "linear input")?;
                if xm.ncols() != l.w.ncols() {
                    return Err(shape_err("linear input", &[l.w.ncols()], &[xm.ncols()]));
                }
                let mut out = xm.dot(&l.w.t());
                out += &l.b;
                Ok((out.into_dyn(), LayerCache::None))
            }
            Layer::Conv2d(c) => {
                let xv = as_4d(x, "conv input")?;
                let (n, ic, h, w) = xv.dim();
                if ic != c.w.dim().1 {
                    return Err(shape_err("conv input channels", &[c.w.dim().1], &[ic]));
                }
                let (oc, _, kh, kw) = c.w.dim();
                let (oh, ow) = conv_out_size(h, w, kh, kw, c.stride, c.pad)?;
                let cols = im2col(&xv, kh, kw, c.stride, c.pad, oh, ow);
                let wm = weight_matrix(&c.w); // (oc, ic*kh*kw)
                let mut out_mat = cols.dot(&wm.t()); // (n*oh*ow, oc)
                out_mat += &c.b;
                let out = rows_to_nchw(out_mat, n, oc, oh, ow);
                Ok((out.into_dyn(), LayerCache::Cols(cols)))
            }
            Layer::ConvTranspose2d(t) => {
                let xv = as_4d(x, "conv_transpose input")?;
                let (n, ic, h, w) = xv.dim();
                if ic != t.w.dim().0 {
                    return Err(shape_err(
                        "conv_transpose input channels",
                        &[t.w.dim().0],
                        &[ic],
                    ));
                }
                let (_, oc, kh, kw) = t.w.dim();
                let oh = (h - 1) * t.stride + kh;
                let ow = (w - 1) * t.stride + kw;
                if oh < 2 * t.pad || ow < 2 * t.pad {
                    return Err(Error::InvalidArgument(
                        "conv_transpose padding exceeds output".into(),
                    ));
                }
                let (oh, ow) = (oh - 2 * t.pad, ow - 2 * t.pad);
                let xm = nchw_to_rows(&xv); // (n*h*w, ic)
                let wm = t
                    .w
                    .view()
                    .into_shape_with_order((ic, oc * kh * kw))
                    .unwrap()
                    .to_owned();
                let prod = xm.dot(&wm); // (n*h*w, oc*kh*kw)
                let mut out = Array4::<F>::zeros((n, oc, oh, ow));
                col2im_add(&mut out, &prod.view(), n, h, w, kh, kw, t.stride, t.pad);
                for (i, mut ch) in out.axis_iter_mut(Axis(1)).enumerate() {
                    let b = t.b[i];
                    ch.map_inplace(|e| *e = *e + b);
                }
                Ok((out.into_dyn(), LayerCache::None))
            }
            Layer::MaxPool2 => {
                let xv = as_4d(x, "maxpool input")?;
                let (n, c, h, w) = xv.dim();
                let (oh, ow) = (h / 2, w / 2);
                if oh == 0 || ow == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "maxpool input {h}x{w} too small"
                    )));
                }
                let mut out = Array4::<F>::zeros((n, c, oh, ow));
                let mut argmax = vec![0u32; n * c * oh * ow];
                let mut flat = 0usize;
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = xv.index_axis(Axis(0), ni);
                        let plane = plane.index_axis(Axis(0), ci);
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = plane[[2 * oy, 2 * ox]];
                                let mut best_idx = (2 * oy * w + 2 * ox) as u32;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = plane[[2 * oy + dy, 2 * ox + dx]];
                                        if v > best {
                                            best = v;
                                            best_idx =
                                                ((2 * oy + dy) * w + 2 * ox + dx) as u32;
                                        }
                                    }
                                }
                                out[[ni, ci, oy, ox]] = best;
                                argmax[flat] = best_idx;
                                flat += 1;
                            }
                        }
                    }
                }
                Ok((out.into_dyn(), LayerCache::Argmax(argmax)))
            }
            Layer::Relu => {
                let out = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
                Ok((out, LayerCache::None))
            }
            Layer::LeakyRelu(slope) => {
                let s = F::from_f64(*slope);
                let out = x.mapv(|v| if v > F::zero() { v } else { v * s });
                Ok((out, LayerCache::None))
            }
            Layer::Tanh => Ok((x.mapv(|v| v.tanh()), LayerCache::None)),
            Layer::Flatten => {
                let n = x.shape()[0];
                let d: usize = x.len() / n.max(1);
                let out = x
                    .view()
                    .into_shape_with_order((n, d))
                    .map_err(|_| shape_err("flatten", &[n, d], x.shape()))?
                    .to_owned();
                Ok((out.into_dyn(), LayerCache::None))
            }
        }
    }

    /// Backward pass. `input`/`output` are the primal activations around this
    /// layer; returns the gradient with respect to the input and, for
    /// parameterized layers, the parameter gradients.
    pub fn backward(
        &self,
        input: &Tensor<F>,
        output: &Tensor<F>,
        cache: &LayerCache<F>,
        grad_out: &Tensor<F>,
    ) -> Result<(Tensor<F>, Option<ParamGrads<F>>)> {
        match self {
            Layer::Linear(l) => {
                let xm = as_2d(input, "linear input")?;
                let gm = as_2d(grad_out, "linear grad")?;
                let dw = gm.t().dot(&xm); // (out, in)
                let db = gm.sum_axis(Axis(0));
                let dx = gm.dot(&l.w.view());
                Ok((
                    dx.into_dyn(),
                    Some(ParamGrads {
                        w: dw.into_dyn(),
                        b: db.into_dyn(),
                    }),
                ))
            }
            Layer::Conv2d(c) => {
                let xv = as_4d(input, "conv input")?;
                let (n, _ic, h, w) = xv.dim();
                let gv = as_4d(grad_out, "conv grad")?;
                let (_, oc, oh, ow) = gv.dim();
                let (_, ic, kh, kw) = c.w.dim();
                let g_mat = nchw_to_rows(&gv); // (n*oh*ow, oc)
                let cols = match cache {
                    LayerCache::Cols(cols) => cols.view().to_owned(),
                    _ => im2col(&xv, kh, kw, c.stride, c.pad, oh, ow),
                };
                let dw_mat = g_mat.t().dot(&cols); // (oc, ic*kh*kw)
                let dw = dw_mat
                    .into_shape_with_order((oc, ic, kh, kw))
                    .unwrap()
                    .to_owned();
                let db = g_mat.sum_axis(Axis(0));
                let wm = weight_matrix(&c.w);
                let d_cols = g_mat.dot(&wm); // (n*oh*ow, ic*kh*kw)
                let mut dx = Array4::<F>::zeros((n, ic, h, w));
                col2im_add(&mut dx, &d_cols.view(), n, oh, ow, kh, kw, c.stride, c.pad);
                Ok((
                    dx.into_dyn(),
                    Some(ParamGrads {
                        w: dw.into_dyn(),
                        b: db.into_dyn(),
                    }),
                ))
            }
            Layer::ConvTranspose2d(t) => {
                let xv = as_4d(input, "conv_transpose input")?;
                let (n, ic, h, w) = xv.dim();
                let gv = as_4d(grad_out, "conv_transpose grad")?;
                let (_, oc, kh, kw) = t.w.dim();
                // Gather the scattered contributions back: rows over the
                // *input* grid, columns (oc, kh, kw).
                let d_prod = im2col(&gv, kh, kw, t.stride, t.pad, h, w); // (n*h*w, oc*kh*kw)
                let xm = nchw_to_rows(&xv); // (n*h*w, ic)
                let dw_mat = xm.t().dot(&d_prod); // (ic, oc*kh*kw)
                let dw = dw_mat
                    .into_shape_with_order((ic, oc, kh, kw))
                    .unwrap()
                    .to_owned();
                let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                let wm = t
                    .w
                    .view()
                    .into_shape_with_order((ic, oc * kh * kw))
                    .unwrap()
                    .to_owned();
                let dx_mat = d_prod.dot(&wm.t()); // (n*h*w, ic)
                let dx = rows_to_nchw(dx_mat, n, ic, h, w);
                Ok((
                    dx.into_dyn(),
                    Some(ParamGrads {
                        w: dw.into_dyn(),
                        b: db.into_dyn(),
                    }),
                ))
            }
            Layer::MaxPool2 => {
                let xv = as_4d(input, "maxpool input")?;
                let (n, c, h, w) = xv.dim();
                let gv = as_4d(grad_out, "maxpool grad")?;
                let argmax = match cache {
                    LayerCache::Argmax(a) => a,
                    _ => {
                        return Err(Error::InvalidArgument(
                            "maxpool backward without argmax cache".into(),
                        ))
                    }
                };
                let mut dx = Array4::<F>::zeros((n, c, h, w));
                let (_, _, oh, ow) = gv.dim();
                let mut flat = 0usize;
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let idx = argmax[flat] as usize;
                                dx[[ni, ci, idx / w, idx % w]] =
                                    dx[[ni, ci, idx / w, idx % w]] + gv[[ni, ci, oy, ox]];
                                flat += 1;
                            }
                        }
                    }
                }
                Ok((dx.into_dyn(), None))
            }
            Layer::Relu => {
                let mut dx = grad_out.clone();
                ndarray::Zip::from(&mut dx).and(input).for_each(|g, &x| {
                    if x <= F::zero() {
                        *g = F::zero();
                    }
                });
                Ok((dx, None))
            }
            Layer::LeakyRelu(slope) => {
                let s = F::from_f64(*slope);
                let mut dx = grad_out.clone();
                ndarray::Zip::from(&mut dx).and(input).for_each(|g, &x| {
                    if x <= F::zero() {
                        *g = *g * s;
                    }
                });
                Ok((dx, None))
            }
            Layer::Tanh => {
                let mut dx = grad_out.clone();
                ndarray::Zip::from(&mut dx).and(output).for_each(|g, &y| {
                    *g = *g * (F::one() - y * y);
                });
                Ok((dx, None))
            }
            Layer::Flatten => {
                let dx = grad_out
                    .view()
                    .into_shape_with_order(input.raw_dim())
                    .map_err(|_| shape_err("flatten backward", input.shape(), grad_out.shape()))?
                    .to_owned();
                Ok((dx, None))
            }
        }
    }

    /// Jacobian-vector product with nonlinearity masks frozen from the primal
    /// trace: parameterized layers apply their weights without bias, masks and
    /// pooling routes come from `primal_input`/`primal_output`/`cache`.
    pub fn linearized(
        &self,
        primal_input: &Tensor<F>,
        primal_output: &Tensor<F>,
        cache: &LayerCache<F>,
        tangent: &Tensor<F>,
    ) -> Result<(Tensor<F>, LayerCache<F>)> {
        match self {
            Layer::Linear(l) => {
                let tm = as_2d(tangent, "linear tangent")?;
                Ok((tm.dot(&l.w.t()).into_dyn(), LayerCache::None))
            }
            Layer::Conv2d(c) => {
                let tv = as_4d(tangent, "conv tangent")?;
                let (n, _ic, h, w) = tv.dim();
                let (oc, _, kh, kw) = c.w.dim();
                let (oh, ow) = conv_out_size(h, w, kh, kw, c.stride, c.pad)?;
                let cols = im2col(&tv, kh, kw, c.stride, c.pad, oh, ow);
                let wm = weight_matrix(&c.w);
                let out = rows_to_nchw(cols.dot(&wm.t()), n, oc, oh, ow);
                Ok((out.into_dyn(), LayerCache::Cols(cols)))
            }
            Layer::ConvTranspose2d(t) => {
                let tv = as_4d(tangent, "conv_transpose tangent")?;
                let (n, ic, h, w) = tv.dim();
                let (_, oc, kh, kw) = t.w.dim();
                let (oh, ow) = (
                    (h - 1) * t.stride + kh - 2 * t.pad,
                    (w - 1) * t.stride + kw - 2 * t.pad,
                );
                let tm = nchw_to_rows(&tv);
                let wm = t
                    .w
                    .view()
                    .into_shape_with_order((ic, oc * kh * kw))
                    .unwrap()
                    .to_owned();
                let prod = tm.dot(&wm);
                let mut out = Array4::<F>::zeros((n, oc, oh, ow));
                col2im_add(&mut out, &prod.view(), n, h, w, kh, kw, t.stride, t.pad);
                Ok((out.into_dyn(), LayerCache::None))
            }
            Layer::MaxPool2 => {
                let tv = as_4d(tangent, "maxpool tangent")?;
                let (n, c, _h, w) = tv.dim();
                let pv = as_4d(primal_output, "maxpool primal output")?;
                let (_, _, oh, ow) = pv.dim();
                let argmax = match cache {
                    LayerCache::Argmax(a) => a,
                    _ => {
                        return Err(Error::InvalidArgument(
                            "maxpool linearized without argmax cache".into(),
                        ))
                    }
                };
                let mut out = Array4::<F>::zeros((n, c, oh, ow));
                let mut flat = 0usize;
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let idx = argmax[flat] as usize;
                                out[[ni, ci, oy, ox]] = tv[[ni, ci, idx / w, idx % w]];
                                flat += 1;
                            }
                        }
                    }
                }
                Ok((out.into_dyn(), LayerCache::Argmax(argmax.clone())))
            }
            Layer::Relu => {
                let mut out = tangent.clone();
                ndarray::Zip::from(&mut out)
                    .and(primal_input)
                    .for_each(|t, &x| {
                        if x <= F::zero() {
                            *t = F::zero();
                        }
                    });
                Ok((out, LayerCache::None))
            }
            Layer::LeakyRelu(slope) => {
                let s = F::from_f64(*slope);
                let mut out = tangent.clone();
                ndarray::Zip::from(&mut out)
                    .and(primal_input)
                    .for_each(|t, &x| {
                        if x <= F::zero() {
                            *t = *t * s;
                        }
                    });
                Ok((out, LayerCache::None))
            }
            Layer::Tanh => {
                let mut out = tangent.clone();
                ndarray::Zip::from(&mut out)
                    .and(primal_output)
                    .for_each(|t, &y| {
                        *t = *t * (F::one() - y * y);
                    });
                Ok((out, LayerCache::None))
            }
            Layer::Flatten => {
                let n = tangent.shape()[0];
                let d = tangent.len() / n.max(1);
                Ok((
                    tangent
                        .view()
                        .into_shape_with_order((n, d))
                        .unwrap()
                        .to_owned()
                        .into_dyn(),
                    LayerCache::None,
                ))
            }
        }
    }

    /// Casts parameters to another precision.
    pub fn cast<G: Scalar>(&self) -> Layer<G> {
        let c = |t: &Array4<F>| t.mapv(|v| G::from_f64(v.to_f64()));
        let c1 = |t: &Array1<F>| t.mapv(|v| G::from_f64(v.to_f64()));
        match self {
            Layer::Linear(l) => Layer::Linear(Linear {
                w: l.w.mapv(|v| G::from_f64(v.to_f64())),
                b: c1(&l.b),
            }),
            Layer::Conv2d(x) => Layer::Conv2d(Conv2d {
                w: c(&x.w),
                b: c1(&x.b),
                stride: x.stride,
                pad: x.pad,
            }),
            Layer::ConvTranspose2d(x) => Layer::ConvTranspose2d(ConvTranspose2d {
                w: c(&x.w),
                b: c1(&x.b),
                stride: x.stride,
                pad: x.pad,
            }),
            Layer::MaxPool2 => Layer::MaxPool2,
            Layer::Relu => Layer::Relu,
            Layer::LeakyRelu(s) => Layer::LeakyRelu(*s),
            Layer::Tanh => Layer::Tanh,
            Layer::Flatten => Layer::Flatten,
        }
    }
}

fn shape_err(context: &str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn as_2d<'a, F: Scalar>(t: &'a Tensor<F>, ctx: &str) -> Result<ArrayView2<'a, F>> {
    t.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| shape_err(ctx, &[0, 0], t.shape()))
}

fn as_4d<'a, F: Scalar>(t: &'a Tensor<F>, ctx: &str) -> Result<ArrayView4<'a, F>> {
    t.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err(ctx, &[0, 0, 0, 0], t.shape()))
}

fn conv_out_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let oh = (h + 2 * pad).checked_sub(kh);
    let ow = (w + 2 * pad).checked_sub(kw);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok((oh / stride + 1, ow / stride + 1)),
        _ => Err(Error::InvalidArgument(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{w}"
        ))),
    }
}

/// Conv weight reshaped to `(oc, ic*kh*kw)`.
fn weight_matrix<F: Scalar>(w: &Array4<F>) -> Array2<F> {
    let (oc, ic, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((oc, ic * kh * kw))
        .unwrap()
        .to_owned()
}

/// `(n*oh*ow, c)` row matrix -> `(n, c, oh, ow)`.
fn rows_to_nchw<F: Scalar>(mat: Array2<F>, n: usize, c: usize, oh: usize, ow: usize) -> Array4<F> {
    let arr = mat.into_shape_with_order((n, oh, ow, c)).unwrap();
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    out.assign(&arr.permuted_axes([0, 3, 1, 2]));
    out
}

/// `(n, c, h, w)` -> `(n*h*w, c)` row matrix.
fn nchw_to_rows<F: Scalar>(x: &ArrayView4<'_, F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let perm = x.view().permuted_axes([0, 2, 3, 1]); // (n, h, w, c)
    let mut out = Array2::<F>::zeros((n * h * w, c));
    for (dst, src) in out.iter_mut().zip(perm.iter()) {
        *dst = *src;
    }
    out
}

/// Gathers sliding windows of `x` into a `(n*oh*ow, c*kh*kw)` matrix.
/// Out-of-range taps (zero padding) stay zero.
pub fn im2col<F: Scalar>(
    x: &ArrayView4<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let ncols = c * kh * kw;
    let mut cols = Array2::<F>::zeros((n * oh * ow, ncols));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for ky in 0..kh {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let row_base = (ni * oh + oy) * ow;
                    for kx in 0..kw {
                        let col = (ci * kh + ky) * kw + kx;
                        // valid ox range: 0 <= ox*stride + kx - pad < w
                        let ox_lo = pad.saturating_sub(kx).div_ceil(stride).min(ow);
                        let ox_hi = if w + pad > kx {
                            ((w + pad - kx - 1) / stride + 1).min(ow)
                        } else {
                            0
                        };
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            cs[(row_base + ox) * ncols + col] = in_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a `(n*sh*sw, c*kh*kw)` matrix back
/// into `dst`, where `(sh, sw)` is the sliding-window grid of `dst`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<F: Scalar>(
    dst: &mut Array4<F>,
    cols: &ArrayView2<'_, F>,
    n: usize,
    sh: usize,
    sw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (_, c, h, w) = dst.dim();
    let ncols = c * kh * kw;
    debug_assert_eq!(cols.dim(), (n * sh * sw, ncols));
    let ds = dst.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("standard layout");
    for ni in 0..n {
        for ci in 0..c {
            let plane = &mut ds[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for ky in 0..kh {
                for sy in 0..sh {
                    let iy = (sy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_base = (ni * sh + sy) * sw;
                    let out_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..kw {
                        let col = (ci * kh + ky) * kw + kx;
                        let sx_lo = pad.saturating_sub(kx).div_ceil(stride).min(sw);
                        let sx_hi = if w + pad > kx {
                            ((w + pad - kx - 1) / stride + 1).min(sw)
                        } else {
                            0
                        };
                        for sx in sx_lo..sx_hi {
                            let ix = sx * stride + kx - pad;
                            out_row[ix] = out_row[ix] + cs[(row_base + sx) * ncols + col];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};

    fn tensor4<F: Scalar>(v: Vec<F>, shape: (usize, usize, usize, usize)) -> Tensor<F> {
        Array::from_shape_vec(shape, v).unwrap().into_dyn()
    }

    #[test]
    fn linear_forward_exact() {
        let l = Layer::Linear(Linear {
            w: arr2(&[[1.0f64, 2.0], [3.0, 4.0]]),
            b: arr1(&[0.5, -0.5]),
        });
        let x = arr2(&[[1.0f64, 1.0]]).into_dyn();
        let (y, _) = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!((y[[0, 0]] - 3.5).abs() < 1e-12);
        assert!((y[[0, 1]] - 6.5).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // 1x1 kernel with weight 1 is the identity.
        let c = Layer::Conv2d(Conv2d {
            w: Array4::from_elem((1, 1, 1, 1), 1.0f64),
            b: arr1(&[0.0]),
            stride: 1,
            pad: 0,
        });
        let x = tensor4((0..9).map(|v| v as f64).collect(), (1, 1, 3, 3));
        let (y, _) = c.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_padding_shape() {
        let c = Layer::Conv2d(Conv2d {
            w: Array4::from_elem((2, 1, 3, 3), 0.1f64),
            b: arr1(&[0.0, 0.0]),
            stride: 1,
            pad: 1,
        });
        let x = tensor4(vec![1.0; 28 * 28], (1, 1, 28, 28));
        let (y, _) = c.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 28, 28]);
        // Interior sums 9 taps, corner only 4.
        assert!((y[[0, 0, 14, 14]] - 0.9).abs() < 1e-9);
        assert!((y[[0, 0, 0, 0]] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn conv_strided_matches_hand_rolled() {
        let c = Conv2d {
            w: Array4::from_shape_vec(
                (1, 1, 2, 2),
                vec![1.0f64, 2.0, 3.0, 4.0],
            )
            .unwrap(),
            b: arr1(&[0.0]),
            stride: 2,
            pad: 0,
        };
        let x = tensor4((0..16).map(|v| v as f64).collect(), (1, 1, 4, 4));
        let (y, _) = Layer::Conv2d(c).forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // window (0,0): 0*1 + 1*2 + 4*3 + 5*4 = 34
        assert!((y[[0, 0, 0, 0]] - 34.0).abs() < 1e-12);
        // window (1,1): 10*1 + 11*2 + 14*3 + 15*4 = 134
        assert!((y[[0, 0, 1, 1]] - 134.0).abs() < 1e-12);
    }

    #[test]
    fn conv_transpose_inverts_stride_geometry() {
        let t = Layer::ConvTranspose2d(ConvTranspose2d {
            w: Array4::from_elem((1, 1, 4, 4), 1.0f64),
            b: arr1(&[0.0]),
            stride: 2,
            pad: 1,
        });
        let x = tensor4(vec![1.0; 7 * 7], (1, 1, 7, 7));
        let (y, _) = t.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 14, 14]);
    }

    #[test]
    fn maxpool_picks_maximum_and_routes_gradient() {
        let p = Layer::MaxPool2;
        let x = tensor4(
            vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0],
            (1, 1, 4, 4),
        );
        let (y, cache) = p.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y[[0, 0, 0, 0]], 6.0);
        assert_eq!(y[[0, 0, 1, 1]], 16.0);
        let g = tensor4(vec![1.0f64, 1.0, 1.0, 1.0], (1, 1, 2, 2));
        let (dx, _) = p.backward(&x, &y, &cache, &g).unwrap();
        assert_eq!(dx[[0, 0, 1, 1]], 1.0); // position of 6
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0); // position of 16
    }

    #[test]
    fn flatten_round_trip() {
        let f = Layer::Flatten;
        let x = tensor4((0..8).map(|v| v as f64).collect(), (2, 1, 2, 2));
        let (y, cache) = f.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        let (dx, _) = f.backward(&x, &y, &cache, &y.clone()).unwrap();
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish fills.
        let x = Array::from_shape_fn((2, 3, 5, 5), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 * 0.25 - 1.0
        });
        let (kh, kw, stride, pad) = (3, 3, 2, 1);
        let (oh, ow) = conv_out_size(5, 5, kh, kw, stride, pad).unwrap();
        let cols = im2col(&x.view(), kh, kw, stride, pad, oh, ow);
        let c = Array::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 13 + j * 3) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &c).sum();
        let mut back = Array4::<f64>::zeros((2, 3, 5, 5));
        col2im_add(&mut back, &c.view(), 2, oh, ow, kh, kw, stride, pad);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }
}
