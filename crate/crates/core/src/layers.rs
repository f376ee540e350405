//! The layer zoo. Every layer kind exposes three evaluations:
//!
//! - `forward`: ordinary evaluation, returning a trace entry with whatever the
//!   exact backward pass needs (pool argmax indices, ReLU masks, inputs).
//! - `backward`: exact vector-Jacobian product using the trace.
//! - `pseudo_backward`: the feature-agnostic variant. Linear layers apply the
//!   same transposed map as `backward`; max-pool distributes gradient
//!   uniformly over its window like an average pool; ReLU and the sigmoid
//!   head apply a constant dummy coefficient. No trace is consumed — the
//!   signature has no trace parameter, which is what makes the rule
//!   image-independent by construction.
//!
//! Bias terms vanish under every input-gradient map; bias gradients only ever
//! appear in `backward`'s parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Hyperparameters of one layer. Shape inference is total on admissible
/// inputs; everything here serializes into checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
    UpsampleNearest {
        factor: usize,
    },
    SigmoidHead,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::UpsampleNearest { .. } => "upsample_nearest",
            LayerSpec::SigmoidHead => "sigmoid_head",
        }
    }

    fn inadmissible(&self, input: &Shape, reason: impl Into<String>) -> Error {
        Error::InadmissibleInput {
            index: 0,
            layer: self.name().to_string(),
            input: input.to_string(),
            reason: reason.into(),
        }
    }

    /// Inferred output shape for an admissible input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = input
                    .as_chw()
                    .map_err(|_| self.inadmissible(input, "expected channels x height x width"))?;
                if c != in_channels {
                    return Err(
                        self.inadmissible(input, format!("expected {} input channels", in_channels))
                    );
                }
                if kernel == 0 || stride == 0 {
                    return Err(self.inadmissible(input, "kernel and stride must be >= 1"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(self.inadmissible(input, "kernel larger than padded input"));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(Shape::new(vec![out_channels, oh, ow]))
            }
            LayerSpec::Relu | LayerSpec::SigmoidHead => Ok(input.clone()),
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                let (c, h, w) = input
                    .as_chw()
                    .map_err(|_| self.inadmissible(input, "expected channels x height x width"))?;
                if window == 0 || stride == 0 {
                    return Err(self.inadmissible(input, "window and stride must be >= 1"));
                }
                if h < window || w < window {
                    return Err(self.inadmissible(input, "window larger than input"));
                }
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                Ok(Shape::new(vec![c, oh, ow]))
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.dims() != [inputs] {
                    return Err(
                        self.inadmissible(input, format!("expected rank-1 shape [{}]", inputs))
                    );
                }
                Ok(Shape::new(vec![outputs]))
            }
            LayerSpec::Flatten => Ok(Shape::new(vec![input.count()])),
            LayerSpec::UpsampleNearest { factor } => {
                let (c, h, w) = input
                    .as_chw()
                    .map_err(|_| self.inadmissible(input, "expected channels x height x width"))?;
                if factor == 0 {
                    return Err(self.inadmissible(input, "factor must be >= 1"));
                }
                Ok(Shape::new(vec![c, h * factor, w * factor]))
            }
        }
    }

    /// Weight and bias shapes for parameterized kinds.
    pub fn param_shapes(&self) -> Option<(Shape, Shape)> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kernel,
                ..
            } => Some((
                Shape::new(vec![out_channels, in_channels, kernel, kernel]),
                Shape::new(vec![out_channels]),
            )),
            LayerSpec::Dense { inputs, outputs } => Some((
                Shape::new(vec![outputs, inputs]),
                Shape::new(vec![outputs]),
            )),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_shapes().is_some()
    }
}

/// Weights and bias for one layer; both absent on parameter-free kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<E: Element> {
    pub weights: Option<Tensor<E>>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> LayerParams<E> {
    pub fn none() -> Self {
        LayerParams {
            weights: None,
            bias: None,
        }
    }

    pub fn new(weights: Tensor<E>, bias: Tensor<E>) -> Self {
        LayerParams {
            weights: Some(weights),
            bias: Some(bias),
        }
    }

    /// Zero-valued gradients (or parameters) shaped for `spec`.
    pub fn zeros_for(spec: &LayerSpec) -> Self {
        match spec.param_shapes() {
            Some((w, b)) => LayerParams::new(Tensor::zeros(&w), Tensor::zeros(&b)),
            None => LayerParams::none(),
        }
    }

    pub fn validate_for(&self, spec: &LayerSpec) -> Result<()> {
        match (spec.param_shapes(), &self.weights, &self.bias) {
            (None, None, None) => Ok(()),
            (Some((ws, bs)), Some(w), Some(b)) => {
                if w.shape() != &ws {
                    return Err(Error::ShapeMismatch {
                        op: "layer weights",
                        expected: ws.to_string(),
                        got: w.shape().to_string(),
                    });
                }
                if b.shape() != &bs {
                    return Err(Error::ShapeMismatch {
                        op: "layer bias",
                        expected: bs.to_string(),
                        got: b.shape().to_string(),
                    });
                }
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "{} layer given mismatching parameter slots",
                spec.name()
            ))),
        }
    }

    pub fn norm_sq_f64(&self) -> f64 {
        self.weights.as_ref().map_or(0.0, Tensor::norm_sq_f64)
            + self.bias.as_ref().map_or(0.0, Tensor::norm_sq_f64)
    }

    pub fn add_scaled_inplace(&mut self, alpha: E, other: &Self) -> Result<()> {
        if let (Some(w), Some(ow)) = (&mut self.weights, &other.weights) {
            w.add_scaled_inplace(alpha, ow)?;
        }
        if let (Some(b), Some(ob)) = (&mut self.bias, &other.bias) {
            b.add_scaled_inplace(alpha, ob)?;
        }
        Ok(())
    }
}

/// Backward context captured by `forward`.
#[derive(Debug, Clone)]
pub enum LayerCtx<E: Element> {
    Conv { input: Tensor<E> },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize> },
    AvgPool,
    Dense { input: Tensor<E> },
    Flatten,
    Upsample,
    Sigmoid { output: Tensor<E> },
}

/// One entry of a forward trace: input/output shapes plus the context the
/// exact backward pass needs.
#[derive(Debug, Clone)]
pub struct TraceEntry<E: Element> {
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub ctx: LayerCtx<E>,
}

/// Dummy-coefficient choice for ReLU under the pseudo rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReluPseudo {
    /// Pass-through, coefficient 1 everywhere (default).
    Identity,
    /// Coefficient 0.5 everywhere: the expected mask of a symmetric input.
    ExpectedMask,
}

/// Dummy-coefficient choice for the sigmoid head under the pseudo rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmoidPseudo {
    /// Pass-through, coefficient 1 everywhere (default).
    Identity,
    /// Coefficient 0.25 everywhere: the slope at the sigmoid midpoint.
    ExpectedSlope,
}

/// Configuration of the feature-agnostic dummy rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoRules {
    pub relu: ReluPseudo,
    pub sigmoid: SigmoidPseudo,
}

impl Default for PseudoRules {
    fn default() -> Self {
        PseudoRules {
            relu: ReluPseudo::Identity,
            sigmoid: SigmoidPseudo::Identity,
        }
    }
}

impl PseudoRules {
    fn relu_coeff<E: Element>(&self) -> E {
        match self.relu {
            ReluPseudo::Identity => E::ONE,
            ReluPseudo::ExpectedMask => E::from_f64(0.5),
        }
    }

    fn sigmoid_coeff<E: Element>(&self) -> E {
        match self.sigmoid {
            SigmoidPseudo::Identity => E::ONE,
            SigmoidPseudo::ExpectedSlope => E::from_f64(0.25),
        }
    }
}

#[inline]
fn idx3(h_total: usize, w_total: usize, c: usize, h: usize, w: usize) -> usize {
    (c * h_total + h) * w_total + w
}

fn expect_shape<E: Element>(t: &Tensor<E>, shape: &Shape, op: &'static str) -> Result<()> {
    if t.shape() == shape {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            expected: shape.to_string(),
            got: t.shape().to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels. Geometry: for output position (oh, ow) and kernel tap
// (kh, kw), the padded input row is oh*stride + kh and the true input row is
// that minus `padding`; taps landing outside the input contribute zero.
// ---------------------------------------------------------------------------

struct ConvGeom {
    oc: usize,
    ic: usize,
    k: usize,
    s: usize,
    p: usize,
    hin: usize,
    win: usize,
    hout: usize,
    wout: usize,
}

fn conv_geom(spec: &LayerSpec, in_shape: &Shape) -> Result<ConvGeom> {
    let LayerSpec::Conv {
        out_channels,
        in_channels,
        kernel,
        stride,
        padding,
    } = *spec
    else {
        unreachable!("conv geometry on non-conv spec")
    };
    let out = spec.output_shape(in_shape)?;
    let (_, hin, win) = in_shape.as_chw()?;
    let (_, hout, wout) = out.as_chw()?;
    Ok(ConvGeom {
        oc: out_channels,
        ic: in_channels,
        k: kernel,
        s: stride,
        p: padding,
        hin,
        win,
        hout,
        wout,
    })
}

/// Valid output-column range for kernel column `kw`: all `ow` with
/// `0 <= ow*s + kw - p < win`, plus the input column of the range start.
#[inline]
fn col_range(g: &ConvGeom, kw: usize) -> Option<(usize, usize, usize)> {
    let off = kw as isize - g.p as isize;
    let lo = if off < 0 {
        // smallest ow with ow*s >= -off
        ((-off) as usize).div_ceil(g.s)
    } else {
        0
    };
    let max_iw = g.win as isize - 1 - off;
    if max_iw < 0 {
        return None;
    }
    let hi = (((max_iw as usize) / g.s) + 1).min(g.wout);
    if lo >= hi {
        return None;
    }
    let iw0 = (lo * g.s) as isize + off;
    Some((lo, hi, iw0 as usize))
}

fn conv_apply<E: Element>(g: &ConvGeom, w: &[E], bias: Option<&[E]>, x: &[E]) -> Vec<E> {
    let mut y = vec![E::ZERO; g.oc * g.hout * g.wout];
    if let Some(b) = bias {
        for oc in 0..g.oc {
            y[oc * g.hout * g.wout..(oc + 1) * g.hout * g.wout].fill(b[oc]);
        }
    }
    for oc in 0..g.oc {
        for ic in 0..g.ic {
            let w_base = ((oc * g.ic + ic) * g.k) * g.k;
            for kh in 0..g.k {
                for oh in 0..g.hout {
                    let ih = oh * g.s + kh;
                    if ih < g.p || ih >= g.hin + g.p {
                        continue;
                    }
                    let ih = ih - g.p;
                    let y_row = (oc * g.hout + oh) * g.wout;
                    let x_row = (ic * g.hin + ih) * g.win;
                    for kw in 0..g.k {
                        let Some((lo, hi, iw0)) = col_range(g, kw) else {
                            continue;
                        };
                        let wv = w[w_base + kh * g.k + kw];
                        if g.s == 1 {
                            let ys = &mut y[y_row + lo..y_row + hi];
                            let xs = &x[x_row + iw0..x_row + iw0 + (hi - lo)];
                            for (yo, &xi) in ys.iter_mut().zip(xs) {
                                *yo += wv * xi;
                            }
                        } else {
                            for (j, ow) in (lo..hi).enumerate() {
                                y[y_row + ow] += wv * x[x_row + iw0 + j * g.s];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Transposed application: gradient w.r.t. the convolution input. Linear in
/// both the weights and the incoming gradient; independent of the features.
fn conv_input_grad<E: Element>(g: &ConvGeom, w: &[E], gy: &[E]) -> Vec<E> {
    let mut gx = vec![E::ZERO; g.ic * g.hin * g.win];
    for oc in 0..g.oc {
        for ic in 0..g.ic {
            let w_base = ((oc * g.ic + ic) * g.k) * g.k;
            for kh in 0..g.k {
                for oh in 0..g.hout {
                    let ih = oh * g.s + kh;
                    if ih < g.p || ih >= g.hin + g.p {
                        continue;
                    }
                    let ih = ih - g.p;
                    let gy_row = (oc * g.hout + oh) * g.wout;
                    let gx_row = (ic * g.hin + ih) * g.win;
                    for kw in 0..g.k {
                        let Some((lo, hi, iw0)) = col_range(g, kw) else {
                            continue;
                        };
                        let wv = w[w_base + kh * g.k + kw];
                        if g.s == 1 {
                            let gys = &gy[gy_row + lo..gy_row + hi];
                            let gxs = &mut gx[gx_row + iw0..gx_row + iw0 + (hi - lo)];
                            for (xo, &gv) in gxs.iter_mut().zip(gys) {
                                *xo += wv * gv;
                            }
                        } else {
                            for (j, ow) in (lo..hi).enumerate() {
                                gx[gx_row + iw0 + j * g.s] += wv * gy[gy_row + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient w.r.t. the kernel: correlation of `x` with `gy` over the same
/// geometry as `conv_apply`.
fn conv_weight_grad<E: Element>(g: &ConvGeom, x: &[E], gy: &[E]) -> Vec<E> {
    let mut gw = vec![E::ZERO; g.oc * g.ic * g.k * g.k];
    for oc in 0..g.oc {
        for ic in 0..g.ic {
            let w_base = ((oc * g.ic + ic) * g.k) * g.k;
            for kh in 0..g.k {
                for oh in 0..g.hout {
                    let ih = oh * g.s + kh;
                    if ih < g.p || ih >= g.hin + g.p {
                        continue;
                    }
                    let ih = ih - g.p;
                    let gy_row = (oc * g.hout + oh) * g.wout;
                    let x_row = (ic * g.hin + ih) * g.win;
                    for kw in 0..g.k {
                        let Some((lo, hi, iw0)) = col_range(g, kw) else {
                            continue;
                        };
                        let mut acc = E::ZERO;
                        if g.s == 1 {
                            let gys = &gy[gy_row + lo..gy_row + hi];
                            let xs = &x[x_row + iw0..x_row + iw0 + (hi - lo)];
                            for (&gv, &xi) in gys.iter().zip(xs) {
                                acc += xi * gv;
                            }
                        } else {
                            for (j, ow) in (lo..hi).enumerate() {
                                acc += x[x_row + iw0 + j * g.s] * gy[gy_row + ow];
                            }
                        }
                        gw[w_base + kh * g.k + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

struct PoolGeom {
    c: usize,
    w: usize,
    s: usize,
    hin: usize,
    win: usize,
    hout: usize,
    wout: usize,
}

fn pool_geom(spec: &LayerSpec, in_shape: &Shape) -> Result<PoolGeom> {
    let (window, stride) = match *spec {
        LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
            (window, stride)
        }
        _ => unreachable!("pool geometry on non-pool spec"),
    };
    let out = spec.output_shape(in_shape)?;
    let (c, hin, win) = in_shape.as_chw()?;
    let (_, hout, wout) = out.as_chw()?;
    Ok(PoolGeom {
        c,
        w: window,
        s: stride,
        hin,
        win,
        hout,
        wout,
    })
}

/// Distributes each output gradient uniformly over its window. This is both
/// the exact backward of average pooling and the pseudo rule for max pooling;
/// overlapping windows accumulate additively.
fn avg_pool_backward<E: Element>(g: &PoolGeom, gy: &[E]) -> Vec<E> {
    let inv = E::from_f64(1.0 / (g.w * g.w) as f64);
    let mut gx = vec![E::ZERO; g.c * g.hin * g.win];
    for c in 0..g.c {
        for oh in 0..g.hout {
            for ow in 0..g.wout {
                let gv = gy[idx3(g.hout, g.wout, c, oh, ow)] * inv;
                for kh in 0..g.w {
                    for kw in 0..g.w {
                        gx[idx3(g.hin, g.win, c, oh * g.s + kh, ow * g.s + kw)] += gv;
                    }
                }
            }
        }
    }
    gx
}

fn avg_pool_forward<E: Element>(g: &PoolGeom, x: &[E]) -> Vec<E> {
    let inv = E::from_f64(1.0 / (g.w * g.w) as f64);
    let mut y = vec![E::ZERO; g.c * g.hout * g.wout];
    for c in 0..g.c {
        for oh in 0..g.hout {
            for ow in 0..g.wout {
                let mut acc = E::ZERO;
                for kh in 0..g.w {
                    for kw in 0..g.w {
                        acc += x[idx3(g.hin, g.win, c, oh * g.s + kh, ow * g.s + kw)];
                    }
                }
                y[idx3(g.hout, g.wout, c, oh, ow)] = acc * inv;
            }
        }
    }
    y
}

fn upsample_forward<E: Element>(c: usize, hin: usize, win: usize, f: usize, x: &[E]) -> Vec<E> {
    let (hout, wout) = (hin * f, win * f);
    let mut y = vec![E::ZERO; c * hout * wout];
    for ch in 0..c {
        for oh in 0..hout {
            for ow in 0..wout {
                y[idx3(hout, wout, ch, oh, ow)] = x[idx3(hin, win, ch, oh / f, ow / f)];
            }
        }
    }
    y
}

fn upsample_backward<E: Element>(c: usize, hin: usize, win: usize, f: usize, gy: &[E]) -> Vec<E> {
    let (hout, wout) = (hin * f, win * f);
    let mut gx = vec![E::ZERO; c * hin * win];
    for ch in 0..c {
        for oh in 0..hout {
            for ow in 0..wout {
                gx[idx3(hin, win, ch, oh / f, ow / f)] += gy[idx3(hout, wout, ch, oh, ow)];
            }
        }
    }
    gx
}

fn sigmoid<E: Element>(x: E) -> E {
    E::ONE / (E::ONE + (-x).exp())
}

// ---------------------------------------------------------------------------
// Public per-layer evaluations
// ---------------------------------------------------------------------------

/// Forward evaluation; the trace entry suffices for an exact backward pass.
pub fn forward<E: Element>(
    spec: &LayerSpec,
    params: &LayerParams<E>,
    x: &Tensor<E>,
) -> Result<(Tensor<E>, TraceEntry<E>)> {
    params.validate_for(spec)?;
    let out_shape = spec.output_shape(x.shape())?;
    let in_shape = x.shape().clone();
    let (y, ctx) = match spec {
        LayerSpec::Conv { .. } => {
            let g = conv_geom(spec, &in_shape)?;
            let w = params.weights.as_ref().expect("validated").data();
            let b = params.bias.as_ref().expect("validated").data();
            let y = conv_apply(&g, w, Some(b), x.data());
            (y, LayerCtx::Conv { input: x.clone() })
        }
        LayerSpec::Relu => {
            let mask: Vec<bool> = x.data().iter().map(|&v| v > E::ZERO).collect();
            let y = x
                .data()
                .iter()
                .map(|&v| v.maximum(E::ZERO))
                .collect::<Vec<_>>();
            (y, LayerCtx::Relu { mask })
        }
        LayerSpec::MaxPool { .. } => {
            let g = pool_geom(spec, &in_shape)?;
            let mut y = vec![E::ZERO; g.c * g.hout * g.wout];
            let mut argmax = vec![0usize; y.len()];
            for c in 0..g.c {
                for oh in 0..g.hout {
                    for ow in 0..g.wout {
                        let mut best = x.data()[idx3(g.hin, g.win, c, oh * g.s, ow * g.s)];
                        let mut best_idx = idx3(g.hin, g.win, c, oh * g.s, ow * g.s);
                        for kh in 0..g.w {
                            for kw in 0..g.w {
                                let i = idx3(g.hin, g.win, c, oh * g.s + kh, ow * g.s + kw);
                                if x.data()[i] > best {
                                    best = x.data()[i];
                                    best_idx = i;
                                }
                            }
                        }
                        let o = idx3(g.hout, g.wout, c, oh, ow);
                        y[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
            (y, LayerCtx::MaxPool { argmax })
        }
        LayerSpec::AvgPool { .. } => {
            let g = pool_geom(spec, &in_shape)?;
            (avg_pool_forward(&g, x.data()), LayerCtx::AvgPool)
        }
        LayerSpec::Dense { inputs, outputs } => {
            let w = params.weights.as_ref().expect("validated").data();
            let b = params.bias.as_ref().expect("validated").data();
            let mut y = vec![E::ZERO; *outputs];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = b[o];
                for i in 0..*inputs {
                    acc += w[o * inputs + i] * x.data()[i];
                }
                *yo = acc;
            }
            (y, LayerCtx::Dense { input: x.clone() })
        }
        LayerSpec::Flatten => (x.data().to_vec(), LayerCtx::Flatten),
        LayerSpec::UpsampleNearest { factor } => {
            let (c, h, w) = in_shape.as_chw()?;
            (
                upsample_forward(c, h, w, *factor, x.data()),
                LayerCtx::Upsample,
            )
        }
        LayerSpec::SigmoidHead => {
            let y: Vec<E> = x.data().iter().map(|&v| sigmoid(v)).collect();
            let out = Tensor::from_raw(&out_shape, y);
            return Ok((
                out.clone(),
                TraceEntry {
                    in_shape,
                    out_shape,
                    ctx: LayerCtx::Sigmoid { output: out },
                },
            ));
        }
    };
    let y = Tensor::from_raw(&out_shape, y);
    Ok((
        y,
        TraceEntry {
            in_shape,
            out_shape,
            ctx,
        },
    ))
}

/// Exact backward: `g_in = (dy/dx)^T g_out` plus parameter gradients where the
/// layer has parameters. Requires the trace entry from the matching forward.
pub fn backward<E: Element>(
    spec: &LayerSpec,
    params: &LayerParams<E>,
    entry: &TraceEntry<E>,
    g_out: &Tensor<E>,
) -> Result<(Tensor<E>, Option<LayerParams<E>>)> {
    params.validate_for(spec)?;
    expect_shape(g_out, &entry.out_shape, "backward gradient")?;
    match (spec, &entry.ctx) {
        (LayerSpec::Conv { .. }, LayerCtx::Conv { input }) => {
            expect_shape(input, &entry.in_shape, "backward trace input")?;
            let g = conv_geom(spec, &entry.in_shape)?;
            let w = params.weights.as_ref().expect("validated").data();
            let gx = conv_input_grad(&g, w, g_out.data());
            let gw = conv_weight_grad(&g, input.data(), g_out.data());
            let mut gb = vec![E::ZERO; g.oc];
            for oc in 0..g.oc {
                for oh in 0..g.hout {
                    for ow in 0..g.wout {
                        gb[oc] += g_out.data()[idx3(g.hout, g.wout, oc, oh, ow)];
                    }
                }
            }
            let grads = LayerParams::new(
                Tensor::from_raw(params.weights.as_ref().expect("validated").shape(), gw),
                Tensor::from_raw(params.bias.as_ref().expect("validated").shape(), gb),
            );
            Ok((Tensor::from_raw(&entry.in_shape, gx), Some(grads)))
        }
        (LayerSpec::Relu, LayerCtx::Relu { mask }) => {
            let g = Tensor::from_fn(&entry.in_shape, |i| {
                if mask[i] {
                    g_out.data()[i]
                } else {
                    E::ZERO
                }
            });
            Ok((g, None))
        }
        (LayerSpec::MaxPool { .. }, LayerCtx::MaxPool { argmax }) => {
            let mut gx = vec![E::ZERO; entry.in_shape.count()];
            for (o, &i) in argmax.iter().enumerate() {
                gx[i] += g_out.data()[o];
            }
            Ok((Tensor::from_raw(&entry.in_shape, gx), None))
        }
        (LayerSpec::AvgPool { .. }, LayerCtx::AvgPool) => {
            let g = pool_geom(spec, &entry.in_shape)?;
            let gx = avg_pool_backward(&g, g_out.data());
            Ok((Tensor::from_raw(&entry.in_shape, gx), None))
        }
        (LayerSpec::Dense { inputs, outputs }, LayerCtx::Dense { input }) => {
            let w = params.weights.as_ref().expect("validated").data();
            let mut gx = vec![E::ZERO; *inputs];
            let mut gw = vec![E::ZERO; outputs * inputs];
            for o in 0..*outputs {
                let gv = g_out.data()[o];
                for i in 0..*inputs {
                    gx[i] += w[o * inputs + i] * gv;
                    gw[o * inputs + i] = input.data()[i] * gv;
                }
            }
            let grads = LayerParams::new(
                Tensor::from_raw(params.weights.as_ref().expect("validated").shape(), gw),
                Tensor::from_raw(
                    params.bias.as_ref().expect("validated").shape(),
                    g_out.data().to_vec(),
                ),
            );
            Ok((Tensor::from_raw(&entry.in_shape, gx), Some(grads)))
        }
        (LayerSpec::Flatten, LayerCtx::Flatten) => Ok((g_out.reshape(&entry.in_shape)?, None)),
        (LayerSpec::UpsampleNearest { factor }, LayerCtx::Upsample) => {
            let (c, h, w) = entry.in_shape.as_chw()?;
            let gx = upsample_backward(c, h, w, *factor, g_out.data());
            Ok((Tensor::from_raw(&entry.in_shape, gx), None))
        }
        (LayerSpec::SigmoidHead, LayerCtx::Sigmoid { output }) => {
            let g = Tensor::from_fn(&entry.in_shape, |i| {
                let y = output.data()[i];
                g_out.data()[i] * y * (E::ONE - y)
            });
            Ok((g, None))
        }
        _ => Err(Error::Config(format!(
            "trace context does not match {} layer",
            spec.name()
        ))),
    }
}

/// Feature-agnostic backward. Conv/Dense apply the exact transposed-weight
/// map (identical to `backward`); MaxPool uses the average-pool distribution;
/// ReLU and SigmoidHead apply their configured dummy coefficients; the
/// remaining kinds are already feature-agnostic. Takes the layer's nominal
/// input shape instead of a trace.
pub fn pseudo_backward<E: Element>(
    spec: &LayerSpec,
    params: &LayerParams<E>,
    in_shape: &Shape,
    g_out: &Tensor<E>,
    rules: &PseudoRules,
) -> Result<Tensor<E>> {
    params.validate_for(spec)?;
    let out_shape = spec.output_shape(in_shape)?;
    expect_shape(g_out, &out_shape, "pseudo_backward gradient")?;
    match spec {
        LayerSpec::Conv { .. } => {
            let g = conv_geom(spec, in_shape)?;
            let w = params.weights.as_ref().expect("validated").data();
            let gx = conv_input_grad(&g, w, g_out.data());
            Ok(Tensor::from_raw(in_shape, gx))
        }
        LayerSpec::Relu => Ok(g_out.scale(rules.relu_coeff())),
        LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => {
            let g = pool_geom(spec, in_shape)?;
            let gx = avg_pool_backward(&g, g_out.data());
            Ok(Tensor::from_raw(in_shape, gx))
        }
        LayerSpec::Dense { inputs, outputs } => {
            let w = params.weights.as_ref().expect("validated").data();
            let mut gx = vec![E::ZERO; *inputs];
            for o in 0..*outputs {
                let gv = g_out.data()[o];
                for i in 0..*inputs {
                    gx[i] += w[o * inputs + i] * gv;
                }
            }
            Ok(Tensor::from_raw(in_shape, gx))
        }
        LayerSpec::Flatten => g_out.reshape(in_shape),
        LayerSpec::UpsampleNearest { factor } => {
            let (c, h, w) = in_shape.as_chw()?;
            let gx = upsample_backward(c, h, w, *factor, g_out.data());
            Ok(Tensor::from_raw(in_shape, gx))
        }
        LayerSpec::SigmoidHead => Ok(g_out.scale(rules.sigmoid_coeff())),
    }
}

/// Adjoint of `pseudo_backward` with respect to its gradient argument: the
/// layer's forward linear map without bias. `u` is shaped like the layer's
/// input; the result is shaped like the layer's output.
pub(crate) fn pseudo_adjoint<E: Element>(
    spec: &LayerSpec,
    params: &LayerParams<E>,
    in_shape: &Shape,
    u: &Tensor<E>,
    rules: &PseudoRules,
) -> Result<Tensor<E>> {
    let out_shape = spec.output_shape(in_shape)?;
    expect_shape(u, in_shape, "pseudo_adjoint input")?;
    match spec {
        LayerSpec::Conv { .. } => {
            let g = conv_geom(spec, in_shape)?;
            let w = params.weights.as_ref().expect("validated").data();
            let y = conv_apply(&g, w, None, u.data());
            Ok(Tensor::from_raw(&out_shape, y))
        }
        LayerSpec::Relu => Ok(u.scale(rules.relu_coeff())),
        LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => {
            let g = pool_geom(spec, in_shape)?;
            let y = avg_pool_forward(&g, u.data());
            Ok(Tensor::from_raw(&out_shape, y))
        }
        LayerSpec::Dense { inputs, outputs } => {
            let w = params.weights.as_ref().expect("validated").data();
            let mut y = vec![E::ZERO; *outputs];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = E::ZERO;
                for i in 0..*inputs {
                    acc += w[o * inputs + i] * u.data()[i];
                }
                *yo = acc;
            }
            Ok(Tensor::from_raw(&out_shape, y))
        }
        LayerSpec::Flatten => u.reshape(&out_shape),
        LayerSpec::UpsampleNearest { factor } => {
            let (c, h, w) = in_shape.as_chw()?;
            let y = upsample_forward(c, h, w, *factor, u.data());
            Ok(Tensor::from_raw(&out_shape, y))
        }
        LayerSpec::SigmoidHead => Ok(u.scale(rules.sigmoid_coeff())),
    }
}

/// Derivative of `<u, pseudo_backward(spec, w, g_out)>` with respect to the
/// layer weights. Only Conv and Dense carry weights; bias never enters any
/// input-gradient map, so its gradient is identically zero.
pub(crate) fn pseudo_weight_grad<E: Element>(
    spec: &LayerSpec,
    in_shape: &Shape,
    u: &Tensor<E>,
    g_out: &Tensor<E>,
) -> Result<Option<Tensor<E>>> {
    match spec {
        LayerSpec::Conv { .. } => {
            let g = conv_geom(spec, in_shape)?;
            let gw = conv_weight_grad(&g, u.data(), g_out.data());
            let (w_shape, _) = spec.param_shapes().expect("conv has params");
            Ok(Some(Tensor::from_raw(&w_shape, gw)))
        }
        LayerSpec::Dense { inputs, outputs } => {
            let mut gw = vec![E::ZERO; outputs * inputs];
            for o in 0..*outputs {
                for i in 0..*inputs {
                    gw[o * inputs + i] = g_out.data()[o] * u.data()[i];
                }
            }
            let (w_shape, _) = spec.param_shapes().expect("dense has params");
            Ok(Some(Tensor::from_raw(&w_shape, gw)))
        }
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sh(dims: &[usize]) -> Shape {
        Shape::new(dims.to_vec())
    }

    fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&sh(dims), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_matches_definition() {
        let x = t64(&[3], &[-1.0, 2.0, 0.0]);
        let (y, _) = forward(&LayerSpec::Relu, &LayerParams::none(), &x).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn avg_pool_forward_hand_example() {
        let x = t64(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let spec = LayerSpec::AvgPool {
            window: 2,
            stride: 2,
        };
        let (y, _) = forward(&spec, &LayerParams::none(), &x).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_1x1_hand_example() {
        let spec = LayerSpec::Conv {
            out_channels: 1,
            in_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let params = LayerParams::new(t64(&[1, 1, 1, 1], &[2.0]), t64(&[1], &[1.0]));
        let x = t64(&[1, 1, 1], &[3.0]);
        let (y, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_backward_masks() {
        let x = t64(&[2], &[-1.0, 2.0]);
        let spec = LayerSpec::Relu;
        let (_, entry) = forward(&spec, &LayerParams::none(), &x).unwrap();
        let g_out = t64(&[2], &[5.0, 5.0]);
        let (g_in, grads) = backward(&spec, &LayerParams::none(), &entry, &g_out).unwrap();
        assert_eq!(g_in.data(), &[0.0, 5.0]);
        assert!(grads.is_none());
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let x = t64(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let spec = LayerSpec::MaxPool {
            window: 2,
            stride: 2,
        };
        let (y, entry) = forward(&spec, &LayerParams::none(), &x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let g_out = t64(&[1, 1, 1], &[10.0]);
        let (g_in, _) = backward(&spec, &LayerParams::none(), &entry, &g_out).unwrap();
        assert_eq!(g_in.data(), &[0.0, 0.0, 0.0, 10.0]);
    }

    #[test]
    fn max_pool_pseudo_distributes_uniformly() {
        let spec = LayerSpec::MaxPool {
            window: 2,
            stride: 2,
        };
        let g_out = t64(&[1, 1, 1], &[8.0]);
        let g_in =
            pseudo_backward(&spec, &LayerParams::none(), &sh(&[1, 2, 2]), &g_out, &PseudoRules::default())
                .unwrap();
        assert_eq!(g_in.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn relu_pseudo_is_identity_by_default() {
        let g_out = t64(&[2], &[3.0, -1.0]);
        let g_in = pseudo_backward(
            &LayerSpec::Relu,
            &LayerParams::none(),
            &sh(&[2]),
            &g_out,
            &PseudoRules::default(),
        )
        .unwrap();
        assert_eq!(g_in.data(), &[3.0, -1.0]);
        let halved = pseudo_backward(
            &LayerSpec::Relu,
            &LayerParams::none(),
            &sh(&[2]),
            &g_out,
            &PseudoRules {
                relu: ReluPseudo::ExpectedMask,
                ..PseudoRules::default()
            },
        )
        .unwrap();
        assert_eq!(halved.data(), &[1.5, -0.5]);
    }

    #[test]
    fn conv_pseudo_equals_true_backward_bitwise() {
        let mut rng = Rng::new(31);
        let spec = LayerSpec::Conv {
            out_channels: 3,
            in_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let params = LayerParams::new(
            Tensor::<f64>::randn(&sh(&[3, 2, 3, 3]), &mut rng),
            Tensor::<f64>::randn(&sh(&[3]), &mut rng),
        );
        let x = Tensor::<f64>::randn(&sh(&[2, 5, 5]), &mut rng);
        let (_, entry) = forward(&spec, &params, &x).unwrap();
        let g_out = Tensor::<f64>::randn(&sh(&[3, 5, 5]), &mut rng);
        let (true_g, _) = backward(&spec, &params, &entry, &g_out).unwrap();
        let pseudo_g =
            pseudo_backward(&spec, &params, x.shape(), &g_out, &PseudoRules::default()).unwrap();
        assert_eq!(true_g.data(), pseudo_g.data());
    }

    #[test]
    fn inadmissible_shape_reports_expectation() {
        let spec = LayerSpec::Conv {
            out_channels: 1,
            in_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        let x = Tensor::<f64>::zeros(&sh(&[2, 4, 4]));
        let err = forward(&spec, &LayerParams::zeros_for(&spec), &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv"), "{msg}");
        assert!(msg.contains("3 input channels"), "{msg}");
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let spec = LayerSpec::UpsampleNearest { factor: 2 };
        let (y, entry) = forward(&spec, &LayerParams::none(), &x).unwrap();
        assert_eq!(y.shape().dims(), &[1, 4, 4]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[3], 2.0);
        let g_out = Tensor::<f64>::filled(&sh(&[1, 4, 4]), 1.0);
        let (g_in, _) = backward(&spec, &LayerParams::none(), &entry, &g_out).unwrap();
        assert_eq!(g_in.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn pseudo_linearity_in_the_seed() {
        let mut rng = Rng::new(77);
        let spec = LayerSpec::Conv {
            out_channels: 2,
            in_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let params = LayerParams::new(
            Tensor::<f64>::randn(&sh(&[2, 2, 3, 3]), &mut rng),
            Tensor::<f64>::randn(&sh(&[2]), &mut rng),
        );
        let in_shape = sh(&[2, 4, 4]);
        let g1 = Tensor::<f64>::randn(&sh(&[2, 4, 4]), &mut rng);
        let g2 = Tensor::<f64>::randn(&sh(&[2, 4, 4]), &mut rng);
        let rules = PseudoRules::default();
        let combo = g1.scale(2.5).add(&g2.scale(-0.75)).unwrap();
        let lhs = pseudo_backward(&spec, &params, &in_shape, &combo, &rules).unwrap();
        let rhs = pseudo_backward(&spec, &params, &in_shape, &g1, &rules)
            .unwrap()
            .scale(2.5)
            .add(
                &pseudo_backward(&spec, &params, &in_shape, &g2, &rules)
                    .unwrap()
                    .scale(-0.75),
            )
            .unwrap();
        let num = lhs.sub(&rhs).unwrap().norm_sq_f64().sqrt();
        let den = rhs.norm_sq_f64().sqrt().max(1e-300);
        assert!(num / den <= 1e-10);
    }
}
