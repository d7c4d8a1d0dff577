//! Reverse-mode gradient tape over the operator set the detector needs.
//!
//! Every forward call appends a node holding its value and enough saved
//! state to run its adjoint. `backward` walks the nodes in reverse
//! recording order. ReLU uses the subgradient 0 at exactly 0.

use std::collections::HashMap;

use crate::error::{FemtoError, Result};
use crate::ops::{
    batch_stats, channel_sum, conv_backward_input, conv_backward_weight, conv_forward, dot, sigmoid,
    upsample_nearest, upsample_nearest_backward, ConvGeom,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One positive cell for the IoU box loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget<T> {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    /// Ground truth `(x1, y1, x2, y2)` in input pixels.
    pub gt: [T; 4],
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    ScaleBy {
        x: Var,
        s: Var,
    },
    ScaleConst {
        x: Var,
        c: T,
    },
    Sigmoid(Var),
    KernelSum(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    WeightedSum {
        x: Var,
        weights: Option<Tensor<T>>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
        weights: Tensor<T>,
    },
    IouLoss {
        boxes: Var,
        targets: Vec<BoxTarget<T>>,
        stride: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph plus per-node gradients after `backward`.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor<T>) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all registered parameters keyed by name.
    pub fn param_grads(&self) -> HashMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = conv_forward(self.value(x), self.value(w), bias.as_deref(), geom)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::Conv { x, w, b, geom }, ng))
    }

    /// Train-mode batch norm using batch statistics. Returns the output and
    /// the biased batch `(mean, var)` so callers can update running stats.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        check_channels("batch_norm", xv.c(), self.value(gamma).len())?;
        let (mean, var) = batch_stats(xv);
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let sd: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
        let mut y = xv.clone();
        let mut xhat = xv.clone();
        for n in 0..xv.n() {
            for c in 0..xv.c() {
                for (yv, hv) in y.plane_mut(n, c).iter_mut().zip(xhat.plane_mut(n, c)) {
                    let d = *yv - mean[c];
                    *yv = g[c] * d / sd[c] + be[c];
                    *hv = d / sd[c];
                }
            }
        }
        let inv_std = sd.iter().map(|&s| T::one() / s).collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = self.push(
            y,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((out, mean, var))
    }

    /// Eval-mode batch norm with fixed statistics; differentiable in x, γ, β.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        check_channels("batch_norm", xv.c(), self.value(gamma).len())?;
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let sd: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
        let mut y = xv.clone();
        for n in 0..xv.n() {
            for c in 0..xv.c() {
                for yv in y.plane_mut(n, c) {
                    *yv = g[c] * (*yv - mean[c]) / sd[c] + be[c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let inv_std = sd.iter().map(|&s| T::one() / s).collect();
        Ok(self.push(
            y,
            Op::BnEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = crate::ops::relu(self.value(x));
        let ng = self.ng(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "add", |p, q| p + q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "sub", |p, q| p - q)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Sub(a, b), ng))
    }

    /// `x` times the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(FemtoError::Dimension {
                op: "scale_by",
                axis: "scalar",
                expected: 1,
                got: sv.len(),
            });
        }
        let k = sv.data()[0];
        let y = self.value(x).scale(k);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(y, Op::ScaleBy { x, s }, ng))
    }

    pub fn scale_const(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).scale(c);
        let ng = self.ng(x);
        self.push(y, Op::ScaleConst { x, c }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    /// Sums each output channel's kernel: `(C, g, kh, kw) → (C, g, 1, 1)`.
    pub fn kernel_sum(&mut self, w: Var) -> Var {
        let wv = self.value(w);
        let [o, i, kh, kw] = wv.shape();
        let y = Tensor::from_fn([o, i, 1, 1], |[a, b, _, _]| {
            let k = kh * kw;
            let start = (a * i + b) * k;
            wv.data()[start..start + k].iter().copied().sum()
        });
        let ng = self.ng(w);
        self.push(y, Op::KernelSum(w), ng)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let y = upsample_nearest(self.value(x), factor)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Upsample { x, factor }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: None }, ng)
    }

    /// `Σ wᵢ·xᵢ` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let s = self
            .value(x)
            .zip_map(&weights, "weighted_sum", |a, b| a * b)?
            .sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: Some(weights),
            },
            ng,
        ))
    }

    /// `Σ wᵢ·(softplus(zᵢ) − tᵢ·zᵢ)`, the weighted binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>, weights: Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        for (t, name) in [(&targets, "targets"), (&weights, "weights")] {
            if t.shape() != z.shape() {
                return Err(FemtoError::Shape {
                    op: if name == "targets" { "bce targets" } else { "bce weights" },
                    left: z.shape(),
                    right: t.shape(),
                });
            }
        }
        let mut s = T::zero();
        for ((&zv, &tv), &wv) in z.data().iter().zip(targets.data()).zip(weights.data()) {
            if wv != T::zero() {
                s = s + wv * (softplus(zv) - tv * zv);
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            ng,
        ))
    }

    /// `Σ (1 − IoU)` between decoded boxes at target cells and their ground truth.
    ///
    /// `boxes` has shape `(N, 4, H, W)` with channels `(dx, dy, dw, dh)`,
    /// decoded as `cx = (col + dx)·stride`, `w = exp(dw)·stride`.
    pub fn iou_loss(&mut self, boxes: Var, targets: Vec<BoxTarget<T>>, stride: T) -> Result<Var> {
        let b = self.value(boxes);
        if b.c() != 4 {
            return Err(FemtoError::Dimension {
                op: "iou_loss",
                axis: "channels",
                expected: 4,
                got: b.c(),
            });
        }
        let mut s = T::zero();
        for t in &targets {
            if t.sample >= b.n() || t.row >= b.h() || t.col >= b.w() {
                return Err(FemtoError::InvalidArgument(format!(
                    "box target ({}, {}, {}) outside map {:?}",
                    t.sample,
                    t.row,
                    t.col,
                    b.shape()
                )));
            }
            let raw = read_box(b, t);
            let (iou, _) = iou_and_grad(raw, t, stride);
            s = s + (T::one() - iou);
        }
        let ng = self.ng(boxes);
        Ok(self.push(Tensor::scalar(s), Op::IouLoss { boxes, targets, stride }, ng))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(FemtoError::Dimension {
                op: "backward",
                axis: "loss elements",
                expected: 1,
                got: lv.len(),
            });
        }
        if !lv.data()[0].is_finite() {
            return Err(FemtoError::NonFinite(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contribs = self.adjoint(i, &gy);
            grads[i] = Some(gy);
            for (v, g) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn adjoint(&self, i: usize, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.ng(*x) {
                    out.push((*x, conv_backward_input(gy, val(*w), *geom, val(*x).shape())));
                }
                if self.ng(*w) {
                    out.push((*w, conv_backward_weight(gy, val(*x), val(*w).shape(), *geom)));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let shape = val(*b).shape();
                        out.push((*b, Tensor::new(shape, channel_sum(gy)).expect("bias shape")));
                    }
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = val(*gamma).data();
                let dbeta = channel_sum(gy);
                let mut dgamma = vec![T::zero(); gy.c()];
                for n in 0..gy.n() {
                    for (c, d) in dgamma.iter_mut().enumerate() {
                        *d = *d + dot(gy.plane(n, c), xhat.plane(n, c));
                    }
                }
                if self.ng(*x) {
                    let count = T::of((gy.n() * gy.h() * gy.w()) as f64);
                    let mut dx = gy.clone();
                    for n in 0..gy.n() {
                        for c in 0..gy.c() {
                            let k = g[c] * inv_std[c] / count;
                            let xh = xhat.plane(n, c);
                            for (d, &h) in dx.plane_mut(n, c).iter_mut().zip(xh) {
                                *d = k * (count * *d - dbeta[c] - h * dgamma[c]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.ng(*gamma) {
                    out.push((*gamma, reshape_like(dgamma, val(*gamma))));
                }
                if self.ng(*beta) {
                    out.push((*beta, reshape_like(dbeta, val(*beta))));
                }
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let g = val(*gamma).data();
                if self.ng(*x) {
                    let mut dx = gy.clone();
                    for n in 0..gy.n() {
                        for c in 0..gy.c() {
                            let k = g[c] * inv_std[c];
                            for d in dx.plane_mut(n, c) {
                                *d = *d * k;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.ng(*gamma) {
                    let xv = val(*x);
                    let mut dg = vec![T::zero(); gy.c()];
                    for n in 0..gy.n() {
                        for (c, d) in dg.iter_mut().enumerate() {
                            for (&gv, &xx) in gy.plane(n, c).iter().zip(xv.plane(n, c)) {
                                *d = *d + gv * (xx - mean[c]) * inv_std[c];
                            }
                        }
                    }
                    out.push((*gamma, reshape_like(dg, val(*gamma))));
                }
                if self.ng(*beta) {
                    out.push((*beta, reshape_like(channel_sum(gy), val(*beta))));
                }
            }
            Op::Relu(x) => {
                let g = gy
                    .zip_map(val(*x), "relu", |g, xv| if xv > T::zero() { g } else { T::zero() })
                    .expect("same shape");
                out.push((*x, g));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.map(|v| -v)));
            }
            Op::ScaleBy { x, s } => {
                let k = val(*s).data()[0];
                if self.ng(*x) {
                    out.push((*x, gy.scale(k)));
                }
                if self.ng(*s) {
                    let d = dot(gy.data(), val(*x).data());
                    out.push((*s, Tensor::new(val(*s).shape(), vec![d]).expect("scalar")));
                }
            }
            Op::ScaleConst { x, c } => out.push((*x, gy.scale(*c))),
            Op::Sigmoid(x) => {
                let g = gy
                    .zip_map(&node.value, "sigmoid", |g, y| g * y * (T::one() - y))
                    .expect("same shape");
                out.push((*x, g));
            }
            Op::KernelSum(w) => {
                let wv = val(*w);
                let i = wv.c();
                let g = Tensor::from_fn(wv.shape(), |[a, b, _, _]| gy.data()[a * i + b]);
                out.push((*w, g));
            }
            Op::Upsample { x, factor } => out.push((*x, upsample_nearest_backward(gy, *factor))),
            Op::WeightedSum { x, weights } => {
                let k = gy.data()[0];
                let g = match weights {
                    None => Tensor::full(val(*x).shape(), k),
                    Some(w) => w.scale(k),
                };
                out.push((*x, g));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let k = gy.data()[0];
                let z = val(*logits);
                let mut g = Tensor::zeros(z.shape());
                for (((d, &zv), &tv), &wv) in g
                    .data_mut()
                    .iter_mut()
                    .zip(z.data())
                    .zip(targets.data())
                    .zip(weights.data())
                {
                    *d = k * wv * (sigmoid(zv) - tv);
                }
                out.push((*logits, g));
            }
            Op::IouLoss {
                boxes,
                targets,
                stride,
            } => {
                let k = gy.data()[0];
                let b = val(*boxes);
                let mut g = Tensor::zeros(b.shape());
                for t in targets {
                    let (_, d) = iou_and_grad(read_box(b, t), t, *stride);
                    for (ch, dv) in d.iter().enumerate() {
                        let idx = [t.sample, ch, t.row, t.col];
                        let cur = g.at(idx);
                        g.set(idx, cur - k * *dv);
                    }
                }
                out.push((*boxes, g));
            }
        }
        out
    }
}

fn check_channels(op: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(FemtoError::Dimension {
            op,
            axis: "channels",
            expected,
            got,
        });
    }
    Ok(())
}

fn reshape_like<T: Scalar>(data: Vec<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::new(like.shape(), data).expect("per-channel gradient length")
}

fn softplus<T: Scalar>(z: T) -> T {
    // log(1 + e^z) without overflow.
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn read_box<T: Scalar>(b: &Tensor<T>, t: &BoxTarget<T>) -> [T; 4] {
    [0, 1, 2, 3].map(|ch| b.at([t.sample, ch, t.row, t.col]))
}

/// IoU of the decoded box with the target and `∂IoU/∂(dx, dy, dw, dh)`.
pub(crate) fn iou_and_grad<T: Scalar>(raw: [T; 4], t: &BoxTarget<T>, stride: T) -> (T, [T; 4]) {
    let half = T::of(0.5);
    let zero = T::zero();
    let cx = (T::of(t.col as f64) + raw[0]) * stride;
    let cy = (T::of(t.row as f64) + raw[1]) * stride;
    let w = raw[2].exp() * stride;
    let h = raw[3].exp() * stride;
    let (px1, px2, py1, py2) = (cx - half * w, cx + half * w, cy - half * h, cy + half * h);
    let [gx1, gy1, gx2, gy2] = t.gt;
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (iw, ih, overlap) = if iw > zero && ih > zero { (iw, ih, true) } else { (zero, zero, false) };
    let inter = iw * ih;
    let area_p = w * h;
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    let union = area_p + area_g - inter;
    if !(union > zero) {
        return (zero, [zero; 4]);
    }
    let iou = inter / union;
    // ∂IoU/∂inter and ∂IoU/∂area_p.
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let (mut d_px1, mut d_px2, mut d_py1, mut d_py2) = (zero, zero, zero, zero);
    if overlap {
        if px1 > gx1 {
            d_px1 = -ih * d_inter;
        }
        if px2 < gx2 {
            d_px2 = ih * d_inter;
        }
        if py1 > gy1 {
            d_py1 = -iw * d_inter;
        }
        if py2 < gy2 {
            d_py2 = iw * d_inter;
        }
    }
    // px1 = cx − w/2, px2 = cx + w/2; ∂cx/∂dx = stride; ∂w/∂dw = w.
    let d_cx = d_px1 + d_px2;
    let d_w = half * (d_px2 - d_px1) + d_area * h;
    let d_cy = d_py1 + d_py2;
    let d_h = half * (d_py2 - d_py1) + d_area * w;
    (iou, [d_cx * stride, d_cy * stride, d_w * w, d_h * h])
}

/// Five-point central difference of `f` at 0, and a bound on how much of
/// it can be floating-point roundoff rather than signal.
fn five_point(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    let d = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
    let noise = ROUNDOFF_ULPS * f64::EPSILON * (m2.abs() + 8.0 * m1.abs() + 8.0 * p1.abs() + p2.abs()) / (12.0 * h);
    Ok((d, noise))
}

/// Each loss evaluation is trusted to this many ulps of its magnitude.
const ROUNDOFF_ULPS: f64 = 16.0;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheck {
    /// Largest [`relative_error`], with disagreements below the difference
    /// quotient's roundoff bound counted as none. Without that allowance,
    /// gradients that are exactly zero (a bias feeding train-mode BN)
    /// compare noise against noise.
    pub max_rel_error: f64,
    /// Largest plain [`relative_error`].
    pub max_raw_rel_error: f64,
    /// `(max(|analytic|, |numeric|), relative error)` of every entry whose
    /// disagreement was within the roundoff bound.
    pub within_roundoff: Vec<(f64, f64)>,
    pub probed: usize,
}

impl GradCheck {
    fn push(&mut self, analytic: f64, numeric: f64, noise: f64) {
        let raw = relative_error(analytic, numeric);
        self.probed += 1;
        self.max_raw_rel_error = self.max_raw_rel_error.max(raw);
        if (analytic - numeric).abs() <= noise {
            self.within_roundoff.push((analytic.abs().max(numeric.abs()), raw));
        } else {
            self.max_rel_error = self.max_rel_error.max(raw);
        }
    }

    /// Combines two checks.
    pub fn merge(mut self, o: GradCheck) -> GradCheck {
        self.max_rel_error = self.max_rel_error.max(o.max_rel_error);
        self.max_raw_rel_error = self.max_raw_rel_error.max(o.max_raw_rel_error);
        self.within_roundoff.extend(o.within_roundoff);
        self.probed += o.probed;
        self
    }

    /// Entries that pass at `tol` only because of the roundoff allowance,
    /// and the largest gradient magnitude among them.
    pub fn roundoff_limited(&self, tol: f64) -> (usize, f64) {
        self.within_roundoff
            .iter()
            .filter(|e| e.1 >= tol)
            .fold((0, 0.0), |(n, m), e| (n + 1, m.max(e.0)))
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max_rel_error={:e} max_raw_rel_error={:e} probed={}",
            self.max_rel_error, self.max_raw_rel_error, self.probed
        )
    }
}

/// Compares tape gradients with five-point central finite differences.
///
/// `forward` builds a scalar loss from the input leaf and one leaf per
/// tensor in `params`. Every element of every parameter and of `x` is
/// perturbed by `±step` and `±2·step`; errors are
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`, see
/// [`GradCheck`].
pub fn grad_check<F>(mut forward: F, params: &[Tensor<f64>], x: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Tape<f64>, Var, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let mut all: Vec<Tensor<f64>> = params.to_vec();
    all.push(x.clone());
    let mut eval = |vals: &[Tensor<f64>], record: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let (last, rest) = vals.split_last().expect("input present");
        let vars: Vec<Var> = rest.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let xv = tape.leaf(last.clone(), true);
        let loss = forward(&mut tape, xv, &vars)?;
        let l = tape.value(loss).data()[0];
        if !l.is_finite() {
            return Err(FemtoError::NonFinite(format!("grad_check loss is {l}")));
        }
        if !record {
            return Ok((l, Vec::new()));
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor<f64>> = vars
            .iter()
            .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())))
            .collect();
        grads.push(tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(last.shape())));
        Ok((l, grads))
    };
    let (_, analytic) = eval(&all, true)?;
    let mut check = GradCheck::default();
    for p in 0..all.len() {
        for e in 0..all[p].len() {
            let orig = all[p].data()[e];
            let (numeric, noise) = five_point(step, |d| {
                all[p].data_mut()[e] = orig + d;
                Ok(eval(&all, false)?.0)
            })?;
            all[p].data_mut()[e] = orig;
            check.push(analytic[p].data()[e], numeric, noise);
        }
    }
    Ok(check)
}

/// [`grad_check`] for a module that registers its weights with
/// [`Tape::param`]: every trainable tensor reported by `visit` is perturbed
/// in place. `prefix` must be the one `forward` passes to the module. At
/// most `per_tensor` evenly spaced elements of each tensor are probed.
/// Errors are measured as in [`grad_check`].
pub fn grad_check_params<M, F>(module: &mut M, prefix: &str, mut forward: F, step: f64, per_tensor: usize) -> Result<GradCheck>
where
    M: crate::layers::Parameterized<f64>,
    F: FnMut(&mut M, &mut Tape<f64>) -> Result<Var>,
{
    use crate::layers::ParamRole;
    check_step(step)?;
    let mut tape = Tape::new();
    let loss = forward(module, &mut tape)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();
    let mut tensors: Vec<(String, usize)> = Vec::new();
    module.visit(prefix, &mut |name, _, d, role| {
        if role == ParamRole::Trainable {
            tensors.push((name.to_string(), d.len()));
        }
    });
    // Writes `v` and returns the previous value.
    let swap = |m: &mut M, name: &str, e: usize, v: f64| {
        let mut old = v;
        m.visit_mut(prefix, &mut |n, _, d, _| {
            if n == name {
                old = std::mem::replace(&mut d[e], v);
            }
        });
        old
    };
    let mut check = GradCheck::default();
    for (name, len) in &tensors {
        let g = grads
            .get(name)
            .ok_or_else(|| FemtoError::InvalidArgument(format!("no gradient recorded for {name}")))?;
        let stride = len.div_ceil(per_tensor.max(1)).max(1);
        for e in (0..*len).step_by(stride) {
            let orig = swap(module, name, e, f64::NAN);
            let (numeric, noise) = five_point(step, |d| {
                swap(module, name, e, orig + d);
                let mut t = Tape::new();
                let l = forward(module, &mut t)?;
                Ok(t.value(l).data()[0])
            })?;
            swap(module, name, e, orig);
            check.push(g.data()[e], numeric, noise);
        }
    }
    Ok(check)
}

pub(crate) fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(FemtoError::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    Ok(())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
