//! Named-parameter plumbing shared by every module, and the conv + BN + ReLU
//! unit the network is assembled from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::{batch_norm_apply, conv2d, relu, update_running, AffineConvSpec, BatchNormParams, BnMode, ConvKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; saved but not trained.
    Buffer,
}

/// Walks named parameter slices. Names are dot-joined paths such as
/// `backbone.3.dw.w`; dims are the logical tensor dims written to archives.
pub trait Parameterized<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole));

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d, role| {
            if role == ParamRole::Trainable {
                n += d.len();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_conv<T>(
    prefix: &str,
    spec: &AffineConvSpec<T>,
    f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole),
) where
    T: Scalar,
{
    let s = spec.weight.shape();
    f(&join(prefix, "w"), &s, spec.weight.data(), ParamRole::Trainable);
    f(&join(prefix, "b"), &[spec.bias.len()], &spec.bias, ParamRole::Trainable);
}

pub(crate) fn visit_conv_mut<T>(
    prefix: &str,
    spec: &mut AffineConvSpec<T>,
    f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole),
) where
    T: Scalar,
{
    let s = spec.weight.shape();
    f(&join(prefix, "w"), &s, spec.weight.data_mut(), ParamRole::Trainable);
    let n = spec.bias.len();
    f(&join(prefix, "b"), &[n], &mut spec.bias, ParamRole::Trainable);
}

pub(crate) fn visit_bn<T>(prefix: &str, bn: &BatchNormParams<T>, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
    let c = [bn.gamma.len()];
    f(&join(prefix, "gamma"), &c, &bn.gamma, ParamRole::Trainable);
    f(&join(prefix, "beta"), &c, &bn.beta, ParamRole::Trainable);
    f(&join(prefix, "running_mean"), &c, &bn.running_mean, ParamRole::Buffer);
    f(&join(prefix, "running_var"), &c, &bn.running_var, ParamRole::Buffer);
}

pub(crate) fn visit_bn_mut<T>(
    prefix: &str,
    bn: &mut BatchNormParams<T>,
    f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole),
) {
    let c = [bn.gamma.len()];
    f(&join(prefix, "gamma"), &c, &mut bn.gamma, ParamRole::Trainable);
    f(&join(prefix, "beta"), &c, &mut bn.beta, ParamRole::Trainable);
    f(&join(prefix, "running_mean"), &c, &mut bn.running_mean, ParamRole::Buffer);
    f(&join(prefix, "running_var"), &c, &mut bn.running_var, ParamRole::Buffer);
}

/// Records `conv(x)` with weight and bias registered as `prefix.w`, `prefix.b`.
pub(crate) fn tape_conv<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    spec: &AffineConvSpec<T>,
    x: Var,
) -> Result<Var> {
    spec.validate()?;
    let w = tape.param(join(prefix, "w"), &spec.weight);
    let b = tape.param(join(prefix, "b"), &Tensor::vector(spec.bias.clone()));
    tape.conv2d(x, w, Some(b), spec.geom())
}

/// Records batch norm per `bn.mode`; train mode also advances running stats.
pub(crate) fn tape_bn<T: Scalar>(
    tape: &mut Tape<T>,
    prefix: &str,
    bn: &mut BatchNormParams<T>,
    x: Var,
) -> Result<Var> {
    bn.validate()?;
    let g = tape.param(join(prefix, "gamma"), &Tensor::vector(bn.gamma.clone()));
    let b = tape.param(join(prefix, "beta"), &Tensor::vector(bn.beta.clone()));
    match bn.mode {
        BnMode::Train => {
            let (y, m, v) = tape.batch_norm_train(x, g, b, bn.eps)?;
            update_running(bn, &m, &v);
            Ok(y)
        }
        BnMode::Eval => tape.batch_norm_eval(x, g, b, &bn.running_mean, &bn.running_var, bn.eps),
    }
}

/// He-normal weights, zero bias.
pub fn init_conv<T: Scalar, R: Rng + ?Sized>(
    kind: ConvKind,
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    rng: &mut R,
) -> Result<AffineConvSpec<T>> {
    let padding = kernel.0 / 2;
    let mut spec = AffineConvSpec::zeros(kind, in_channels, out_channels, kernel, stride, padding)?;
    let fan_in = (in_channels / spec.groups) * kernel.0 * kernel.1;
    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
    for v in spec.weight.data_mut() {
        *v = T::of(normal.sample(rng));
    }
    Ok(spec)
}

/// Convolution followed by optional batch norm and optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: AffineConvSpec<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub relu: bool,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(conv: AffineConvSpec<T>, with_bn: bool, relu: bool) -> Self {
        let bn = with_bn.then(|| BatchNormParams::identity(conv.out_channels));
        Self { conv, bn, relu }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = batch_norm_apply(&y, bn)?.0;
        }
        Ok(if self.relu { relu(&y) } else { y })
    }

    pub fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let mut y = tape_conv(tape, prefix, &self.conv, x)?;
        if let Some(bn) = &mut self.bn {
            y = tape_bn(tape, &join(prefix, "bn"), bn, y)?;
        }
        Ok(if self.relu { tape.relu(y) } else { y })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.map_bn(&mut |bn| bn.mode = mode);
    }

    pub fn map_bn(&mut self, f: &mut dyn FnMut(&mut BatchNormParams<T>)) {
        if let Some(bn) = &mut self.bn {
            f(bn);
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, |b| b.param_count())
    }

    pub fn cast<U: Scalar>(&self) -> ConvUnit<U> {
        ConvUnit {
            conv: self.conv.cast(),
            bn: self.bn.as_ref().map(|b| b.cast()),
            relu: self.relu,
        }
    }
}

impl<T: Scalar> Parameterized<T> for ConvUnit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        visit_conv(prefix, &self.conv, f);
        if let Some(bn) = &self.bn {
            visit_bn(&join(prefix, "bn"), bn, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        visit_conv_mut(prefix, &mut self.conv, f);
        if let Some(bn) = &mut self.bn {
            visit_bn_mut(&join(prefix, "bn"), bn, f);
        }
    }
}
