//! Instance Boundary Enhancement module.
//!
//! One trainable depthwise 3×3 kernel `W` drives three branches:
//!
//! * `x21 = dw(x)` with `W` and bias `b`,
//! * `x22 = desc(x)`, a 1×1 depthwise conv whose weight is the sum of `W`
//!   over its 3×3 window (no bias),
//! * `x23 = proj(x)` with weight `σ(θ₂)·W` and bias `σ(θ₂)·b`.
//!
//! The difference branch `x31 = x21 − σ(θ₁)·x22` and the projector branch
//! are normalized by independent batch norms, summed, and mixed by a
//! pointwise conv followed by `bn3` and an optional ReLU. Descriptor and
//! projector weights are recomputed from `W` on every forward.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{FemtoError, Result};
use crate::layers::{init_conv, join, tape_bn, visit_bn, visit_bn_mut, visit_conv, visit_conv_mut, ParamRole, Parameterized};
use crate::ops::{
    add, batch_norm_apply, conv2d, relu, sigmoid, AffineConvSpec, BatchNormParams, BnMode, ConvGeom, ConvKind,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct IbeModule<T> {
    /// Shared depthwise 3×3 kernel `W` and bias `b`.
    pub dw: AffineConvSpec<T>,
    /// Unconstrained descriptor factor; the forward uses `σ(theta1)`.
    pub theta1: T,
    /// Unconstrained projector factor; the forward uses `σ(theta2)`.
    pub theta2: T,
    pub bn1: BatchNormParams<T>,
    pub bn2: BatchNormParams<T>,
    pub pw: AffineConvSpec<T>,
    pub bn3: BatchNormParams<T>,
    pub relu: bool,
}

fn ensure_dw3x3<T: Scalar>(dw: &AffineConvSpec<T>) -> Result<()> {
    dw.validate()?;
    if dw.kind != ConvKind::Depthwise || dw.kernel != (3, 3) {
        return Err(FemtoError::Geometry(format!(
            "IBE needs a depthwise 3×3 conv, got {:?} {}×{}",
            dw.kind, dw.kernel.0, dw.kernel.1
        )));
    }
    Ok(())
}

/// Local descriptor: a depthwise 1×1 conv whose weight is each channel's
/// unsigned kernel sum. Same stride as `dw`, no padding, zero bias.
pub fn derive_descriptor<T: Scalar>(dw: &AffineConvSpec<T>) -> Result<AffineConvSpec<T>> {
    ensure_dw3x3(dw)?;
    let c = dw.out_channels;
    let w = Tensor::from_fn([c, 1, 1, 1], |[o, _, _, _]| {
        dw.weight.data()[o * 9..o * 9 + 9].iter().copied().sum()
    });
    AffineConvSpec::new(ConvKind::Depthwise, c, c, (1, 1), dw.stride, 0, w, vec![T::zero(); c])
}

/// Semantic projector: `dw` with weight and bias scaled by `σ(theta2)`.
pub fn derive_projector<T: Scalar>(dw: &AffineConvSpec<T>, theta2: T) -> Result<AffineConvSpec<T>> {
    ensure_dw3x3(dw)?;
    let s = sigmoid(theta2);
    let mut p = dw.clone();
    p.weight = dw.weight.scale(s);
    p.bias = dw.bias.iter().map(|&b| b * s).collect();
    Ok(p)
}

/// Every intermediate of one IBE forward.
#[derive(Debug, Clone)]
pub struct IbeTrace<T> {
    pub x21: Tensor<T>,
    pub x22: Tensor<T>,
    pub x31: Tensor<T>,
    pub x23: Tensor<T>,
    pub bn1_out: Tensor<T>,
    pub bn2_out: Tensor<T>,
    pub out: Tensor<T>,
}

/// Forward pass keeping intermediates. Batch norms use their own mode;
/// running statistics are not updated here.
pub fn ibe_trace<T: Scalar>(m: &IbeModule<T>, x: &Tensor<T>) -> Result<IbeTrace<T>> {
    m.validate()?;
    if x.c() != m.dw.in_channels {
        return Err(FemtoError::Dimension {
            op: "ibe_forward",
            axis: "channels",
            expected: m.dw.in_channels,
            got: x.c(),
        });
    }
    let x21 = conv2d(x, &m.dw)?;
    let x22 = conv2d(x, &derive_descriptor(&m.dw)?)?;
    let s1 = sigmoid(m.theta1);
    let x31 = x21.zip_map(&x22.scale(s1), "ibe x31", |a, b| a - b)?;
    let x23 = conv2d(x, &derive_projector(&m.dw, m.theta2)?)?;
    let bn1_out = batch_norm_apply(&x31, &m.bn1)?.0;
    let bn2_out = batch_norm_apply(&x23, &m.bn2)?.0;
    let fused = add(&bn1_out, &bn2_out)?;
    let z = batch_norm_apply(&conv2d(&fused, &m.pw)?, &m.bn3)?.0;
    let out = if m.relu { relu(&z) } else { z };
    Ok(IbeTrace {
        x21,
        x22,
        x31,
        x23,
        bn1_out,
        bn2_out,
        out,
    })
}

pub fn ibe_forward<T: Scalar>(m: &IbeModule<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ibe_trace(m, x)?.out)
}

impl<T: Scalar> IbeModule<T> {
    /// He-initialized kernels, identity batch norms, `θ₁ = θ₂ = 0`.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let dw = init_conv(ConvKind::Depthwise, in_channels, in_channels, (3, 3), stride, rng)?;
        let pw = init_conv(ConvKind::Pointwise, in_channels, out_channels, (1, 1), 1, rng)?;
        Ok(Self {
            dw,
            theta1: T::zero(),
            theta2: T::zero(),
            bn1: BatchNormParams::identity(in_channels),
            bn2: BatchNormParams::identity(in_channels),
            pw,
            bn3: BatchNormParams::identity(out_channels),
            relu: true,
        })
    }

    /// Fully random module in eval mode: random kernels, biases, θ and
    /// batch-norm statistics.
    pub fn random<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let mut m = Self::init(in_channels, out_channels, stride, rng)?;
        for b in m.dw.bias.iter_mut().chain(m.pw.bias.iter_mut()) {
            *b = T::of(rng.gen_range(-0.5..0.5));
        }
        m.theta1 = T::of(rng.gen_range(-2.0..2.0));
        m.theta2 = T::of(rng.gen_range(-2.0..2.0));
        m.bn1 = BatchNormParams::random(in_channels, rng);
        m.bn2 = BatchNormParams::random(in_channels, rng);
        m.bn3 = BatchNormParams::random(out_channels, rng);
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dw3x3(&self.dw)?;
        self.pw.validate()?;
        if self.pw.kind != ConvKind::Pointwise || self.pw.in_channels != self.dw.out_channels {
            return Err(FemtoError::Geometry(format!(
                "IBE pointwise must consume {} channels",
                self.dw.out_channels
            )));
        }
        for (name, bn, c) in [
            ("bn1", &self.bn1, self.dw.out_channels),
            ("bn2", &self.bn2, self.dw.out_channels),
            ("bn3", &self.bn3, self.pw.out_channels),
        ] {
            bn.validate()?;
            if bn.channels() != c {
                return Err(FemtoError::Dimension {
                    op: "IbeModule",
                    axis: name,
                    expected: c,
                    got: bn.channels(),
                });
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.dw.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.pw.out_channels
    }

    pub fn stride(&self) -> usize {
        self.dw.stride
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.map_bn(&mut |bn| bn.mode = mode);
    }

    pub fn map_bn(&mut self, f: &mut dyn FnMut(&mut BatchNormParams<T>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        f(&mut self.bn3);
    }

    pub fn all_eval(&self) -> bool {
        [&self.bn1, &self.bn2, &self.bn3].iter().all(|b| b.mode == BnMode::Eval)
    }

    /// `9C + C + 2 + 4C + pw + 2·C_out`.
    pub fn param_count(&self) -> usize {
        self.dw.param_count() + 2 + self.bn1.param_count() + self.bn2.param_count() + self.pw.param_count()
            + self.bn3.param_count()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ibe_forward(self, x)
    }

    /// Records the forward on `tape` with parameters named under `prefix`.
    /// Train-mode batch norms advance their running statistics.
    pub fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        self.validate()?;
        let c = self.dw.out_channels;
        let w = tape.param(join(prefix, "dw.w"), &self.dw.weight);
        let b = tape.param(join(prefix, "dw.b"), &Tensor::vector(self.dw.bias.clone()));
        let t1 = tape.param(join(prefix, "theta1"), &Tensor::scalar(self.theta1));
        let t2 = tape.param(join(prefix, "theta2"), &Tensor::scalar(self.theta2));
        let geom = self.dw.geom();
        let x21 = tape.conv2d(x, w, Some(b), geom)?;
        let w_des = tape.kernel_sum(w);
        let desc_geom = ConvGeom {
            stride: self.dw.stride,
            padding: 0,
            groups: c,
        };
        let x22 = tape.conv2d(x, w_des, None, desc_geom)?;
        let s1 = tape.sigmoid(t1);
        let x22s = tape.scale_by(x22, s1)?;
        let x31 = tape.sub(x21, x22s)?;
        // The projector conv uses (σ(θ₂)W, σ(θ₂)b); by homogeneity its output
        // is σ(θ₂)·x21, which saves a depthwise conv per step.
        let s2 = tape.sigmoid(t2);
        let x23 = tape.scale_by(x21, s2)?;
        let y1 = tape_bn(tape, &join(prefix, "bn1"), &mut self.bn1, x31)?;
        let y2 = tape_bn(tape, &join(prefix, "bn2"), &mut self.bn2, x23)?;
        let fused = tape.add(y1, y2)?;
        let pw = crate::layers::tape_conv(tape, &join(prefix, "pw"), &self.pw, fused)?;
        let z = tape_bn(tape, &join(prefix, "bn3"), &mut self.bn3, pw)?;
        Ok(if self.relu { tape.relu(z) } else { z })
    }

    pub fn cast<U: Scalar>(&self) -> IbeModule<U> {
        IbeModule {
            dw: self.dw.cast(),
            theta1: U::of(self.theta1.to_f64().unwrap_or(f64::NAN)),
            theta2: U::of(self.theta2.to_f64().unwrap_or(f64::NAN)),
            bn1: self.bn1.cast(),
            bn2: self.bn2.cast(),
            pw: self.pw.cast(),
            bn3: self.bn3.cast(),
            relu: self.relu,
        }
    }
}

impl<T: Scalar> Parameterized<T> for IbeModule<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        visit_conv(&join(prefix, "dw"), &self.dw, f);
        f(&join(prefix, "theta1"), &[1], std::slice::from_ref(&self.theta1), ParamRole::Trainable);
        f(&join(prefix, "theta2"), &[1], std::slice::from_ref(&self.theta2), ParamRole::Trainable);
        visit_bn(&join(prefix, "bn1"), &self.bn1, f);
        visit_bn(&join(prefix, "bn2"), &self.bn2, f);
        visit_conv(&join(prefix, "pw"), &self.pw, f);
        visit_bn(&join(prefix, "bn3"), &self.bn3, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        visit_conv_mut(&join(prefix, "dw"), &mut self.dw, f);
        f(&join(prefix, "theta1"), &[1], std::slice::from_mut(&mut self.theta1), ParamRole::Trainable);
        f(&join(prefix, "theta2"), &[1], std::slice::from_mut(&mut self.theta2), ParamRole::Trainable);
        visit_bn_mut(&join(prefix, "bn1"), &mut self.bn1, f);
        visit_bn_mut(&join(prefix, "bn2"), &mut self.bn2, f);
        visit_conv_mut(&join(prefix, "pw"), &mut self.pw, f);
        visit_bn_mut(&join(prefix, "bn3"), &mut self.bn3, f);
    }
}
