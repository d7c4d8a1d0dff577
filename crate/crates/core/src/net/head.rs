use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{FemtoError, Result};
use crate::layers::{init_conv, join, ConvUnit, ParamRole, Parameterized};
use crate::ops::ConvKind;
use crate::tensor::{Scalar, Tensor};

/// Raw per-cell predictions: class logits, objectness logit, and box
/// deltas `(dx, dy, dw, dh)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub cls: Tensor<T>,
    pub obj: Tensor<T>,
    pub boxes: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadVars {
    pub cls: Var,
    pub obj: Var,
    pub boxes: Var,
}

/// Decoupled head: a classification branch and a regression branch, each
/// two DSC layers wide `width`; objectness is predicted from the
/// regression branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectHead<T> {
    pub cls_branch: Vec<ConvUnit<T>>,
    pub reg_branch: Vec<ConvUnit<T>>,
    pub cls_pred: ConvUnit<T>,
    pub reg_pred: ConvUnit<T>,
    pub obj_pred: ConvUnit<T>,
}

fn branch<T: Scalar, R: Rng + ?Sized>(cin: usize, width: usize, with_bn: bool, rng: &mut R) -> Result<Vec<ConvUnit<T>>> {
    let mut out = Vec::with_capacity(4);
    let mut c = cin;
    for _ in 0..2 {
        let dw = init_conv(ConvKind::Depthwise, c, c, (3, 3), 1, rng)?;
        let pw = init_conv(ConvKind::Pointwise, c, width, (1, 1), 1, rng)?;
        out.push(ConvUnit::new(dw, with_bn, true));
        out.push(ConvUnit::new(pw, with_bn, true));
        c = width;
    }
    Ok(out)
}

fn pred<T: Scalar, R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Result<ConvUnit<T>> {
    let mut conv = init_conv(ConvKind::Pointwise, cin, cout, (1, 1), 1, rng)?;
    // Small output layers keep the initial logits near zero.
    for w in conv.weight.data_mut() {
        *w = *w * T::of(0.1);
    }
    Ok(ConvUnit::new(conv, false, false))
}

fn run<T: Scalar>(units: &[ConvUnit<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    units.iter().try_fold(x.clone(), |h, u| u.forward(&h))
}

fn run_tape<T: Scalar>(units: &mut [ConvUnit<T>], tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, u) in units.iter_mut().enumerate() {
        h = u.forward_tape(tape, &format!("{prefix}.{i}"), h)?;
    }
    Ok(h)
}

impl<T: Scalar> DetectHead<T> {
    pub fn build<R: Rng + ?Sized>(
        in_channels: usize,
        width: usize,
        num_classes: usize,
        with_bn: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            cls_branch: branch(in_channels, width, with_bn, rng)?,
            reg_branch: branch(in_channels, width, with_bn, rng)?,
            cls_pred: pred(width, num_classes, rng)?,
            reg_pred: {
                // Start each cell at a centered 2-cell box instead of a
                // corner-anchored 1-cell one.
                let mut u = pred(width, 4, rng)?;
                u.conv.bias = [0.5, 0.5, 2f64.ln(), 2f64.ln()].map(T::of).to_vec();
                u
            },
            obj_pred: {
                // Prior of ~1% objectness so background cells don't swamp
                // the shared branch early on.
                let mut u = pred(width, 1, rng)?;
                u.conv.bias = vec![T::of(-(99f64.ln()))];
                u
            },
        })
    }

    pub fn in_channels(&self) -> usize {
        self.cls_branch[0].conv.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.cls_pred.conv.out_channels
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.in_channels() {
            return Err(FemtoError::Dimension {
                op: "head_forward",
                axis: "channels",
                expected: self.in_channels(),
                got: c,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<HeadOutput<T>> {
        self.check(x.c())?;
        let c = run(&self.cls_branch, x)?;
        let r = run(&self.reg_branch, x)?;
        Ok(HeadOutput {
            cls: self.cls_pred.forward(&c)?,
            obj: self.obj_pred.forward(&r)?,
            boxes: self.reg_pred.forward(&r)?,
        })
    }

    pub fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<HeadVars> {
        self.check(tape.value(x).c())?;
        let c = run_tape(&mut self.cls_branch, tape, &join(prefix, "cls"), x)?;
        let r = run_tape(&mut self.reg_branch, tape, &join(prefix, "reg"), x)?;
        Ok(HeadVars {
            cls: self.cls_pred.forward_tape(tape, &join(prefix, "cls_pred"), c)?,
            obj: self.obj_pred.forward_tape(tape, &join(prefix, "obj_pred"), r)?,
            boxes: self.reg_pred.forward_tape(tape, &join(prefix, "reg_pred"), r)?,
        })
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit<T>> {
        self.cls_branch
            .iter_mut()
            .chain(self.reg_branch.iter_mut())
            .chain([&mut self.cls_pred, &mut self.reg_pred, &mut self.obj_pred])
    }

    pub fn cast<U: Scalar>(&self) -> DetectHead<U> {
        DetectHead {
            cls_branch: self.cls_branch.iter().map(|u| u.cast()).collect(),
            reg_branch: self.reg_branch.iter().map(|u| u.cast()).collect(),
            cls_pred: self.cls_pred.cast(),
            reg_pred: self.reg_pred.cast(),
            obj_pred: self.obj_pred.cast(),
        }
    }
}

/// Convenience wrapper for [`DetectHead::forward`].
pub fn head_forward<T: Scalar>(head: &DetectHead<T>, neck_out: &Tensor<T>) -> Result<HeadOutput<T>> {
    head.forward(neck_out)
}

impl<T: Scalar> Parameterized<T> for DetectHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        for (i, u) in self.cls_branch.iter().enumerate() {
            u.visit(&format!("{prefix}.cls.{i}"), f);
        }
        for (i, u) in self.reg_branch.iter().enumerate() {
            u.visit(&format!("{prefix}.reg.{i}"), f);
        }
        self.cls_pred.visit(&join(prefix, "cls_pred"), f);
        self.obj_pred.visit(&join(prefix, "obj_pred"), f);
        self.reg_pred.visit(&join(prefix, "reg_pred"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        for (i, u) in self.cls_branch.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.cls.{i}"), f);
        }
        for (i, u) in self.reg_branch.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.reg.{i}"), f);
        }
        self.cls_pred.visit_mut(&join(prefix, "cls_pred"), f);
        self.obj_pred.visit_mut(&join(prefix, "obj_pred"), f);
        self.reg_pred.visit_mut(&join(prefix, "reg_pred"), f);
    }
}
