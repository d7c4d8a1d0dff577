use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{FemtoError, Result};
use crate::layers::{init_conv, join, ConvUnit, ParamRole, Parameterized};
use crate::net::config::StageShape;
use crate::ops::{add, upsample_nearest, ConvKind};
use crate::tensor::{Scalar, Tensor};

/// Single-output neck: align every tap to `channels` (pointwise + BN, only
/// where widths differ) and to the largest tapped resolution (nearest
/// upsampling), sum, and fuse with one DSC.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedNeck<T> {
    pub align: Vec<Option<ConvUnit<T>>>,
    pub fuse_dw: ConvUnit<T>,
    pub fuse_pw: ConvUnit<T>,
}

/// Integer upsampling factor from `(h, w)` to `target`.
pub fn scale_factor(h: usize, w: usize, target: (usize, usize)) -> Result<usize> {
    let (th, tw) = target;
    if h == 0 || w == 0 || th % h != 0 || tw % w != 0 || th / h != tw / w {
        return Err(FemtoError::Geometry(format!(
            "non-integer scale ratio from {h}×{w} to {th}×{tw}"
        )));
    }
    Ok(th / h)
}

fn target_hw(shapes: impl Iterator<Item = (usize, usize)>) -> (usize, usize) {
    shapes.fold((0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

impl<T: Scalar> SharedNeck<T> {
    pub fn build<R: Rng + ?Sized>(taps: &[StageShape], channels: usize, with_bn: bool, rng: &mut R) -> Result<Self> {
        if taps.is_empty() {
            return Err(FemtoError::InvalidArgument("neck needs at least one input".into()));
        }
        let target = target_hw(taps.iter().map(|s| (s.h, s.w)));
        let mut align = Vec::with_capacity(taps.len());
        for s in taps {
            scale_factor(s.h, s.w, target)?;
            align.push(if s.c == channels {
                None
            } else {
                let conv = init_conv(ConvKind::Pointwise, s.c, channels, (1, 1), 1, rng)?;
                Some(ConvUnit::new(conv, with_bn, false))
            });
        }
        let dw = init_conv(ConvKind::Depthwise, channels, channels, (3, 3), 1, rng)?;
        let pw = init_conv(ConvKind::Pointwise, channels, channels, (1, 1), 1, rng)?;
        Ok(Self {
            align,
            fuse_dw: ConvUnit::new(dw, with_bn, true),
            fuse_pw: ConvUnit::new(pw, with_bn, true),
        })
    }

    pub fn channels(&self) -> usize {
        self.fuse_dw.conv.in_channels
    }

    fn check_inputs(&self, shapes: &[[usize; 4]]) -> Result<(usize, usize)> {
        if shapes.len() != self.align.len() {
            return Err(FemtoError::Dimension {
                op: "shared_neck",
                axis: "inputs",
                expected: self.align.len(),
                got: shapes.len(),
            });
        }
        Ok(target_hw(shapes.iter().map(|s| (s[2], s[3]))))
    }

    /// The aligned, summed map before the fusion DSC.
    pub fn fuse_inputs(&self, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        let target = self.check_inputs(&features.iter().map(|f| f.shape()).collect::<Vec<_>>())?;
        let mut sum: Option<Tensor<T>> = None;
        for (f, a) in features.iter().zip(&self.align) {
            let aligned = match a {
                Some(u) => u.forward(f)?,
                None => f.clone(),
            };
            if aligned.c() != self.channels() {
                return Err(FemtoError::Dimension {
                    op: "shared_neck",
                    axis: "channels",
                    expected: self.channels(),
                    got: aligned.c(),
                });
            }
            let up = upsample_nearest(&aligned, scale_factor(f.h(), f.w(), target)?)?;
            sum = Some(match sum {
                None => up,
                Some(s) => add(&s, &up)?,
            });
        }
        Ok(sum.expect("at least one input"))
    }

    pub fn forward(&self, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.fuse_pw.forward(&self.fuse_dw.forward(&self.fuse_inputs(features)?)?)
    }

    pub fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, features: &[Var]) -> Result<Var> {
        let shapes: Vec<_> = features.iter().map(|&v| tape.value(v).shape()).collect();
        let target = self.check_inputs(&shapes)?;
        let mut sum = None;
        for (i, (&f, a)) in features.iter().zip(self.align.iter_mut()).enumerate() {
            let aligned = match a {
                Some(u) => u.forward_tape(tape, &format!("{prefix}.align.{i}"), f)?,
                None => f,
            };
            let up = tape.upsample(aligned, scale_factor(shapes[i][2], shapes[i][3], target)?)?;
            sum = Some(match sum {
                None => up,
                Some(s) => tape.add(s, up)?,
            });
        }
        let y = self
            .fuse_dw
            .forward_tape(tape, &join(prefix, "dw"), sum.expect("at least one input"))?;
        self.fuse_pw.forward_tape(tape, &join(prefix, "pw"), y)
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit<T>> {
        self.align
            .iter_mut()
            .flatten()
            .chain([&mut self.fuse_dw, &mut self.fuse_pw])
    }

    pub fn cast<U: Scalar>(&self) -> SharedNeck<U> {
        SharedNeck {
            align: self.align.iter().map(|a| a.as_ref().map(|u| u.cast())).collect(),
            fuse_dw: self.fuse_dw.cast(),
            fuse_pw: self.fuse_pw.cast(),
        }
    }
}

/// Convenience wrapper for [`SharedNeck::forward`].
pub fn shared_neck<T: Scalar>(neck: &SharedNeck<T>, features: &[Tensor<T>]) -> Result<Tensor<T>> {
    neck.forward(features)
}

impl<T: Scalar> Parameterized<T> for SharedNeck<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        for (i, a) in self.align.iter().enumerate() {
            if let Some(u) = a {
                u.visit(&format!("{prefix}.align.{i}"), f);
            }
        }
        self.fuse_dw.visit(&join(prefix, "dw"), f);
        self.fuse_pw.visit(&join(prefix, "pw"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        for (i, a) in self.align.iter_mut().enumerate() {
            if let Some(u) = a {
                u.visit_mut(&format!("{prefix}.align.{i}"), f);
            }
        }
        self.fuse_dw.visit_mut(&join(prefix, "dw"), f);
        self.fuse_pw.visit_mut(&join(prefix, "pw"), f);
    }
}
