use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{FemtoError, Result};
use crate::layers::{ParamRole, Parameterized};
use crate::net::backbone::{build_backbone, Backbone};
use crate::net::config::ModelConfig;
use crate::net::head::{DetectHead, HeadOutput, HeadVars};
use crate::net::neck::SharedNeck;
use crate::ops::{BatchNormParams, BnMode, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

/// Backbone → SharedNeck over the configured taps → decoupled head.
#[derive(Debug, Clone, PartialEq)]
pub struct FemtoDet<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub neck: SharedNeck<T>,
    pub head: DetectHead<T>,
}

/// Trainable scalar counts per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamReport {
    pub backbone: usize,
    pub neck: usize,
    pub head: usize,
    pub total: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params_backbone={}", self.backbone)?;
        writeln!(f, "params_neck={}", self.neck)?;
        writeln!(f, "params_head={}", self.head)?;
        write!(f, "params_total={}", self.total)
    }
}

impl<T: Scalar> FemtoDet<T> {
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let shapes = config.stage_shapes()?;
        let backbone = build_backbone(config, rng)?;
        let taps: Vec<_> = config.neck_taps.iter().map(|&t| shapes[t]).collect();
        let bn = !config.folded;
        let neck = SharedNeck::build(&taps, config.width(config.neck_channels), bn, rng)?;
        let head = DetectHead::build(
            config.width(config.neck_channels),
            config.width(config.head_width),
            config.num_classes,
            bn,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            backbone,
            neck,
            head,
        })
    }

    pub fn from_seed(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Stride of the prediction grid.
    pub fn stride(&self) -> usize {
        self.config.output_stride()
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        if shape[1] != 3 {
            return Err(FemtoError::Dimension {
                op: "FemtoDet::forward",
                axis: "channels",
                expected: 3,
                got: shape[1],
            });
        }
        let s = self.config.stride_product();
        if shape[2] % s != 0 || shape[3] % s != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(FemtoError::Geometry(format!(
                "input {}×{} is not divisible by the backbone stride {s}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<HeadOutput<T>> {
        self.check_input(x.shape())?;
        let stages = self.backbone.forward(x)?;
        let taps: Vec<_> = self.config.neck_taps.iter().map(|&t| stages[t].clone()).collect();
        self.head.forward(&self.neck.forward(&taps)?)
    }

    pub fn forward_tape(&mut self, tape: &mut Tape<T>, x: Var) -> Result<HeadVars> {
        self.check_input(tape.value(x).shape())?;
        let stages = self.backbone.forward_tape(tape, "backbone", x)?;
        let taps: Vec<_> = self.config.neck_taps.iter().map(|&t| stages[t]).collect();
        let fused = self.neck.forward_tape(tape, "neck", &taps)?;
        self.head.forward_tape(tape, "head", fused)
    }

    pub fn map_bn(&mut self, f: &mut dyn FnMut(&mut BatchNormParams<T>)) {
        self.backbone.map_bn(f);
        self.neck.units_mut().for_each(|u| u.map_bn(f));
        self.head.units_mut().for_each(|u| u.map_bn(f));
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.map_bn(&mut |bn| bn.mode = mode);
    }

    /// Sets every running statistic to the batch statistics observed on `x`
    /// (one train-mode pass with momentum 1), then switches to eval mode.
    pub fn calibrate_bn(&mut self, x: &Tensor<T>) -> Result<()> {
        self.map_bn(&mut |bn| {
            bn.mode = BnMode::Train;
            bn.momentum = T::one();
        });
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let r = self.forward_tape(&mut tape, xv).map(|_| ());
        self.map_bn(&mut |bn| {
            bn.mode = BnMode::Eval;
            bn.momentum = T::of(BN_MOMENTUM);
        });
        r
    }

    pub fn param_report(&self) -> ParamReport {
        let backbone = self.backbone.trainable_count();
        let neck = self.neck.trainable_count();
        let head = self.head.trainable_count();
        ParamReport {
            backbone,
            neck,
            head,
            total: backbone + neck + head,
        }
    }

    /// Random biases, θ and BN affines, then running statistics calibrated
    /// on a standard-normal batch — a stand-in for trained weights that
    /// exercises every fold term.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.visit_mut("", &mut |name, _, d, _| {
            let range = if name.ends_with("gamma") {
                Some((0.5, 1.5))
            } else if name.ends_with("theta1") || name.ends_with("theta2") {
                Some((-2.0, 2.0))
            } else if name.ends_with(".b") || name.ends_with("beta") {
                Some((-0.2, 0.2))
            } else {
                None
            };
            if let Some((lo, hi)) = range {
                d.iter_mut().for_each(|v| *v = T::of(rng.gen_range(lo..hi)));
            }
        });
        let s = self.config.stride_product();
        let side = s * (64 / s).max(1);
        let x = Tensor::randn([2, 3, side, side], rng);
        self.calibrate_bn(&x)
    }

    pub fn cast<U: Scalar>(&self) -> FemtoDet<U> {
        FemtoDet {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            neck: self.neck.cast(),
            head: self.head.cast(),
        }
    }
}

pub fn count_params<T: Scalar>(model: &FemtoDet<T>) -> ParamReport {
    model.param_report()
}

impl<T: Scalar> Parameterized<T> for FemtoDet<T> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        self.backbone.visit("backbone", f);
        self.neck.visit("neck", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        self.backbone.visit_mut("backbone", f);
        self.neck.visit_mut("neck", f);
        self.head.visit_mut("head", f);
    }
}
