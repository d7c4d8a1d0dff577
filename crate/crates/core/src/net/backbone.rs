use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ibe::IbeModule;
use crate::layers::{init_conv, join, ConvUnit, ParamRole, Parameterized};
use crate::net::config::ModelConfig;
use crate::ops::{add, BatchNormParams, ConvKind};
use crate::tensor::{Scalar, Tensor};

/// The spatial part of a block: depthwise 3×3 then pointwise projection.
#[derive(Debug, Clone, PartialEq)]
pub enum Spatial<T> {
    Dsc { dw: ConvUnit<T>, pw: ConvUnit<T> },
    Ibe(IbeModule<T>),
}

impl<T: Scalar> Spatial<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Spatial::Dsc { dw, pw } => pw.forward(&dw.forward(x)?),
            Spatial::Ibe(m) => m.forward(x),
        }
    }

    fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        match self {
            Spatial::Dsc { dw, pw } => {
                let y = dw.forward_tape(tape, &join(prefix, "dw"), x)?;
                pw.forward_tape(tape, &join(prefix, "pw"), y)
            }
            Spatial::Ibe(m) => m.forward_tape(tape, &join(prefix, "ibe"), x),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Spatial::Dsc { dw, .. } => dw.conv.stride,
            Spatial::Ibe(m) => m.stride(),
        }
    }
}

/// Inverted-residual block: optional pointwise expansion, the spatial DSC,
/// and an identity shortcut when shapes allow.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub expand: Option<ConvUnit<T>>,
    pub spatial: Spatial<T>,
    pub residual: bool,
}

impl<T: Scalar> Block<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = match &self.expand {
            Some(e) => e.forward(x)?,
            None => x.clone(),
        };
        let y = self.spatial.forward(&h)?;
        if self.residual {
            add(&y, x)
        } else {
            Ok(y)
        }
    }

    pub fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let h = match &mut self.expand {
            Some(e) => e.forward_tape(tape, &join(prefix, "expand"), x)?,
            None => x,
        };
        let y = self.spatial.forward_tape(tape, prefix, h)?;
        if self.residual {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }

    pub fn map_bn(&mut self, f: &mut dyn FnMut(&mut BatchNormParams<T>)) {
        if let Some(e) = &mut self.expand {
            e.map_bn(f);
        }
        match &mut self.spatial {
            Spatial::Dsc { dw, pw } => {
                dw.map_bn(f);
                pw.map_bn(f);
            }
            Spatial::Ibe(m) => m.map_bn(f),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            expand: self.expand.as_ref().map(|e| e.cast()),
            spatial: match &self.spatial {
                Spatial::Dsc { dw, pw } => Spatial::Dsc {
                    dw: dw.cast(),
                    pw: pw.cast(),
                },
                Spatial::Ibe(m) => Spatial::Ibe(m.cast()),
            },
            residual: self.residual,
        }
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        if let Some(e) = &self.expand {
            e.visit(&join(prefix, "expand"), f);
        }
        match &self.spatial {
            Spatial::Dsc { dw, pw } => {
                dw.visit(&join(prefix, "dw"), f);
                pw.visit(&join(prefix, "pw"), f);
            }
            Spatial::Ibe(m) => m.visit(&join(prefix, "ibe"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        if let Some(e) = &mut self.expand {
            e.visit_mut(&join(prefix, "expand"), f);
        }
        match &mut self.spatial {
            Spatial::Dsc { dw, pw } => {
                dw.visit_mut(&join(prefix, "dw"), f);
                pw.visit_mut(&join(prefix, "pw"), f);
            }
            Spatial::Ibe(m) => m.visit_mut(&join(prefix, "ibe"), f),
        }
    }
}

/// Stem convolutions (stage 0) followed by one block list per table row.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub stem: Vec<ConvUnit<T>>,
    pub stages: Vec<Vec<Block<T>>>,
}

fn unit<T: Scalar, R: Rng + ?Sized>(
    kind: ConvKind,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    with_bn: bool,
    relu: bool,
    rng: &mut R,
) -> Result<ConvUnit<T>> {
    Ok(ConvUnit::new(init_conv(kind, cin, cout, (k, k), stride, rng)?, with_bn, relu))
}

/// Builds the backbone described by `cfg.backbone`.
pub fn build_backbone<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Backbone<T>> {
    cfg.validate()?;
    let bn = !cfg.folded;
    let stem_row = cfg.backbone[0];
    let mut cin = 3;
    let mut cin_raw = 3;
    let mut stem = Vec::with_capacity(stem_row.n);
    for j in 0..stem_row.n {
        let cout = cfg.width(stem_row.c);
        let s = if j == 0 { stem_row.s } else { 1 };
        stem.push(unit(ConvKind::Vanilla, cin, cout, 3, s, bn, true, rng)?);
        cin = cout;
        cin_raw = stem_row.c;
    }
    let mut stages = Vec::with_capacity(cfg.backbone.len() - 1);
    for row in &cfg.backbone[1..] {
        let mut blocks = Vec::with_capacity(row.n);
        for j in 0..row.n {
            let stride = if j == 0 { row.s } else { 1 };
            let cout = cfg.width(row.c);
            let expand = match row.t {
                Some(t) if t != 1 => Some(unit(ConvKind::Pointwise, cin, cfg.width(t * cin), 1, 1, bn, true, rng)?),
                _ => None,
            };
            let mid = expand.as_ref().map_or(cin, |e| e.conv.out_channels);
            let spatial = if cfg.use_ibe && !cfg.folded {
                Spatial::Ibe(IbeModule::init(mid, cout, stride, rng)?)
            } else {
                Spatial::Dsc {
                    dw: unit(ConvKind::Depthwise, mid, mid, 3, stride, bn, !cfg.use_ibe, rng)?,
                    pw: unit(ConvKind::Pointwise, mid, cout, 1, 1, bn, true, rng)?,
                }
            };
            // Decided on nominal widths so the empty model keeps the topology.
            let residual = stride == 1 && cin_raw == row.c;
            blocks.push(Block {
                expand,
                spatial,
                residual,
            });
            cin = cout;
            cin_raw = row.c;
        }
        stages.push(blocks);
    }
    Ok(Backbone { stem, stages })
}

impl<T: Scalar> Backbone<T> {
    /// Every stage output, stem first.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut outs = Vec::with_capacity(self.stages.len() + 1);
        let mut h = x.clone();
        for u in &self.stem {
            h = u.forward(&h)?;
        }
        outs.push(h.clone());
        for stage in &self.stages {
            for b in stage {
                h = b.forward(&h)?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }

    pub fn forward_tape(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.stages.len() + 1);
        let mut h = x;
        for (j, u) in self.stem.iter_mut().enumerate() {
            h = u.forward_tape(tape, &format!("{prefix}.0.{j}"), h)?;
        }
        outs.push(h);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                h = b.forward_tape(tape, &format!("{prefix}.{}.{j}", k + 1), h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn map_bn(&mut self, f: &mut dyn FnMut(&mut BatchNormParams<T>)) {
        self.stem.iter_mut().for_each(|u| u.map_bn(f));
        self.stages.iter_mut().flatten().for_each(|b| b.map_bn(f));
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.stages.iter().flatten()
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            stem: self.stem.iter().map(|u| u.cast()).collect(),
            stages: self.stages.iter().map(|s| s.iter().map(|b| b.cast()).collect()).collect(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T], ParamRole)) {
        for (j, u) in self.stem.iter().enumerate() {
            u.visit(&format!("{prefix}.0.{j}"), f);
        }
        for (k, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                b.visit(&format!("{prefix}.{}.{j}", k + 1), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T], ParamRole)) {
        for (j, u) in self.stem.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.0.{j}"), f);
        }
        for (k, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}.{}.{j}", k + 1), f);
            }
        }
    }
}
