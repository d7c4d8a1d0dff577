//! Hardware-free cost proxy: multiply-accumulates plus activation traffic.
//!
//! Only convolutions contribute MACs (`out_elems · kh·kw·in/groups`).
//! Every op reads each input activation once and writes its output once;
//! ReLU is fused into its producer. Bytes assume 4-byte activations.

use std::fmt;

use crate::error::{FemtoError, Result};
use crate::ibe::IbeModule;
use crate::layers::ConvUnit;
use crate::net::backbone::Spatial;
use crate::net::config::StageShape;
use crate::net::model::FemtoDet;
use crate::net::neck::scale_factor;
use crate::ops::{AffineConvSpec, ConvGeom, ConvKind};
use crate::tensor::Scalar;

const BYTES: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub op: &'static str,
    pub macs: u64,
    pub params: usize,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub macs: u64,
    pub param_count: usize,
    pub activation_bytes_read: u64,
    pub activation_bytes_written: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn push(&mut self, l: LayerCost) {
        self.macs += l.macs;
        self.param_count += l.params;
        self.activation_bytes_read += l.bytes_read;
        self.activation_bytes_written += l.bytes_written;
        self.layers.push(l);
    }

    pub fn traffic(&self) -> u64 {
        self.activation_bytes_read + self.activation_bytes_written
    }

    /// Totals equal the per-layer sums.
    pub fn is_consistent(&self) -> bool {
        let s = |f: fn(&LayerCost) -> u64| self.layers.iter().map(f).sum::<u64>();
        s(|l| l.macs) == self.macs
            && s(|l| l.bytes_read) == self.activation_bytes_read
            && s(|l| l.bytes_written) == self.activation_bytes_written
            && self.layers.iter().map(|l| l.params).sum::<usize>() == self.param_count
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "macs={}", self.macs)?;
        writeln!(f, "param_count={}", self.param_count)?;
        writeln!(f, "activation_bytes_read={}", self.activation_bytes_read)?;
        writeln!(f, "activation_bytes_written={}", self.activation_bytes_written)?;
        write!(f, "layers={}", self.layers.len())
    }
}

type Shape = (usize, usize, usize);

fn elems(s: Shape) -> u64 {
    (s.0 * s.1 * s.2) as u64
}

/// Shape-only convolution description.
#[derive(Debug, Clone, Copy)]
struct ConvShape {
    kind: ConvKind,
    cin: usize,
    cout: usize,
    k: (usize, usize),
    stride: usize,
    padding: usize,
    groups: usize,
    params: usize,
}

impl ConvShape {
    fn of<T: Scalar>(c: &AffineConvSpec<T>) -> Self {
        Self {
            kind: c.kind,
            cin: c.in_channels,
            cout: c.out_channels,
            k: c.kernel,
            stride: c.stride,
            padding: c.padding,
            groups: c.groups,
            params: c.param_count(),
        }
    }

    fn dw(c: usize, stride: usize) -> Self {
        Self {
            kind: ConvKind::Depthwise,
            cin: c,
            cout: c,
            k: (3, 3),
            stride,
            padding: 1,
            groups: c,
            params: 10 * c,
        }
    }

    fn pw(cin: usize, cout: usize) -> Self {
        Self {
            kind: ConvKind::Pointwise,
            cin,
            cout,
            k: (1, 1),
            stride: 1,
            padding: 0,
            groups: 1,
            params: cin * cout + cout,
        }
    }
}

struct Builder {
    report: CostReport,
}

impl Builder {
    fn conv(&mut self, name: String, c: ConvShape, input: Shape) -> Result<Shape> {
        if input.0 != c.cin {
            return Err(FemtoError::Dimension {
                op: "estimate_cost",
                axis: "channels",
                expected: c.cin,
                got: input.0,
            });
        }
        let geom = ConvGeom {
            stride: c.stride,
            padding: c.padding,
            groups: c.groups,
        };
        let (h, w) = geom.output_hw(input.1, input.2, c.k.0, c.k.1)?;
        let out = (c.cout, h, w);
        let per_out = (c.k.0 * c.k.1 * (c.cin / c.groups)) as u64;
        self.report.push(LayerCost {
            name,
            op: match c.kind {
                ConvKind::Vanilla => "conv",
                ConvKind::Depthwise => "dwconv",
                ConvKind::Pointwise => "pwconv",
            },
            macs: elems(out) * per_out,
            params: c.params,
            bytes_read: elems(input) * BYTES,
            bytes_written: elems(out) * BYTES,
        });
        Ok(out)
    }

    fn elementwise(&mut self, name: String, op: &'static str, inputs: &[Shape], out: Shape, params: usize) {
        self.report.push(LayerCost {
            name,
            op,
            macs: 0,
            params,
            bytes_read: inputs.iter().map(|&s| elems(s)).sum::<u64>() * BYTES,
            bytes_written: elems(out) * BYTES,
        });
    }

    fn unit<T: Scalar>(&mut self, name: &str, u: &ConvUnit<T>, input: Shape) -> Result<Shape> {
        let out = self.conv(name.to_string(), ConvShape::of(&u.conv), input)?;
        if let Some(bn) = &u.bn {
            self.elementwise(format!("{name}.bn"), "batchnorm", &[out], out, bn.param_count());
        }
        Ok(out)
    }

    fn ibe<T: Scalar>(&mut self, name: &str, m: &IbeModule<T>, x: Shape) -> Result<Shape> {
        let dw = ConvShape::of(&m.dw);
        let x21 = self.conv(format!("{name}.dw"), dw, x)?;
        let desc = ConvShape {
            k: (1, 1),
            padding: 0,
            params: 2,
            ..dw
        };
        let x22 = self.conv(format!("{name}.descriptor"), desc, x)?;
        self.elementwise(format!("{name}.sub"), "sub", &[x21, x22], x21, 0);
        let proj = ConvShape { params: 0, ..dw };
        let x23 = self.conv(format!("{name}.projector"), proj, x)?;
        self.elementwise(format!("{name}.bn1"), "batchnorm", &[x21], x21, m.bn1.param_count());
        self.elementwise(format!("{name}.bn2"), "batchnorm", &[x23], x23, m.bn2.param_count());
        self.elementwise(format!("{name}.add"), "add", &[x21, x23], x21, 0);
        let out = self.conv(format!("{name}.pw"), ConvShape::of(&m.pw), x21)?;
        self.elementwise(format!("{name}.bn3"), "batchnorm", &[out], out, m.bn3.param_count());
        Ok(out)
    }
}

/// Walks the model at `input = (h, w)`.
pub fn estimate_cost<T: Scalar>(model: &FemtoDet<T>, input: (usize, usize)) -> Result<CostReport> {
    let mut b = Builder {
        report: CostReport::default(),
    };
    let mut x = (3, input.0, input.1);
    let mut stages = Vec::new();
    for (j, u) in model.backbone.stem.iter().enumerate() {
        x = b.unit(&format!("backbone.0.{j}"), u, x)?;
    }
    stages.push(x);
    for (k, stage) in model.backbone.stages.iter().enumerate() {
        for (j, blk) in stage.iter().enumerate() {
            let name = format!("backbone.{}.{j}", k + 1);
            let inp = x;
            let mut h = x;
            if let Some(e) = &blk.expand {
                h = b.unit(&format!("{name}.expand"), e, h)?;
            }
            h = match &blk.spatial {
                Spatial::Dsc { dw, pw } => {
                    let y = b.unit(&format!("{name}.dw"), dw, h)?;
                    b.unit(&format!("{name}.pw"), pw, y)?
                }
                Spatial::Ibe(m) => b.ibe(&format!("{name}.ibe"), m, h)?,
            };
            if blk.residual {
                b.elementwise(format!("{name}.residual"), "add", &[inp, h], h, 0);
            }
            x = h;
        }
        stages.push(x);
    }
    // Neck.
    let taps: Vec<Shape> = model.config.neck_taps.iter().map(|&t| stages[t]).collect();
    let target = taps.iter().fold((0, 0), |a, s| if s.1 > a.0 { (s.1, s.2) } else { a });
    let mut acc: Option<Shape> = None;
    for (i, (&t, a)) in taps.iter().zip(&model.neck.align).enumerate() {
        let aligned = match a {
            Some(u) => b.unit(&format!("neck.align.{i}"), u, t)?,
            None => t,
        };
        let up = (aligned.0, target.0, target.1);
        if (aligned.1, aligned.2) != target {
            b.elementwise(format!("neck.upsample.{i}"), "upsample", &[aligned], up, 0);
        }
        if let Some(prev) = acc {
            b.elementwise(format!("neck.add.{i}"), "add", &[prev, up], up, 0);
        }
        acc = Some(up);
    }
    let fused = acc.ok_or_else(|| FemtoError::InvalidArgument("neck has no inputs".into()))?;
    let y = b.unit("neck.dw", &model.neck.fuse_dw, fused)?;
    let neck_out = b.unit("neck.pw", &model.neck.fuse_pw, y)?;
    // Head.
    let head = &model.head;
    let mut c = neck_out;
    for (i, u) in head.cls_branch.iter().enumerate() {
        c = b.unit(&format!("head.cls.{i}"), u, c)?;
    }
    let mut r = neck_out;
    for (i, u) in head.reg_branch.iter().enumerate() {
        r = b.unit(&format!("head.reg.{i}"), u, r)?;
    }
    b.unit("head.cls_pred", &head.cls_pred, c)?;
    b.unit("head.obj_pred", &head.obj_pred, r)?;
    b.unit("head.reg_pred", &head.reg_pred, r)?;
    Ok(b.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeckKind {
    /// Top-down pyramid: lateral 1×1 on every level, upsample-and-add from
    /// the coarsest level, one DSC output per level.
    Fpn,
    /// FPN followed by a bottom-up path (strided DW + add + DSC per level).
    Pan,
    /// Align, upsample to the finest tap, sum once, one fusion DSC.
    Shared,
}

impl NeckKind {
    pub fn name(self) -> &'static str {
        match self {
            NeckKind::Fpn => "fpn",
            NeckKind::Pan => "pan",
            NeckKind::Shared => "shared",
        }
    }
}

/// Cost of fusing `taps` into `channels`-wide features with each neck
/// style (BN and activations folded away).
pub fn neck_cost(kind: NeckKind, taps: &[StageShape], channels: usize) -> Result<CostReport> {
    if taps.is_empty() {
        return Err(FemtoError::InvalidArgument("neck needs at least one tap".into()));
    }
    let mut b = Builder {
        report: CostReport::default(),
    };
    let ch = channels;
    // Finest first.
    let mut levels: Vec<Shape> = taps.iter().map(|s| (s.c, s.h, s.w)).collect();
    levels.sort_by(|a, b| b.1.cmp(&a.1));
    let target = (levels[0].1, levels[0].2);
    for l in &levels {
        scale_factor(l.1, l.2, target)?;
    }
    let dsc = |b: &mut Builder, name: String, x: Shape| -> Result<Shape> {
        let y = b.conv(format!("{name}.dw"), ConvShape::dw(ch, 1), x)?;
        b.conv(format!("{name}.pw"), ConvShape::pw(ch, ch), y)
    };
    match kind {
        NeckKind::Shared => {
            let mut acc: Option<Shape> = None;
            for (i, &l) in levels.iter().enumerate() {
                let a = if l.0 == ch { l } else { b.conv(format!("align.{i}"), ConvShape::pw(l.0, ch), l)? };
                let up = (ch, target.0, target.1);
                if (a.1, a.2) != target {
                    b.elementwise(format!("upsample.{i}"), "upsample", &[a], up, 0);
                }
                if let Some(prev) = acc {
                    b.elementwise(format!("add.{i}"), "add", &[prev, up], up, 0);
                }
                acc = Some(up);
            }
            dsc(&mut b, "fuse".into(), acc.expect("non-empty"))?;
        }
        NeckKind::Fpn | NeckKind::Pan => {
            let n = levels.len();
            let lateral: Vec<Shape> = levels
                .iter()
                .enumerate()
                .map(|(i, &l)| b.conv(format!("lateral.{i}"), ConvShape::pw(l.0, ch), l))
                .collect::<Result<_>>()?;
            let mut merged = vec![lateral[n - 1]; n];
            for i in (0..n - 1).rev() {
                let up = lateral[i];
                b.elementwise(format!("upsample.{i}"), "upsample", &[merged[i + 1]], up, 0);
                b.elementwise(format!("merge.{i}"), "add", &[lateral[i], up], up, 0);
                merged[i] = up;
            }
            let outs: Vec<Shape> = merged
                .iter()
                .enumerate()
                .map(|(i, &m)| dsc(&mut b, format!("out.{i}"), m))
                .collect::<Result<_>>()?;
            if kind == NeckKind::Pan {
                let mut prev = outs[0];
                for i in 1..n {
                    let f = scale_factor(outs[i].1, outs[i].2, (prev.1, prev.2))?;
                    let down = b.conv(format!("down.{i}"), ConvShape::dw(ch, f), prev)?;
                    if down != outs[i] {
                        return Err(FemtoError::Geometry(format!("bottom-up path gives {down:?}, level is {:?}", outs[i])));
                    }
                    b.elementwise(format!("bottom_up.{i}"), "add", &[down, outs[i]], down, 0);
                    prev = dsc(&mut b, format!("pan_out.{i}"), down)?;
                }
            }
        }
    }
    Ok(b.report)
}
