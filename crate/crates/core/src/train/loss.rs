use crate::autograd::{BoxTarget, Tape};
use crate::error::{FemtoError, Result};
use crate::net::decode::area;
use crate::net::head::HeadVars;
use crate::tensor::Tensor;
use crate::train::augment::Sample;

/// IoU-term weight.
pub const IOU_WEIGHT: f32 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub obj: f64,
    pub cls: f64,
    pub iou: f64,
    pub num_pos: usize,
}

/// Per-batch targets: each ground truth claims the single cell containing
/// its center. When two share a cell the smaller box wins.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub obj: Tensor<f32>,
    pub cls: Tensor<f32>,
    pub cls_weight: Tensor<f32>,
    pub boxes: Vec<BoxTarget<f32>>,
}

pub fn assign_targets(batch: &[Sample], grid: (usize, usize), stride: usize, num_classes: usize) -> Result<Targets> {
    let (gh, gw) = grid;
    let n = batch.len();
    let mut obj = Tensor::zeros([n, 1, gh, gw]);
    let mut cls = Tensor::zeros([n, num_classes, gh, gw]);
    let mut cls_weight = Tensor::zeros([n, num_classes, gh, gw]);
    let mut boxes = Vec::new();
    let s = stride as f64;
    for (i, sample) in batch.iter().enumerate() {
        let mut order: Vec<usize> = (0..sample.boxes.len()).collect();
        order.sort_by(|&a, &b| area(&sample.boxes[b]).total_cmp(&area(&sample.boxes[a])).then(a.cmp(&b)));
        let mut cell_owner: Vec<(usize, usize, usize)> = Vec::new();
        for k in order {
            let b = sample.boxes[k];
            let label = sample.labels[k];
            if label >= num_classes {
                return Err(FemtoError::InvalidArgument(format!(
                    "label {label} outside {num_classes} classes"
                )));
            }
            let row = (((b[1] + b[3]) / 2.0 / s) as usize).min(gh - 1);
            let col = (((b[0] + b[2]) / 2.0 / s) as usize).min(gw - 1);
            cell_owner.retain(|&(r, c, _)| (r, c) != (row, col));
            cell_owner.push((row, col, k));
        }
        for (row, col, k) in cell_owner {
            let b = sample.boxes[k];
            obj.set([i, 0, row, col], 1.0);
            for c in 0..num_classes {
                cls.set([i, c, row, col], if c == sample.labels[k] { 1.0 } else { 0.0 });
                cls_weight.set([i, c, row, col], 1.0);
            }
            boxes.push(BoxTarget {
                sample: i,
                row,
                col,
                gt: b.map(|v| v as f32),
            });
        }
    }
    Ok(Targets {
        obj,
        cls,
        cls_weight,
        boxes,
    })
}

/// `(BCE_obj(all cells) + BCE_cls(positives) + 5·Σ(1 − IoU)) / max(1, #pos)`.
pub fn detection_loss(
    tape: &mut Tape<f32>,
    out: HeadVars,
    batch: &[Sample],
    stride: usize,
) -> Result<(crate::autograd::Var, LossParts)> {
    let [n, k, gh, gw] = tape.value(out.cls).shape();
    if n != batch.len() {
        return Err(FemtoError::Dimension {
            op: "detection_loss",
            axis: "batch",
            expected: n,
            got: batch.len(),
        });
    }
    let t = assign_targets(batch, (gh, gw), stride, k)?;
    let num_pos = t.boxes.len();
    let norm = 1.0 / num_pos.max(1) as f32;
    let obj_w = Tensor::full(t.obj.shape(), 1.0);
    let obj = tape.bce_with_logits(out.obj, t.obj, obj_w)?;
    let cls = tape.bce_with_logits(out.cls, t.cls, t.cls_weight)?;
    let iou = tape.iou_loss(out.boxes, t.boxes, stride as f32)?;
    let parts = [obj, cls, iou].map(|v| tape.value(v).data()[0] as f64 * norm as f64);
    let oc = tape.add(obj, cls)?;
    let iw = tape.scale_const(iou, IOU_WEIGHT);
    let sum = tape.add(oc, iw)?;
    let total = tape.scale_const(sum, norm);
    let parts = LossParts {
        total: tape.value(total).data()[0] as f64,
        obj: parts[0],
        cls: parts[1],
        iou: parts[2],
        num_pos,
    };
    Ok((total, parts))
}
