//! COCO-style average precision at a single IoU threshold.

use std::fmt;

use crate::error::{FemtoError, Result};
use crate::net::decode::{area, iou, Detection};
use crate::train::augment::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: [f64; 4],
    pub class_id: usize,
}

impl Sample {
    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.boxes
            .iter()
            .zip(&self.labels)
            .map(|(&bbox, &class_id)| GtBox { bbox, class_id })
            .collect()
    }
}

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub iou_thresh: f64,
    /// Mean over classes that have at least one ground truth.
    pub ap: f64,
    /// Mean over the same classes of the final recall.
    pub ar: f64,
    pub per_class: Vec<(usize, f64)>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

impl fmt::Display for ApResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = (self.iou_thresh * 100.0).round();
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "iou_thresh={}", self.iou_thresh)?;
        writeln!(f, "ap{pct}={:.4}", self.ap)?;
        writeln!(f, "ar{pct}={:.4}", self.ar)?;
        for (c, ap) in &self.per_class {
            writeln!(f, "ap{pct}_class{c}={ap:.4}")?;
        }
        writeln!(f, "ap{pct}_small={}", opt(self.ap_small))?;
        writeln!(f, "ap{pct}_medium={}", opt(self.ap_medium))?;
        write!(f, "ap{pct}_large={}", opt(self.ap_large))
    }
}

/// Per-class outcome before averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCurve {
    /// Score-ordered `(is_true_positive)` for every non-ignored prediction.
    pub hits: Vec<bool>,
    pub num_gt: usize,
}

impl ClassCurve {
    /// 101-point interpolated AP.
    pub fn ap(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        let (mut tp, mut recall, mut precision) = (0usize, Vec::new(), Vec::new());
        for (i, &hit) in self.hits.iter().enumerate() {
            tp += hit as usize;
            recall.push(tp as f64 / self.num_gt as f64);
            precision.push(tp as f64 / (i + 1) as f64);
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut sum = 0.0;
        let mut j = 0;
        for t in 0..=100 {
            let r = t as f64 / 100.0;
            while j < recall.len() && recall[j] < r {
                j += 1;
            }
            if j < recall.len() {
                sum += precision[j];
            }
        }
        sum / 101.0
    }

    pub fn recall(&self) -> f64 {
        if self.num_gt == 0 {
            0.0
        } else {
            self.hits.iter().filter(|&&h| h).count() as f64 / self.num_gt as f64
        }
    }
}

/// Greedy matching for one class. Predictions are taken by descending
/// score; equal scores keep (image index, position in that image's list)
/// order. Each takes the unmatched ground truth with the highest IoU
/// (lowest index on ties), preferring in-range ground truth over ignored.
pub fn match_class(
    preds: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class_id: usize,
    iou_thresh: f64,
    area_range: (f64, f64),
) -> ClassCurve {
    let in_range = |b: &[f64; 4]| (area_range.0..area_range.1).contains(&area(b));
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (k, d) in p.iter().enumerate() {
            if d.class_id == class_id {
                order.push((i, k));
            }
        }
    }
    order.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score).then(a.cmp(b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut num_gt = 0;
    for g in gts {
        num_gt += g.iter().filter(|b| b.class_id == class_id && in_range(&b.bbox)).count();
    }
    let mut hits = Vec::new();
    for (i, k) in order {
        let d = &preds[i][k];
        let mut best: Option<(bool, f64, usize)> = None;
        for (j, g) in gts.get(i).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            if g.class_id != class_id || used[i][j] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v < iou_thresh {
                continue;
            }
            let cand = (in_range(&g.bbox), v, j);
            let better = match best {
                None => true,
                Some((r, bv, _)) => (cand.0 && !r) || (cand.0 == r && v > bv),
            };
            if better {
                best = Some(cand);
            }
        }
        match best {
            Some((true, _, j)) => {
                used[i][j] = true;
                hits.push(true);
            }
            Some((false, _, j)) => used[i][j] = true,
            None if in_range(&d.bbox) => hits.push(false),
            None => {}
        }
    }
    ClassCurve { hits, num_gt }
}

fn mean_ap(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], classes: &[usize], iou_thresh: f64, range: (f64, f64)) -> Option<f64> {
    let curves: Vec<_> = classes
        .iter()
        .map(|&c| match_class(preds, gts, c, iou_thresh, range))
        .filter(|c| c.num_gt > 0)
        .collect();
    (!curves.is_empty()).then(|| curves.iter().map(ClassCurve::ap).sum::<f64>() / curves.len() as f64)
}

pub fn evaluate_ap(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], iou_thresh: f64) -> Result<ApResult> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(FemtoError::InvalidArgument(format!("IoU threshold {iou_thresh} outside (0, 1)")));
    }
    if preds.len() != gts.len() {
        return Err(FemtoError::InvalidArgument(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let all = (0.0, f64::INFINITY);
    let mut per_class = Vec::new();
    let mut ar = 0.0;
    for &c in &classes {
        let curve = match_class(preds, gts, c, iou_thresh, all);
        per_class.push((c, curve.ap()));
        ar += curve.recall();
    }
    let n = classes.len().max(1) as f64;
    Ok(ApResult {
        iou_thresh,
        ap: per_class.iter().map(|p| p.1).sum::<f64>() / n,
        ar: ar / n,
        per_class,
        ap_small: mean_ap(preds, gts, &classes, iou_thresh, (0.0, SMALL_AREA)),
        ap_medium: mean_ap(preds, gts, &classes, iou_thresh, (SMALL_AREA, LARGE_AREA)),
        ap_large: mean_ap(preds, gts, &classes, iou_thresh, (LARGE_AREA, f64::INFINITY)),
    })
}
