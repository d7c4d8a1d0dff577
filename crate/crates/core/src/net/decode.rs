use crate::net::head::HeadOutput;
use crate::ops::sigmoid;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// `(x1, y1, x2, y2)` in input pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub class_id: usize,
}

pub fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Unclipped box for cell `(row, col)` from deltas `(dx, dy, dw, dh)`.
pub fn cell_box(row: usize, col: usize, d: [f64; 4], stride: f64) -> [f64; 4] {
    let cx = (col as f64 + d[0]) * stride;
    let cy = (row as f64 + d[1]) * stride;
    let w = d[2].exp() * stride;
    let h = d[3].exp() * stride;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Greedy per-class NMS: highest score first (ties by input order); a box
/// is dropped when its IoU with an already kept box of the same class
/// exceeds `iou_thresh`.
pub fn nms(dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            keep.push(d);
        }
    }
    keep
}

/// Decodes sample `n` of `maps` into clipped, NMS-filtered detections.
/// Each cell proposes its best class with score `σ(obj)·σ(cls)`.
pub fn decode_boxes<T: Scalar>(
    maps: &HeadOutput<T>,
    n: usize,
    stride: usize,
    image: (usize, usize),
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let [_, k, h, w] = maps.cls.shape();
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let (ih, iw) = (image.0 as f64, image.1 as f64);
    let mut dets = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let obj = sigmoid(f(maps.obj.at([n, 0, i, j])));
            let (class_id, cls) = (0..k)
                .map(|c| (c, sigmoid(f(maps.cls.at([n, c, i, j])))))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            let score = obj * cls;
            if !(score >= score_thresh) {
                continue;
            }
            let d = [0, 1, 2, 3].map(|c| f(maps.boxes.at([n, c, i, j])));
            let b = cell_box(i, j, d, stride as f64);
            let bbox = [b[0].clamp(0.0, iw), b[1].clamp(0.0, ih), b[2].clamp(0.0, iw), b[3].clamp(0.0, ih)];
            if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                dets.push(Detection { bbox, score, class_id });
            }
        }
    }
    nms(dets, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn det(b: [f64; 4], score: f64) -> Detection {
        Detection { bbox: b, score, class_id: 0 }
    }

    #[test]
    fn zero_offsets_center_on_cell_origin() {
        assert_eq!(cell_box(0, 0, [0.0; 4], 16.0), [-8.0, -8.0, 8.0, 8.0]);
    }

    #[test]
    fn identical_boxes_leave_one() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let kept = nms(vec![det(b, 0.8), det(b, 0.9)], 0.5);
        assert_eq!(kept, vec![det(b, 0.9)]);
    }

    #[test]
    fn other_class_not_suppressed() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let mut other = det(b, 0.8);
        other.class_id = 1;
        assert_eq!(nms(vec![det(b, 0.9), other], 0.5).len(), 2);
    }

    #[test]
    fn iou_hand_values() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &[1.0, 0.0, 3.0, 2.0]), 2.0 / 6.0);
        assert_eq!(iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn decode_clips_and_scores() {
        let maps = HeadOutput {
            cls: Tensor::<f64>::full([1, 2, 2, 2], 0.0),
            obj: Tensor::full([1, 1, 2, 2], 0.0),
            boxes: Tensor::full([1, 4, 2, 2], 0.0),
        };
        let d = decode_boxes(&maps, 0, 16, (32, 32), 0.1, 1.0);
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|d| (d.score - 0.25).abs() < 1e-15));
        assert!(d.iter().any(|d| d.bbox == [0.0, 0.0, 8.0, 8.0]));
        assert!(d.iter().all(|d| d.bbox[2] <= 32.0 && d.bbox[3] <= 32.0));
    }
}
