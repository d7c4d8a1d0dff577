//! Box-aware image augmentations.
//!
//! Images are `1×3×H×W` in `[0, 1]`; boxes are `(x1, y1, x2, y2)` in pixel
//! units with pixel `(i, j)` covering `[j, j+1) × [i, i+1)`. Pixels pulled
//! from outside a source image take [`FILL`].

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{FemtoError, Result};
use crate::net::decode::area;
use crate::tensor::Tensor;

pub const FILL: f32 = 0.5;
/// Boxes smaller than this (px²) after clipping are dropped.
pub const MIN_AREA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Augment {
    MixUp,
    Mosaic,
    RandomAffine,
    HFlip,
    RandomScale,
}

impl Sample {
    pub fn new(image: Tensor<f32>, boxes: Vec<[f64; 4]>, labels: Vec<usize>) -> Result<Self> {
        let s = Self { image, boxes, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.h()
    }

    pub fn width(&self) -> usize {
        self.image.w()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.n() != 1 || self.image.c() != 3 {
            return Err(FemtoError::InvalidArgument(format!(
                "sample image must be 1×3×H×W, got {:?}",
                self.image.shape()
            )));
        }
        if self.boxes.len() != self.labels.len() {
            return Err(FemtoError::InvalidArgument(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        let (h, w) = (self.height() as f64, self.width() as f64);
        for b in &self.boxes {
            let ok = b.iter().all(|v| v.is_finite())
                && 0.0 <= b[0]
                && b[0] < b[2]
                && b[2] <= w
                && 0.0 <= b[1]
                && b[1] < b[3]
                && b[3] <= h;
            if !ok {
                return Err(FemtoError::InvalidArgument(format!("box {b:?} outside {w}×{h} image")));
            }
        }
        Ok(())
    }

    /// Clips boxes to the image and drops those under [`MIN_AREA`].
    pub fn sanitize(mut self) -> Self {
        let (h, w) = (self.height() as f64, self.width() as f64);
        let mut boxes = Vec::with_capacity(self.boxes.len());
        let mut labels = Vec::with_capacity(self.labels.len());
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            let c = [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)];
            if c[2] > c[0] && c[3] > c[1] && area(&c) >= MIN_AREA {
                boxes.push(c);
                labels.push(l);
            }
        }
        self.boxes = boxes;
        self.labels = labels;
        self
    }
}

fn pixel(img: &Tensor<f32>, c: usize, y: isize, x: isize) -> f32 {
    if y < 0 || x < 0 || y >= img.h() as isize || x >= img.w() as isize {
        FILL
    } else {
        img.at([0, c, y as usize, x as usize])
    }
}

/// Bilinear sample at continuous pixel-index coordinates `(fy, fx)`.
fn bilinear(img: &Tensor<f32>, c: usize, fy: f64, fx: f64) -> f32 {
    let (y0, x0) = (fy.floor(), fx.floor());
    let (wy, wx) = ((fy - y0) as f32, (fx - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let top = pixel(img, c, y0, x0) * (1.0 - wx) + pixel(img, c, y0, x0 + 1) * wx;
    if wy == 0.0 {
        return top;
    }
    let bottom = pixel(img, c, y0 + 1, x0) * (1.0 - wx) + pixel(img, c, y0 + 1, x0 + 1) * wx;
    top * (1.0 - wy) + bottom * wy
}

/// Bilinear resize with half-pixel centers; edges are clamped.
pub fn resize_image(img: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let [n, c, ih, iw] = img.shape();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let (sy, sx) = (ih as f64 / h as f64, iw as f64 / w as f64);
    let mut out = Tensor::zeros([n, c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
            for j in 0..w {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
                out.set([0, ch, i, j], bilinear(img, ch, fy, fx));
            }
        }
    }
    out
}

/// `λ·a + (1−λ)·b` with the union of both box sets.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FemtoError::InvalidArgument(format!("mixup λ = {lambda} outside [0, 1]")));
    }
    if a.image.shape() != b.image.shape() {
        return Err(FemtoError::Shape {
            op: "mixup",
            left: a.image.shape(),
            right: b.image.shape(),
        });
    }
    let l = lambda as f32;
    let image = a.image.zip_map(&b.image, "mixup", |x, y| l * x + (1.0 - l) * y)?;
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Ok(Sample { image, boxes, labels })
}

/// [`mixup`] with `λ ~ Beta(8, 8)`.
pub fn random_mixup<R: Rng + ?Sized>(a: &Sample, b: &Sample, rng: &mut R) -> Result<Sample> {
    let lambda = Beta::new(8.0, 8.0).expect("valid beta").sample(rng);
    mixup(a, b, lambda)
}

/// Pastes `s` onto a [`FILL`] canvas of `(h, w)` with its top-left corner at
/// `(oy, ox)` (possibly negative), keeping only the part inside
/// `region = (y0, x0, y1, x1)`.
fn paste(canvas: &mut Tensor<f32>, s: &Sample, oy: isize, ox: isize, region: [usize; 4]) -> Vec<([f64; 4], usize)> {
    let [y0, x0, y1, x1] = region;
    for c in 0..3 {
        for y in y0..y1 {
            let sy = y as isize - oy;
            if sy < 0 || sy >= s.height() as isize {
                continue;
            }
            for x in x0..x1 {
                let sx = x as isize - ox;
                if sx >= 0 && sx < s.width() as isize {
                    canvas.set([0, c, y, x], s.image.at([0, c, sy as usize, sx as usize]));
                }
            }
        }
    }
    let (fy0, fx0, fy1, fx1) = (y0 as f64, x0 as f64, y1 as f64, x1 as f64);
    s.boxes
        .iter()
        .zip(&s.labels)
        .filter_map(|(b, &l)| {
            let t = [
                (b[0] + ox as f64).clamp(fx0, fx1),
                (b[1] + oy as f64).clamp(fy0, fy1),
                (b[2] + ox as f64).clamp(fx0, fx1),
                (b[3] + oy as f64).clamp(fy0, fy1),
            ];
            (t[2] > t[0] && t[3] > t[1] && area(&t) >= MIN_AREA).then_some((t, l))
        })
        .collect()
}

/// 2×2 mosaic around `center = (cy, cx)` on an `out = (h, w)` canvas.
/// Sample `k` fills quadrant `k` (top-left, top-right, bottom-left,
/// bottom-right) with its corner touching the center; whatever falls
/// outside the quadrant is cropped away together with its boxes.
pub fn mosaic(samples: &[Sample; 4], out: (usize, usize), center: (usize, usize)) -> Result<Sample> {
    let (h, w) = out;
    let (cy, cx) = center;
    if cy > h || cx > w {
        return Err(FemtoError::InvalidArgument(format!("mosaic center {center:?} outside {out:?}")));
    }
    let mut image = Tensor::full([1, 3, h, w], FILL);
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let (sh, sw) = (s.height() as isize, s.width() as isize);
        let (cyi, cxi) = (cy as isize, cx as isize);
        let (oy, ox, region) = match k {
            0 => (cyi - sh, cxi - sw, [0, 0, cy, cx]),
            1 => (cyi - sh, cxi, [0, cx, cy, w]),
            2 => (cyi, cxi - sw, [cy, 0, h, cx]),
            _ => (cyi, cxi, [cy, cx, h, w]),
        };
        for (b, l) in paste(&mut image, s, oy, ox, region) {
            boxes.push(b);
            labels.push(l);
        }
    }
    Ok(Sample { image, boxes, labels })
}

/// [`mosaic`] with the center drawn uniformly from the middle half.
pub fn random_mosaic<R: Rng + ?Sized>(samples: &[Sample; 4], out: (usize, usize), rng: &mut R) -> Result<Sample> {
    let cy = rng.gen_range(out.0 / 4..=3 * out.0 / 4);
    let cx = rng.gen_range(out.1 / 4..=3 * out.1 / 4);
    mosaic(samples, out, (cy, cx))
}

/// Horizontal mirror: `x1' = W − x2`, `x2' = W − x1`.
pub fn hflip(s: &Sample) -> Sample {
    let w = s.width();
    let image = Tensor::from_fn(s.image.shape(), |[n, c, y, x]| s.image.at([n, c, y, w - 1 - x]));
    let wf = w as f64;
    let boxes = s.boxes.iter().map(|b| [wf - b[2], b[1], wf - b[0], b[3]]).collect();
    Sample {
        image,
        boxes,
        labels: s.labels.clone(),
    }
}

/// Resizes image and boxes by one factor.
pub fn scale_sample(s: &Sample, factor: f64) -> Result<Sample> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(FemtoError::InvalidArgument(format!("scale factor {factor} must be > 0")));
    }
    let h = ((s.height() as f64 * factor).round() as usize).max(1);
    let w = ((s.width() as f64 * factor).round() as usize).max(1);
    let boxes = s.boxes.iter().map(|b| b.map(|v| v * factor)).collect();
    Ok(Sample {
        image: resize_image(&s.image, h, w),
        boxes,
        labels: s.labels.clone(),
    }
    .sanitize())
}

pub fn random_scale<R: Rng + ?Sized>(s: &Sample, range: (f64, f64), rng: &mut R) -> Result<Sample> {
    if !(range.0 > 0.0) || range.1 < range.0 {
        return Err(FemtoError::InvalidArgument(format!("scale range {range:?}")));
    }
    scale_sample(s, rng.gen_range(range.0..=range.1))
}

/// Resizes (possibly anisotropically) to exactly `(h, w)`.
pub fn resize_sample(s: &Sample, h: usize, w: usize) -> Sample {
    let (fy, fx) = (h as f64 / s.height() as f64, w as f64 / s.width() as f64);
    Sample {
        image: resize_image(&s.image, h, w),
        boxes: s.boxes.iter().map(|b| [b[0] * fx, b[1] * fy, b[2] * fx, b[3] * fy]).collect(),
        labels: s.labels.clone(),
    }
    .sanitize()
}

/// Places `s` on a `(h, w)` [`FILL`] canvas at offset `(oy, ox)`, cropping
/// whatever falls outside.
pub fn place_on_canvas(s: &Sample, h: usize, w: usize, oy: isize, ox: isize) -> Sample {
    let mut image = Tensor::full([1, 3, h, w], FILL);
    let (boxes, labels) = paste(&mut image, s, oy, ox, [0, 0, h, w]).into_iter().unzip();
    Sample { image, boxes, labels }
}

/// 2×3 affine map `p' = A·p + t` on pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Result<Affine> {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        if !(det.abs() > 1e-12) {
            return Err(FemtoError::InvalidArgument("degenerate affine map".into()));
        }
        let ai = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(ai[0][0] * self.t[0] + ai[0][1] * self.t[1]),
            -(ai[1][0] * self.t[0] + ai[1][1] * self.t[1]),
        ];
        Ok(Affine { a: ai, t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Rotation range `±degrees`.
    pub degrees: f64,
    /// Translation range as a fraction of the image size.
    pub translate: f64,
    pub scale: (f64, f64),
    /// Shear range `±shear` degrees.
    pub shear: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        degrees: 0.0,
        translate: 0.0,
        scale: (1.0, 1.0),
        shear: 0.0,
    };
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            degrees: 10.0,
            translate: 0.1,
            scale: (0.75, 1.25),
            shear: 2.0,
        }
    }
}

/// Warps the image (bilinear) and maps box corners, re-axis-aligning and
/// clipping the result.
pub fn affine_warp(s: &Sample, m: &Affine) -> Result<Sample> {
    if *m == Affine::IDENTITY {
        return Ok(s.clone());
    }
    let inv = m.inverse()?;
    let [_, c, h, w] = s.image.shape();
    let mut image = Tensor::zeros([1, c, h, w]);
    for i in 0..h {
        for j in 0..w {
            let (sx, sy) = inv.apply(j as f64 + 0.5, i as f64 + 0.5);
            for ch in 0..c {
                image.set([0, ch, i, j], bilinear(&s.image, ch, sy - 0.5, sx - 0.5));
            }
        }
    }
    let boxes = s
        .boxes
        .iter()
        .map(|b| {
            let pts = [(b[0], b[1]), (b[2], b[1]), (b[0], b[3]), (b[2], b[3])].map(|(x, y)| m.apply(x, y));
            let xs = pts.map(|p| p.0);
            let ys = pts.map(|p| p.1);
            let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [min(xs), min(ys), max(xs), max(ys)]
        })
        .collect();
    Ok(Sample {
        image,
        boxes,
        labels: s.labels.clone(),
    }
    .sanitize())
}

/// Rotation, shear and scale about the image center, then translation.
pub fn affine_from(angle_deg: f64, shear_deg: f64, scale: f64, t: (f64, f64), size: (usize, usize)) -> Affine {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let (c, s) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
    let sh = shear_deg.to_radians().tan();
    // A = R · Sh · scale
    let a = [[scale * c, scale * (c * sh - s)], [scale * s, scale * (s * sh + c)]];
    let (cx, cy) = (w / 2.0, h / 2.0);
    let tx = cx + t.0 * w - (a[0][0] * cx + a[0][1] * cy);
    let ty = cy + t.1 * h - (a[1][0] * cx + a[1][1] * cy);
    Affine { a, t: [tx, ty] }
}

pub fn random_affine<R: Rng + ?Sized>(s: &Sample, params: &AffineParams, rng: &mut R) -> Result<Sample> {
    if !(params.scale.0 > 0.0) || params.scale.1 < params.scale.0 {
        return Err(FemtoError::InvalidArgument(format!("affine scale range {:?}", params.scale)));
    }
    let angle = rng.gen_range(-params.degrees..=params.degrees);
    let shear = rng.gen_range(-params.shear..=params.shear);
    let scale = rng.gen_range(params.scale.0..=params.scale.1);
    let tx = rng.gen_range(-params.translate..=params.translate);
    let ty = rng.gen_range(-params.translate..=params.translate);
    let m = affine_from(angle, shear, scale, (tx, ty), (s.height(), s.width()));
    affine_warp(s, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, v: f32, boxes: Vec<[f64; 4]>) -> Sample {
        let labels = vec![0; boxes.len()];
        Sample::new(Tensor::full([1, 3, h, w], v), boxes, labels).unwrap()
    }

    #[test]
    fn mixup_cases() {
        let a = sample(4, 4, 0.2, vec![[0.0, 0.0, 2.0, 2.0]]);
        let b = sample(4, 4, 0.6, vec![[1.0, 1.0, 3.0, 3.0]]);
        let m = mixup(&a, &b, 1.0).unwrap();
        assert_eq!(m.image, a.image);
        assert_eq!(m.boxes.len(), 2);
        let h = mixup(&a, &b, 0.5).unwrap();
        assert!(h.image.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert!(mixup(&a, &sample(4, 5, 0.0, vec![]), 0.5).is_err());
        assert!(mixup(&a, &b, 1.5).is_err());
    }

    #[test]
    fn mosaic_fixed_center_keeps_top_left_box() {
        let s = sample(8, 8, 0.3, vec![[0.0, 0.0, 4.0, 4.0]]);
        let m = mosaic(&[s.clone(), s.clone(), s.clone(), s.clone()], (16, 16), (8, 8)).unwrap();
        assert_eq!(m.boxes[0], [0.0, 0.0, 4.0, 4.0]);
        assert_eq!(m.boxes[3], [8.0, 8.0, 12.0, 12.0]);
        assert!(m.image.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn mosaic_drops_boxes_outside_their_tile() {
        // Off-center: the top-left tile shows only the bottom-right 4×4 of
        // its sample, so a box in the sample's top-left corner disappears.
        let s = sample(8, 8, 0.3, vec![[0.0, 0.0, 3.0, 3.0]]);
        let m = mosaic(&[s.clone(), s.clone(), s.clone(), s.clone()], (16, 16), (4, 4)).unwrap();
        assert!(m.boxes.iter().all(|b| b[0] >= 4.0 || b[1] >= 4.0));
    }

    #[test]
    fn hflip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Sample::new(Tensor::uniform([1, 3, 5, 7], 0.0, 1.0, &mut rng), vec![[1.0, 2.0, 3.5, 4.0]], vec![1]).unwrap();
        let f = hflip(&s);
        assert_eq!(f.boxes[0], [3.5, 2.0, 6.0, 4.0]);
        assert_eq!(hflip(&f), s);
    }

    #[test]
    fn scale_two_doubles_box() {
        let s = sample(8, 8, 0.5, vec![[1.0, 2.0, 3.0, 4.0]]);
        let t = scale_sample(&s, 2.0).unwrap();
        assert_eq!(t.boxes[0], [2.0, 4.0, 6.0, 8.0]);
        assert_eq!((t.height(), t.width()), (16, 16));
        assert!(scale_sample(&s, 0.0).is_err());
    }

    #[test]
    fn identity_affine_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Sample::new(Tensor::uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng), vec![[1.0, 1.0, 4.0, 5.0]], vec![2]).unwrap();
        assert_eq!(random_affine(&s, &AffineParams::IDENTITY, &mut rng).unwrap(), s);
        let m = affine_from(0.0, 0.0, 1.0, (0.0, 0.0), (6, 6));
        assert_eq!(m, Affine::IDENTITY);
    }

    #[test]
    fn pure_translation_moves_boxes_and_pixels() {
        let mut img = Tensor::full([1, 3, 8, 8], 0.0);
        img.set([0, 0, 2, 2], 1.0);
        let s = Sample::new(img, vec![[2.0, 2.0, 3.0, 3.0]], vec![0]).unwrap();
        let m = Affine {
            a: Affine::IDENTITY.a,
            t: [3.0, 1.0],
        };
        let t = affine_warp(&s, &m).unwrap();
        assert_eq!(t.boxes[0], [5.0, 3.0, 6.0, 4.0]);
        assert_eq!(t.image.at([0, 0, 3, 5]), 1.0);
    }
}
