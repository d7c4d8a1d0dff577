//! Synthetic shapes dataset: colored rectangles and ellipses on textured
//! noise, one class per base color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FemtoError, Result};
use crate::net::decode::iou;
use crate::tensor::Tensor;
use crate::train::augment::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Std-dev of per-pixel background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 3,
            train_size: 512,
            val_size: 128,
            min_objects: 1,
            max_objects: 4,
            min_side: 20,
            max_side: 56,
            noise: 0.05,
            seed: 0x70e_da7a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl ToyDatasetConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| FemtoError::Parse {
            line: e
                .span()
                .map(|sp| s[..sp.start.min(s.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FemtoError::InvalidArgument(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("object count range {}..={}", self.min_objects, self.max_objects));
        }
        if self.min_side < 4 || self.min_side > self.max_side || self.max_side >= self.image_size {
            return bad(format!(
                "side range {}..={} for {}px images",
                self.min_side, self.max_side, self.image_size
            ));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {}", self.noise));
        }
        Ok(())
    }
}

/// Base RGB color of class `k`: red, green, blue, then evenly spaced hues.
pub fn class_color(k: usize, num_classes: usize) -> [f32; 3] {
    const BASE: [[f32; 3]; 3] = [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.15, 0.25, 0.95]];
    if num_classes <= 3 {
        return BASE[k];
    }
    let h = k as f32 / num_classes as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

fn background<R: Rng>(size: usize, noise: f64, rng: &mut R) -> Tensor<f32> {
    let base = rng.gen_range(0.3..0.6f32);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let (fx, fy) = (rng.gen_range(0.05..0.3f32), rng.gen_range(0.05..0.3f32));
    let phase = rng.gen_range(0.0..6.28f32);
    let n = Normal::new(0.0, noise.max(1e-12)).expect("valid normal");
    let mut img = Tensor::zeros([1, 3, size, size]);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let stripes = 0.06 * (fx * x as f32 + fy * y as f32 + phase).sin();
                let v = base + tint[c] + stripes + n.sample(rng) as f32;
                img.set([0, c, y, x], v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn draw<R: Rng>(img: &mut Tensor<f32>, b: [usize; 4], color: [f32; 3], ellipse: bool, rng: &mut R) {
    let [x1, y1, x2, y2] = b;
    let (cx, cy) = ((x1 + x2) as f32 / 2.0, (y1 + y2) as f32 / 2.0);
    let (rx, ry) = ((x2 - x1) as f32 / 2.0, (y2 - y1) as f32 / 2.0);
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
    for y in y1..y2 {
        for x in x1..x2 {
            if ellipse {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            for c in 0..3 {
                let v = color[c] + jitter[c] + rng.gen_range(-0.03..0.03);
                img.set([0, c, y, x], v.clamp(0.0, 1.0));
            }
        }
    }
}

/// One image. Objects overlap with IoU ≤ 0.2 and sit in distinct 16-px
/// cells so each keeps its own positive location.
pub fn generate_sample<R: Rng>(cfg: &ToyDatasetConfig, rng: &mut R) -> Sample {
    let s = cfg.image_size;
    let mut image = background(s, cfg.noise, rng);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    let mut labels = Vec::new();
    let mut tries = 0;
    while boxes.len() < count && tries < 50 {
        tries += 1;
        let w = rng.gen_range(cfg.min_side..=cfg.max_side);
        let h = rng.gen_range(cfg.min_side..=cfg.max_side);
        let x1 = rng.gen_range(0..=s - w);
        let y1 = rng.gen_range(0..=s - h);
        let b = [x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64];
        let cell = |b: &[f64; 4]| (((b[0] + b[2]) / 32.0) as usize, ((b[1] + b[3]) / 32.0) as usize);
        if boxes.iter().any(|o| iou(o, &b) > 0.2 || cell(o) == cell(&b)) {
            continue;
        }
        let label = rng.gen_range(0..cfg.num_classes);
        let ellipse = rng.gen_bool(0.5);
        draw(&mut image, [x1, y1, x1 + w, y1 + h], class_color(label, cfg.num_classes), ellipse, rng);
        boxes.push(b);
        labels.push(label);
    }
    Sample { image, boxes, labels }
}

/// Train and val splits from independent streams of the generator seed.
pub fn generate_dataset(cfg: &ToyDatasetConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        (0..n).map(|_| generate_sample(cfg, &mut rng)).collect()
    };
    Ok(ToyDataset {
        train: split(1, cfg.train_size),
        val: split(2, cfg.val_size),
    })
}
