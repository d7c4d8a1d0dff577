use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{FemtoError, Result};
use crate::layers::Parameterized;
use crate::net::decode::{decode_boxes, Detection};
use crate::net::model::FemtoDet;
use crate::ops::BnMode;
use crate::tensor::Tensor;
use crate::train::augment::{
    hflip, place_on_canvas, random_affine, random_mixup, random_mosaic, random_scale, resize_sample, Augment,
    AffineParams, Sample,
};
use crate::train::dataset::ToyDataset;
use crate::train::eval::{evaluate_ap, ApResult};
use crate::train::loss::{detection_loss, LossParts};
use crate::train::optim::Sgd;
use crate::train::schedule::{advance_stage, RecWRSchedule, TrainState};

/// Steps averaged for the initial and final loss figures.
pub const LOSS_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Hard cap on optimizer steps across all stages.
    pub max_steps: Option<usize>,
    /// Evaluate AP50 on the val split after every epoch.
    pub eval_each_epoch: bool,
    pub mosaic_prob: f64,
    pub mixup_prob: f64,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub affine: AffineParams,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_steps: None,
            eval_each_epoch: true,
            mosaic_prob: 0.3,
            mixup_prob: 0.3,
            flip_prob: 0.5,
            scale_range: (0.75, 1.25),
            affine: AffineParams::default(),
            score_thresh: 0.01,
            nms_iou: 0.65,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub header: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub final_ap: Option<ApResult>,
}

fn window_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricsLog {
    pub fn initial_loss(&self) -> f64 {
        window_mean(&self.step_losses[..LOSS_WINDOW.min(self.step_losses.len())])
    }

    pub fn final_loss(&self) -> f64 {
        window_mean(&self.step_losses[self.step_losses.len().saturating_sub(LOSS_WINDOW)..])
    }

    /// Plain-text log; identical runs produce identical text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            let _ = writeln!(s, "{h}");
        }
        for e in &self.epochs {
            let _ = write!(
                s,
                "stage={} epoch={} step={} lr={:.6} loss={:.6} obj={:.6} cls={:.6} iou={:.6}",
                e.stage, e.epoch, e.step, e.lr, e.loss.total, e.loss.obj, e.loss.cls, e.loss.iou
            );
            match e.ap50 {
                Some(ap) => {
                    let _ = writeln!(s, " ap50={ap:.4}");
                }
                None => s.push('\n'),
            }
        }
        let _ = writeln!(s, "steps={}", self.step_losses.len());
        if !self.step_losses.is_empty() {
            let _ = writeln!(s, "initial_loss={:.6}", self.initial_loss());
            let _ = writeln!(s, "final_loss={:.6}", self.final_loss());
        }
        if let Some(ap) = &self.final_ap {
            let _ = writeln!(s, "final_ap50={:.4}", ap.ap);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: MetricsLog,
}

fn fit(s: Sample, h: usize, w: usize) -> Sample {
    if (s.height(), s.width()) == (h, w) {
        s
    } else {
        resize_sample(&s, h, w)
    }
}

/// Draws one training sample through the stage's augmentations.
pub fn augment_sample<R: Rng + ?Sized>(
    pool: &[Sample],
    idx: usize,
    augs: &[Augment],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Sample> {
    let base = &pool[idx];
    let (h, w) = (base.height(), base.width());
    let mut s = if augs.contains(&Augment::Mosaic) && rng.gen_bool(cfg.mosaic_prob) {
        let pick = |rng: &mut R| pool[rng.gen_range(0..pool.len())].clone();
        let four = [base.clone(), pick(rng), pick(rng), pick(rng)];
        fit(random_mosaic(&four, (2 * h, 2 * w), rng)?, h, w)
    } else {
        base.clone()
    };
    if augs.contains(&Augment::MixUp) && rng.gen_bool(cfg.mixup_prob) {
        let other = &pool[rng.gen_range(0..pool.len())];
        s = random_mixup(&s, &fit(other.clone(), h, w), rng)?;
    }
    if augs.contains(&Augment::RandomAffine) {
        s = random_affine(&s, &cfg.affine, rng)?;
    }
    if augs.contains(&Augment::HFlip) && rng.gen_bool(cfg.flip_prob) {
        s = hflip(&s);
    }
    if augs.contains(&Augment::RandomScale) {
        let scaled = random_scale(&s, cfg.scale_range, rng)?;
        let (sh, sw) = (scaled.height() as isize, scaled.width() as isize);
        let (dy, dx) = (h as isize - sh, w as isize - sw);
        let oy = if dy >= 0 { rng.gen_range(0..=dy) } else { -rng.gen_range(0..=-dy) };
        let ox = if dx >= 0 { rng.gen_range(0..=dx) } else { -rng.gen_range(0..=-dx) };
        s = place_on_canvas(&scaled, h, w, oy, ox);
    }
    Ok(s.sanitize())
}

/// Eval-mode detections for every sample.
pub fn predict(model: &FemtoDet<f32>, samples: &[Sample], batch: usize, score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let mut m = model.clone();
    m.set_mode(BnMode::Eval);
    let stride = m.stride();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = Tensor::concat_batch(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let maps = m.forward(&x)?;
        for (n, s) in chunk.iter().enumerate() {
            out.push(decode_boxes(&maps, n, stride, (s.height(), s.width()), score_thresh, nms_iou));
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &FemtoDet<f32>, samples: &[Sample], iou_thresh: f64, cfg: &TrainConfig) -> Result<ApResult> {
    let preds = predict(model, samples, 16, cfg.score_thresh, cfg.nms_iou)?;
    let gts: Vec<_> = samples.iter().map(Sample::gt_boxes).collect();
    evaluate_ap(&preds, &gts, iou_thresh)
}

/// One SGD step on `batch`; returns the loss parts.
fn first_non_finite(model: &FemtoDet<f32>) -> Option<String> {
    let mut bad = None;
    model.visit("", &mut |name, _, data, _| {
        if bad.is_none() && data.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    bad
}

pub fn train_step(model: &mut FemtoDet<f32>, opt: &mut Sgd, batch: &[Sample], lr: f32) -> Result<LossParts> {
    let x = Tensor::concat_batch(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let out = match model.forward_tape(&mut tape, xv) {
        Ok(out) => out,
        Err(e) => {
            // A NaN that reached a batch-norm running statistic surfaces as a
            // validation error; report it as the numeric failure it is.
            return Err(match first_non_finite(model) {
                Some(name) => FemtoError::NonFinite(format!("{name} became non-finite ({e})")),
                None => e,
            });
        }
    };
    let stride = model.stride();
    let (loss, parts) = detection_loss(&mut tape, out, batch, stride)?;
    if !parts.total.is_finite() {
        return Err(FemtoError::NonFinite(format!(
            "loss is {} (obj={} cls={} iou={} positives={})",
            parts.total, parts.obj, parts.cls, parts.iou, parts.num_pos
        )));
    }
    tape.backward(loss)?;
    let grads = tape.param_grads();
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    if let Some(name) = names.into_iter().find(|n| grads[*n].data().iter().any(|v| !v.is_finite())) {
        return Err(FemtoError::NonFinite(format!("gradient of {name} is non-finite (loss {})", parts.total)));
    }
    opt.step(model, &grads, lr)?;
    Ok(parts)
}

/// Runs every stage of `schedule` over `data.train`, chaining stages via
/// [`advance_stage`]. Single-threaded and bit-reproducible for a seed.
pub fn train_toy(
    mut model: FemtoDet<f32>,
    schedule: &RecWRSchedule,
    data: &ToyDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.train.is_empty() || cfg.batch_size == 0 {
        return Err(FemtoError::InvalidArgument("empty training set or zero batch size".into()));
    }
    if schedule.stages.is_empty() {
        return Err(FemtoError::Schedule("schedule has no stages".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.set_mode(BnMode::Train);
    let mut state = TrainState::new(schedule.clone(), model, Sgd::new(cfg.momentum, cfg.weight_decay));
    let mut log = MetricsLog {
        header: vec![
            format!(
                "seed={seed} stages={} epochs={} batch={} max_steps={}",
                schedule.stages.len(),
                schedule.total_epochs(),
                cfg.batch_size,
                cfg.max_steps.map_or("none".to_string(), |m| m.to_string())
            ),
            format!("train_images={} val_images={}", data.train.len(), data.val.len()),
        ],
        ..Default::default()
    };
    let steps_per_epoch = (data.train.len() / cfg.batch_size).max(1);
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'stages: loop {
        let stage = state.current().clone();
        let stage_steps = stage.epochs * steps_per_epoch;
        let mut local = 0;
        for epoch in 0..stage.epochs {
            if state.global_step >= cap {
                break;
            }
            order.shuffle(&mut rng);
            let mut sum = LossParts::default();
            let mut taken = 0;
            let mut lr = 0.0;
            for b in 0..steps_per_epoch {
                if state.global_step >= cap {
                    break;
                }
                let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
                let batch = idx
                    .iter()
                    .map(|&i| augment_sample(&data.train, i, &stage.augmentations, cfg, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                lr = stage.lr.at(local, stage_steps);
                let parts = train_step(&mut state.model, &mut state.optimizer, &batch, lr as f32).map_err(|e| match e {
                    FemtoError::NonFinite(m) => FemtoError::NonFinite(format!(
                        "stage {} epoch {} step {}: {m}",
                        state.stage + 1,
                        epoch + 1,
                        state.global_step + 1
                    )),
                    other => other,
                })?;
                log.step_losses.push(parts.total);
                sum.total += parts.total;
                sum.obj += parts.obj;
                sum.cls += parts.cls;
                sum.iou += parts.iou;
                sum.num_pos += parts.num_pos;
                taken += 1;
                local += 1;
                state.global_step += 1;
            }
            let k = taken.max(1) as f64;
            let mean = LossParts {
                total: sum.total / k,
                obj: sum.obj / k,
                cls: sum.cls / k,
                iou: sum.iou / k,
                num_pos: sum.num_pos,
            };
            let ap50 = if cfg.eval_each_epoch && !data.val.is_empty() {
                Some(evaluate_model(&state.model, &data.val, 0.5, cfg)?.ap)
            } else {
                None
            };
            log.epochs.push(EpochRecord {
                stage: state.stage + 1,
                epoch: epoch + 1,
                step: state.global_step,
                lr,
                loss: mean,
                ap50,
            });
        }
        state.finish_stage();
        if state.stage + 1 == state.schedule.stages.len() || state.global_step >= cap {
            break 'stages;
        }
        state = advance_stage(state)?;
    }
    state.model.set_mode(BnMode::Eval);
    if !data.val.is_empty() {
        log.final_ap = Some(evaluate_model(&state.model, &data.val, 0.5, cfg)?);
    }
    Ok(TrainOutcome { state, log })
}

/// The default detector resized for the toy dataset.
pub fn toy_model_config(data: &crate::train::dataset::ToyDatasetConfig) -> crate::net::config::ModelConfig {
    crate::net::config::ModelConfig {
        input_size: (data.image_size, data.image_size),
        num_classes: data.num_classes,
        ..Default::default()
    }
}
