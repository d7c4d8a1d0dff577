//! Staged training schedules with warm restarts.

use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::error::{FemtoError, Result};
use crate::net::model::FemtoDet;
use crate::train::augment::Augment;
use crate::train::optim::Sgd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    Scratch,
    PreviousStage,
}

/// Cosine decay from `peak` to `peak·final_fraction` over a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub peak: f64,
    pub final_fraction: f64,
    /// Linear ramp over the first steps of the stage.
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let lo = self.peak * self.final_fraction;
        lo + 0.5 * (self.peak - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 0.05,
            final_fraction: 0.05,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub augmentations: Vec<Augment>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub init_from: InitFrom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecWRSchedule {
    pub stages: Vec<StageConfig>,
}

pub const STAGE1: [Augment; 5] = [
    Augment::MixUp,
    Augment::Mosaic,
    Augment::RandomAffine,
    Augment::HFlip,
    Augment::RandomScale,
];

/// Four stages dropping MixUp, then Mosaic, then RandomAffine.
pub fn build_recwr_schedule(epochs_per_stage: [usize; 4]) -> Result<RecWRSchedule> {
    build_recwr_schedule_with(epochs_per_stage, LrSchedule::default())
}

pub fn build_recwr_schedule_with(epochs_per_stage: [usize; 4], lr: LrSchedule) -> Result<RecWRSchedule> {
    if epochs_per_stage.contains(&0) {
        return Err(FemtoError::Schedule(format!(
            "every stage needs a positive epoch count, got {epochs_per_stage:?}"
        )));
    }
    let stages = (0..4)
        .map(|k| StageConfig {
            augmentations: STAGE1[k.min(3)..].to_vec(),
            epochs: epochs_per_stage[k],
            lr,
            init_from: if k == 0 { InitFrom::Scratch } else { InitFrom::PreviousStage },
        })
        .collect();
    let s = RecWRSchedule { stages };
    s.validate()?;
    Ok(s)
}

/// One stage with every augmentation, the single-run baseline.
pub fn flat_schedule(epochs: usize, lr: LrSchedule) -> RecWRSchedule {
    RecWRSchedule {
        stages: vec![StageConfig {
            augmentations: STAGE1.to_vec(),
            epochs,
            lr,
            init_from: InitFrom::Scratch,
        }],
    }
}

/// Splits `total` epochs into four near-equal stage budgets, remainder to
/// the earliest stages.
pub fn equal_split(total: usize) -> [usize; 4] {
    let mut out = [total / 4; 4];
    for v in out.iter_mut().take(total % 4) {
        *v += 1;
    }
    out
}

impl RecWRSchedule {
    pub fn is_staged(&self) -> bool {
        self.stages.len() == 4
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Checks the staged-schedule contract: four stages, strictly shrinking
    /// augmentation sets ending at `{HFlip, RandomScale}`, chained inits.
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(FemtoError::Schedule(format!("expected 4 stages, got {}", self.stages.len())));
        }
        for a in STAGE1 {
            if !self.stages[0].augmentations.contains(&a) {
                return Err(FemtoError::Schedule(format!("stage 1 lacks {a:?}")));
            }
        }
        for k in 1..4 {
            let (prev, cur) = (&self.stages[k - 1], &self.stages[k]);
            let subset = cur.augmentations.iter().all(|a| prev.augmentations.contains(a));
            if !subset || cur.augmentations.len() >= prev.augmentations.len() {
                return Err(FemtoError::Schedule(format!("stage {} does not shrink stage {k}", k + 1)));
            }
            if cur.init_from != InitFrom::PreviousStage {
                return Err(FemtoError::Schedule(format!("stage {} must init from stage {k}", k + 1)));
            }
        }
        let mut last = self.stages[3].augmentations.clone();
        last.sort();
        if last != [Augment::HFlip, Augment::RandomScale] {
            return Err(FemtoError::Schedule(format!("stage 4 must be {{HFlip, RandomScale}}, got {last:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// 1-based stage that produced it.
    pub stage: usize,
    pub weights: WeightArchive,
}

/// Model, optimizer and stage bookkeeping between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub schedule: RecWRSchedule,
    /// 0-based index of the running stage.
    pub stage: usize,
    pub stage_finished: bool,
    pub model: FemtoDet<f32>,
    pub optimizer: Sgd,
    pub checkpoints: Vec<Checkpoint>,
    pub global_step: usize,
}

impl TrainState {
    pub fn new(schedule: RecWRSchedule, model: FemtoDet<f32>, optimizer: Sgd) -> Self {
        Self {
            schedule,
            stage: 0,
            stage_finished: false,
            model,
            optimizer,
            checkpoints: Vec::new(),
            global_step: 0,
        }
    }

    pub fn current(&self) -> &StageConfig {
        &self.schedule.stages[self.stage]
    }

    /// Marks the running stage done and snapshots its weights.
    pub fn finish_stage(&mut self) {
        self.checkpoints.push(Checkpoint {
            stage: self.stage + 1,
            weights: WeightArchive::from_params(&self.model),
        });
        self.stage_finished = true;
    }
}

/// Moves to the next stage: weights reload from the previous stage's
/// checkpoint, momentum buffers are cleared and the LR restarts at peak.
pub fn advance_stage(mut state: TrainState) -> Result<TrainState> {
    if !state.stage_finished {
        return Err(FemtoError::Schedule(format!("stage {} has not finished", state.stage + 1)));
    }
    if state.stage + 1 >= state.schedule.stages.len() {
        return Err(FemtoError::Schedule(format!(
            "stage {} is terminal",
            state.schedule.stages.len()
        )));
    }
    let ck = state
        .checkpoints
        .iter()
        .rev()
        .find(|c| c.stage == state.stage + 1)
        .ok_or_else(|| FemtoError::Schedule(format!("no checkpoint for stage {}", state.stage + 1)))?;
    ck.weights.apply_to(&mut state.model)?;
    state.optimizer.reset();
    state.stage += 1;
    state.stage_finished = false;
    Ok(state)
}
