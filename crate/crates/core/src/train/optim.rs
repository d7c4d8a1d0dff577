use std::collections::HashMap;

use crate::error::{FemtoError, Result};
use crate::layers::{ParamRole, Parameterized};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v ← μv + g + λw`, `w ← w − lr·v`.
/// Weight decay applies to conv weights only (names ending in `.w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Drops every momentum buffer.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Largest |v| over all buffers; 0 after [`Sgd::reset`].
    pub fn max_velocity(&self) -> f32 {
        self.velocity
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0, |a, &b| a.max(b.abs()))
    }

    /// Updates every trainable tensor that has a gradient. Parameters are
    /// visited in a fixed order, so updates are deterministic.
    pub fn step<P: Parameterized<f32> + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &HashMap<String, Tensor<f32>>,
        lr: f32,
    ) -> Result<()> {
        let mut failure = None;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, _, w, role| {
            if role != ParamRole::Trainable || failure.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            if g.len() != w.len() {
                failure = Some(format!("gradient for `{name}` has {} values, parameter {}", g.len(), w.len()));
                return;
            }
            let decay = if name.ends_with(".w") { wd } else { 0.0 };
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= lr * *vi;
            }
        });
        match failure {
            Some(m) => Err(FemtoError::InvalidArgument(m)),
            None => Ok(()),
        }
    }
}
