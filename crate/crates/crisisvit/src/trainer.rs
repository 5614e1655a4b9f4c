//! Shared optimization machinery: Adam with decoupled weight decay, warmup
//! plus cosine decay, global-norm gradient clipping, and seeded epoch
//! shuffling. Everything is sequential and deterministic for a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSet;
use crate::error::{Error, Result};
use crate::graph::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    Cosine,
    Constant,
}

/// Learning-rate schedule and regularization knobs for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub decay: DecayShape,
    pub grad_clip: f64,
    pub label_smoothing: f64,
}

impl TrainSchedule {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        TrainSchedule {
            learning_rate,
            ..TrainSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must be in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total_steps` (0-based).
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.learning_rate;
        }
        let warmup_steps = (self.warmup_fraction * total_steps as f64).round() as usize;
        if step < warmup_steps {
            return self.learning_rate * (step + 1) as f64 / warmup_steps as f64;
        }
        match self.decay {
            DecayShape::Constant => self.learning_rate,
            DecayShape::Cosine => {
                let span = (total_steps - warmup_steps).max(1) as f64;
                let progress = (step - warmup_steps) as f64 / span;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainSchedule {
    /// Conventional defaults. Upstream protocol pins only the optimizer
    /// and batch size; everything else is declared here and surfaced
    /// through configuration.
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 1e-4,
            warmup_fraction: 0.05,
            decay: DecayShape::Cosine,
            grad_clip: 1.0,
            label_smoothing: 0.0,
        }
    }
}

/// Adam state over a fixed parameter ordering.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    settings: OptimizerSettings,
}

impl AdamState {
    pub fn new(params: &ParamSet, settings: OptimizerSettings) -> Self {
        let m = params
            .names()
            .iter()
            .enumerate()
            .map(|(i, _)| Tensor::zeros(params.value_at(i).raw_dim()))
            .collect();
        let v = params
            .names()
            .iter()
            .enumerate()
            .map(|(i, _)| Tensor::zeros(params.value_at(i).raw_dim()))
            .collect();
        AdamState {
            m,
            v,
            t: 0,
            settings,
        }
    }

    /// One update over grads aligned with the parameter ordering. Applies
    /// global-norm clipping first; decoupled weight decay is scaled by the
    /// learning rate.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &mut [Option<Tensor>],
        lr: f64,
        grad_clip: f64,
    ) {
        let mut sq = 0.0;
        for g in grads.iter().flatten() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip_scale = if norm > grad_clip {
            grad_clip / norm
        } else {
            1.0
        };

        self.t += 1;
        let b1 = self.settings.beta1;
        let b2 = self.settings.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        #[allow(clippy::needless_range_loop)]
        for i in 0..params.len() {
            let Some(g) = grads[i].take() else { continue };
            let g = if clip_scale != 1.0 { g * clip_scale } else { g };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let wd = self.settings.weight_decay;
            let eps = self.settings.eps;
            let param = params.value_at_mut(i);
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// Seeded index shuffle for one epoch; deterministic in `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Split items into batches of at most `batch_size` following `order`.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}
