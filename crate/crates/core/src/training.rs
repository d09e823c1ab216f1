//! Episodic meta-training loop shared by the detector and the classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::RunCurve;
use crate::neural::{maml_meta_step, AdamWConfig, LossFunctional, MetaOptimizer, NeuralError, OptimizerState, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOptimizerKind {
    Sgd,
    Adamw,
}

/// Meta-learning hyperparameters. `zeta_support` weights the max-loss term
/// of every support-side loss (inner updates, test-time fine-tuning);
/// `zeta_query` that of the meta objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub batch_episodes: usize,
    pub total_steps: u64,
    pub zeta_support: f64,
    pub zeta_query: f64,
    /// Validate every this many meta-steps (0 = never).
    pub eval_interval: u64,
    pub meta_optimizer: MetaOptimizerKind,
    /// Used when `meta_optimizer` is AdamW; `lr` is replaced by `beta` and
    /// `total_steps` by the run length.
    pub meta_adamw: AdamWConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.01,
            inner_steps: 3,
            batch_episodes: 4,
            total_steps: 300,
            zeta_support: 5.0,
            zeta_query: 2.0,
            eval_interval: 10,
            meta_optimizer: MetaOptimizerKind::Sgd,
            meta_adamw: AdamWConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn optimizer(&self, like: &ParamVector) -> MetaOptimizer {
        match self.meta_optimizer {
            MetaOptimizerKind::Sgd => MetaOptimizer::Sgd { lr: self.beta },
            MetaOptimizerKind::Adamw => MetaOptimizer::AdamW(OptimizerState::new(
                AdamWConfig { lr: self.beta, total_steps: self.total_steps, ..self.meta_adamw },
                like,
            )),
        }
    }
}

/// One line of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub params: ParamVector,
    pub log: Vec<LogEntry>,
    /// Validation score by meta-step, starting at step 0 (the initial
    /// parameters).
    pub curve: RunCurve,
}

/// Cycles through `0..n` in seeded shuffled epochs.
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), cursor: n };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    /// Next `size` indices (`size` is capped at `n`).
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_done();
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// First-order MAML over `tasks` (support, query) pairs.
pub fn meta_train<L: LossFunctional>(
    init: ParamVector,
    tasks: &[(&L::Data, &L::Data)],
    inner: &L,
    outer: &L,
    config: &MetaConfig,
    seed: u64,
    mut validate: Option<&mut dyn FnMut(&ParamVector) -> Result<f64, NeuralError>>,
) -> Result<MetaTrainOutcome, NeuralError> {
    if tasks.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let mut params = init;
    let mut optimizer = config.optimizer(&params);
    let mut schedule = BatchSchedule::new(tasks.len(), seed);
    let mut log = Vec::with_capacity(config.total_steps as usize);
    let mut curve = RunCurve::default();
    if let Some(v) = validate.as_deref_mut() {
        curve.push(0, v(&params)?).expect("first point");
    }
    for step in 1..=config.total_steps {
        let batch: Vec<(&L::Data, &L::Data)> =
            schedule.next_batch(config.batch_episodes.max(1)).into_iter().map(|i| tasks[i]).collect();
        let out = maml_meta_step(&params, &batch, inner, outer, config.alpha, config.inner_steps, &mut optimizer)?;
        params = out.params;
        let loss = out.query_losses.iter().sum::<f64>() / out.query_losses.len() as f64;
        let mut val_f1 = None;
        if config.eval_interval > 0 && step % config.eval_interval == 0 {
            if let Some(v) = validate.as_deref_mut() {
                let f = v(&params)?;
                curve.push(step, f).expect("increasing steps");
                val_f1 = Some(f);
            }
        }
        log.push(LogEntry { step, loss, val_f1 });
    }
    Ok(MetaTrainOutcome { params, log, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_every_index_each_epoch() {
        let mut s = BatchSchedule::new(5, 9);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(1)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(BatchSchedule::new(3, 1).next_batch(10).len(), 3);
    }
}
