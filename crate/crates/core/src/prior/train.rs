use std::time::Instant;

use bevgen_numcore::optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
use bevgen_numcore::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{prior_loss, PriorBatch, PriorModel, TrainSample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    pub clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 3e-4,
            warmup: 0,
            clip: 50.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("lr {} must be finite and nonnegative", self.lr));
        }
        if !(self.clip > 0.0) {
            out.push(format!("clip {} must be positive", self.clip));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!(
                "weight_decay {} must be nonnegative",
                self.weight_decay
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} {b} is outside [0, 1)"));
            }
        }
        out
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

/// One optimizer step as logged. `grad_norm` is measured before clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
    pub wall_ns: u64,
}

/// AdamW with global-norm clipping and seeded epoch shuffling.
#[derive(Debug)]
pub struct PriorTrainer {
    pub model: PriorModel,
    pub config: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    pub step: usize,
}

impl PriorTrainer {
    pub fn new(model: PriorModel, config: TrainConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let optimizer = AdamW::new(
            AdamWConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
                weight_decay: config.weight_decay,
            },
            &model.store,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            optimizer,
            rng,
            queue: Vec::new(),
            step: 0,
        })
    }

    /// Next `batch_size` sample indices; each epoch is a fresh permutation.
    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let want = self.config.batch_size.min(n);
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.queue.is_empty() {
                self.queue = (0..n).collect();
                self.queue.shuffle(&mut self.rng);
                self.queue.reverse();
            }
            out.push(self.queue.pop().expect("refilled"));
        }
        out
    }

    /// One update on `batch`.
    pub fn step_on(&mut self, batch: &PriorBatch) -> Result<StepLog> {
        let start = Instant::now();
        let tape = Tape::new();
        let p = self.model.store.bind(&tape);
        let dropout = (self.model.config.dropout > 0.0).then_some(&mut self.rng);
        let loss = prior_loss(&self.model, &p, batch, dropout)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: value,
            });
        }
        let mut grads = p.grads(&tape.backward(loss)?);
        let grad_norm = clip_global_norm(&mut grads, self.config.clip);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: value,
            });
        }
        let clipped_norm = global_norm(&grads);
        let lr = self.config.lr_at(self.step);
        self.optimizer.step(&mut self.model.store, &grads, lr);
        let log = StepLog {
            step: self.step,
            loss: value,
            grad_norm,
            clipped_norm,
            lr,
            wall_ns: start.elapsed().as_nanos() as u64,
        };
        self.step += 1;
        Ok(log)
    }

    /// One update on the next shuffled batch of `samples`.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<StepLog> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let idx = self.next_indices(samples.len());
        let picked: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = PriorBatch::new(&self.model, &picked)?;
        self.step_on(&batch)
    }
}

/// Run `config.steps` updates, reporting each step to `on_step`.
pub fn train(
    model: PriorModel,
    samples: &[TrainSample],
    config: TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PriorModel> {
    let mut trainer = PriorTrainer::new(model, config)?;
    for _ in 0..trainer.config.steps {
        let log = trainer.step(samples)?;
        on_step(&log);
    }
    Ok(trainer.model)
}
