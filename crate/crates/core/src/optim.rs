//! AdamW with cosine learning-rate decay, plus per-step loss logging.

use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            min_lr_fraction: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.min_lr_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup then half-cosine decay from `base` to `base * min_fraction`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, min_fraction: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = base * min_fraction;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct Trainer {
    opt: AdamW,
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, cfg: &OptimConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let params = ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        };
        Ok(Self {
            opt: AdamW::new(vars, params)?,
            cfg: cfg.clone(),
            total_steps,
            step: 0,
        })
    }

    /// Backpropagates `loss`, applies one update and returns the rate used.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let lr = cosine_lr(
            self.cfg.lr,
            self.step,
            self.total_steps,
            self.cfg.warmup_steps,
            self.cfg.min_lr_fraction,
        );
        self.opt.set_learning_rate(lr);
        self.opt.backward_step(loss)?;
        self.step += 1;
        Ok(lr)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

/// `size` distinct entries of `pool` (all of them if `size` is larger),
/// in random order.
pub fn sample_batch(pool: &[usize], size: usize, rng: &mut crate::seed::Rng) -> Vec<usize> {
    let k = size.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Rows of `(step, named values..., lr)` written as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLog {
    columns: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl StepLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((step, values));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Value of `column` at every logged step.
    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == column)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (step, values) in &self.rows {
            let mut rec = vec![step.to_string()];
            rec.extend(values.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
