//! Adam, learning-rate schedules and the training loops.

pub mod dynamic_fit;
pub mod static_fit;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::BlockKind;

pub use dynamic_fit::{fit_dynamic, DynamicData, DynamicFit, DynamicFitConfig, MotionConfig};
pub use static_fit::{fit_static, PairPrior, StaticData, StaticFit, StaticFitConfig, TrainView};

/// Adam with bias correction; one moment pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One update of every block with its own learning rate. Nothing is
    /// modified when any gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], names: &[String], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer block count mismatch".into()));
        }
        for (k, g) in grads.iter().enumerate() {
            if g.len() != self.m[k].len() || params[k].len() != g.len() {
                return Err(Error::Shape(format!("block `{}` changed size", names[k])));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { block: names[k].clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..grads.len() {
            let (m, v, p, g) = (&mut self.m[k], &mut self.v[k], &mut *params[k], &grads[k]);
            let lr = lrs[k];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential decay from `initial` to `final_lr` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let f = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        self.initial * (self.final_lr / self.initial).powf(f)
    }
}

/// Separate schedules for grid-like and network parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub grid: LrSchedule,
    pub network: LrSchedule,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            grid: LrSchedule { initial: 2e-2, final_lr: 2e-3 },
            network: LrSchedule { initial: 1e-3, final_lr: 1e-4 },
        }
    }
}

impl LrConfig {
    /// The single schedule of the positional-encoding fields.
    pub fn uniform(initial: f64, final_lr: f64) -> Self {
        let s = LrSchedule { initial, final_lr };
        Self { grid: s, network: s }
    }

    pub fn for_kind(&self, kind: BlockKind) -> &LrSchedule {
        match kind {
            BlockKind::Grid => &self.grid,
            BlockKind::Network => &self.network,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [self.grid, self.network] {
            if !(s.initial > 0.0 && s.final_lr > 0.0 && s.initial.is_finite() && s.final_lr.is_finite()) {
                return Err(Error::Config("learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One line of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

/// Text form: a header and one `iter loss psnr lr` line per entry.
pub fn format_log(entries: &[LogEntry]) -> String {
    let mut s = String::from("iter loss psnr lr\n");
    for e in entries {
        let _ = writeln!(s, "{} {:.9e} {:.6} {:.6e}", e.iter, e.loss, e.psnr, e.lr);
    }
    s
}

/// Moving average with a trailing window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests;
