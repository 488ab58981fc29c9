use std::f64::consts::PI;

use crate::config::{EmaConfig, OptimizerConfig};

/// Optimizer steps in one pass over `samples` at `batch` per step.
pub fn steps_per_epoch(samples: usize, batch: usize) -> u64 {
    samples.div_ceil(batch.max(1)) as u64
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn lr_at(step: u64, opt: &OptimizerConfig, warmup_steps: u64, total_steps: u64) -> f64 {
    let base = opt.base_lr;
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Expert momentum: cosine ramp from `momentum_start` at step 0 to
/// `momentum_end` at `total_steps`.
pub fn ema_momentum_at(step: u64, ema: &EmaConfig, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return ema.momentum_end;
    }
    let progress = (step.min(total_steps)) as f64 / total_steps as f64;
    ema.momentum_end - (ema.momentum_end - ema.momentum_start) * ((PI * progress).cos() + 1.0) / 2.0
}
