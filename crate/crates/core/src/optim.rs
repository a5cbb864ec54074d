//! SGD with (Nesterov) momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{KgsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 4e-4,
            nesterov: true,
        }
    }
}

/// One update of every trainable parameter:
/// `g ← ∇ + wd·p`, `buf ← μ·buf + g`, `p ← p − lr·(g + μ·buf)` (Nesterov)
/// or `p ← p − lr·buf` (classic).
///
/// `lr = 0` is allowed and leaves parameters untouched; a zero-lr step does
/// not advance the momentum buffers either.
pub fn sgd_step(params: &mut ParamStore, lr: f64, config: &SgdConfig) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(KgsError::Config(format!("learning rate must be ≥ 0, got {lr}")));
    }
    if lr == 0.0 {
        return Ok(());
    }
    let (mu, wd) = (config.momentum, config.weight_decay);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let buf = p.momentum.data_mut();
        for i in 0..value.len() {
            let g = grad[i] + wd * value[i];
            buf[i] = mu * buf[i] + g;
            let step = if config.nesterov { g + mu * buf[i] } else { buf[i] };
            value[i] -= lr * step;
        }
    }
    Ok(())
}
