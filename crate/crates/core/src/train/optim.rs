use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// SGD hyper-parameters with a linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Length of the linear ramp from 0 to `lr`, in epochs.
    pub warmup_epochs: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.005,
            momentum: 0.937,
            weight_decay: 1e-4,
            warmup_epochs: 3.0,
        }
    }
}

impl SgdConfig {
    /// Rate after `progress` epochs of training (fractional within an epoch).
    pub fn lr_at(&self, progress: f64) -> f64 {
        if self.warmup_epochs <= 0.0 || progress >= self.warmup_epochs {
            self.lr
        } else {
            self.lr * progress.max(0.0) / self.warmup_epochs
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &ParamStore) -> Self {
        SgdState {
            velocity: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

/// `v = momentum * v + g + wd * p` (decay only on flagged parameters), then
/// `p -= lr * v`.
///
/// Grads are checked before anything is touched, so a non-finite gradient
/// leaves parameters and state unchanged.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut SgdState,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            return Err(Error::Invalid(format!(
                "gradient of `{}` has {} entries",
                p.name,
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: p.name.clone() });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + gi + wd * *w;
            *w -= lr * *vi;
        }
    }
    Ok(())
}
