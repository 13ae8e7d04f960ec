//! AdamW with decoupled weight decay, a warmup-then-cosine learning-rate
//! schedule, and the focus-constraint projection applied to scale vectors
//! after each step.

use crate::error::{Error, Result};
use crate::model::ScaleVector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// β₁=0.9, β₂=0.95, ε=1e-8, no decay: shared by pretraining and scale
    /// tuning here.
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers and the shared step counter for one group of
/// parameters. Buffer layout mirrors the parameter list passed to each step,
/// so the caller must keep that list's order and sizes fixed.
#[derive(Debug, Clone)]
pub struct AdamWState {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamWState {
            config,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(config: AdamWConfig, params: &[(&str, &mut Tensor)]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
        AdamWState::new(config, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update over a named parameter group at learning rate `lr`.
/// Reads each tensor's accumulated gradient; a missing gradient is treated
/// as zero (decay still applies). Any non-finite gradient aborts before any
/// parameter is touched, naming the offending parameter.
pub fn adamw_step(
    params: &mut [(&str, &mut Tensor)],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} parameter buffers, step got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, (name, p)) in params.iter().enumerate() {
        if p.len() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "parameter {name} has {} elements, optimizer buffer {i} has {}",
                p.len(),
                state.m[i].len()
            )));
        }
        if let Some(g) = p.grad() {
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} contains {bad}; update aborted"
                )));
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);

    for (i, (_, p)) in params.iter_mut().enumerate() {
        let n = p.len();
        let has_grad = p.grad().is_some();
        for j in 0..n {
            let g = if has_grad { p.grad().unwrap()[j] } else { 0.0 };
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let x = &mut p.data_mut()[j];
            *x -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *x);
        }
    }
    Ok(())
}

/// Learning rate at step `t` of a linear-warmup, cosine-decay schedule:
/// ramps 0 → `lr` over `warmup` steps, then follows a half cosine from `lr`
/// at t=warmup down to 0.1·lr at t=total. Endpoints are exact.
pub fn cosine_schedule(t: u64, total: u64, warmup: u64, lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Param {
            name: "total",
            why: "schedule length must be positive".into(),
        });
    }
    if warmup > total {
        return Err(Error::Param {
            name: "warmup",
            why: format!("warmup {warmup} exceeds total {total}"),
        });
    }
    if t > total {
        return Err(Error::Param {
            name: "t",
            why: format!("step {t} beyond schedule end {total}"),
        });
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Param {
            name: "lr",
            why: format!("peak learning rate must be positive and finite, got {lr}"),
        });
    }
    if t < warmup {
        return Ok(lr * t as f64 / warmup as f64);
    }
    if t == warmup {
        return Ok(lr);
    }
    if t == total {
        return Ok(0.1 * lr);
    }
    let floor = 0.1 * lr;
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    Ok(floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Focus-constraint enforcement: element-wise max with the floor 1/√d.
/// Pure and idempotent; callers apply it after every optimizer step on
/// scales.
pub fn project_scales(scales: &ScaleVector) -> ScaleVector {
    let mut out = scales.clone();
    out.project_in_place();
    out
}
