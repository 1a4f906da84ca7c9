//! AdamW with decoupled weight decay and a linear-warmup-then-constant
//! learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Optimizer state: moment buffers for exactly the parameters that have been
/// updated at least once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    pub fn n_tracked(&self) -> usize {
        self.state.len()
    }

    /// One update of `param` with gradient `grad`. `decay` selects whether
    /// weight decay applies to this parameter.
    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64, decay: bool) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{name}: {} weights but {} gradients", param.len(), grad.len()),
            ));
        }
        let c = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - c.beta1.powi(st.step as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step as i32);
        let wd = if decay { c.weight_decay } else { 0.0 };
        for i in 0..param.len() {
            let g = grad[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            param[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + wd * param[i]);
        }
        Ok(())
    }
}

/// `ceil(ratio · total_steps)`.
pub fn warmup_steps(ratio: f64, total_steps: usize) -> usize {
    (ratio * total_steps as f64).ceil() as usize
}

/// Learning rate at 0-based `step`: rises linearly from 0 to `peak` over
/// `warmup` steps, then stays at `peak`.
pub fn warmup_lr(peak: f64, step: usize, warmup: usize) -> f64 {
    if step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}
