//! First-order optimizers. Each step returns the gradient it consumed and the
//! parameter delta it applied, which is what SI integrates along the path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(g_t, theta_{t+1} - theta_t)` for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub grad: Vec<f64>,
    pub delta: Vec<f64>,
}

fn check(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            grad.len()
        )));
    }
    Ok(())
}

/// `params <- params - lr * grad`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<StepRecord> {
    check(params, grad)?;
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let delta: Vec<f64> = grad.iter().map(|g| -lr * g).collect();
    for (p, d) in params.iter_mut().zip(&delta) {
        *p += d;
    }
    Ok(StepRecord {
        grad: grad.to_vec(),
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments. `m` and `v` are the raw (uncorrected) moving averages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Result<Self> {
        let AdamConfig { lr, beta1, beta2, eps } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got {beta1}, {beta2}"
            )));
        }
        if !(lr > 0.0) || !(eps > 0.0) {
            return Err(Error::Config("Adam lr and eps must be positive".into()));
        }
        Ok(Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<StepRecord> {
    check(params, grad)?;
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "Adam state sized for {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut delta = vec![0.0; params.len()];
    for k in 0..params.len() {
        let g = grad[k];
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        delta[k] = -lr * m_hat / (v_hat.sqrt() + eps);
        params[k] += delta[k];
    }
    Ok(StepRecord {
        grad: grad.to_vec(),
        delta,
    })
}

/// Optimizer selection as it appears in run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr } => lr,
        }
    }
}

/// Runtime optimizer with per-kind state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self> {
        match config {
            OptimizerConfig::Sgd { lr } => {
                if !(lr > 0.0) {
                    return Err(Error::Config("SGD lr must be positive".into()));
                }
                Ok(Optimizer::Sgd { lr })
            }
            OptimizerConfig::Adam { lr } => Ok(Optimizer::Adam(AdamState::new(n_params, AdamConfig::with_lr(lr))?)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<StepRecord> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grad, *lr),
            Optimizer::Adam(state) => adam_step(params, grad, state),
        }
    }

    /// Forget moment estimates.
    pub fn reset(&mut self) {
        if let Optimizer::Adam(state) = self {
            state.reset();
        }
    }
}
