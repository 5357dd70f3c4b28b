//! Naive fine-tuning, Online EWC, Synaptic Intelligence and Memory Aware
//! Synapses behind one lifecycle:
//!
//! 1. [`Strategy::begin_task`] when a new task arrives,
//! 2. [`Strategy::penalty_and_grad`] and [`Strategy::observe_step`] on every
//!    optimizer step,
//! 3. [`Strategy::end_task`] at the task boundary, which refreshes the
//!    importance map and the anchor.
//!
//! All regularised strategies share the quadratic penalty
//! `lambda * sum_k omega_k (theta_k - anchor_k)^2`.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::StepRecord;
use crate::rng::stream_rng;
use crate::tensor::{Batch, ClassifierModel};

/// Per-parameter importance and the anchor it pulls towards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub omega: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(anchor: &[f64]) -> Self {
        Self {
            omega: vec![0.0; anchor.len()],
            anchor: anchor.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Quadratic penalty and its analytic gradient `2 lambda omega (theta - anchor)`.
pub fn penalty_and_grad(map: &ImportanceMap, params: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    same_len(map.len(), params.len(), "penalty")?;
    same_len(map.anchor.len(), params.len(), "penalty anchor")?;
    let mut penalty = 0.0;
    let grad = params
        .iter()
        .zip(&map.anchor)
        .zip(&map.omega)
        .map(|((p, a), o)| {
            let d = p - a;
            penalty += o * d * d;
            2.0 * lambda * o * d
        })
        .collect();
    Ok((lambda * penalty, grad))
}

/// Online EWC consolidation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub running_fisher: Vec<f64>,
    pub gamma: f64,
    pub n_fisher: usize,
}

impl EwcState {
    pub fn new(n_params: usize, gamma: f64, n_fisher: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("EWC gamma must be in (0, 1], got {gamma}")));
        }
        if n_fisher == 0 {
            return Err(Error::Config("n_fisher must be at least 1".into()));
        }
        Ok(Self {
            running_fisher: vec![0.0; n_params],
            gamma,
            n_fisher,
        })
    }
}

/// Indices for a Fisher subset: without replacement when the data is large
/// enough, otherwise with replacement.
fn fisher_indices(n_data: usize, n_fisher: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, "ewc-fisher");
    if n_fisher <= n_data {
        index::sample(&mut rng, n_data, n_fisher).into_vec()
    } else {
        (0..n_fisher).map(|_| rng.random_range(0..n_data)).collect()
    }
}

/// Diagonal empirical Fisher: mean of squared per-sample NLL gradients at
/// the observed labels, on a random subset of `n_fisher` samples.
pub fn ewc_estimate_fisher(model: &ClassifierModel, data: &Batch, n_fisher: usize, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("Fisher estimation data"));
    }
    if n_fisher == 0 {
        return Err(Error::Config("n_fisher must be at least 1".into()));
    }
    let subset = data.subset(&fisher_indices(data.len(), n_fisher, seed));
    empirical_fisher(model, &subset)
}

/// Mean of squared per-sample gradients over the whole batch.
pub fn empirical_fisher(model: &ClassifierModel, data: &Batch) -> Result<Vec<f64>> {
    let grads = model.per_sample_grads(data)?;
    let n = grads.len() as f64;
    let mut fisher = vec![0.0; model.params().len()];
    for g in &grads {
        for (f, v) in fisher.iter_mut().zip(g.values()) {
            *f += v * v;
        }
    }
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

/// `F* <- gamma F* + F`, anchor to the current parameters, omega <- F*.
pub fn ewc_task_end(state: &mut EwcState, map: &mut ImportanceMap, new_fisher: &[f64], params: &[f64]) -> Result<()> {
    same_len(state.running_fisher.len(), new_fisher.len(), "EWC Fisher")?;
    same_len(map.len(), params.len(), "EWC params")?;
    if new_fisher.iter().any(|f| *f < 0.0 || !f.is_finite()) {
        return Err(Error::Numerical(
            "Fisher estimate must be finite and nonnegative".into(),
        ));
    }
    for (r, f) in state.running_fisher.iter_mut().zip(new_fisher) {
        *r = state.gamma * *r + f;
    }
    map.omega.copy_from_slice(&state.running_fisher);
    map.anchor.copy_from_slice(params);
    Ok(())
}

/// Path integral bookkeeping for the task in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiTaskState {
    pub w: Vec<f64>,
    pub theta_start: Vec<f64>,
    pub xi_damp: f64,
}

impl SiTaskState {
    pub fn new(params: &[f64], xi_damp: f64) -> Result<Self> {
        if !(xi_damp > 0.0) {
            return Err(Error::Config(format!("SI damping must be positive, got {xi_damp}")));
        }
        Ok(Self {
            w: vec![0.0; params.len()],
            theta_start: params.to_vec(),
            xi_damp,
        })
    }

    pub fn restart(&mut self, params: &[f64]) {
        self.w.iter_mut().for_each(|w| *w = 0.0);
        self.theta_start.copy_from_slice(params);
    }
}

/// `w <- w - g * delta`, with `g` the task-loss gradient of the step.
pub fn si_accumulate_step(state: &mut SiTaskState, step: &StepRecord) -> Result<()> {
    si_accumulate(state, &step.grad, &step.delta)
}

fn si_accumulate(state: &mut SiTaskState, grad: &[f64], delta: &[f64]) -> Result<()> {
    same_len(state.w.len(), grad.len(), "SI gradient")?;
    same_len(state.w.len(), delta.len(), "SI delta")?;
    for ((w, g), d) in state.w.iter_mut().zip(grad).zip(delta) {
        *w -= g * d;
    }
    Ok(())
}

/// Fold the task's path integral into omega, normalised by the squared
/// displacement plus damping. Negative integrals are clamped to zero.
pub fn si_task_end(state: &mut SiTaskState, map: &mut ImportanceMap, params: &[f64]) -> Result<()> {
    same_len(state.w.len(), params.len(), "SI params")?;
    same_len(map.len(), params.len(), "SI importance")?;
    for k in 0..params.len() {
        let delta = params[k] - state.theta_start[k];
        map.omega[k] += state.w[k].max(0.0) / (delta * delta + state.xi_damp);
    }
    map.anchor.copy_from_slice(params);
    state.restart(params);
    Ok(())
}

/// Mean absolute gradient of the squared output norm over the data.
pub fn mas_importance(model: &ClassifierModel, data: &Batch) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("MAS data"));
    }
    let grads = model.per_sample_output_norm_grads(data)?;
    let n = grads.len() as f64;
    let mut out = vec![0.0; model.params().len()];
    for g in &grads {
        for (o, v) in out.iter_mut().zip(g.values()) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn mas_task_end(model: &ClassifierModel, data: &Batch, map: &mut ImportanceMap) -> Result<()> {
    let params = model.params().values();
    same_len(map.len(), params.len(), "MAS importance")?;
    let inc = mas_importance(model, data)?;
    for (o, i) in map.omega.iter_mut().zip(&inc) {
        *o += i;
    }
    map.anchor.copy_from_slice(params);
    Ok(())
}

/// Naive fine-tuning has nothing to consolidate.
pub fn naive_task_end() {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Naive,
    Ewc,
    Si,
    Mas,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Naive,
        StrategyKind::Ewc,
        StrategyKind::Si,
        StrategyKind::Mas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Si => "si",
            StrategyKind::Mas => "mas",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(StrategyKind::Naive),
            "ewc" => Ok(StrategyKind::Ewc),
            "si" => Ok(StrategyKind::Si),
            "mas" => Ok(StrategyKind::Mas),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Hyperparameters shared by the strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub lambda: f64,
    pub gamma: f64,
    pub xi_damp: f64,
    pub n_fisher: usize,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            gamma: 0.9,
            xi_damp: 0.1,
            n_fisher: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Inner {
    Naive,
    Ewc(EwcState),
    Si(SiTaskState),
    Mas,
}

/// A strategy instance for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    kind: StrategyKind,
    lambda: f64,
    map: ImportanceMap,
    inner: Inner,
}

impl Strategy {
    pub fn new(kind: StrategyKind, params: StrategyParams, initial: &[f64]) -> Result<Self> {
        if !(params.lambda >= 0.0) || !params.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                params.lambda
            )));
        }
        let inner = match kind {
            StrategyKind::Naive => Inner::Naive,
            StrategyKind::Ewc => Inner::Ewc(EwcState::new(initial.len(), params.gamma, params.n_fisher)?),
            StrategyKind::Si => Inner::Si(SiTaskState::new(initial, params.xi_damp)?),
            StrategyKind::Mas => Inner::Mas,
        };
        Ok(Self {
            kind,
            lambda: params.lambda,
            map: ImportanceMap::new(initial),
            inner,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn importance(&self) -> &ImportanceMap {
        &self.map
    }

    /// SI's running path integral, if this is SI.
    pub fn path_integral(&self) -> Option<&[f64]> {
        match &self.inner {
            Inner::Si(s) => Some(&s.w),
            _ => None,
        }
    }

    pub fn ewc_state(&self) -> Option<&EwcState> {
        match &self.inner {
            Inner::Ewc(s) => Some(s),
            _ => None,
        }
    }

    /// Penalty value and gradient contribution; zero for naive.
    pub fn penalty_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.inner {
            Inner::Naive => {
                same_len(self.map.len(), params.len(), "penalty")?;
                Ok((0.0, vec![0.0; params.len()]))
            }
            _ => penalty_and_grad(&self.map, params, self.lambda),
        }
    }

    pub fn begin_task(&mut self, params: &[f64]) {
        if let Inner::Si(s) = &mut self.inner {
            s.restart(params);
        }
    }

    /// Record one optimizer step. `task_grad` excludes the penalty
    /// contribution; only SI uses it.
    pub fn observe_step(&mut self, task_grad: &[f64], step: &StepRecord) -> Result<()> {
        if let Inner::Si(s) = &mut self.inner {
            si_accumulate(s, task_grad, &step.delta)?;
        }
        Ok(())
    }

    /// Task-boundary consolidation. `seed` drives EWC's Fisher subset.
    pub fn end_task(&mut self, model: &ClassifierModel, train: &Batch, seed: u64) -> Result<()> {
        let params = model.params().values();
        match &mut self.inner {
            Inner::Naive => naive_task_end(),
            Inner::Ewc(state) => {
                let fisher = ewc_estimate_fisher(model, train, state.n_fisher, seed)?;
                ewc_task_end(state, &mut self.map, &fisher, params)?;
            }
            Inner::Si(state) => si_task_end(state, &mut self.map, params)?,
            Inner::Mas => mas_task_end(model, train, &mut self.map)?,
        }
        Ok(())
    }
}

/// Importance a task would receive on its own, estimated at the current
/// parameters before any training on it. EWC and SI use the empirical
/// Fisher (SI has no path yet), MAS its output-norm sensitivity, naive
/// ranks every parameter equally.
pub fn standalone_importance(
    kind: StrategyKind,
    model: &ClassifierModel,
    data: &Batch,
    n_fisher: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    match kind {
        StrategyKind::Naive => Ok(vec![1.0; model.params().len()]),
        StrategyKind::Ewc | StrategyKind::Si => ewc_estimate_fisher(model, data, n_fisher, seed),
        StrategyKind::Mas => mas_importance(model, data),
    }
}
