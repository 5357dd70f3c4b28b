//! Probes of how the importance estimates behave.
//!
//! * Fisher convergence: empirical Fisher on `n` samples against the model
//!   Fisher (labels drawn from the model's own predictive distribution), and
//!   the finite-difference NLL Hessian against the model Fisher.
//! * Batch-size sweeps: gradient-noise variance against SI's path integral
//!   and MAS importance, at a fixed optimizer-step budget.
//! * Gradient interference between consecutive tasks, restricted to the
//!   parameters both tasks rank as important.
//! * Importance accumulation: per-group importance after a task against how
//!   far that group moves during the next one.
//!
//! Every probe produces a [`ProbeReport`]: rows of named metrics plus an
//! optional headline statistic, written as `probe_<name>.csv` and
//! `probe_<name>.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::rng::stream_rng;
use crate::runner::{par_map, ReportWriter, RunArtifacts, RunConfig};
use crate::stats::{cosine, mean_std, pearson_or_degenerate, relative_l2, StatResult};
use crate::strategies::{empirical_fisher, mas_importance, si_accumulate_step, SiTaskState, StrategyKind};
use crate::stream::generate_stream;
use crate::tensor::{Batch, ClassifierModel, Matrix};

/// One probe row: a key and named metric values in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub key: String,
    pub values: Vec<(String, f64)>,
}

impl ProbeRow {
    pub fn new(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            values: Vec::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.push((name.to_string(), value));
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub rows: Vec<ProbeRow>,
    pub stat: Option<StatResult>,
    pub extra: BTreeMap<String, StatResult>,
}

#[derive(Serialize)]
struct StatJson<'a> {
    #[serde(flatten)]
    stat: Option<&'a StatResult>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    extra: &'a BTreeMap<String, StatResult>,
}

impl ProbeReport {
    pub fn new(name: &str, rows: Vec<ProbeRow>) -> Self {
        Self {
            name: name.to_string(),
            rows,
            stat: None,
            extra: BTreeMap::new(),
        }
    }

    /// Columns are `key` then every metric name in first-seen order; absent
    /// metrics are left empty.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<&str> = Vec::new();
        for row in &self.rows {
            for (name, _) in &row.values {
                if !cols.contains(&name.as_str()) {
                    cols.push(name);
                }
            }
        }
        let mut out = String::from("key");
        for c in &cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.key);
            for c in &cols {
                out.push(',');
                if let Some(v) = row.get(c) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn stats_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&StatJson {
            stat: self.stat.as_ref(),
            extra: &self.extra,
        })?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, w: &mut ReportWriter) -> Result<()> {
        w.write(&format!("probe_{}.csv", self.name), &self.to_csv())?;
        w.write(&format!("probe_{}.json", self.name), &self.stats_json()?)
    }
}

/// Model Fisher diagonal: `mean_i sum_y p(y|x_i) g(x_i, y)^2`.
pub fn true_fisher_diag(model: &ClassifierModel, data: &Batch) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("Fisher data"));
    }
    let mut out = vec![0.0; model.params().len()];
    for i in 0..data.len() {
        let (probs, grads) = model.all_label_grads(data.inputs().row(i));
        for (p, g) in probs.iter().zip(&grads) {
            for (o, v) in out.iter_mut().zip(g.values()) {
                *o += p * v * v;
            }
        }
    }
    let n = data.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Per-coordinate mean and population variance of the per-sample NLL
/// gradients.
pub fn gradient_moments(model: &ClassifierModel, data: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
    let grads = model.per_sample_grads(data)?;
    let n = grads.len() as f64;
    let p = model.params().len();
    let mut mean = vec![0.0; p];
    for g in &grads {
        for (m, v) in mean.iter_mut().zip(g.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for g in &grads {
        for ((s, v), m) in var.iter_mut().zip(g.values()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((mean, var))
}

/// Replace every label with a draw from the model's predictive distribution.
pub fn resample_labels(model: &ClassifierModel, data: &Batch, seed: u64) -> Result<Batch> {
    let probs = model.predict_proba(data)?;
    let mut rng = stream_rng(seed, "resample-labels");
    let labels = probs
        .iter_rows()
        .map(|p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        })
        .collect();
    data.relabel(labels)
}

/// Move exactly `round(frac * n)` labels, chosen without replacement, to a
/// different class.
pub fn flip_labels(data: &Batch, classes: usize, frac: f64, seed: u64) -> Result<Batch> {
    if !(0.0..=1.0).contains(&frac) || classes < 2 {
        return Err(Error::Config(
            "flip fraction must be in [0, 1] with >= 2 classes".into(),
        ));
    }
    let mut rng = stream_rng(seed, "flip-labels");
    let n_flip = (frac * data.len() as f64).round() as usize;
    let mut labels = data.labels().to_vec();
    for i in index::sample(&mut rng, data.len(), n_flip) {
        let other = rng.random_range(0..classes - 1);
        labels[i] = if other >= labels[i] { other + 1 } else { other };
    }
    data.relabel(labels)
}

/// Empirical Fisher on random subsets of each size against the model Fisher
/// of the full data, averaged over `draws` subsets. The headline statistic
/// correlates `log10 n` with the mean cosine.
pub fn probe_fisher_convergence(
    model: &ClassifierModel,
    data: &Batch,
    sizes: &[usize],
    draws: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > data.len()) {
        return Err(Error::Config(format!("sample size {n} outside 1..={}", data.len())));
    }
    if draws == 0 {
        return Err(Error::Config("need at least one draw".into()));
    }
    let reference = true_fisher_diag(model, data)?;
    let jobs: Vec<(usize, usize)> = sizes.iter().flat_map(|&n| (0..draws).map(move |d| (n, d))).collect();
    let scores = par_map(&jobs, |&(n, d)| -> Result<(f64, f64)> {
        let mut rng = stream_rng(seed, &format!("fisher-probe/{n}/{d}"));
        let subset = data.subset(&index::sample(&mut rng, data.len(), n).into_vec());
        let f = empirical_fisher(model, &subset)?;
        Ok((cosine(&f, &reference).unwrap_or(0.0), relative_l2(&f, &reference)))
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, &n) in sizes.iter().enumerate() {
        let chunk = &scores[i * draws..(i + 1) * draws];
        let cos: Vec<f64> = chunk.iter().map(|s| s.0).collect();
        let rel: Vec<f64> = chunk.iter().map(|s| s.1).collect();
        let (cm, cs) = mean_std(&cos);
        let (rm, rs) = mean_std(&rel);
        xs.push((n as f64).log10());
        ys.push(cm);
        rows.push(
            ProbeRow::new(format!("n={n}"))
                .with("n", n as f64)
                .with("cosine_mean", cm)
                .with("cosine_std", cs)
                .with("rel_l2_mean", rm)
                .with("rel_l2_std", rs),
        );
    }
    let mut report = ProbeReport::new("fisher", rows);
    report.stat = Some(pearson_or_degenerate(&xs, &ys));
    Ok(report)
}

/// Central finite differences of `grad` along each coordinate.
pub fn fd_hessian_diag(mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>, theta: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        probe[k] = theta[k] + eps;
        let up = grad(&probe)?[k];
        probe[k] = theta[k] - eps;
        let down = grad(&probe)?[k];
        probe[k] = theta[k];
        let h = (up - down) / (2.0 * eps);
        if !h.is_finite() {
            return Err(Error::Numerical(format!("non-finite Hessian entry {k}")));
        }
        out.push(h);
    }
    Ok(out)
}

pub fn nll_hessian_diag(model: &ClassifierModel, data: &Batch, eps: f64) -> Result<Vec<f64>> {
    let mut m = model.clone();
    fd_hessian_diag(
        |theta| {
            m.set_values(theta)?;
            Ok(m.nll_loss_and_grad(data)?.1.into_values())
        },
        model.params().values(),
        eps,
    )
}

/// Finite-difference Hessian diagonal (step 1e-4) of the mean NLL against
/// the model Fisher on the same inputs.
pub fn probe_hessian_gap(model: &ClassifierModel, data: &Batch) -> Result<ProbeRow> {
    if model.params().len() > 2000 {
        return Err(Error::Config("Hessian probe limited to 2000 parameters".into()));
    }
    let h = nll_hessian_diag(model, data, 1e-4)?;
    let f = true_fisher_diag(model, data)?;
    Ok(ProbeRow::new("hessian")
        .with("n", data.len() as f64)
        .with("cosine", cosine(&h, &f).unwrap_or(0.0))
        .with("rel_l2", relative_l2(&h, &f)))
}

/// Hessian gap with model-drawn labels and again with `flip` of them moved
/// to a wrong class, at the same parameters.
pub fn hessian_gap_contrast(model: &ClassifierModel, inputs: &Batch, flip: f64, seed: u64) -> Result<ProbeReport> {
    let clean = resample_labels(model, inputs, seed)?;
    let noisy = flip_labels(&clean, model.shape().classes(), flip, seed)?;
    let mut a = probe_hessian_gap(model, &clean)?;
    a.key = "model_labels".into();
    let mut b = probe_hessian_gap(model, &noisy)?.with("flip", flip);
    b.key = "flipped_labels".into();
    Ok(ProbeReport::new("hessian", vec![a.with("flip", 0.0), b]))
}

/// Outcome of training one task at one batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRun {
    pub batch: usize,
    pub seed: u64,
    /// Variance of the mini-batch gradient around the full-data gradient,
    /// averaged over coordinates and over evenly spaced steps.
    pub grad_var: f64,
    pub mean_abs_w: f64,
    pub mas_omega: f64,
    /// Mean bias-corrected `sqrt(v)` at the end, for Adam.
    pub adam_sqrt_v: Option<f64>,
}

fn batch_run(config: &RunConfig, train: &Batch, batch: usize, seed: u64) -> Result<BatchRun> {
    let mut model = ClassifierModel::new(config.model_shape()?, seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, model.params().len())?;
    let mut si = SiTaskState::new(model.params().values(), config.xi_damp)?;
    let n = train.len();
    let b = batch.min(n);
    // Without-replacement sampling shrinks the per-sample variance by this.
    let factor = if n > 1 {
        (n - b) as f64 / (b as f64 * (n - 1) as f64)
    } else {
        0.0
    };
    let mut order: Vec<usize> = Vec::new();
    let (mut cursor, mut epoch) = (0, 0);
    let steps = match config.probe.epochs {
        Some(e) => e * (n / b).max(1),
        None => config.probe.steps,
    };
    let stride = steps.div_ceil(config.probe.variance_points.max(1)).max(1);
    let (mut var_sum, mut var_count) = (0.0, 0usize);
    for t in 0..steps {
        if order.is_empty() || cursor + b > n {
            order = (0..n).collect();
            order.shuffle(&mut stream_rng(seed, &format!("probe-batches/epoch{epoch}")));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + b];
        cursor += b;
        if t % stride == 0 {
            var_count += 1;
        }
        if factor > 0.0 && t % stride == 0 {
            let second = empirical_fisher(&model, train)?;
            let mean = model.nll_loss_and_grad(train)?.1;
            let per_sample: f64 = second
                .iter()
                .zip(mean.values())
                .map(|(s, m)| (s - m * m).max(0.0))
                .sum::<f64>()
                / second.len() as f64;
            var_sum += factor * per_sample;
        }
        let (loss, grad) = model.nll_loss_and_grad(&train.subset(idx))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at batch size {b}")));
        }
        let step = optimizer.step(model.params_mut().values_mut(), grad.values())?;
        si_accumulate_step(&mut si, &step)?;
    }
    let p = si.w.len() as f64;
    let omega = mas_importance(&model, train)?;
    let adam_sqrt_v = match &optimizer {
        Optimizer::Adam(state) if state.t > 0 => {
            let c2 = 1.0 - state.config.beta2.powi(state.t as i32);
            Some(state.v.iter().map(|v| (v / c2).sqrt()).sum::<f64>() / p)
        }
        _ => None,
    };
    Ok(BatchRun {
        batch,
        seed,
        grad_var: var_sum / var_count.max(1) as f64,
        mean_abs_w: si.w.iter().map(|w| w.abs()).sum::<f64>() / p,
        mas_omega: omega.iter().sum::<f64>() / p,
        adam_sqrt_v,
    })
}

/// Train the first subject of the configured stream once per
/// `(seed, batch size)`, for `config.probe.epochs` epochs when set and
/// `config.probe.steps` optimizer steps otherwise,
/// tracking SI's path integral and, at the end, MAS importance.
pub fn batch_size_runs(config: &RunConfig, batch_sizes: &[usize], seeds: &[u64]) -> Result<Vec<BatchRun>> {
    config.validate()?;
    if batch_sizes.len() < 3 {
        return Err(Error::Config("batch-size probes need at least 3 batch sizes".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("batch-size probes need at least one seed".into()));
    }
    let stream = generate_stream(&config.stream)?;
    let train = &stream.stream[0].train;
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| batch_sizes.iter().map(move |&b| (s, b)))
        .collect();
    par_map(&jobs, |&(seed, b)| batch_run(config, train, b, seed))
        .into_iter()
        .collect()
}

fn batch_rows(runs: &[BatchRun]) -> Vec<ProbeRow> {
    runs.iter()
        .map(|r| {
            let row = ProbeRow::new(format!("batch={}/seed={}", r.batch, r.seed))
                .with("batch", r.batch as f64)
                .with("seed", r.seed as f64)
                .with("grad_var", r.grad_var)
                .with("mean_abs_w", r.mean_abs_w)
                .with("mas_omega", r.mas_omega);
            match r.adam_sqrt_v {
                Some(v) => row.with("adam_sqrt_v", v),
                None => row,
            }
        })
        .collect()
}

fn column(runs: &[BatchRun], f: impl Fn(&BatchRun) -> f64) -> Vec<f64> {
    runs.iter().map(f).collect()
}

/// Headline: Pearson of gradient variance against mean `|w|`. Extras: log2
/// batch size against `|w|`, and `sqrt(v)` against `|w|` under Adam.
pub fn si_batch_report(runs: &[BatchRun]) -> ProbeReport {
    let var = column(runs, |r| r.grad_var);
    let w = column(runs, |r| r.mean_abs_w);
    let log_b = column(runs, |r| (r.batch as f64).log2());
    let mut report = ProbeReport::new("si_batch", batch_rows(runs));
    report.stat = Some(pearson_or_degenerate(&var, &w));
    report
        .extra
        .insert("log2_batch_vs_abs_w".into(), pearson_or_degenerate(&log_b, &w));
    if runs.iter().all(|r| r.adam_sqrt_v.is_some()) {
        let v = column(runs, |r| r.adam_sqrt_v.unwrap_or(0.0));
        report
            .extra
            .insert("adam_sqrt_v_vs_abs_w".into(), pearson_or_degenerate(&v, &w));
    }
    report
}

/// Headline: Pearson of log2 batch size against mean MAS importance.
/// Extra: gradient variance against importance.
pub fn mas_batch_report(runs: &[BatchRun]) -> ProbeReport {
    let omega = column(runs, |r| r.mas_omega);
    let log_b = column(runs, |r| (r.batch as f64).log2());
    let var = column(runs, |r| r.grad_var);
    let mut report = ProbeReport::new("mas_batch", batch_rows(runs));
    report.stat = Some(pearson_or_degenerate(&log_b, &omega));
    report
        .extra
        .insert("grad_var_vs_omega".into(), pearson_or_degenerate(&var, &omega));
    report
}

pub fn probe_si_batch_inflation(config: &RunConfig, batch_sizes: &[usize], seeds: &[u64]) -> Result<ProbeReport> {
    Ok(si_batch_report(&batch_size_runs(config, batch_sizes, seeds)?))
}

pub fn probe_mas_batch_robustness(config: &RunConfig, batch_sizes: &[usize], seeds: &[u64]) -> Result<ProbeReport> {
    Ok(mas_batch_report(&batch_size_runs(config, batch_sizes, seeds)?))
}

/// Indicator of the `ceil(frac * P)` largest entries, ties to lower index.
pub fn top_fraction(importance: &[f64], frac: f64) -> Vec<bool> {
    let p = importance.len();
    let k = ((frac * p as f64).ceil() as usize).min(p);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut mask = vec![false; p];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Size of the shared top set and the cosine of the two gradients on it;
/// `None` for the cosine when the set is empty or a restricted gradient is
/// zero. Without importances every parameter is shared.
pub fn pair_interference(
    grad_a: &[f64],
    grad_b: &[f64],
    importance: Option<(&[f64], &[f64])>,
    frac: f64,
) -> (usize, Option<f64>) {
    let mask: Vec<bool> = match importance {
        None => vec![true; grad_a.len()],
        Some((ia, ib)) => top_fraction(ia, frac)
            .into_iter()
            .zip(top_fraction(ib, frac))
            .map(|(a, b)| a && b)
            .collect(),
    };
    let pick = |g: &[f64]| -> Vec<f64> { g.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect() };
    let (a, b) = (pick(grad_a), pick(grad_b));
    (a.len(), if a.is_empty() { None } else { cosine(&a, &b) })
}

/// For each consecutive task pair and fraction: the overlap of the earlier
/// task's cumulative importance and the later task's standalone importance,
/// and the cosine of their task-start gradients on that overlap.
pub fn probe_gradient_interference(artifacts: &RunArtifacts, fracs: &[f64]) -> Result<ProbeReport> {
    let snaps = &artifacts.snapshots;
    if snaps.len() < 2 {
        return Err(Error::Degenerate("interference needs at least two tasks".into()));
    }
    let naive = artifacts.unit.strategy == StrategyKind::Naive;
    let mut rows = Vec::new();
    for tau in 0..snaps.len() - 1 {
        let (a, b) = (&snaps[tau], &snaps[tau + 1]);
        for &f in fracs {
            let imp = (!naive).then_some((a.omega.as_slice(), b.standalone.as_slice()));
            let (size, cos) = pair_interference(&a.start_grad, &b.start_grad, imp, f);
            let row = ProbeRow::new(format!("{tau}->{}@{f}", tau + 1))
                .with("task", tau as f64)
                .with("frac", f)
                .with("shared", size as f64);
            rows.push(match cos {
                Some(c) => row.with("cosine", c).with("empty", 0.0),
                None => row.with("empty", 1.0),
            });
        }
    }
    Ok(ProbeReport::new("interference", rows))
}

/// Per group and task: mean importance after the task and the L2 norm of
/// the group's parameter change during it. The headline Pearson pairs the
/// importance after task `t` with the change during task `t + 1`.
pub fn probe_importance_accumulation(artifacts: &RunArtifacts) -> Result<ProbeReport> {
    let snaps = &artifacts.snapshots;
    let mut rows = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for g in &artifacts.groups {
        let range = g.start..g.start + g.len;
        let delta = |tau: usize| -> f64 {
            let before = if tau == 0 {
                &artifacts.initial_params
            } else {
                &snaps[tau - 1].theta
            };
            let after = &snaps[tau].theta;
            range
                .clone()
                .map(|k| (after[k] - before[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for (tau, snap) in snaps.iter().enumerate() {
            let mean_omega = snap.omega[range.clone()].iter().sum::<f64>() / g.len as f64;
            let mut row = ProbeRow::new(format!("{}@{tau}", g.name))
                .with("task", tau as f64)
                .with("mean_omega", mean_omega)
                .with("l2_delta", delta(tau));
            if tau + 1 < snaps.len() {
                let next = delta(tau + 1);
                row = row.with("next_l2_delta", next);
                xs.push(mean_omega);
                ys.push(next);
            }
            rows.push(row);
        }
    }
    let mut report = ProbeReport::new("omega", rows);
    report.stat = Some(pearson_or_degenerate(&xs, &ys));
    Ok(report)
}

/// Whether every coordinate of the importance is nondecreasing across tasks.
pub fn omega_nondecreasing(artifacts: &RunArtifacts) -> bool {
    artifacts
        .snapshots
        .windows(2)
        .all(|w| w[0].omega.iter().zip(&w[1].omega).all(|(a, b)| b >= a))
}

/// Inputs of every training subject of the configured stream, pooled.
pub fn pooled_inputs(config: &RunConfig) -> Result<Batch> {
    let stream = generate_stream(&config.stream)?;
    let parts: Vec<&Batch> = stream.stream.iter().map(|t| &t.train).collect();
    Batch::concat(&parts)
}

/// A batch with the given rows and all-zero labels, for label resampling.
pub fn unlabeled(inputs: Matrix) -> Result<Batch> {
    let n = inputs.rows();
    Batch::new(inputs, vec![0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, ModelShape};
    use approx::assert_abs_diff_eq;

    fn logistic(w: f64, b: f64) -> ClassifierModel {
        // Logits [w x + b, 0]: K = 2 with a zeroed second output row.
        let shape = ModelShape::new(vec![1, 2], Activation::Elu).unwrap();
        ClassifierModel::from_values(shape, vec![w, 0.0, b, 0.0]).unwrap()
    }

    fn toy_batch(seed: u64, n: usize, d: usize) -> Batch {
        let mut rng = stream_rng(seed, "toy");
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Batch::new(Matrix::new(n, d, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn true_fisher_one_sample_logistic_by_hand() {
        let m = logistic(0.7, -0.2);
        let x = 1.5;
        let data = Batch::new(Matrix::new(1, 1, vec![x]).unwrap(), vec![0]).unwrap();
        let f = true_fisher_diag(&m, &data).unwrap();
        let z: f64 = 0.7 * x - 0.2;
        let p0 = 1.0 / (1.0 + (-z).exp());
        let p1 = 1.0 - p0;
        // dNLL/dz0 for label 0 is p0 - 1 = -p1, for label 1 it is p0.
        let e_sq = p0 * p1 * p1 + p1 * p0 * p0;
        assert_abs_diff_eq!(f[0], e_sq * x * x, epsilon = 1e-14);
        assert_abs_diff_eq!(f[2], e_sq, epsilon = 1e-14);
        // Second logit row: dNLL/dz1 is p1 - 1 for label 1 and p1 for label 0.
        assert_abs_diff_eq!(f[1], (p0 * p1 * p1 + p1 * p0 * p0) * x * x, epsilon = 1e-14);
    }

    #[test]
    fn confident_model_fisher_matches_empirical() {
        let m = logistic(60.0, 0.0);
        let rows: Vec<Vec<f64>> = [1.0, 2.0, -1.0, -3.0].iter().map(|&x| vec![x]).collect();
        let labels = vec![0, 0, 1, 1];
        let data = Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let t = true_fisher_diag(&m, &data).unwrap();
        let e = empirical_fisher(&m, &data).unwrap();
        for (a, b) in t.iter().zip(&e) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_model_fisher_against_independent_enumeration() {
        let shape = ModelShape::new(vec![3, 4, 3], Activation::Tanh).unwrap();
        let m = ClassifierModel::zeros(shape).unwrap();
        let data = toy_batch(1, 5, 3);
        let t = true_fisher_diag(&m, &data).unwrap();
        // Uniform predictions: average the label gradients with weight 1/K.
        let mut oracle = vec![0.0; m.params().len()];
        for i in 0..data.len() {
            for y in 0..3 {
                let g = m.label_grad(data.inputs().row(i), y);
                for (o, v) in oracle.iter_mut().zip(g.values()) {
                    *o += v * v / 3.0 / data.len() as f64;
                }
            }
        }
        for (a, b) in t.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn empirical_fisher_is_variance_plus_squared_mean() {
        let m = ClassifierModel::new(ModelShape::mlp(4, 5, 3), 3).unwrap();
        let data = toy_batch(2, 23, 4);
        let f = empirical_fisher(&m, &data).unwrap();
        let (mean, var) = gradient_moments(&m, &data).unwrap();
        for k in 0..f.len() {
            assert!((f[k] - (var[k] + mean[k] * mean[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_hessian_of_quadratic_toy() {
        // f = 1.5 a^2 + a b - 2 b^2 + 0.25 c^4 at (a, b, c)
        let grad = |t: &[f64]| Ok(vec![3.0 * t[0] + t[1], t[0] - 4.0 * t[1], t[2].powi(3)]);
        let h = fd_hessian_diag(grad, &[0.3, -1.2, 0.8], 1e-4).unwrap();
        assert_abs_diff_eq!(h[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[1], -4.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[2], 3.0 * 0.64, epsilon = 1e-6);
    }

    #[test]
    fn fd_hessian_rejects_non_finite() {
        let grad = |t: &[f64]| Ok(vec![if t[0] > 0.0 { f64::NAN } else { 0.0 }]);
        assert!(matches!(fd_hessian_diag(grad, &[0.0], 1e-4), Err(Error::Numerical(_))));
    }

    #[test]
    fn flips_exact_fraction() {
        let data = toy_batch(3, 50, 2);
        let flipped = flip_labels(&data, 3, 0.4, 9).unwrap();
        let changed = data
            .labels()
            .iter()
            .zip(flipped.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 20);
    }

    #[test]
    fn top_fraction_ties_go_to_lower_index() {
        let mask = top_fraction(&[1.0, 3.0, 3.0, 0.5], 0.5);
        assert_eq!(mask, [false, true, true, false]);
        let mask = top_fraction(&[2.0, 2.0, 2.0, 2.0], 0.25);
        assert_eq!(mask, [true, false, false, false]);
        assert!(top_fraction(&[1.0; 7], 1.0).iter().all(|&m| m));
    }

    #[test]
    fn interference_identity_and_antagonism() {
        let g = [0.5, -1.0, 2.0, 0.1];
        let imp = [0.3, 0.9, 0.2, 0.7];
        for f in [0.05, 0.2, 1.0] {
            let (_, c) = pair_interference(&g, &g, Some((&imp, &imp)), f);
            assert_abs_diff_eq!(c.unwrap(), 1.0, epsilon = 1e-12);
        }
        // Loss (theta - 1)^2 vs (theta + 1)^2 at theta = 0.
        let (n, c) = pair_interference(&[-2.0], &[2.0], None, 1.0);
        assert_eq!(n, 1);
        assert_abs_diff_eq!(c.unwrap(), -1.0, epsilon = 1e-15);
        let (n, _) = pair_interference(&g, &g, None, 0.05);
        assert_eq!(n, g.len());
    }

    #[test]
    fn disjoint_top_sets_are_empty() {
        let (n, c) = pair_interference(&[1.0, 1.0], &[1.0, 1.0], Some((&[1.0, 0.0], &[0.0, 1.0])), 0.5);
        assert_eq!(n, 0);
        assert_eq!(c, None);
    }

    #[test]
    fn report_csv_has_stable_columns() {
        let rows = vec![
            ProbeRow::new("a").with("x", 1.0).with("y", 2.5),
            ProbeRow::new("b").with("y", -1.0).with("z", 0.0),
        ];
        let r = ProbeReport::new("t", rows);
        assert_eq!(r.to_csv(), "key,x,y,z\na,1,2.5,\nb,,-1,0\n");
    }

    #[test]
    fn report_json_flattens_headline() {
        let mut r = ProbeReport::new("t", vec![]);
        r.stat = Some(crate::stats::pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap());
        let v: serde_json::Value = serde_json::from_str(&r.stats_json().unwrap()).unwrap();
        assert_eq!(v["kind"], "pearson");
        assert!(v["p_value"].is_number());
        assert!(v.get("extra").is_none());
    }

    #[test]
    fn perfectly_linear_batch_points_give_unit_correlation() {
        let runs: Vec<BatchRun> = (1..=4)
            .map(|i| BatchRun {
                batch: 1 << i,
                seed: 0,
                grad_var: i as f64,
                mean_abs_w: 3.0 * i as f64 + 1.0,
                mas_omega: 2.0,
                adam_sqrt_v: None,
            })
            .collect();
        let si = si_batch_report(&runs);
        assert_abs_diff_eq!(si.stat.unwrap().statistic, 1.0, epsilon = 1e-12);
        let mas = mas_batch_report(&runs);
        let stat = mas.stat.unwrap();
        assert!(stat.degenerate);
        assert_eq!(stat.p_value, 1.0);
    }
}
