//! Run configuration, the subject-incremental training loop, lambda sweeps,
//! subject-order shuffle grids and the files written for each.
//!
//! A run trains one model over the subjects in order. For every subject it
//! resets the optimizer, trains for a fixed number of epochs on the task loss
//! plus the strategy penalty, calls the strategy's task-end hook and then
//! evaluates on the test split of every subject, giving one row of the
//! accuracy matrix. Randomness is keyed by `(seed, purpose)` so the stream,
//! initialisation, mini-batch order and Fisher subsets never share state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, ConfusionCounts};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::stats::{mean_std, t_test_one_sample_greater, StatKind, StatResult};
use crate::strategies::{standalone_importance, Strategy, StrategyKind, StrategyParams};
use crate::stream::{generate_stream, shuffle_stream, StreamSpec, SubjectTask, TaskStream};
use crate::tensor::{Activation, Batch, ClassifierModel, ModelShape, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Elu,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self, input: usize, classes: usize) -> Result<ModelShape> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(classes);
        ModelShape::new(sizes, self.activation)
    }
}

/// Settings read only by the diagnostic probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub batch_sizes: Vec<usize>,
    /// Epochs per batch-size run. When absent every batch size gets the
    /// same number of optimizer steps instead.
    pub epochs: Option<usize>,
    pub steps: usize,
    /// Steps, evenly spaced, at which the gradient variance is measured.
    pub variance_points: usize,
    pub fisher_sizes: Vec<usize>,
    pub fisher_draws: usize,
    pub topk_fracs: Vec<f64>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 4, 16, 64],
            epochs: None,
            steps: 300,
            variance_points: 50,
            fisher_sizes: vec![1, 10, 100, 500],
            fisher_draws: 5,
            topk_fracs: vec![0.05, 0.2, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stream: StreamSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub gamma: f64,
    pub xi_damp: f64,
    pub n_fisher: usize,
    pub seeds: Vec<u64>,
    pub shuffles: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Per-strategy lambda for multi-strategy commands; `lambda` otherwise.
    pub lambdas: BTreeMap<StrategyKind, f64>,
    pub probe: ProbeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = StrategyParams::default();
        Self {
            stream: StreamSpec::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::Adam { lr: 1e-3 },
            epochs: 30,
            batch_size: 32,
            strategy: StrategyKind::Naive,
            lambda: p.lambda,
            gamma: p.gamma,
            xi_damp: p.xi_damp,
            n_fisher: p.n_fisher,
            seeds: vec![0],
            shuffles: 1,
            output_dir: None,
            lambdas: BTreeMap::new(),
            probe: ProbeSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.stream.validate()?;
        self.model.shape(self.stream.dim, self.stream.classes)?;
        if !(self.optimizer.lr() > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.shuffles == 0 {
            return bad("shuffles must be >= 1");
        }
        if self.n_fisher == 0 {
            return bad("n_fisher must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.xi_damp > 0.0) {
            return bad("xi_damp must be positive");
        }
        for &l in std::iter::once(&self.lambda).chain(self.lambdas.values()) {
            if !(l >= 0.0) || !l.is_finite() {
                return bad("lambda must be finite and >= 0");
            }
        }
        if self.probe.batch_sizes.contains(&0) || self.probe.fisher_sizes.contains(&0) {
            return bad("probe sizes must be >= 1");
        }
        if self.probe.epochs == Some(0) || (self.probe.epochs.is_none() && self.probe.steps == 0) {
            return bad("probe epochs or steps must be >= 1");
        }
        if self.probe.fisher_draws == 0 || self.probe.variance_points == 0 {
            return bad("probe fisher_draws and variance_points must be >= 1");
        }
        if self.probe.topk_fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("topk fractions must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn lambda_for(&self, kind: StrategyKind) -> f64 {
        match kind {
            StrategyKind::Naive => 0.0,
            _ => self.lambdas.get(&kind).copied().unwrap_or(self.lambda),
        }
    }

    pub fn strategy_params(&self, lambda: f64) -> StrategyParams {
        StrategyParams {
            lambda,
            gamma: self.gamma,
            xi_damp: self.xi_damp,
            n_fisher: self.n_fisher,
        }
    }

    pub fn model_shape(&self) -> Result<ModelShape> {
        self.model.shape(self.stream.dim, self.stream.classes)
    }
}

/// One `(strategy, lambda, seed)` training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunUnit {
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub seed: u64,
}

/// State recorded after each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub subject: usize,
    /// Cumulative importance after the task-end hook.
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    /// Mean task-loss gradient at the parameters the task inherits.
    pub start_grad: Vec<f64>,
    /// Importance of this task alone, estimated at the inherited parameters.
    pub standalone: Vec<f64>,
    /// SI path integral of this task before consolidation.
    pub path_integral: Option<Vec<f64>>,
    pub train_f1: f64,
    /// Norm of task-loss plus penalty gradient on the full training split
    /// at the end of training.
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub unit: RunUnit,
    /// Subject ids in training order.
    pub subjects: Vec<usize>,
    pub accuracy: AccuracyMatrix,
    pub initial_params: Vec<f64>,
    pub groups: Vec<ParamGroup>,
    pub snapshots: Vec<TaskSnapshot>,
    /// Macro F1 on the pooled held-out subjects, if there are any.
    pub unseen_f1: Option<f64>,
    /// Seconds per task. Not part of the deterministic output.
    pub wall_clock: Vec<f64>,
}

impl RunArtifacts {
    pub fn without_timing(mut self) -> Self {
        self.wall_clock.clear();
        self
    }

    pub fn train_f1(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.train_f1).collect()
    }

    pub fn summary(&self) -> RunMetrics {
        let m = &self.accuracy;
        RunMetrics {
            strategy: self.unit.strategy,
            lambda: self.unit.lambda,
            seed: self.unit.seed,
            mean_acc: m.mean_acc().ok(),
            final_acc: m.final_acc().ok(),
            bwt: m.bwt().ok(),
            fwt: m.fwt().ok(),
            unseen_f1: self.unseen_f1,
            train_f1: self.train_f1(),
        }
    }
}

/// Scalar outcome of one run, as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub seed: u64,
    pub mean_acc: Option<f64>,
    pub final_acc: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub unseen_f1: Option<f64>,
    pub train_f1: Vec<f64>,
}

pub fn macro_f1_of(model: &ClassifierModel, data: &Batch) -> Result<f64> {
    let pred = model.predict(data)?;
    ConfusionCounts::from_predictions(model.shape().classes(), data.labels(), &pred)?.macro_f1()
}

/// Wall-clock timer; reads zero on wasm32, which has no clock in std.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Train over `tasks` in the given order and evaluate the holdout at the end.
pub fn run_on_tasks(
    config: &RunConfig,
    tasks: &[SubjectTask],
    holdout: &[SubjectTask],
    unit: RunUnit,
) -> Result<RunArtifacts> {
    if tasks.is_empty() {
        return Err(Error::Empty("task stream"));
    }
    let RunUnit {
        strategy: kind,
        lambda,
        seed,
    } = unit;
    let mut model = ClassifierModel::new(config.model_shape()?, seed)?;
    let initial = model.params().values().to_vec();
    let n_params = initial.len();
    let mut strategy = Strategy::new(kind, config.strategy_params(lambda), &initial)?;
    let mut optimizer = Optimizer::new(config.optimizer, n_params)?;
    let penalised = kind != StrategyKind::Naive && lambda > 0.0;

    let baseline = tasks
        .iter()
        .map(|t| model.accuracy(&t.test))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(tasks.len());
    let mut snapshots = Vec::with_capacity(tasks.len());
    let mut wall_clock = Vec::with_capacity(tasks.len());

    for (tau, task) in tasks.iter().enumerate() {
        let started = Stopwatch::start();
        let train = &task.train;
        strategy.begin_task(model.params().values());
        optimizer.reset();
        let start_grad = model.nll_loss_and_grad(train)?.1.into_values();
        let standalone = standalone_importance(
            kind,
            &model,
            train,
            config.n_fisher,
            derive_seed(seed, &format!("standalone/task{tau}")),
        )?;

        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..config.epochs {
            order.sort_unstable();
            order.shuffle(&mut stream_rng(seed, &format!("shuffle/task{tau}/epoch{epoch}")));
            for chunk in order.chunks(config.batch_size) {
                let batch = train.subset(chunk);
                let (loss, grad) = model.nll_loss_and_grad(&batch)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss on task {tau} (subject {}), epoch {epoch}",
                        task.id
                    )));
                }
                let step = if penalised {
                    let (_, mut total) = strategy.penalty_and_grad(model.params().values())?;
                    add_assign(&mut total, grad.values());
                    optimizer.step(model.params_mut().values_mut(), &total)?
                } else {
                    optimizer.step(model.params_mut().values_mut(), grad.values())?
                };
                strategy.observe_step(grad.values(), &step)?;
            }
        }

        let path_integral = strategy.path_integral().map(<[f64]>::to_vec);
        let mut final_grad = model.nll_loss_and_grad(train)?.1.into_values();
        if penalised {
            add_assign(&mut final_grad, &strategy.penalty_and_grad(model.params().values())?.1);
        }
        strategy.end_task(&model, train, derive_seed(seed, &format!("fisher/task{tau}")))?;
        if strategy.importance().omega.iter().any(|o| !o.is_finite()) {
            return Err(Error::Numerical(format!("non-finite importance after task {tau}")));
        }

        rows.push(
            tasks
                .iter()
                .map(|t| model.accuracy(&t.test))
                .collect::<Result<Vec<_>>>()?,
        );
        snapshots.push(TaskSnapshot {
            subject: task.id,
            omega: strategy.importance().omega.clone(),
            theta: model.params().values().to_vec(),
            start_grad,
            standalone,
            path_integral,
            train_f1: macro_f1_of(&model, train)?,
            final_grad_norm: norm(&final_grad),
        });
        wall_clock.push(started.seconds());
    }

    let unseen_f1 = if holdout.is_empty() {
        None
    } else {
        let parts: Vec<&Batch> = holdout.iter().flat_map(|t| [&t.train, &t.test]).collect();
        Some(macro_f1_of(&model, &Batch::concat(&parts)?)?)
    };

    Ok(RunArtifacts {
        unit,
        subjects: tasks.iter().map(|t| t.id).collect(),
        accuracy: AccuracyMatrix::new(rows, baseline)?,
        initial_params: initial,
        groups: model.params().groups().to_vec(),
        snapshots,
        unseen_f1,
        wall_clock,
    })
}

/// Run the configured strategy and lambda with the first seed.
pub fn run_sequence(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let TaskStream { stream, holdout } = generate_stream(&config.stream)?;
    let unit = RunUnit {
        strategy: config.strategy,
        lambda: config.lambda,
        seed: config.seeds[0],
    };
    let art = run_on_tasks(config, &stream, &holdout, unit)?;
    info!(
        "{} lambda={} seed={}: final acc {:.4}",
        unit.strategy,
        unit.lambda,
        unit.seed,
        art.accuracy.final_acc()?
    );
    Ok(art)
}

/// Map `f` over `items` on all available cores, keeping input order. Each
/// item is processed independently, so results do not depend on the thread
/// count.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len());
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub mean_acc: Spread,
    pub final_acc: Spread,
    pub bwt: Spread,
    pub fwt: Spread,
    pub unseen_f1: Spread,
    /// Train F1 on the last task right after learning it.
    pub final_train_f1: Spread,
    /// Paired one-sided tests of `strategy - naive > 0` over seeds.
    pub bwt_vs_naive: Option<StatResult>,
    pub fwt_vs_naive: Option<StatResult>,
    pub per_seed: Vec<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn metric(values: &[RunMetrics], f: impl Fn(&RunMetrics) -> Option<f64>) -> Vec<f64> {
    values.iter().map(|m| f(m).unwrap_or(f64::NAN)).collect()
}

fn paired_greater(a: &[f64], b: &[f64]) -> Option<StatResult> {
    if a.len() < 2 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return None;
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Some(
        t_test_one_sample_greater(&diffs, 0.0)
            .unwrap_or_else(|_| StatResult::degenerate(StatKind::TOneSample, diffs.len())),
    )
}

fn sweep_row(strategy: StrategyKind, lambda: f64, runs: Vec<RunMetrics>, naive: &[RunMetrics]) -> SweepRow {
    let bwt = metric(&runs, |m| m.bwt);
    let fwt = metric(&runs, |m| m.fwt);
    let is_naive = strategy == StrategyKind::Naive;
    SweepRow {
        strategy,
        lambda,
        mean_acc: Spread::of(&metric(&runs, |m| m.mean_acc)),
        final_acc: Spread::of(&metric(&runs, |m| m.final_acc)),
        bwt: Spread::of(&bwt),
        fwt: Spread::of(&fwt),
        unseen_f1: Spread::of(&metric(&runs, |m| m.unseen_f1)),
        final_train_f1: Spread::of(&metric(&runs, |m| m.train_f1.last().copied())),
        bwt_vs_naive: (!is_naive)
            .then(|| paired_greater(&bwt, &metric(naive, |m| m.bwt)))
            .flatten(),
        fwt_vs_naive: (!is_naive)
            .then(|| paired_greater(&fwt, &metric(naive, |m| m.fwt)))
            .flatten(),
        per_seed: runs,
    }
}

/// Sweep EWC, SI and MAS over `grid`, one run per `(lambda, seed)`, with a
/// single naive reference row.
pub fn sweep_lambda(config: &RunConfig, grid: &[f64]) -> Result<SweepTable> {
    sweep_strategies(config, &[StrategyKind::Ewc, StrategyKind::Si, StrategyKind::Mas], grid)
}

pub fn sweep_strategies(config: &RunConfig, kinds: &[StrategyKind], grid: &[f64]) -> Result<SweepTable> {
    config.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config("lambda grid values must be finite and >= 0".into()));
    }
    let TaskStream { stream, holdout } = generate_stream(&config.stream)?;
    let mut units: Vec<RunUnit> = config
        .seeds
        .iter()
        .map(|&seed| RunUnit {
            strategy: StrategyKind::Naive,
            lambda: 0.0,
            seed,
        })
        .collect();
    for &strategy in kinds.iter().filter(|k| **k != StrategyKind::Naive) {
        for &lambda in grid {
            for &seed in &config.seeds {
                units.push(RunUnit { strategy, lambda, seed });
            }
        }
    }
    let results = par_map(&units, |u| {
        run_on_tasks(config, &stream, &holdout, *u).map(|a| a.summary())
    });
    let mut metrics = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let n_seeds = config.seeds.len();
    let naive: Vec<RunMetrics> = metrics.by_ref().take(n_seeds).collect();
    let mut rows = vec![sweep_row(StrategyKind::Naive, 0.0, naive.clone(), &naive)];
    for &strategy in kinds.iter().filter(|k| **k != StrategyKind::Naive) {
        for &lambda in grid {
            let runs: Vec<RunMetrics> = metrics.by_ref().take(n_seeds).collect();
            info!(
                "sweep {strategy} lambda={lambda}: mean bwt {:.4}",
                Spread::of(&metric(&runs, |m| m.bwt)).mean
            );
            rows.push(sweep_row(strategy, lambda, runs, &naive));
        }
    }
    Ok(SweepTable { rows })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,lambda,mean_acc_mean,mean_acc_std,final_acc_mean,final_acc_std,bwt_mean,bwt_std,\
             fwt_mean,fwt_std,unseen_f1_mean,unseen_f1_std,final_train_f1_mean,final_train_f1_std,\
             bwt_vs_naive_p,fwt_vs_naive_p\n",
        );
        let p = |s: &Option<StatResult>| s.as_ref().map(|s| s.p_value.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.strategy, r.lambda);
            for s in [r.mean_acc, r.final_acc, r.bwt, r.fwt, r.unseen_f1, r.final_train_f1] {
                let _ = write!(out, ",{},{}", s.mean, s.std);
            }
            let _ = writeln!(out, ",{},{}", p(&r.bwt_vs_naive), p(&r.fwt_vs_naive));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub strategy: StrategyKind,
    pub shuffle: usize,
    pub seed: u64,
    pub order: Vec<usize>,
    pub unseen_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSummary {
    pub strategy: StrategyKind,
    pub lambda: f64,
    /// Spread over shuffles of the seed-averaged unseen F1.
    pub unseen_f1: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleTable {
    pub rows: Vec<ShuffleRow>,
    pub summary: Vec<ShuffleSummary>,
}

impl ShuffleTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,shuffle,seed,order,unseen_f1\n");
        for r in &self.rows {
            let order: Vec<String> = r.order.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.strategy,
                r.shuffle,
                r.seed,
                order.join(" "),
                r.unseen_f1
            );
        }
        out
    }

    pub fn std_for(&self, kind: StrategyKind) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.strategy == kind)
            .map(|s| s.unseen_f1.std)
    }
}

/// Subject order for shuffle `index`; shuffle 0 keeps the generated order.
pub fn shuffled_order(tasks: &[SubjectTask], stream_seed: u64, index: usize) -> Result<Vec<SubjectTask>> {
    if index == 0 {
        return Ok(tasks.to_vec());
    }
    shuffle_stream(tasks, derive_seed(stream_seed, &format!("order/{index}")))
}

/// Train every strategy (with its configured lambda) on `n_shuffles`
/// orderings of the same subjects, seeds and holdout.
pub fn shuffle_grid(config: &RunConfig, n_shuffles: usize) -> Result<ShuffleTable> {
    config.validate()?;
    if n_shuffles == 0 {
        return Err(Error::Config("need at least one shuffle".into()));
    }
    if config.stream.n_subjects - config.stream.n_holdout() == 0 {
        return Err(Error::Config("no training subjects".into()));
    }
    let TaskStream { stream, holdout } = generate_stream(&config.stream)?;
    if holdout.is_empty() {
        return Err(Error::Config("shuffle grid needs held-out subjects".into()));
    }
    let orders = (0..n_shuffles)
        .map(|s| shuffled_order(&stream, config.stream.seed, s))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for kind in StrategyKind::ALL {
        for s in 0..n_shuffles {
            for &seed in &config.seeds {
                jobs.push((kind, s, seed));
            }
        }
    }
    let results = par_map(&jobs, |&(kind, s, seed)| {
        let unit = RunUnit {
            strategy: kind,
            lambda: config.lambda_for(kind),
            seed,
        };
        run_on_tasks(config, &orders[s], &holdout, unit)
    });
    let mut rows = Vec::with_capacity(jobs.len());
    for (&(strategy, shuffle, seed), res) in jobs.iter().zip(results) {
        let art = res?;
        rows.push(ShuffleRow {
            strategy,
            shuffle,
            seed,
            order: art.subjects.clone(),
            unseen_f1: art.unseen_f1.expect("holdout is nonempty"),
        });
    }
    let summary = StrategyKind::ALL
        .iter()
        .map(|&kind| {
            let per_shuffle: Vec<f64> = (0..n_shuffles)
                .map(|s| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.strategy == kind && r.shuffle == s)
                        .map(|r| r.unseen_f1)
                        .collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            let mut spread = Spread::of(&per_shuffle);
            if per_shuffle.len() < 2 {
                spread.std = 0.0;
            }
            ShuffleSummary {
                strategy: kind,
                lambda: config.lambda_for(kind),
                unseen_f1: spread,
            }
        })
        .collect();
    Ok(ShuffleTable { rows, summary })
}

/// Writes files into one directory, creating it on demand and recording
/// every file that already existed.
pub struct ReportWriter {
    dir: PathBuf,
    overwritten: Vec<PathBuf>,
}

impl ReportWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            overwritten: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        if path.exists() {
            warn!("overwriting {}", path.display());
            self.overwritten.push(path.clone());
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn overwritten(&self) -> &[PathBuf] {
        &self.overwritten
    }

    pub fn finish(self) -> Vec<PathBuf> {
        self.overwritten
    }
}

fn omega_csv(groups: &[ParamGroup], snap: &TaskSnapshot) -> String {
    let mut out = String::from("group,index,omega,theta\n");
    for g in groups {
        for k in g.start..g.start + g.len {
            let _ = writeln!(out, "{},{},{},{}", g.name, k - g.start, snap.omega[k], snap.theta[k]);
        }
    }
    out
}

/// Write `R.csv`, `metrics.json`, `omega_task{t}.csv`, the interference and
/// importance-accumulation probes (for runs of two or more tasks) and
/// `timing.json`. Everything except `timing.json` is byte-stable for equal
/// artifacts. Returns the paths that were overwritten.
pub fn emit_reports(artifacts: &RunArtifacts, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut w = ReportWriter::new(out_dir)?;
    w.write("R.csv", &artifacts.accuracy.to_csv())?;
    w.write_json("metrics.json", &artifacts.summary())?;
    for (tau, snap) in artifacts.snapshots.iter().enumerate() {
        w.write(&format!("omega_task{tau}.csv"), &omega_csv(&artifacts.groups, snap))?;
    }
    if artifacts.snapshots.len() >= 2 {
        let fracs = ProbeSettings::default().topk_fracs;
        crate::diagnostics::probe_gradient_interference(artifacts, &fracs)?.write(&mut w)?;
        crate::diagnostics::probe_importance_accumulation(artifacts)?.write(&mut w)?;
    }
    w.write_json("timing.json", &artifacts.wall_clock)?;
    Ok(w.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            stream: StreamSpec {
                dim: 4,
                classes: 3,
                n_subjects: 4,
                n_train: 60,
                n_test: 30,
                holdout_frac: 0.25,
                ..StreamSpec::default()
            },
            model: ModelConfig {
                hidden: vec![6],
                activation: Activation::Elu,
            },
            epochs: 2,
            batch_size: 16,
            n_fisher: 40,
            optimizer: OptimizerConfig::Adam { lr: 0.01 },
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"strategy":"si","lambda":0.5,"lambdas":{"ewc":5.0}}"#).unwrap();
        assert_eq!(cfg.strategy, StrategyKind::Si);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.lambda_for(StrategyKind::Ewc), 5.0);
        assert_eq!(cfg.lambda_for(StrategyKind::Mas), 0.5);
        assert_eq!(cfg.lambda_for(StrategyKind::Naive), 0.0);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            r#"{"lambda":-1}"#,
            r#"{"epochs":0}"#,
            r#"{"seeds":[]}"#,
            r#"{"bogus":1}"#,
            r#"{"optimizer":{"kind":"sgd","lr":0}}"#,
            r#"{"probe":{"steps":0}}"#,
            r#"{"probe":{"epochs":0,"steps":10}}"#,
            r#"{"probe":{"fisher_draws":0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn single_subject_naive_run() {
        let mut cfg = tiny_config();
        cfg.stream.n_subjects = 1;
        cfg.stream.holdout_frac = 0.0;
        let art = run_sequence(&cfg).unwrap();
        assert_eq!(art.accuracy.tasks(), 1);
        assert!(art.snapshots[0].omega.iter().all(|&o| o == 0.0));
        assert_eq!(art.unseen_f1, None);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = tiny_config();
        cfg.strategy = StrategyKind::Ewc;
        cfg.lambda = 1.0;
        let a = run_sequence(&cfg).unwrap().without_timing();
        let b = run_sequence(&cfg).unwrap().without_timing();
        assert_eq!(a, b);
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..37).collect();
        assert_eq!(par_map(&xs, |x| x * x), xs.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_zero_is_identity() {
        let cfg = tiny_config();
        let stream = generate_stream(&cfg.stream).unwrap().stream;
        let same = shuffled_order(&stream, 0, 0).unwrap();
        assert_eq!(same, stream);
    }

    #[test]
    fn nan_learning_blows_up_as_numerical_error() {
        let mut cfg = tiny_config();
        cfg.optimizer = OptimizerConfig::Sgd { lr: 1e300 };
        cfg.stream.noise_sigma = 50.0;
        let err = run_sequence(&cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}
