//! Helpers shared by the integration targets.
#![allow(dead_code)]

use clreg::rng::stream_rng;
use clreg::strategies::ImportanceMap;
use clreg::tensor::{Activation, Batch, ClassifierModel, Matrix, ModelShape};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + eps;
            let up = f(&probe);
            probe[k] = x[k] - eps;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest per-coordinate `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A random model, batch and penalty anchor, all derived from `seed`.
pub struct Instance {
    pub model: ClassifierModel,
    pub batch: Batch,
    pub map: ImportanceMap,
    pub lambda: f64,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = stream_rng(seed, "instance");
    let dim = rng.random_range(1..=6);
    let classes = rng.random_range(2..=5);
    let mut sizes = vec![dim];
    for _ in 0..rng.random_range(1..=2) {
        sizes.push(rng.random_range(2..=7));
    }
    sizes.push(classes);
    let activation = if seed.is_multiple_of(2) {
        Activation::Elu
    } else {
        Activation::Tanh
    };
    let model = ClassifierModel::new(ModelShape::new(sizes, activation).unwrap(), seed).unwrap();
    let n = rng.random_range(1..=6);
    let data: Vec<f64> = (0..n * dim)
        .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let batch = Batch::new(Matrix::new(n, dim, data).unwrap(), labels).unwrap();
    let p = model.params().len();
    let anchor: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let mut map = ImportanceMap::new(&anchor);
    map.omega = (0..p).map(|_| rng.random::<f64>() * 2.0).collect();
    let lambda = rng.random_range(0.1..10.0);
    Instance {
        model,
        batch,
        map,
        lambda,
    }
}

/// Mean over samples of `||logits||^2`.
pub fn output_norm(model: &ClassifierModel, batch: &Batch) -> f64 {
    let logits = model.forward(batch).unwrap();
    logits.data().iter().map(|z| z * z).sum::<f64>() / batch.len() as f64
}

/// Worst relative error of the NLL, output-norm and penalty gradients.
/// `eps` is the step for the two smooth losses; the penalty is exactly
/// quadratic, so central differences carry no truncation error there and
/// `eps_quadratic` can be large enough to keep cancellation out of the way.
pub fn gradient_errors(inst: &Instance, eps: f64, eps_quadratic: f64, floor: f64) -> [f64; 3] {
    let theta = inst.model.params().values().to_vec();
    let mut m = inst.model.clone();
    let nll = fd_grad(
        |x| {
            m.set_values(x).unwrap();
            m.nll_loss(&inst.batch).unwrap()
        },
        &theta,
        eps,
    );
    let out = fd_grad(
        |x| {
            m.set_values(x).unwrap();
            output_norm(&m, &inst.batch)
        },
        &theta,
        eps,
    );
    let pen = fd_grad(
        |x| {
            clreg::strategies::penalty_and_grad(&inst.map, x, inst.lambda)
                .unwrap()
                .0
        },
        &theta,
        eps_quadratic,
    );
    let nll_a = inst.model.nll_loss_and_grad(&inst.batch).unwrap().1;
    let out_a = inst.model.output_norm_grad(&inst.batch).unwrap();
    let pen_a = clreg::strategies::penalty_and_grad(&inst.map, &theta, inst.lambda)
        .unwrap()
        .1;
    [
        max_rel_err(nll_a.values(), &nll, floor),
        max_rel_err(out_a.values(), &out, floor),
        max_rel_err(&pen_a, &pen, floor),
    ]
}

/// A run that finishes in well under a second.
pub fn tiny_config() -> clreg::runner::RunConfig {
    let mut cfg = clreg::runner::RunConfig::default();
    cfg.stream.dim = 4;
    cfg.stream.classes = 3;
    cfg.stream.n_subjects = 4;
    cfg.stream.n_train = 60;
    cfg.stream.n_test = 30;
    cfg.stream.holdout_frac = 0.25;
    cfg.model.hidden = vec![6];
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.n_fisher = 40;
    cfg.optimizer = clreg::optim::OptimizerConfig::Adam { lr: 0.01 };
    cfg
}
