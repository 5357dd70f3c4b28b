//! Synthetic subject-incremental task streams.
//!
//! Subject `s` draws class `k` around
//! `mu[s][k] = Rot(s * shift_angle) mu[0][k] + s * drift_scale * u_s`, where
//! `Rot` is a product of Givens rotations over a fixed random pairing of the
//! coordinates and `u_s` a random unit vector. Samples add isotropic Gaussian
//! noise, optional single-coordinate artefact spikes and optional label
//! flips.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};
use crate::tensor::{Batch, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Rotation (radians) applied per subject index.
    pub shift_angle: f64,
    /// Mean translation per subject index.
    pub drift_scale: f64,
    pub noise_sigma: f64,
    pub spike_prob: f64,
    pub spike_scale: f64,
    pub label_flip: f64,
    pub holdout_frac: f64,
    pub seed: u64,
    /// Subject-0 class means (`classes x dim`); drawn from N(0, I) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_means: Option<Vec<Vec<f64>>>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            n_subjects: 10,
            n_train: 400,
            n_test: 100,
            shift_angle: 0.35,
            drift_scale: 0.5,
            noise_sigma: 1.0,
            spike_prob: 0.0,
            spike_scale: 0.0,
            label_flip: 0.0,
            holdout_frac: 0.2,
            seed: 0,
            base_means: None,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.n_subjects == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("dim, n_subjects, n_train and n_test must be >= 1".into());
        }
        if self.classes < 2 {
            return bad("need at least 2 classes".into());
        }
        for (name, p) in [("spike_prob", self.spike_prob), ("label_flip", self.label_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(0.0..=0.5).contains(&self.holdout_frac) {
            return bad(format!("holdout_frac must be in [0, 0.5], got {}", self.holdout_frac));
        }
        if !(self.noise_sigma >= 0.0) || !(self.spike_scale >= 0.0) || !(self.drift_scale >= 0.0) {
            return bad("noise_sigma, spike_scale and drift_scale must be >= 0".into());
        }
        if !self.shift_angle.is_finite() {
            return bad("shift_angle must be finite".into());
        }
        if self.n_subjects - self.n_holdout() == 0 {
            return bad("holdout leaves no training subjects".into());
        }
        if let Some(m) = &self.base_means {
            if m.len() != self.classes || m.iter().any(|r| r.len() != self.dim) {
                return bad("base_means must be classes x dim".into());
            }
        }
        Ok(())
    }

    pub fn n_holdout(&self) -> usize {
        (self.holdout_frac * self.n_subjects as f64).round() as usize
    }

    fn base_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.base_means {
            return m.clone();
        }
        let mut rng = stream_rng(self.seed, "base-means");
        (0..self.classes)
            .map(|_| (0..self.dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    /// Disjoint coordinate pairs `(a, b)` with `a < b` that the rotation acts on.
    fn rotation_pairs(&self) -> Vec<(usize, usize)> {
        let mut coords: Vec<usize> = (0..self.dim).collect();
        if self.dim > 2 {
            coords.shuffle(&mut stream_rng(self.seed, "rotation-pairs"));
        }
        coords
            .chunks_exact(2)
            .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
            .collect()
    }

    fn drift_direction(&self, subject: usize) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, &format!("drift/{subject}"));
        loop {
            let u: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return u.into_iter().map(|v| v / norm).collect();
            }
        }
    }

    /// Class means of subject `s` (`classes x dim`).
    pub fn class_means(&self, subject: usize) -> Matrix {
        let angle = subject as f64 * self.shift_angle;
        let pairs = self.rotation_pairs();
        let (sin, cos) = angle.sin_cos();
        let drift = self.drift_direction(subject);
        let offset = subject as f64 * self.drift_scale;
        let rows: Vec<Vec<f64>> = self
            .base_means()
            .into_iter()
            .map(|mut mu| {
                for &(a, b) in &pairs {
                    let (xa, xb) = (mu[a], mu[b]);
                    mu[a] = cos * xa - sin * xb;
                    mu[b] = sin * xa + cos * xb;
                }
                if offset != 0.0 {
                    for (m, u) in mu.iter_mut().zip(&drift) {
                        *m += offset * u;
                    }
                }
                mu
            })
            .collect();
        Matrix::from_rows(&rows).expect("rectangular means")
    }
}

/// Generator parameters kept with each subject for oracle computations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub means: Matrix,
    pub noise_sigma: f64,
    pub spike_prob: f64,
    pub spike_scale: f64,
    pub label_flip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTask {
    pub id: usize,
    pub train: Batch,
    pub test: Batch,
    pub gen: Option<GenParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub stream: Vec<SubjectTask>,
    pub holdout: Vec<SubjectTask>,
}

/// One noisy draw from class `label`; returns the (possibly flipped) label.
fn draw(gen: &GenParams, label: usize, rng: &mut Rng, x: &mut [f64]) -> usize {
    let k = gen.means.rows();
    for (xi, mu) in x.iter_mut().zip(gen.means.row(label)) {
        let eps: f64 = rng.sample(StandardNormal);
        *xi = mu + gen.noise_sigma * eps;
    }
    if gen.spike_prob > 0.0 && rng.random::<f64>() < gen.spike_prob {
        let j = rng.random_range(0..x.len());
        x[j] += gen.spike_scale;
    }
    if gen.label_flip > 0.0 && rng.random::<f64>() < gen.label_flip {
        let other = rng.random_range(0..k - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    } else {
        label
    }
}

fn draw_batch(gen: &GenParams, n: usize, rng: &mut Rng) -> Batch {
    let (k, d) = (gen.means.rows(), gen.means.cols());
    let mut classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    classes.shuffle(rng);
    let mut data = vec![0.0; n * d];
    let labels = classes
        .iter()
        .zip(data.chunks_exact_mut(d))
        .map(|(&y, x)| draw(gen, y, rng, x))
        .collect();
    Batch::new(Matrix::new(n, d, data).expect("sized"), labels).expect("sized")
}

fn generate_subject(spec: &StreamSpec, id: usize) -> SubjectTask {
    let gen = GenParams {
        means: spec.class_means(id),
        noise_sigma: spec.noise_sigma,
        spike_prob: spec.spike_prob,
        spike_scale: spec.spike_scale,
        label_flip: spec.label_flip,
        seed: spec.seed,
    };
    let mut rng = stream_rng(spec.seed, &format!("samples/{id}"));
    let train = draw_batch(&gen, spec.n_train, &mut rng);
    let test = draw_batch(&gen, spec.n_test, &mut rng);
    SubjectTask {
        id,
        train,
        test,
        gen: Some(gen),
    }
}

/// Generate all subjects and split off a random holdout set. Training
/// subjects keep ascending id order.
pub fn generate_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut ids: Vec<usize> = (0..spec.n_subjects).collect();
    ids.shuffle(&mut stream_rng(spec.seed, "holdout"));
    let mut holdout_ids = ids[..spec.n_holdout()].to_vec();
    holdout_ids.sort_unstable();
    let (mut stream, mut holdout) = (Vec::new(), Vec::new());
    for id in 0..spec.n_subjects {
        let task = generate_subject(spec, id);
        if holdout_ids.contains(&id) {
            holdout.push(task);
        } else {
            stream.push(task);
        }
    }
    Ok(TaskStream { stream, holdout })
}

/// Monte-Carlo accuracy of the nearest-mean (Gaussian ML) classifier against
/// the observed, possibly flipped, labels.
pub fn bayes_accuracy(task: &SubjectTask) -> Result<f64> {
    const N: usize = 100_000;
    let gen = task
        .gen
        .as_ref()
        .ok_or_else(|| Error::Config("subject has no generator parameters".into()))?;
    let (k, d) = (gen.means.rows(), gen.means.cols());
    let mut rng = stream_rng(gen.seed, &format!("bayes/{}", task.id));
    let mut x = vec![0.0; d];
    let mut hits = 0usize;
    for i in 0..N {
        let y = draw(gen, i % k, &mut rng, &mut x);
        let pred = (0..k)
            .map(|c| {
                let dist: f64 = x.iter().zip(gen.means.row(c)).map(|(a, m)| (a - m).powi(2)).sum();
                (c, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("k >= 1");
        hits += usize::from(pred == y);
    }
    Ok(hits as f64 / N as f64)
}

/// Reorder subjects by `perm` (a permutation of `0..stream.len()`).
pub fn permute_stream(stream: &[SubjectTask], perm: &[usize]) -> Result<Vec<SubjectTask>> {
    let mut seen = vec![false; stream.len()];
    if perm.len() != stream.len() {
        return Err(Error::Config("permutation length differs from stream length".into()));
    }
    for &p in perm {
        if p >= stream.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config("not a permutation".into()));
        }
    }
    Ok(perm.iter().map(|&p| stream[p].clone()).collect())
}

/// Deterministic random reordering of the subjects.
pub fn shuffle_stream(stream: &[SubjectTask], seed: u64) -> Result<Vec<SubjectTask>> {
    if stream.is_empty() {
        return Err(Error::Empty("stream"));
    }
    let mut perm: Vec<usize> = (0..stream.len()).collect();
    perm.shuffle(&mut stream_rng(seed, "subject-order"));
    permute_stream(stream, &perm)
}

pub fn batch_to_csv(batch: &Batch) -> String {
    let mut out = String::new();
    for j in 0..batch.dim() {
        let _ = write!(out, "x_{j},");
    }
    out.push_str("label\n");
    for i in 0..batch.len() {
        let (x, y) = batch.sample(i);
        for v in x {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    out
}

/// Write `train/subject_{id}.csv` and `test/subject_{id}.csv` under `dir`.
pub fn export_csv(tasks: &[SubjectTask], dir: &Path) -> Result<()> {
    for split in ["train", "test"] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for t in tasks {
            let batch = if split == "train" { &t.train } else { &t.test };
            let path = sub.join(format!("subject_{}.csv", t.id));
            fs::write(&path, batch_to_csv(batch)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn small() -> StreamSpec {
        StreamSpec {
            dim: 6,
            classes: 3,
            n_subjects: 5,
            n_train: 30,
            n_test: 12,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn zero_shift_means_identical() {
        let spec = StreamSpec {
            shift_angle: 0.0,
            drift_scale: 0.0,
            ..small()
        };
        let m0 = spec.class_means(0);
        for s in 1..spec.n_subjects {
            let ms = spec.class_means(s);
            for (a, b) in m0.data().iter().zip(ms.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_samples_sit_on_means() {
        let spec = StreamSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let ts = generate_stream(&spec).unwrap();
        for t in ts.stream.iter().chain(&ts.holdout) {
            let means = &t.gen.as_ref().unwrap().means;
            for b in [&t.train, &t.test] {
                for i in 0..b.len() {
                    let (x, y) = b.sample(i);
                    assert_eq!(x, means.row(y));
                }
            }
        }
    }

    #[test]
    fn quarter_turn_in_the_plane() {
        let spec = StreamSpec {
            dim: 2,
            classes: 2,
            shift_angle: FRAC_PI_2,
            drift_scale: 0.0,
            base_means: Some(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
            ..small()
        };
        let m = spec.class_means(1);
        assert_abs_diff_eq!(m.row(0)[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.row(0)[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.row(1)[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.row(1)[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_generation() {
        let a = generate_stream(&small()).unwrap();
        let b = generate_stream(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_stream(&StreamSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn holdout_split() {
        let spec = StreamSpec {
            n_subjects: 10,
            holdout_frac: 0.2,
            ..small()
        };
        let ts = generate_stream(&spec).unwrap();
        assert_eq!(ts.stream.len(), 8);
        assert_eq!(ts.holdout.len(), 2);
        let mut ids: Vec<usize> = ts.stream.iter().chain(&ts.holdout).map(|t| t.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            StreamSpec {
                label_flip: 1.5,
                ..small()
            },
            StreamSpec {
                holdout_frac: 0.6,
                ..small()
            },
            StreamSpec { n_train: 0, ..small() },
            StreamSpec { classes: 1, ..small() },
        ] {
            assert!(matches!(generate_stream(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn label_flip_changes_observed_labels() {
        let spec = StreamSpec {
            noise_sigma: 0.0,
            label_flip: 1.0,
            ..small()
        };
        let ts = generate_stream(&spec).unwrap();
        let t = &ts.stream[0];
        let means = &t.gen.as_ref().unwrap().means;
        for i in 0..t.train.len() {
            let (x, y) = t.train.sample(i);
            assert_ne!(x, means.row(y));
        }
    }

    #[test]
    fn bayes_accuracy_limits() {
        let mk = |flip: f64, sigma: f64| StreamSpec {
            dim: 1,
            classes: 2,
            n_subjects: 1,
            holdout_frac: 0.0,
            noise_sigma: sigma,
            label_flip: flip,
            base_means: Some(vec![vec![1.0], vec![-1.0]]),
            ..small()
        };
        let acc = |s: StreamSpec| bayes_accuracy(&generate_stream(&s).unwrap().stream[0]).unwrap();
        assert_eq!(acc(mk(0.0, 0.0)), 1.0);
        assert_eq!(acc(mk(1.0, 0.0)), 0.0);
        // Phi(1)
        assert!((acc(mk(0.0, 1.0)) - 0.841_344_746).abs() < 0.01);
    }

    #[test]
    fn bayes_needs_generator() {
        let mut t = generate_stream(&small()).unwrap().stream.remove(0);
        t.gen = None;
        assert!(bayes_accuracy(&t).is_err());
    }

    #[test]
    fn shuffle_is_a_seeded_bijection() {
        let ts = generate_stream(&small()).unwrap();
        let ids: Vec<usize> = ts.stream.iter().map(|t| t.id).collect();
        let identity: Vec<usize> = (0..ts.stream.len()).collect();
        assert_eq!(permute_stream(&ts.stream, &identity).unwrap(), ts.stream);
        let a = shuffle_stream(&ts.stream, 3).unwrap();
        let b = shuffle_stream(&ts.stream, 3).unwrap();
        assert_eq!(a, b);
        let mut got: Vec<usize> = a.iter().map(|t| t.id).collect();
        got.sort_unstable();
        assert_eq!(got, ids);
        assert!(permute_stream(&ts.stream, &[0, 0, 1, 2]).is_err());
        assert!(shuffle_stream(&[], 1).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let ts = generate_stream(&StreamSpec { dim: 2, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(&ts.stream[..1], dir.path()).unwrap();
        let id = ts.stream[0].id;
        let text = fs::read_to_string(dir.path().join(format!("train/subject_{id}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x_0,x_1,label"));
        assert_eq!(lines.count(), 30);
    }
}
