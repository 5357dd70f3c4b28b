//! Continual-learning bookkeeping.
//!
//! `R[i][j]` is the test accuracy on task `j` after training on tasks
//! `0..=i`; `b[j]` is the accuracy on task `j` of the untrained model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    r: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(r: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let t = r.len();
        if r.iter().any(|row| row.len() != t) {
            return Err(Error::shape(format!("accuracy matrix must be {t}x{t}")));
        }
        if b.len() != t {
            return Err(Error::shape(format!("baseline has {} entries for {t} tasks", b.len())));
        }
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !r.iter().flatten().all(in_range) || !b.iter().all(in_range) {
            return Err(Error::Parse("accuracies must lie in [0, 1]".into()));
        }
        Ok(Self { r, b })
    }

    /// Matrix without a measured baseline (zeros).
    pub fn without_baseline(r: Vec<Vec<f64>>) -> Result<Self> {
        let t = r.len();
        Self::new(r, vec![0.0; t])
    }

    pub fn tasks(&self) -> usize {
        self.r.len()
    }

    pub fn get(&self, phase: usize, task: usize) -> f64 {
        self.r[phase][task]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.r
    }

    pub fn baseline(&self) -> &[f64] {
        &self.b
    }

    pub fn set_baseline(&mut self, b: Vec<f64>) -> Result<()> {
        if b.len() != self.tasks() {
            return Err(Error::shape("baseline length must equal task count"));
        }
        self.b = b;
        Ok(())
    }

    fn nonempty(&self) -> Result<()> {
        if self.r.is_empty() {
            return Err(Error::Empty("accuracy matrix"));
        }
        Ok(())
    }

    /// Mean accuracy over all tasks after the last phase.
    pub fn final_acc(&self) -> Result<f64> {
        self.nonempty()?;
        let last = &self.r[self.tasks() - 1];
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Average over phases of the mean accuracy on the tasks seen so far.
    pub fn mean_acc(&self) -> Result<f64> {
        self.nonempty()?;
        let t = self.tasks();
        let total: f64 = (0..t)
            .map(|i| self.r[i][..=i].iter().sum::<f64>() / (i + 1) as f64)
            .sum();
        Ok(total / t as f64)
    }

    /// Backward transfer: mean of `R[T-1][i] - R[i][i]` over `i < T-1`.
    pub fn bwt(&self) -> Result<f64> {
        let t = self.tasks();
        if t < 2 {
            return Err(Error::UndefinedMetric(format!("BWT needs at least 2 tasks, got {t}")));
        }
        let s: f64 = (0..t - 1).map(|i| self.r[t - 1][i] - self.r[i][i]).sum();
        Ok(s / (t - 1) as f64)
    }

    /// Forward transfer: mean of `R[i-1][i] - b[i]` over `i >= 1`.
    pub fn fwt(&self) -> Result<f64> {
        let t = self.tasks();
        if t < 2 {
            return Err(Error::UndefinedMetric(format!("FWT needs at least 2 tasks, got {t}")));
        }
        let s: f64 = (1..t).map(|i| self.r[i - 1][i] - self.b[i]).sum();
        Ok(s / (t - 1) as f64)
    }

    /// CSV with header `phase,task_0,..`, one row per phase, then `init`.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("phase");
        for j in 0..t {
            let _ = write!(out, ",task_{j}");
        }
        out.push('\n');
        for (i, row) in self.r.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out.push_str("init");
        for v in &self.b {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv). A missing `init` row yields a
    /// zero baseline.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Empty("R.csv"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"phase") {
            return Err(Error::Parse("R.csv header must start with 'phase'".into()));
        }
        let t = cols.len() - 1;
        let mut r = Vec::new();
        let mut b = None;
        for line in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != t + 1 {
                return Err(Error::Parse(format!(
                    "row '{line}' has {} fields, want {}",
                    fields.len(),
                    t + 1
                )));
            }
            let vals = parse_floats(&fields[1..])?;
            if fields[0] == "init" {
                b = Some(vals);
            } else {
                r.push(vals);
            }
        }
        Self::new(r, b.unwrap_or_else(|| vec![0.0; t]))
    }
}

pub fn parse_floats(fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}"))))
        .collect()
}

/// `K x K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion counts must be square"));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("truth and prediction lengths differ"));
        }
        let mut c = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::shape(format!("class index outside [0, {k})")));
            }
            c.counts[t * k + p] += 1;
        }
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Macro-averaged F1. A class with no support and no predictions scores 0.
    pub fn macro_f1(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion counts"));
        }
        let k = self.k;
        let sum: f64 = (0..k)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let predicted: u64 = (0..k).map(|t| self.get(t, c)).sum();
                let actual: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .sum();
        Ok(sum / k as f64)
    }
}

pub fn final_acc(m: &AccuracyMatrix) -> Result<f64> {
    m.final_acc()
}

pub fn mean_acc(m: &AccuracyMatrix) -> Result<f64> {
    m.mean_acc()
}

pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    m.bwt()
}

pub fn fwt(m: &AccuracyMatrix) -> Result<f64> {
    m.fwt()
}

pub fn macro_f1(c: &ConfusionCounts) -> Result<f64> {
    c.macro_f1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_task() -> AccuracyMatrix {
        AccuracyMatrix::new(vec![vec![0.8, 0.3], vec![0.6, 0.9]], vec![0.25, 0.25]).unwrap()
    }

    #[test]
    fn single_task_metrics() {
        let m = AccuracyMatrix::without_baseline(vec![vec![0.8]]).unwrap();
        assert_eq!(m.final_acc().unwrap(), 0.8);
        assert_eq!(m.mean_acc().unwrap(), 0.8);
        assert!(matches!(m.bwt(), Err(Error::UndefinedMetric(_))));
        assert!(matches!(m.fwt(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn hand_computed_two_task_metrics() {
        let m = two_task();
        assert_abs_diff_eq!(m.final_acc().unwrap(), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(m.mean_acc().unwrap(), 0.775, epsilon = 1e-15);
        assert_abs_diff_eq!(m.bwt().unwrap(), -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(m.fwt().unwrap(), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn identities() {
        // no forgetting
        let m = AccuracyMatrix::without_baseline(vec![vec![0.7, 0.1], vec![0.7, 0.6]]).unwrap();
        assert_eq!(m.bwt().unwrap(), 0.0);
        // no transfer
        let m = AccuracyMatrix::new(vec![vec![0.7, 0.4], vec![0.2, 0.6]], vec![0.3, 0.4]).unwrap();
        assert_eq!(m.fwt().unwrap(), 0.0);
        // zero baseline: FWT is the superdiagonal mean
        let m = AccuracyMatrix::without_baseline(vec![vec![0.9, 0.2, 0.0], vec![0.5, 0.9, 0.4], vec![0.5, 0.5, 0.9]])
            .unwrap();
        assert_abs_diff_eq!(m.fwt().unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn empty_matrix_errors() {
        let m = AccuracyMatrix::without_baseline(vec![]).unwrap();
        assert!(matches!(m.final_acc(), Err(Error::Empty(_))));
        assert!(matches!(m.mean_acc(), Err(Error::Empty(_))));
    }

    #[test]
    fn rejects_out_of_range_and_ragged() {
        assert!(AccuracyMatrix::without_baseline(vec![vec![1.2]]).is_err());
        assert!(AccuracyMatrix::without_baseline(vec![vec![0.1, 0.2], vec![0.3]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = two_task().to_csv();
        assert_eq!(csv, "phase,task_0,task_1\n0,0.8,0.3\n1,0.6,0.9\ninit,0.25,0.25\n");
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap(), two_task());
    }

    #[test]
    fn f1_examples() {
        let perfect = ConfusionCounts::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(perfect.macro_f1().unwrap(), 1.0);
        let half = ConfusionCounts::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        assert_abs_diff_eq!(half.macro_f1().unwrap(), 0.5, epsilon = 1e-15);
        let truth = [0, 1, 2, 3];
        let one_class = ConfusionCounts::from_predictions(4, &truth, &[0, 0, 0, 0]).unwrap();
        assert_abs_diff_eq!(one_class.macro_f1().unwrap(), 0.1, epsilon = 1e-15);
        assert!(ConfusionCounts::new(3).macro_f1().is_err());
    }

    proptest! {
        #[test]
        fn constant_matrix_invariants(c in 0.0f64..=1.0, t in 1usize..8) {
            let m = AccuracyMatrix::new(vec![vec![c; t]; t], vec![c; t]).unwrap();
            prop_assert!((m.final_acc().unwrap() - c).abs() < 1e-12);
            prop_assert!((m.mean_acc().unwrap() - c).abs() < 1e-12);
            if t >= 2 {
                prop_assert!(m.bwt().unwrap().abs() < 1e-12);
                prop_assert!(m.fwt().unwrap().abs() < 1e-12);
            }
        }

        #[test]
        fn csv_round_trip(vals in proptest::collection::vec(0.0f64..=1.0, 9), b in proptest::collection::vec(0.0f64..=1.0, 3)) {
            let r: Vec<Vec<f64>> = vals.chunks(3).map(<[f64]>::to_vec).collect();
            let m = AccuracyMatrix::new(r, b).unwrap();
            prop_assert_eq!(AccuracyMatrix::from_csv(&m.to_csv()).unwrap(), m);
        }

        #[test]
        fn f1_in_unit_interval(truth in proptest::collection::vec(0usize..4, 1..50), seed in any::<u64>()) {
            let pred: Vec<usize> = truth.iter().enumerate().map(|(i, t)| (t + (seed as usize >> (i % 8)) % 3) % 4).collect();
            let f1 = ConfusionCounts::from_predictions(4, &truth, &pred).unwrap().macro_f1().unwrap();
            prop_assert!((0.0..=1.0).contains(&f1));
        }
    }
}
