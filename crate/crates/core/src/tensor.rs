//! Flat parameter vectors and a small MLP classifier with exact reverse-mode
//! gradients.
//!
//! Every weight matrix is stored row-major as `fan_out x fan_in`, followed by
//! its bias, so `z_j = sum_i W[j, i] x_i + b_j`. Parameter groups are named
//! `layer{n}.weight`, `layer{n}.bias` for hidden layers and `out.weight`,
//! `out.bias` for the output layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Flat parameter array with named, contiguous index ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    groups: Vec<ParamGroup>,
}

impl ParamVector {
    /// Build a vector, checking that `groups` tile `[0, values.len())` in order
    /// and carry unique names.
    pub fn new(values: Vec<f64>, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut cursor = 0;
        for (i, g) in groups.iter().enumerate() {
            if g.start != cursor {
                return Err(Error::shape(format!(
                    "group '{}' starts at {} but previous range ends at {cursor}",
                    g.name, g.start
                )));
            }
            if groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::shape(format!("duplicate group name '{}'", g.name)));
            }
            cursor += g.len;
        }
        if cursor != values.len() {
            return Err(Error::shape(format!(
                "groups cover {cursor} entries, vector has {}",
                values.len()
            )));
        }
        Ok(Self { values, groups })
    }

    /// A vector with a single group spanning everything.
    pub fn flat(values: Vec<f64>) -> Self {
        let groups = vec![ParamGroup {
            name: "all".into(),
            start: 0,
            len: values.len(),
        }];
        Self { values, groups }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            groups: self.groups.clone(),
        }
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            groups: self.groups.clone(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .map(|g| &self.values[g.start..g.start + g.len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check_len(&self, other: &[f64], what: &str) -> Result<()> {
        if other.len() != self.values.len() {
            return Err(Error::shape(format!(
                "{what}: expected length {}, got {}",
                self.values.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Labelled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    inputs: Matrix,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.inputs.row(i), self.labels[i])
    }

    /// Rows picked by index, in the given order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Batch {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs: Matrix {
                rows: indices.len(),
                cols,
                data,
            },
            labels,
        }
    }

    /// Same inputs, replaced labels.
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Batch> {
        Batch::new(self.inputs.clone(), labels)
    }

    /// Concatenate batches of equal width.
    pub fn concat(batches: &[&Batch]) -> Result<Batch> {
        let cols = batches.first().map_or(0, |b| b.dim());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.dim() != cols {
                return Err(Error::shape("batch widths differ"));
            }
            data.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(&b.labels);
        }
        Batch::new(Matrix::new(labels.len(), cols, data)?, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// ELU with alpha = 1.
    Elu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Layer sizes `[D, H1, ..., HL, K]` plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl ModelShape {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let shape = Self { sizes, activation };
        shape.validate()?;
        Ok(shape)
    }

    /// The default `D -> H -> H -> K` ELU network.
    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            sizes: vec![input, hidden, hidden, classes],
            activation: Activation::Elu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::Config("model needs at least input and output sizes".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("validated shape")
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Sum over layers of `(fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let last = self.n_layers() - 1;
        let mut groups = Vec::with_capacity(2 * self.n_layers());
        let mut start = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let prefix = if l == last {
                "out".to_string()
            } else {
                format!("layer{}", l + 1)
            };
            let wlen = w[0] * w[1];
            groups.push(ParamGroup {
                name: format!("{prefix}.weight"),
                start,
                len: wlen,
            });
            start += wlen;
            groups.push(ParamGroup {
                name: format!("{prefix}.bias"),
                start,
                len: w[1],
            });
            start += w[1];
        }
        groups
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.n_layers());
        let mut start = 0;
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push((start, start + fan_in * fan_out, fan_in, fan_out));
            start += (fan_in + 1) * fan_out;
        }
        out
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(shape: &ModelShape, seed: u64) -> Result<ParamVector> {
    shape.validate()?;
    let mut rng = stream_rng(seed, "init");
    let mut values = vec![0.0; shape.param_count()];
    for (w_off, _, fan_in, fan_out) in shape.layout() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut values[w_off..w_off + fan_in * fan_out] {
            *v = rng.random_range(-limit..=limit);
        }
    }
    ParamVector::new(values, shape.groups())
}

/// Per-sample forward state kept for backprop.
struct Trace {
    /// `acts[0]` is the input, `acts[l]` the post-activation feeding layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer; the last one is the logits.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn logits(&self) -> &[f64] {
        self.pre.last().expect("non-empty network")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    shape: ModelShape,
    params: ParamVector,
}

impl ClassifierModel {
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        let params = init_params(&shape, seed)?;
        Ok(Self { shape, params })
    }

    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let params = ParamVector::new(vec![0.0; shape.param_count()], shape.groups())?;
        Ok(Self { shape, params })
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.param_count() {
            return Err(Error::shape(format!(
                "shape needs {} parameters, got {}",
                shape.param_count(),
                values.len()
            )));
        }
        let params = ParamVector::new(values, shape.groups())?;
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        self.params.check_len(values, "set_values")?;
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim() != self.shape.input_dim() {
            return Err(Error::shape(format!(
                "model expects {} inputs, batch has {}",
                self.shape.input_dim(),
                batch.dim()
            )));
        }
        let k = self.shape.classes();
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= k) {
            return Err(Error::shape(format!("label {bad} outside [0, {k})")));
        }
        Ok(())
    }

    fn check_nonempty(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        self.check_batch(batch)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let theta = self.params.values();
        let layout = self.shape.layout();
        let last = layout.len() - 1;
        let mut acts = Vec::with_capacity(layout.len());
        let mut pre = Vec::with_capacity(layout.len());
        acts.push(x.to_vec());
        for (l, &(w_off, b_off, fan_in, fan_out)) in layout.iter().enumerate() {
            let input = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|j| {
                    let row = &theta[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                    theta[b_off + j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            if l < last {
                acts.push(z.iter().map(|&v| self.shape.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        Trace { acts, pre }
    }

    /// Accumulate `scale * d(output)/d(theta)` into `grad`, given `d/d(logits)`.
    fn backprop(&self, trace: &Trace, dlogits: &[f64], scale: f64, grad: &mut [f64]) {
        let theta = self.params.values();
        let layout = self.shape.layout();
        let mut delta = dlogits.to_vec();
        for l in (0..layout.len()).rev() {
            let (w_off, b_off, fan_in, fan_out) = layout[l];
            let input = &trace.acts[l];
            for j in 0..fan_out {
                let dj = scale * delta[j];
                if dj != 0.0 {
                    let g = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                    for (gi, a) in g.iter_mut().zip(input) {
                        *gi += dj * a;
                    }
                }
                grad[b_off + j] += dj;
            }
            if l > 0 {
                let pre = &trace.pre[l - 1];
                let mut prev = vec![0.0; fan_in];
                for j in 0..fan_out {
                    let row = &theta[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * delta[j];
                    }
                }
                for (p, &z) in prev.iter_mut().zip(pre) {
                    *p *= self.shape.activation.derivative(z);
                }
                delta = prev;
            }
        }
    }

    /// Logits, one row per sample.
    pub fn forward(&self, batch: &Batch) -> Result<Matrix> {
        self.check_batch(batch)?;
        let k = self.shape.classes();
        let mut out = Matrix::zeros(batch.len(), k);
        for i in 0..batch.len() {
            let t = self.trace(batch.inputs().row(i));
            out.row_mut(i).copy_from_slice(t.logits());
        }
        Ok(out)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    /// Softmax probabilities per sample.
    pub fn predict_proba(&self, batch: &Batch) -> Result<Matrix> {
        let logits = self.forward(batch)?;
        let mut out = logits.clone();
        for i in 0..logits.rows() {
            out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
        }
        Ok(out)
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let pred = self.predict(batch)?;
        let hits = pred.iter().zip(batch.labels()).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Mean NLL over the batch and its gradient.
    pub fn nll_loss_and_grad(&self, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check_nonempty(batch)?;
        let n = batch.len() as f64;
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let (x, y) = batch.sample(i);
            let t = self.trace(x);
            let (l, d) = nll_and_dlogits(t.logits(), y);
            loss += l;
            self.backprop(&t, &d, 1.0 / n, grad.values_mut());
        }
        Ok((loss / n, grad))
    }

    /// Mean NLL only.
    pub fn nll_loss(&self, batch: &Batch) -> Result<f64> {
        self.check_nonempty(batch)?;
        let total: f64 = (0..batch.len())
            .map(|i| {
                let (x, y) = batch.sample(i);
                let t = self.trace(x);
                nll_and_dlogits(t.logits(), y).0
            })
            .sum();
        Ok(total / batch.len() as f64)
    }

    /// NLL gradient of every sample at its own label.
    pub fn per_sample_grads(&self, batch: &Batch) -> Result<Vec<ParamVector>> {
        self.check_nonempty(batch)?;
        Ok((0..batch.len())
            .map(|i| {
                let (x, y) = batch.sample(i);
                self.label_grad(x, y)
            })
            .collect())
    }

    /// NLL gradient of a single input for an arbitrary (e.g. imputed) label.
    pub fn label_grad(&self, x: &[f64], label: usize) -> ParamVector {
        let t = self.trace(x);
        let (_, d) = nll_and_dlogits(t.logits(), label);
        let mut g = self.params.zeros_like();
        self.backprop(&t, &d, 1.0, g.values_mut());
        g
    }

    /// NLL gradients of one input for every label, with the model's
    /// predictive probabilities.
    pub fn all_label_grads(&self, x: &[f64]) -> (Vec<f64>, Vec<ParamVector>) {
        let t = self.trace(x);
        let probs = softmax(t.logits());
        let grads = (0..probs.len())
            .map(|y| {
                let (_, d) = nll_and_dlogits(t.logits(), y);
                let mut g = self.params.zeros_like();
                self.backprop(&t, &d, 1.0, g.values_mut());
                g
            })
            .collect();
        (probs, grads)
    }

    /// Mean over samples of the gradient of `||logits||^2`.
    pub fn output_norm_grad(&self, batch: &Batch) -> Result<ParamVector> {
        self.check_nonempty(batch)?;
        let n = batch.len() as f64;
        let mut grad = self.params.zeros_like();
        for i in 0..batch.len() {
            let t = self.trace(batch.inputs().row(i));
            let d: Vec<f64> = t.logits().iter().map(|z| 2.0 * z).collect();
            self.backprop(&t, &d, 1.0 / n, grad.values_mut());
        }
        Ok(grad)
    }

    /// Gradient of `||logits||^2` per sample, labels unused.
    pub fn per_sample_output_norm_grads(&self, batch: &Batch) -> Result<Vec<ParamVector>> {
        self.check_nonempty(batch)?;
        Ok((0..batch.len())
            .map(|i| {
                let t = self.trace(batch.inputs().row(i));
                let d: Vec<f64> = t.logits().iter().map(|z| 2.0 * z).collect();
                let mut g = self.params.zeros_like();
                self.backprop(&t, &d, 1.0, g.values_mut());
                g
            })
            .collect())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `(-log softmax(z)[y], softmax(z) - onehot(y))`.
fn nll_and_dlogits(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    // ln(sum_j exp(z_j)) - z_label with the largest term split out, so that
    // confident predictions keep full relative precision.
    let top = argmax(logits);
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, z)| (z - logits[top]).exp())
        .sum();
    let loss = (logits[top] - logits[label]) + rest.ln_1p();
    let mut d = softmax(logits);
    d[label] -= 1.0;
    (loss, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(rows: &[Vec<f64>], labels: &[usize]) -> Batch {
        Batch::new(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn group_layout_covers_vector() {
        let shape = ModelShape::mlp(4, 3, 2);
        let groups = shape.groups();
        let names: Vec<_> = groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "layer1.weight",
                "layer1.bias",
                "layer2.weight",
                "layer2.bias",
                "out.weight",
                "out.bias"
            ]
        );
        assert_eq!(shape.param_count(), 5 * 3 + 4 * 3 + 4 * 2);
        let total: usize = groups.iter().map(|g| g.len).sum();
        assert_eq!(total, shape.param_count());
    }

    #[test]
    fn param_vector_rejects_bad_groups() {
        let g = |name: &str, start, len| ParamGroup {
            name: name.into(),
            start,
            len,
        };
        assert!(ParamVector::new(vec![0.0; 3], vec![g("a", 0, 2), g("b", 2, 1)]).is_ok());
        assert!(ParamVector::new(vec![0.0; 3], vec![g("a", 0, 2), g("a", 2, 1)]).is_err());
        assert!(ParamVector::new(vec![0.0; 3], vec![g("a", 0, 1), g("b", 2, 1)]).is_err());
        assert!(ParamVector::new(vec![0.0; 3], vec![g("a", 0, 2)]).is_err());
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let model = ClassifierModel::zeros(ModelShape::mlp(3, 4, 5)).unwrap();
        let b = batch(&[vec![1.0, -2.0, 0.5], vec![9.0, 9.0, 9.0]], &[0, 1]);
        let logits = model.forward(&b).unwrap();
        assert!(logits.data().iter().all(|&z| z == 0.0));
        let p = model.predict_proba(&b).unwrap();
        for &v in p.data() {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn identity_linear_model() {
        let shape = ModelShape::new(vec![2, 2], Activation::Elu).unwrap();
        let model = ClassifierModel::from_values(shape, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let logits = model.forward(&batch(&[vec![3.0, -2.0]], &[0])).unwrap();
        assert_eq!(logits.row(0), &[3.0, -2.0]);
    }

    #[test]
    fn hand_evaluated_two_layer_tanh() {
        // W1 = [[0.5, -1], [2, 0.25]], b1 = [0.1, -0.3]
        // W2 = [[1, -1], [0.5, 2], [-2, 1]], b2 = [0, 0.2, -0.1]
        let shape = ModelShape::new(vec![2, 2, 3], Activation::Tanh).unwrap();
        let values = vec![
            0.5, -1.0, 2.0, 0.25, 0.1, -0.3, 1.0, -1.0, 0.5, 2.0, -2.0, 1.0, 0.0, 0.2, -0.1,
        ];
        let model = ClassifierModel::from_values(shape, values).unwrap();
        let logits = model.forward(&batch(&[vec![1.0, 1.0]], &[0])).unwrap();
        // hidden pre-activations: 0.5 - 1 + 0.1 = -0.4 ; 2 + 0.25 - 0.3 = 1.95
        let h0 = (-0.4f64).tanh();
        let h1 = 1.95f64.tanh();
        let expected = [h0 - h1, 0.5 * h0 + 2.0 * h1 + 0.2, -2.0 * h0 + h1 - 0.1];
        for (a, b) in logits.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = ClassifierModel::zeros(ModelShape::mlp(3, 2, 2)).unwrap();
        let err = model.forward(&batch(&[vec![1.0, 2.0]], &[0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn uniform_logits_loss_is_log_k() {
        let model = ClassifierModel::zeros(ModelShape::mlp(2, 3, 4)).unwrap();
        let (loss, _) = model.nll_loss_and_grad(&batch(&[vec![0.3, 0.1]], &[2])).unwrap();
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn confident_sample_has_tiny_loss() {
        // One linear layer whose logits are [10, -10] for input [1].
        let shape = ModelShape::new(vec![1, 2], Activation::Elu).unwrap();
        let model = ClassifierModel::from_values(shape, vec![10.0, -10.0, 0.0, 0.0]).unwrap();
        let (loss, grad) = model.nll_loss_and_grad(&batch(&[vec![1.0]], &[0])).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-20);
        assert!((loss - 2.06e-9).abs() < 1e-11);
        assert!(grad.group("out.weight").unwrap()[0].abs() < 1e-8);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let model = ClassifierModel::zeros(ModelShape::mlp(2, 2, 2)).unwrap();
        let empty = Batch::new(Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(matches!(model.nll_loss_and_grad(&empty), Err(Error::Empty(_))));
        assert!(model.per_sample_grads(&empty).is_err());
        assert!(model.output_norm_grad(&empty).is_err());
    }

    #[test]
    fn single_sample_grad_equals_batch_grad() {
        let model = ClassifierModel::new(ModelShape::mlp(3, 4, 3), 11).unwrap();
        let b = batch(&[vec![0.2, -1.0, 0.7]], &[1]);
        let (_, g) = model.nll_loss_and_grad(&b).unwrap();
        let per = model.per_sample_grads(&b).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(per[0], g);
    }

    #[test]
    fn identical_samples_identical_grads() {
        let model = ClassifierModel::new(ModelShape::mlp(3, 4, 3), 5).unwrap();
        let b = batch(&[vec![0.2, -1.0, 0.7], vec![0.2, -1.0, 0.7]], &[2, 2]);
        let per = model.per_sample_grads(&b).unwrap();
        assert_eq!(per[0], per[1]);
    }

    #[test]
    fn scalar_output_norm_grad() {
        let shape = ModelShape::new(vec![1, 1], Activation::Elu).unwrap();
        let model = ClassifierModel::from_values(shape, vec![2.0, 0.0]).unwrap();
        let g = model.output_norm_grad(&batch(&[vec![3.0]], &[0])).unwrap();
        assert_abs_diff_eq!(g.values()[0], 36.0, epsilon = 1e-12);
        // bias: d(z^2)/db = 2z = 12
        assert_abs_diff_eq!(g.values()[1], 12.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_model_output_norm_grad_is_zero() {
        let model = ClassifierModel::zeros(ModelShape::mlp(3, 4, 2)).unwrap();
        let g = model.output_norm_grad(&batch(&[vec![1.0, 2.0, 3.0]], &[0])).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_glorot() {
        let shape = ModelShape::mlp(16, 32, 4);
        let a = init_params(&shape, 42).unwrap();
        let b = init_params(&shape, 42).unwrap();
        let c = init_params(&shape, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for g in a.groups() {
            let vals = a.group(&g.name).unwrap();
            if g.name.ends_with(".bias") {
                assert!(vals.iter().all(|&v| v == 0.0));
            }
        }
        let limit = (6.0f64 / (16.0 + 32.0)).sqrt();
        assert!(a.group("layer1.weight").unwrap().iter().all(|v| v.abs() <= limit));
    }
}
