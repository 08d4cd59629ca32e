//! Datasets: the Two Moons generator and a CSV loader.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One example per row.
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Scalar centering applied by [`normalize_center`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    /// Converts a radius given in raw input units to normalized units.
    pub fn scale_radius(&self, delta: f64) -> f64 {
        delta / self.std
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.map(|v| (v - self.mean) / self.std)
    }
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Dimension { expected: inputs.rows(), actual: labels.len(), context: "label count" });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset { inputs, labels, num_classes })
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

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Matrix::from_vec(idx.len(), d, data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Two interleaving half circles. The first `⌈n/2⌉` points lie on the upper
/// arc `(cos t, sin t)` with label 0, the rest on the lower arc
/// `(1 − cos t, 0.5 − sin t)` with label 1; `t ~ U[0, π]`, then isotropic
/// Gaussian noise with standard deviation `noise_std`.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("two_moons needs n >= 2".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    let upper = n.div_ceil(2);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.uniform_in(0.0, std::f64::consts::PI);
        let (x, y, label) = if i < upper { (t.cos(), t.sin(), 0) } else { (1.0 - t.cos(), 0.5 - t.sin(), 1) };
        data.push(x + noise_std * rng.normal());
        data.push(y + noise_std * rng.normal());
        labels.push(label);
    }
    Dataset::new(Matrix::from_vec(n, 2, data), labels, 2)
}

/// Reads `d` feature columns followed by an integer label column. A first
/// row whose fields are not all numeric is taken as a header. The class
/// count is one more than the largest label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let perr = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(idx + 1, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let is_header = idx == 0 && record.iter().any(|f| f.parse::<f64>().is_err());
        if is_header {
            continue;
        }
        if record.len() < 2 {
            return Err(perr(line, "need at least one feature and a label".into()));
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => return Err(perr(line, format!("expected {} columns, found {}", w + 1, d + 1))),
            _ => {}
        }
        for field in record.iter().take(d) {
            let v = field.parse::<f64>().map_err(|_| perr(line, format!("bad feature value `{field}`")))?;
            if !v.is_finite() {
                return Err(perr(line, format!("non-finite feature value `{field}`")));
            }
            data.push(v);
        }
        let label_field = &record[d];
        let label = label_field.parse::<usize>().map_err(|_| perr(line, format!("label `{label_field}` is not a non-negative integer")))?;
        labels.push(label);
    }
    let Some(d) = width else {
        return Err(perr(1, "no data rows".into()));
    };
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Matrix::from_vec(labels.len(), d, data), labels, k)
}

/// Subtracts the global mean and divides by the global standard deviation
/// (floored at 1e-12).
pub fn normalize_center(ds: &Dataset) -> (Dataset, Normalization) {
    let n = ds.inputs.len() as f64;
    let mean = ds.inputs.sum() / n;
    let var = ds.inputs.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let norm = Normalization { mean, std: var.sqrt().max(1e-12) };
    let out = Dataset { inputs: norm.apply(&ds.inputs), labels: ds.labels.clone(), num_classes: ds.num_classes };
    (out, norm)
}
