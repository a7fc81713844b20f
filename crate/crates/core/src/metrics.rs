//! Evaluation metrics. NMSE is plain mean squared error computed in min-max
//! normalized space, overall or per target channel.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Mean squared error over all entries.
pub fn nmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(CoreError::Shape(format!(
            "nmse shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(CoreError::Config("nmse of empty tensors".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean squared error per column.
pub fn per_node_nmse(pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(CoreError::Shape(format!(
            "per-node nmse shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (m, n) = (pred.rows(), pred.cols());
    if m == 0 || n == 0 {
        return Err(CoreError::Config("per-node nmse of empty tensors".into()));
    }
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let d = pred.at(i, j) - truth.at(i, j);
            out[j] += d * d;
        }
    }
    for v in &mut out {
        *v /= m as f64;
    }
    Ok(out)
}

/// Relative improvement of model 2 over model 1: `(m1 - m2) / m1`.
pub fn relative_improvement(nmse_m1: f64, nmse_m2: f64) -> f64 {
    (nmse_m1 - nmse_m2) / nmse_m1
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::Config(
            "pearson needs two equal-length non-empty samples".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()).max(1e-300))
}
