//! Shared oracles for the integration suites: a Jacobi eigensolver (kept
//! independent of the Chebyshev implementation path it checks) and central
//! finite-difference gradient helpers.

#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use stgnn_core::autodiff::{ParamId, Tape};
use stgnn_core::data::WindowSample;
use stgnn_core::model::{Forecaster, Mode};
use stgnn_core::tensor::Tensor;
use stgnn_core::train::{compute_loss, LossWeights};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: returns the
/// eigenvalues and the matrix of eigenvectors as columns, `A = V diag(l) V^T`.
pub fn jacobi_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "jacobi needs a square matrix");
    let mut m = a.clone();
    let mut v = Tensor::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m.at(p, q) * m.at(p, q);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    (eigenvalues, v)
}

/// Apply the spectral filter `U g(L) U^T x` through an explicit
/// eigendecomposition, with `g` given pointwise on the eigenvalues.
pub fn eigen_filter(matrix: &Tensor, x: &Tensor, g: impl Fn(f64) -> f64) -> Tensor {
    let (eigenvalues, v) = jacobi_eigen(matrix);
    let vt = v.transpose();
    let projected = vt.matmul(x).expect("eigen filter projection");
    let mut scaled = projected.clone();
    for (i, &lambda) in eigenvalues.iter().enumerate() {
        let gain = g(lambda);
        for j in 0..scaled.cols() {
            scaled.set(i, j, projected.at(i, j) * gain);
        }
    }
    v.matmul(&scaled).expect("eigen filter reconstruction")
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Training-mode loss of a forecaster on one window with a fixed dropout
/// seed, as a pure function of the parameters.
pub fn model_loss<M: Forecaster>(
    model: &M,
    sample: &WindowSample,
    weights: &LossWeights,
    dropout_seed: u64,
) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut tape = Tape::new();
    let vars = model
        .forward_vars(&mut tape, sample, Mode::Train, &mut rng)
        .expect("forward");
    let loss = compute_loss(&mut tape, vars.forecast, vars.backcast, sample, weights)
        .expect("loss");
    tape.value(loss).scalar_value()
}

/// Central finite difference of the model loss with respect to one parameter
/// element.
pub fn central_diff<M: Forecaster + Clone>(
    model: &M,
    id: ParamId,
    k: usize,
    eps: f64,
    sample: &WindowSample,
    weights: &LossWeights,
    dropout_seed: u64,
) -> f64 {
    let mut plus = model.clone();
    plus.store_mut().get_mut(id).data_mut()[k] += eps;
    let lp = model_loss(&plus, sample, weights, dropout_seed);
    let mut minus = model.clone();
    minus.store_mut().get_mut(id).data_mut()[k] -= eps;
    let lm = model_loss(&minus, sample, weights, dropout_seed);
    (lp - lm) / (2.0 * eps)
}

/// Analytic gradients of the model loss for every parameter.
pub fn analytic_gradients<M: Forecaster>(
    model: &M,
    sample: &WindowSample,
    weights: &LossWeights,
    dropout_seed: u64,
) -> stgnn_core::autodiff::Gradients {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut tape = Tape::new();
    let vars = model
        .forward_vars(&mut tape, sample, Mode::Train, &mut rng)
        .expect("forward");
    let loss = compute_loss(&mut tape, vars.forecast, vars.backcast, sample, weights)
        .expect("loss");
    tape.backward(loss).expect("backward");
    tape.param_gradients(model.store())
}

/// Deterministic pseudo-random symmetric attention-like matrix with positive
/// entries and unit row sums.
pub fn random_attention(n: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.5..1.5));
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| logits.at(i, j).exp()).collect();
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            out.set(i, j, row[j] / sum);
        }
    }
    out
}
