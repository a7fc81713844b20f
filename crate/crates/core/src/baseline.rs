//! Comparison baselines: a per-target linear regression on the flattened
//! window (with mean/trend features) solved by normal equations, and an MLP
//! trained with the same loop and loss as the graph model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::{make_window, WindowSample};
use crate::error::{CoreError, Result};
use crate::init;
use crate::metrics::{nmse, per_node_nmse};
use crate::model::{Forecaster, ForwardVars, Mode};
use crate::tensor::Tensor;
use crate::train::Datasets;

/// Ridge fallback when the normal equations are singular.
const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub nmse: f64,
    pub per_node: Vec<f64>,
}

/// Feature vector for the linear baseline: the flattened window, each
/// column's mean and linear trend slope, and an intercept.
pub fn window_features(sample: &WindowSample) -> Vec<f64> {
    let (w, c) = (sample.input.rows(), sample.input.cols());
    let mut out = Vec::with_capacity(w * c + 2 * c + 1);
    out.extend_from_slice(sample.input.data());
    let t_mean = (w as f64 - 1.0) / 2.0;
    let t_var: f64 = (0..w).map(|t| (t as f64 - t_mean).powi(2)).sum();
    for j in 0..c {
        let mean: f64 = (0..w).map(|t| sample.input.at(t, j)).sum::<f64>() / w as f64;
        let slope: f64 = if w > 1 {
            (0..w)
                .map(|t| (t as f64 - t_mean) * (sample.input.at(t, j) - mean))
                .sum::<f64>()
                / t_var
        } else {
            0.0
        };
        out.push(mean);
        out.push(slope);
    }
    out.push(1.0);
    out
}

/// In-place Cholesky solve of `A x = b` for several right-hand sides.
/// `a` is symmetric positive definite, row-major n x n; `b` is n x k.
fn cholesky_solve(a: &mut Tensor, b: &mut Tensor) -> Result<()> {
    let n = a.rows();
    let k = b.cols();
    // Factor A = L L^T, storing L in the lower triangle.
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for p in 0..j {
                s -= a.at(i, p) * a.at(j, p);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(CoreError::NonFinite(format!(
                        "normal equations not positive definite at pivot {i}"
                    )));
                }
                a.set(i, j, s.sqrt());
            } else {
                a.set(i, j, s / a.at(j, j));
            }
        }
    }
    // Forward then backward substitution per column.
    for col in 0..k {
        for i in 0..n {
            let mut s = b.at(i, col);
            for p in 0..i {
                s -= a.at(i, p) * b.at(p, col);
            }
            b.set(i, col, s / a.at(i, i));
        }
        for i in (0..n).rev() {
            let mut s = b.at(i, col);
            for p in i + 1..n {
                s -= a.at(p, i) * b.at(p, col);
            }
            b.set(i, col, s / a.at(i, i));
        }
    }
    Ok(())
}

/// Solve `X beta = y` for several targets via normal equations; retries with
/// a small ridge term when the plain system is singular.
pub fn solve_least_squares(xtx: &Tensor, xty: &Tensor) -> Result<Tensor> {
    let mut a = xtx.clone();
    let mut b = xty.clone();
    match cholesky_solve(&mut a, &mut b) {
        Ok(()) => Ok(b),
        Err(_) => {
            let mut a = xtx.clone();
            for i in 0..a.rows() {
                let v = a.at(i, i) + RIDGE_LAMBDA;
                a.set(i, i, v);
            }
            let mut b = xty.clone();
            cholesky_solve(&mut a, &mut b)?;
            Ok(b)
        }
    }
}

/// Per-target least squares on the flattened window, evaluated by NMSE on
/// the test split. Horizon steps are treated as extra targets.
pub fn linear_baseline(data: &Datasets) -> Result<BaselineResult> {
    let train = data.train_anchors();
    let test = data.test_anchors();
    if train.is_empty() || test.is_empty() {
        return Err(CoreError::Config(
            "linear baseline needs non-empty train and test splits".into(),
        ));
    }
    let probe = make_window(&data.frame, train[0], &data.window)?;
    let dim = window_features(&probe).len();
    let h = probe.target_forecast.rows();
    let e = probe.target_forecast.cols();
    let targets = h * e;

    let mut xtx = Tensor::zeros(&[dim, dim]);
    let mut xty = Tensor::zeros(&[dim, targets]);
    for chunk in train.chunks(256) {
        let feats: Vec<(Vec<f64>, Tensor)> = chunk
            .par_iter()
            .map(|&a| {
                let s = make_window(&data.frame, a, &data.window)?;
                Ok((window_features(&s), s.target_forecast))
            })
            .collect::<Result<_>>()?;
        let mut x = Tensor::zeros(&[feats.len(), dim]);
        let mut y = Tensor::zeros(&[feats.len(), targets]);
        for (r, (f, t)) in feats.iter().enumerate() {
            x.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(f);
            y.data_mut()[r * targets..(r + 1) * targets].copy_from_slice(t.data());
        }
        crate::tensor::acc_tn(&x, &x, &mut xtx);
        crate::tensor::acc_tn(&x, &y, &mut xty);
    }
    let beta = solve_least_squares(&xtx, &xty)?;

    let rows = test.len() * h;
    let mut pred = Tensor::zeros(&[rows, e]);
    let mut truth = Tensor::zeros(&[rows, e]);
    for (k, &a) in test.iter().enumerate() {
        let s = make_window(&data.frame, a, &data.window)?;
        let f = window_features(&s);
        let x = Tensor::new(vec![1, dim], f)?;
        let yhat = x.matmul(&beta)?;
        for r in 0..h {
            for j in 0..e {
                pred.set(k * h + r, j, yhat.data()[r * e + j]);
                truth.set(k * h + r, j, s.target_forecast.at(r, j));
            }
        }
    }
    Ok(BaselineResult {
        nmse: nmse(&pred, &truth)?,
        per_node: per_node_nmse(&pred, &truth)?,
    })
}

/// Fully connected forecaster on the flattened window; trained with the same
/// loop and loss as the graph model, with no backcast branch and no graph.
#[derive(Debug, Clone)]
pub struct MlpModel {
    pub input_dim: usize,
    pub h: usize,
    pub e: usize,
    pub leaky_slope: f64,
    store: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl MlpModel {
    /// `hidden` lists the hidden layer widths; empty gives a single linear
    /// map, which nests the linear baseline.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        h: usize,
        e: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || h == 0 || e == 0 {
            return Err(CoreError::Config("MLP dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for (k, &width) in hidden.iter().enumerate() {
            let w = store.register(
                format!("mlp.l{k}.w"),
                init::fan_in_uniform(&mut rng, &[prev, width], prev),
            );
            let b = store.register(format!("mlp.l{k}.b"), init::zeros(&[width]));
            layers.push((w, b));
            prev = width;
        }
        let w = store.register(
            "mlp.out.w",
            init::fan_in_uniform(&mut rng, &[prev, h * e], prev),
        );
        let b = store.register("mlp.out.b", init::zeros(&[h * e]));
        layers.push((w, b));
        Ok(MlpModel {
            input_dim,
            h,
            e,
            leaky_slope: 0.2,
            store,
            layers,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.total_scalars()
    }

    fn forward(&self, tape: &mut Tape, sample: &WindowSample) -> Result<Var> {
        let flat = sample.input.reshaped(vec![1, sample.input.len()])?;
        if flat.cols() != self.input_dim {
            return Err(CoreError::Shape(format!(
                "MLP expects {} inputs, window has {}",
                self.input_dim,
                flat.cols()
            )));
        }
        let mut x = tape.constant(flat);
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(&self.store, w);
            let bv = tape.param(&self.store, b);
            x = tape.matmul(x, wv)?;
            x = tape.add_row_broadcast(x, bv)?;
            if k < last {
                x = tape.leaky_relu(x, self.leaky_slope);
            }
        }
        tape.reshape(x, vec![self.h, self.e])
    }
}

impl Forecaster for MlpModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_vars(
        &self,
        tape: &mut Tape,
        sample: &WindowSample,
        _mode: Mode,
        _rng: &mut ChaCha8Rng,
    ) -> Result<ForwardVars> {
        Ok(ForwardVars {
            forecast: self.forward(tape, sample)?,
            backcast: None,
            graph: None,
        })
    }
}
