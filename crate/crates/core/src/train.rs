//! Training: the forecast + reconstruction objective, Adam, mini-batch
//! gradient descent with early stopping on validation NMSE, and test-set
//! evaluation.
//!
//! Batches are evaluated window-parallel with one tape per window; gradients
//! are reduced in window order, so results are bit-identical regardless of
//! the worker count.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::data::{
    make_window, split, NormalizationStats, SplitRanges, TimeSeriesFrame, WindowSample,
    WindowSpec,
};
use crate::error::{CoreError, Result};
use crate::metrics::{nmse, per_node_nmse};
use crate::model::{Forecaster, Mode};
use crate::tensor::Tensor;

/// Weights of the forecast and (optional) reconstruction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_f: 1.0,
            lambda_r: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_f <= 0.0 || self.lambda_r < 0.0 {
            return Err(CoreError::Config(
                "loss weights need lambda_f > 0 and lambda_r >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `lambda_f ||forecast - target_f||_F^2 + lambda_r ||backcast - target_b||_F^2`.
/// The reconstruction term is skipped when `lambda_r` is zero or the model
/// has no backcast branch.
pub fn compute_loss(
    tape: &mut Tape,
    forecast: Var,
    backcast: Option<Var>,
    sample: &WindowSample,
    weights: &LossWeights,
) -> Result<Var> {
    let target_f = tape.constant(sample.target_forecast.clone());
    let err_f = tape.sub(forecast, target_f)?;
    let sq_f = tape.sum_squares(err_f);
    let mut loss = tape.scale(sq_f, weights.lambda_f);
    if weights.lambda_r > 0.0 {
        if let Some(backcast) = backcast {
            let target_b = tape.constant(sample.target_backcast.clone());
            let err_b = tape.sub(backcast, target_b)?;
            let sq_b = tape.sum_squares(err_b);
            let scaled = tape.scale(sq_b, weights.lambda_r);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// Adam optimizer state aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update over every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let id = crate::autodiff::ParamId::from_index(idx);
            let p = store.get_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                p.data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Cap on shuffled batches consumed per epoch (subsampling for large
    /// datasets); `None` uses every training window each epoch.
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on validation windows scored per epoch (evenly strided).
    pub val_max_windows: Option<usize>,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            grad_clip: Some(5.0),
            max_batches_per_epoch: None,
            val_max_windows: None,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Normalized frame plus split bookkeeping; the normalizer is fitted on the
/// training range only.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub frame: TimeSeriesFrame,
    pub stats: NormalizationStats,
    pub splits: SplitRanges,
    pub window: WindowSpec,
}

impl Datasets {
    pub fn prepare(
        raw: &TimeSeriesFrame,
        ratios: (f64, f64, f64),
        window: WindowSpec,
    ) -> Result<Self> {
        let splits = split(raw.len(), ratios)?;
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(CoreError::Config(
                "training requires non-empty train and validation splits".into(),
            ));
        }
        splits.validate_for_windows(window.w, window.h)?;
        let stats = NormalizationStats::fit(raw, &splits.train)?;
        let frame = stats.apply(raw)?;
        Ok(Datasets {
            frame,
            stats,
            splits,
            window,
        })
    }

    /// Rebuild with normalization statistics carried over from a checkpoint.
    pub fn with_stats(
        raw: &TimeSeriesFrame,
        ratios: (f64, f64, f64),
        window: WindowSpec,
        stats: NormalizationStats,
    ) -> Result<Self> {
        let splits = split(raw.len(), ratios)?;
        let frame = stats.apply(raw)?;
        Ok(Datasets {
            frame,
            stats,
            splits,
            window,
        })
    }

    fn anchors_in(&self, range: &Range<usize>) -> Vec<usize> {
        crate::data::window_anchors(range, self.window.w, self.window.h)
    }

    pub fn train_anchors(&self) -> Vec<usize> {
        self.anchors_in(&self.splits.train)
    }

    pub fn val_anchors(&self) -> Vec<usize> {
        self.anchors_in(&self.splits.val)
    }

    pub fn test_anchors(&self) -> Vec<usize> {
        self.anchors_in(&self.splits.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub test_nmse: f64,
    pub per_node_test_nmse: Vec<f64>,
    pub wall_clock_seconds: f64,
    pub seed: u64,
}

/// Evaluation over a set of anchors.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub nmse: f64,
    pub per_node: Vec<f64>,
    /// Mean attention matrix across the evaluated windows, when the model
    /// exposes one.
    pub avg_attention: Option<Tensor>,
}

fn mix_seed(seed: u64, epoch: u64, anchor: u64) -> u64 {
    // splitmix64 over the packed inputs; stable across runs and platforms.
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(epoch.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(anchor.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Forward/backward one window on a fresh tape.
fn window_gradients<M: Forecaster>(
    model: &M,
    data: &Datasets,
    anchor: usize,
    weights: &LossWeights,
    dropout_seed: u64,
) -> Result<(f64, Gradients)> {
    let sample = make_window(&data.frame, anchor, &data.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut tape = Tape::new();
    let vars = model.forward_vars(&mut tape, &sample, Mode::Train, &mut rng)?;
    let loss = compute_loss(&mut tape, vars.forecast, vars.backcast, &sample, weights)?;
    let loss_val = tape.value(loss).scalar_value();
    if !loss_val.is_finite() {
        let culprit = tape
            .first_non_finite()
            .map(|(i, op)| format!("{op} (tape node {i})"))
            .unwrap_or_else(|| "loss".into());
        return Err(CoreError::NonFinite(format!(
            "non-finite loss at window anchor {anchor}; first non-finite tensor: {culprit}"
        )));
    }
    tape.backward(loss)?;
    Ok((loss_val, tape.param_gradients(model.store())))
}

/// Mean loss and mean gradients over one batch of anchors. Workers run in
/// parallel; the reduction folds in anchor order.
fn batch_step<M: Forecaster>(
    model: &M,
    data: &Datasets,
    anchors: &[usize],
    weights: &LossWeights,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    let per_window: Vec<(f64, Gradients)> = anchors
        .par_iter()
        .map(|&a| window_gradients(model, data, a, weights, mix_seed(seed, epoch as u64, a as u64)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(model.store());
    for (l, g) in &per_window {
        loss += l;
        grads.add_assign(g);
    }
    grads.scale(scale);
    Ok((loss * scale, grads))
}

/// Forecast NMSE (plus optional averaged attention) over the given anchors.
pub fn evaluate<M: Forecaster>(
    model: &M,
    data: &Datasets,
    anchors: &[usize],
    want_attention: bool,
) -> Result<EvalResult> {
    if anchors.is_empty() {
        return Err(CoreError::Config("evaluation over zero windows".into()));
    }
    struct WindowEval {
        forecast: Tensor,
        truth: Tensor,
        attention: Option<Tensor>,
    }
    let evals: Vec<WindowEval> = anchors
        .par_iter()
        .map(|&a| -> Result<WindowEval> {
            let sample = make_window(&data.frame, a, &data.window)?;
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let vars = model.forward_vars(&mut tape, &sample, Mode::Eval, &mut rng)?;
            Ok(WindowEval {
                forecast: tape.value(vars.forecast).clone(),
                truth: sample.target_forecast,
                attention: if want_attention {
                    vars.graph.map(|g| tape.value(g.attention).clone())
                } else {
                    None
                },
            })
        })
        .collect::<Result<_>>()?;

    let h = evals[0].forecast.rows();
    let e = evals[0].forecast.cols();
    let rows = anchors.len() * h;
    let mut pred = Tensor::zeros(&[rows, e]);
    let mut truth = Tensor::zeros(&[rows, e]);
    let mut attention_sum: Option<Tensor> = None;
    for (k, ev) in evals.iter().enumerate() {
        for r in 0..h {
            for j in 0..e {
                pred.set(k * h + r, j, ev.forecast.at(r, j));
                truth.set(k * h + r, j, ev.truth.at(r, j));
            }
        }
        if let Some(att) = &ev.attention {
            match &mut attention_sum {
                None => attention_sum = Some(att.clone()),
                Some(acc) => acc.axpy(1.0, att),
            }
        }
    }
    Ok(EvalResult {
        nmse: nmse(&pred, &truth)?,
        per_node: per_node_nmse(&pred, &truth)?,
        avg_attention: attention_sum.map(|t| t.scale(1.0 / anchors.len() as f64)),
    })
}

fn strided_subset(anchors: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if anchors.len() > cap && cap > 0 => {
            let stride = anchors.len() as f64 / cap as f64;
            (0..cap)
                .map(|k| anchors[(k as f64 * stride) as usize])
                .collect()
        }
        _ => anchors.to_vec(),
    }
}

/// Mini-batch training with early stopping on validation NMSE. The model is
/// left holding the best-validation parameters; the returned report carries
/// the loss curve and test metrics. Deterministic given the seed.
pub fn train_loop<M: Forecaster>(
    model: &mut M,
    data: &Datasets,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    let started = Instant::now();
    let train_anchors = data.train_anchors();
    if train_anchors.is_empty() {
        return Err(CoreError::Config("no training windows".into()));
    }
    let val_anchors = data.val_anchors();
    if val_anchors.is_empty() {
        return Err(CoreError::Config("no validation windows".into()));
    }
    let val_subset = strided_subset(&val_anchors, cfg.val_max_windows);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(model.store(), cfg.lr);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_improve = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_anchors.clone();
        order.shuffle(&mut shuffle_rng);
        let batch_count = order.len().div_ceil(cfg.batch_size);
        let used = cfg
            .max_batches_per_epoch
            .map_or(batch_count, |cap| batch_count.min(cap));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size).take(used) {
            let (loss, mut grads) = batch_step(model, data, batch, &cfg.loss, cfg.seed, epoch)?;
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            optimizer.step(model.store_mut(), &grads);
            epoch_loss += loss;
        }
        epoch_loss /= used as f64;

        let val = evaluate(model, data, &val_subset, false)?;
        epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_nmse: val.nmse,
        });

        let improved = best.as_ref().map_or(true, |(_, b, _)| val.nmse < *b);
        if improved {
            best = Some((epoch, val.nmse, model.store().snapshot()));
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve > cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_nmse, snapshot) = best.expect("at least one epoch ran");
    model.store_mut().restore(&snapshot);

    let test_anchors = data.test_anchors();
    let (test_nmse, per_node) = if test_anchors.is_empty() {
        (f64::NAN, Vec::new())
    } else {
        let test = evaluate(model, data, &test_anchors, false)?;
        (test.nmse, test.per_node)
    };

    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_nmse,
        test_nmse,
        per_node_test_nmse: per_node,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}
