//! Attention-based graph structure learning.
//!
//! Each input window is embedded per node by a shared GRU; query/key
//! projections of the embeddings give self-attention scores, which are
//! symmetrized into an adjacency matrix and turned into the normalized and
//! scaled Laplacians consumed by the spectral filter. One graph is learned
//! per window, recomputed on every forward pass.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::init;
use crate::tensor::Tensor;

/// Guard for zero degrees introduced by symmetrization arithmetic.
const DEGREE_FLOOR: f64 = 1e-12;
/// Power-iteration settings for the dominant Laplacian eigenvalue.
const POWER_ITERATIONS: usize = 20;
const POWER_TOLERANCE: f64 = 1e-6;
const LAMBDA_FLOOR: f64 = 1e-6;
/// Theoretical spectral bound of the symmetrically normalized Laplacian,
/// also the fallback when power iteration does not converge.
const LAMBDA_FALLBACK: f64 = 2.0;

/// Trainable graph-learning parameters: a GRU shared across nodes plus the
/// query/key projections.
#[derive(Debug, Clone)]
pub struct GraphLearnerParams {
    pub input_dim: usize,
    pub embed_dim: usize,
    // GRU gate weights: reset r, update z, candidate n.
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub b_r: ParamId,
    pub w_xz: ParamId,
    pub w_hz: ParamId,
    pub b_z: ParamId,
    pub w_xn: ParamId,
    pub w_hn: ParamId,
    pub b_n: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
}

impl GraphLearnerParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let x_shape = [input_dim, embed_dim];
        let h_shape = [embed_dim, embed_dim];
        let mut mat = |shape: &[usize], fan_in: usize| init::fan_in_uniform(rng, shape, fan_in);
        GraphLearnerParams {
            input_dim,
            embed_dim,
            w_xr: store.register(format!("{prefix}.gru.w_xr"), mat(&x_shape, input_dim)),
            w_hr: store.register(format!("{prefix}.gru.w_hr"), mat(&h_shape, embed_dim)),
            b_r: store.register(format!("{prefix}.gru.b_r"), init::zeros(&[embed_dim])),
            w_xz: store.register(format!("{prefix}.gru.w_xz"), mat(&x_shape, input_dim)),
            w_hz: store.register(format!("{prefix}.gru.w_hz"), mat(&h_shape, embed_dim)),
            b_z: store.register(format!("{prefix}.gru.b_z"), init::zeros(&[embed_dim])),
            w_xn: store.register(format!("{prefix}.gru.w_xn"), mat(&x_shape, input_dim)),
            w_hn: store.register(format!("{prefix}.gru.w_hn"), mat(&h_shape, embed_dim)),
            b_n: store.register(format!("{prefix}.gru.b_n"), init::zeros(&[embed_dim])),
            w_query: store.register(format!("{prefix}.w_query"), mat(&h_shape, embed_dim)),
            w_key: store.register(format!("{prefix}.w_key"), mat(&h_shape, embed_dim)),
        }
    }
}

/// GRU parameters leased onto one tape.
struct LeasedGru {
    w_xr: Var,
    w_hr: Var,
    b_r: Var,
    w_xz: Var,
    w_hz: Var,
    b_z: Var,
    w_xn: Var,
    w_hn: Var,
    b_n: Var,
}

/// Run the shared GRU over each node's window and return the final hidden
/// state per node as the embedding matrix E (N x d_e).
///
/// `steps` holds one (N x input_dim) matrix per time step: each node's own
/// smoothed value plus the shared covariate columns.
pub fn embed_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphLearnerParams,
    steps: &[Tensor],
) -> Result<Var> {
    let n = steps.first().map(|s| s.rows()).unwrap_or(0);
    let p = LeasedGru {
        w_xr: tape.param(store, params.w_xr),
        w_hr: tape.param(store, params.w_hr),
        b_r: tape.param(store, params.b_r),
        w_xz: tape.param(store, params.w_xz),
        w_hz: tape.param(store, params.w_hz),
        b_z: tape.param(store, params.b_z),
        w_xn: tape.param(store, params.w_xn),
        w_hn: tape.param(store, params.w_hn),
        b_n: tape.param(store, params.b_n),
    };
    let ones = tape.constant(Tensor::ones(&[n, params.embed_dim]));
    let mut h = tape.constant(Tensor::zeros(&[n, params.embed_dim]));
    for step in steps {
        let x = tape.constant(step.clone());
        h = gru_step(tape, &p, x, h, ones)?;
    }
    Ok(h)
}

/// One GRU update:
///   r = sigmoid(x W_xr + h W_hr + b_r)
///   z = sigmoid(x W_xz + h W_hz + b_z)
///   n = tanh(x W_xn + r * (h W_hn) + b_n)
///   h' = (1 - z) * n + z * h
fn gru_step(tape: &mut Tape, p: &LeasedGru, x: Var, h: Var, ones: Var) -> Result<Var> {
    let xr = tape.matmul(x, p.w_xr)?;
    let hr = tape.matmul(h, p.w_hr)?;
    let pre_r = tape.add(xr, hr)?;
    let pre_r = tape.add_row_broadcast(pre_r, p.b_r)?;
    let r = tape.sigmoid(pre_r);

    let xz = tape.matmul(x, p.w_xz)?;
    let hz = tape.matmul(h, p.w_hz)?;
    let pre_z = tape.add(xz, hz)?;
    let pre_z = tape.add_row_broadcast(pre_z, p.b_z)?;
    let z = tape.sigmoid(pre_z);

    let xn = tape.matmul(x, p.w_xn)?;
    let hn = tape.matmul(h, p.w_hn)?;
    let gated = tape.mul(r, hn)?;
    let pre_n = tape.add(xn, gated)?;
    let pre_n = tape.add_row_broadcast(pre_n, p.b_n)?;
    let cand = tape.tanh(pre_n);

    let keep = tape.sub(ones, z)?;
    let new_part = tape.mul(keep, cand)?;
    let old_part = tape.mul(z, h)?;
    tape.add(new_part, old_part)
}

/// Self-attention scores over node embeddings:
/// `W = rowSoftmax(Q K^T / sqrt(d_e))` with `Q = E W_query`, `K = E W_key`.
pub fn attention_scores(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphLearnerParams,
    embeddings: Var,
) -> Result<Var> {
    let wq = tape.param(store, params.w_query);
    let wk = tape.param(store, params.w_key);
    let q = tape.matmul(embeddings, wq)?;
    let k = tape.matmul(embeddings, wk)?;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (params.embed_dim as f64).sqrt());
    let w = tape.softmax_rows(scaled);
    // Non-finite inputs are surfaced by the caller's loss check instead.
    debug_assert!(!tape.value(w).is_finite() || row_stochastic(tape.value(w), 1e-10));
    Ok(w)
}

/// Tape handles for the learned graph; values can be snapshotted with
/// [`LearnedGraph::from_vars`].
#[derive(Debug, Clone, Copy)]
pub struct LearnedGraphVars {
    pub attention: Var,
    pub adjacency: Var,
    pub laplacian: Var,
    pub scaled_laplacian: Var,
    pub lambda_max: Var,
}

/// Plain-tensor snapshot of a learned graph, for inspection and export.
#[derive(Debug, Clone)]
pub struct LearnedGraph {
    pub attention: Tensor,
    pub adjacency: Tensor,
    pub laplacian: Tensor,
    pub scaled_laplacian: Tensor,
    pub lambda_max: f64,
}

impl LearnedGraph {
    pub fn from_vars(tape: &Tape, vars: &LearnedGraphVars) -> Self {
        LearnedGraph {
            attention: tape.value(vars.attention).clone(),
            adjacency: tape.value(vars.adjacency).clone(),
            laplacian: tape.value(vars.laplacian).clone(),
            scaled_laplacian: tape.value(vars.scaled_laplacian).clone(),
            lambda_max: tape.value(vars.lambda_max).scalar_value(),
        }
    }
}

/// Build the symmetric adjacency `A = (W + W^T)/2`, the normalized Laplacian
/// `L = I - D^{-1/2} A D^{-1/2}`, and the scaled Laplacian
/// `L~ = 2L/lambda_max - I`.
///
/// `lambda_max` comes from unrolled power iteration on L (differentiable
/// through the tape), padded by its own residual so the scaled spectrum stays
/// inside [-1, 1], floored at `1e-6`, capped at the theoretical bound 2, and
/// replaced by the fallback 2 when the iteration does not converge.
pub fn build_laplacians(tape: &mut Tape, attention: Var) -> Result<LearnedGraphVars> {
    let n = tape.value(attention).rows();
    let wt = tape.transpose(attention);
    let sum = tape.add(attention, wt)?;
    let adjacency = tape.scale(sum, 0.5);

    let degrees = tape.row_sums(adjacency);
    let guarded = tape.clamp_min(degrees, DEGREE_FLOOR);
    let root = tape.sqrt(guarded);
    let d_inv_sqrt = tape.recip(root);
    let scaled_rows = tape.scale_rows(adjacency, d_inv_sqrt)?;
    let normalized_adj = tape.scale_cols(scaled_rows, d_inv_sqrt)?;
    let eye = tape.constant(Tensor::eye(n));
    let laplacian = tape.sub(eye, normalized_adj)?;

    let lambda_max = dominant_eigenvalue(tape, laplacian, n)?;
    let doubled = tape.scale(laplacian, 2.0);
    let rescaled = tape.div_by_scalar(doubled, lambda_max)?;
    let scaled_laplacian = tape.sub(rescaled, eye)?;

    debug_assert!(!tape.value(adjacency).is_finite() || symmetric(tape.value(adjacency)));
    Ok(LearnedGraphVars {
        attention,
        adjacency,
        laplacian,
        scaled_laplacian,
        lambda_max,
    })
}

/// Unrolled power iteration plus a Rayleigh-quotient estimate. The returned
/// scalar node is `clamp(rayleigh + residual + pad)`; every step is an
/// ordinary tape op, so gradients flow through the estimate.
fn dominant_eigenvalue(tape: &mut Tape, matrix: Var, n: usize) -> Result<Var> {
    // Fixed generic start vector; deterministic across runs.
    let start = Tensor::from_fn(&[n, 1], |i| 1.5 + (0.7 * (i as f64 + 1.0)).sin());
    let mut v = tape.constant(start);
    for _ in 0..POWER_ITERATIONS {
        let u = tape.matmul(matrix, v)?;
        let ss = tape.sum_squares(u);
        let ss = tape.clamp_min(ss, 1e-30);
        let norm = tape.sqrt(ss);
        v = tape.div_by_scalar(u, norm)?;
    }
    let u = tape.matmul(matrix, v)?;
    let uv = tape.mul(u, v)?;
    let rayleigh = tape.sum(uv);

    let lam_v = tape.scale_by_scalar(v, rayleigh)?;
    let resid = tape.sub(u, lam_v)?;
    let resid_ss = tape.sum_squares(resid);
    let resid_ss = tape.clamp_min(resid_ss, 1e-30);
    let resid_norm = tape.sqrt(resid_ss);

    if tape.value(resid_norm).scalar_value() > POWER_TOLERANCE {
        return Ok(tape.scalar(LAMBDA_FALLBACK));
    }
    let pad = tape.scalar(1e-9);
    let padded = tape.add(rayleigh, resid_norm)?;
    let padded = tape.add(padded, pad)?;
    let floored = tape.clamp_min(padded, LAMBDA_FLOOR);
    Ok(tape.clamp_max(floored, LAMBDA_FALLBACK))
}

fn row_stochastic(w: &Tensor, tol: f64) -> bool {
    let (m, n) = (w.rows(), w.cols());
    (0..m).all(|i| {
        let s: f64 = (0..n).map(|j| w.at(i, j)).sum();
        (s - 1.0).abs() <= tol && (0..n).all(|j| w.at(i, j) >= 0.0)
    })
}

fn symmetric(a: &Tensor) -> bool {
    let n = a.rows();
    (0..n).all(|i| (0..n).all(|j| a.at(i, j) == a.at(j, i)))
}
