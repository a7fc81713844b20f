//! Central finite-difference verification of every differentiable operation
//! and of end-to-end model gradients for each parameter group.

mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgnn_core::autodiff::{ParamStore, Tape, Var};
use stgnn_core::data::{make_window, ChannelMeta, Subsystem, TimeSeriesFrame, WindowSpec};
use stgnn_core::model::{ModelConfig, StgnnModel};
use stgnn_core::tensor::Tensor;
use stgnn_core::train::LossWeights;
use support::{analytic_gradients, central_diff, rel_err};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Check d(loss)/d(param) against central differences on a handful of
/// elements; `build` must construct the same graph for every call.
fn check_op(
    label: &str,
    store: &ParamStore,
    build: impl Fn(&mut Tape, &ParamStore) -> Var,
) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss).expect("backward");

    for (id, name, tensor) in store.iter() {
        let analytic = {
            let grads = tape.param_gradients(store);
            grads.get(id).clone()
        };
        let stride = (tensor.len() / 5).max(1);
        for k in (0..tensor.len()).step_by(stride) {
            let fd = {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += EPS;
                let mut tp = Tape::new();
                let lp = build(&mut tp, &plus);
                let lp = tp.value(lp).scalar_value();
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= EPS;
                let mut tm = Tape::new();
                let lm = build(&mut tm, &minus);
                let lm = tm.value(lm).scalar_value();
                (lp - lm) / (2.0 * EPS)
            };
            let a = analytic.data()[k];
            assert!(
                rel_err(a, fd) < TOL,
                "{label}: grad of {name}[{k}] analytic {a} vs fd {fd}"
            );
        }
    }
}

fn random_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        store.register(*name, t);
    }
    store
}

#[test]
fn elementwise_and_matrix_op_gradients() {
    let store = random_store(&[("a", vec![3, 4]), ("b", vec![3, 4]), ("m", vec![4, 3])], 1);

    check_op("add", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let b = t.param(s, s.find("b").unwrap());
        let y = t.add(a, b).unwrap();
        t.sum_squares(y)
    });
    check_op("sub+scale", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let b = t.param(s, s.find("b").unwrap());
        let y = t.sub(a, b).unwrap();
        let y = t.scale(y, -1.7);
        t.sum_squares(y)
    });
    check_op("mul", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let b = t.param(s, s.find("b").unwrap());
        let y = t.mul(a, b).unwrap();
        t.sum_squares(y)
    });
    check_op("mul-self", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.mul(a, a).unwrap();
        t.sum_squares(y)
    });
    check_op("matmul", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let m = t.param(s, s.find("m").unwrap());
        let y = t.matmul(a, m).unwrap();
        t.sum_squares(y)
    });
    check_op("transpose", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.transpose(a);
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2)
    });
    check_op("sigmoid", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.sigmoid(a);
        t.sum_squares(y)
    });
    check_op("tanh", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.tanh(a);
        t.sum_squares(y)
    });
    check_op("leaky_relu", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.leaky_relu(a, 0.2);
        t.sum_squares(y)
    });
    check_op("softmax_rows", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.softmax_rows(a);
        let w = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.9).sin()));
        let y2 = t.mul(y, w).unwrap();
        t.sum_squares(y2)
    });
    check_op("row_sums", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.row_sums(a);
        t.sum_squares(y)
    });
    check_op("reshape+gather", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let y = t.reshape(a, vec![4, 3]).unwrap();
        let y = t.gather_rows(y, vec![2, 0, 2]).unwrap();
        t.sum_squares(y)
    });
    check_op("add_row_broadcast", &store, |t, s| {
        let a = t.param(s, s.find("a").unwrap());
        let bias = t.param(s, s.find("m").unwrap());
        let bias = t.reshape(bias, vec![12]).unwrap();
        let wide = t.reshape(a, vec![1, 12]).unwrap();
        let y = t.add_row_broadcast(wide, bias).unwrap();
        t.sum_squares(y)
    });
}

#[test]
fn positive_domain_op_gradients() {
    // sqrt/recip/div need inputs away from zero.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    store.register("p", Tensor::from_fn(&[3, 3], |_| rng.random_range(0.5..2.0)));
    store.register("s", Tensor::scalar(1.3));

    check_op("sqrt", &store, |t, s| {
        let p = t.param(s, s.find("p").unwrap());
        let y = t.sqrt(p);
        t.sum_squares(y)
    });
    check_op("recip", &store, |t, s| {
        let p = t.param(s, s.find("p").unwrap());
        let y = t.recip(p);
        t.sum_squares(y)
    });
    check_op("clamp_away_from_boundary", &store, |t, s| {
        let p = t.param(s, s.find("p").unwrap());
        let y = t.clamp_min(p, 1e-3);
        let y = t.clamp_max(y, 50.0);
        t.sum_squares(y)
    });
    check_op("scale_by_scalar", &store, |t, s| {
        let p = t.param(s, s.find("p").unwrap());
        let sc = t.param(s, s.find("s").unwrap());
        let y = t.scale_by_scalar(p, sc).unwrap();
        t.sum_squares(y)
    });
    check_op("div_by_scalar", &store, |t, s| {
        let p = t.param(s, s.find("p").unwrap());
        let sc = t.param(s, s.find("s").unwrap());
        let y = t.div_by_scalar(p, sc).unwrap();
        t.sum_squares(y)
    });
    check_op("scale_rows_cols", &store, |t, s| {
        let p = t.param(s, s.find("p").unwrap());
        let d = t.row_sums(p);
        let y = t.scale_rows(p, d).unwrap();
        let y = t.scale_cols(y, d).unwrap();
        t.sum_squares(y)
    });
}

#[test]
fn dft_op_gradients() {
    let store = random_store(&[("x", vec![2, 6])], 3);
    check_op("dft_chain", &store, |t, s| {
        let x = t.param(s, s.find("x").unwrap());
        let re = t.dft_re(x).unwrap();
        let im = t.dft_im(x).unwrap();
        let gate = t.sigmoid(re);
        let re2 = t.mul(re, gate).unwrap();
        let back = t.inverse_dft_real(re2, im).unwrap();
        t.sum_squares(back)
    });
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let store = random_store(&[("x", vec![4, 4])], 4);
    check_op("dropout", &store, |t, s| {
        let x = t.param(s, s.find("x").unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(x, 0.4, &mut rng).unwrap();
        t.sum_squares(y)
    });
}

#[test]
fn composite_chain_matches_finite_differences() {
    // matmul -> softmax -> GLU-style gate, all parameters checked.
    let store = random_store(&[("w", vec![4, 4]), ("x", vec![3, 4]), ("g", vec![4, 4])], 5);
    check_op("composite", &store, |t, s| {
        let x = t.param(s, s.find("x").unwrap());
        let w = t.param(s, s.find("w").unwrap());
        let g = t.param(s, s.find("g").unwrap());
        let h = t.matmul(x, w).unwrap();
        let a = t.softmax_rows(h);
        let lin = t.matmul(a, g).unwrap();
        let gate = t.sigmoid(lin);
        let y = t.mul(a, gate).unwrap();
        t.sum_squares(y)
    });
}

fn gradcheck_frame(t: usize, c: usize) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let channels: Vec<ChannelMeta> = (0..c)
        .map(|j| {
            let sub = if j < (c + 1) / 2 {
                Subsystem::Electric
            } else {
                Subsystem::Hydraulic
            };
            ChannelMeta::new(format!("ch{j}"), sub, 1)
        })
        .collect();
    let values = Tensor::from_fn(&[t, c], |_| rng.random_range(0.0..1.0));
    TimeSeriesFrame::new(values, (0..t as i64).collect(), channels).unwrap()
}

/// Every parameter group of the full model matches finite differences on
/// several random windows, with dropout active under a fixed mask.
#[test]
fn full_model_gradients_match_finite_differences() {
    let config = ModelConfig {
        w: 6,
        h: 1,
        block_count: 2,
        chebyshev_order: 2,
        spe_seq_layers: 2,
        hidden_width: 4,
        embed_dim: 3,
        dropout: 0.3,
        target_channels: vec![0, 1, 2],
        ..ModelConfig::default()
    };
    let frame = gradcheck_frame(40, 6);
    let model = StgnnModel::new(config.clone(), 6, 77).unwrap();
    let spec = WindowSpec::new(config.w, config.h, config.covariates);
    let weights = LossWeights::default();

    for (wi, anchor) in [10usize, 19, 30].iter().enumerate() {
        let sample = make_window(&frame, *anchor, &spec).unwrap();
        let dropout_seed = 1000 + wi as u64;
        let grads = analytic_gradients(&model, &sample, &weights, dropout_seed);
        for (id, name, tensor) in model.store().iter() {
            let stride = (tensor.len() / 4).max(1);
            for k in (0..tensor.len()).step_by(stride) {
                let fd = central_diff(&model, id, k, EPS, &sample, &weights, dropout_seed);
                let a = grads.get(id).data()[k];
                assert!(
                    rel_err(a, fd) < TOL,
                    "window {anchor}: {name}[{k}] analytic {a} vs fd {fd}"
                );
            }
        }
    }
}

/// Loss gradient with respect to a deep parameter (second block's GLU bias)
/// is nonzero and correct.
#[test]
fn deep_parameter_gradient_flows() {
    let config = ModelConfig {
        w: 6,
        h: 1,
        block_count: 2,
        chebyshev_order: 1,
        spe_seq_layers: 2,
        hidden_width: 4,
        embed_dim: 3,
        dropout: 0.0,
        target_channels: vec![0, 1, 2],
        ..ModelConfig::default()
    };
    let frame = gradcheck_frame(30, 5);
    let model = StgnnModel::new(config.clone(), 5, 13).unwrap();
    let spec = WindowSpec::new(config.w, config.h, config.covariates);
    let sample = make_window(&frame, 12, &spec).unwrap();
    let weights = LossWeights::default();
    let grads = analytic_gradients(&model, &sample, &weights, 0);
    let id = model.store().find("block1.cell.l1.b").unwrap();
    let g = grads.get(id);
    assert!(g.data().iter().any(|&v| v != 0.0), "deep GLU bias grad is zero");
    let fd = central_diff(&model, id, 0, EPS, &sample, &weights, 0);
    assert!(rel_err(g.data()[0], fd) < TOL);
}
