//! Causal-structure checks on the synthetic plant generator: electric
//! channels must depend on their ground-truth parents and be conditionally
//! independent of non-parents given the shared control signal.

mod support;

use stgnn_core::baseline::solve_least_squares;
use stgnn_core::metrics::pearson;
use stgnn_core::synth::{generate, PlantSpec};
use stgnn_core::tensor::Tensor;

fn screen_spec(coupling_strength: f64) -> PlantSpec {
    PlantSpec {
        n_hydraulic: 6,
        n_electric: 3,
        length_minutes: 8000,
        coupling_lag: 2,
        noise_std: 0.01,
        parents_per_electric: 2,
        idiosyncratic_std: 0.35,
        // Short correlation time so the correlation screen has plenty of
        // effective samples.
        idiosyncratic_decay: 0.7,
        direct_drive: 0.5,
        coupling_strength,
        seed: 23,
        ..PlantSpec::default()
    }
}

/// Residual of `y` after least-squares regression on an intercept plus
/// cubic-polynomial features of the control signal at both lags (enough to
/// absorb each channel's smooth saturating response to the control input).
fn partial_out(y: &[f64], control_now: &[f64], control_lag: &[f64]) -> Vec<f64> {
    let n = y.len();
    let dim = 7;
    let mut x = Tensor::zeros(&[n, dim]);
    for r in 0..n {
        let (u, v) = (control_now[r], control_lag[r]);
        for (k, f) in [1.0, u, u * u, u * u * u, v, v * v, v * v * v]
            .into_iter()
            .enumerate()
        {
            x.set(r, k, f);
        }
    }
    let yt = Tensor::new(vec![n, 1], y.to_vec()).unwrap();
    let mut xtx = Tensor::zeros(&[dim, dim]);
    let mut xty = Tensor::zeros(&[dim, 1]);
    stgnn_core::tensor::acc_tn(&x, &x, &mut xtx);
    stgnn_core::tensor::acc_tn(&x, &yt, &mut xty);
    let beta = solve_least_squares(&xtx, &xty).unwrap();
    (0..n)
        .map(|r| {
            let mut fit = 0.0;
            for k in 0..dim {
                fit += beta.data()[k] * x.at(r, k);
            }
            y[r] - fit
        })
        .collect()
}

fn partial_correlations(strength: f64) -> (Vec<f64>, Vec<f64>) {
    let spec = screen_spec(strength);
    let (frame, coupling) = generate(&spec).unwrap();
    let t = frame.len();
    let lag = spec.coupling_lag;
    let electric = frame.electric_indices();
    let hydraulic = frame.hydraulic_indices();

    let rows: Vec<usize> = (lag..t).collect();
    let control_now: Vec<f64> = rows.iter().map(|&r| coupling.control[r]).collect();
    let control_lag: Vec<f64> = rows.iter().map(|&r| coupling.control[r - lag]).collect();

    let mut parent_correlations = Vec::new();
    let mut non_parent_correlations = Vec::new();
    for (j, &ej) in electric.iter().enumerate() {
        let e_col: Vec<f64> = rows.iter().map(|&r| frame.values.at(r, ej)).collect();
        let e_resid = partial_out(&e_col, &control_now, &control_lag);
        let parents = coupling.parents_of(j);
        for (i, &hi) in hydraulic.iter().enumerate() {
            let h_col: Vec<f64> = rows.iter().map(|&r| frame.values.at(r - lag, hi)).collect();
            let h_resid = partial_out(&h_col, &control_now, &control_lag);
            let r = pearson(&e_resid, &h_resid).unwrap().abs();
            if parents.contains(&i) {
                parent_correlations.push(r);
            } else {
                non_parent_correlations.push(r);
            }
        }
    }
    (parent_correlations, non_parent_correlations)
}

#[test]
fn electric_channels_depend_on_parents_not_non_parents() {
    let (parents, non_parents) = partial_correlations(1.0);
    let min_parent = parents.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_non_parent = non_parents.iter().cloned().fold(0.0, f64::max);
    assert!(
        min_parent > 0.2,
        "weakest parent partial correlation {min_parent}"
    );
    assert!(
        max_non_parent < 0.1,
        "strongest non-parent partial correlation {max_non_parent}"
    );
    assert!(min_parent > 2.0 * max_non_parent);
}

#[test]
fn severing_coupling_removes_hydraulic_dependence() {
    let (parents, non_parents) = partial_correlations(0.0);
    // With the coupling ablated there are no recorded parents at all, and
    // every hydraulic channel should screen out.
    assert!(parents.is_empty());
    let max_r = non_parents.iter().cloned().fold(0.0, f64::max);
    assert!(max_r < 0.1, "residual dependence {max_r} after ablation");
}
