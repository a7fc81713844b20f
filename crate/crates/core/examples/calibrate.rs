//! Dev harness for tuning the bundled acceptance configuration: trains the
//! fused and electric-only models plus the baselines on the default
//! synthetic plant and prints the comparison metrics.
//!
//!     cargo run --example calibrate -p stgnn-core -- <seed> [epochs] [batches]

use std::time::Instant;

use stgnn_core::baseline::{linear_baseline, MlpModel};
use stgnn_core::data::WindowSpec;
use stgnn_core::metrics::{pearson, relative_improvement};
use stgnn_core::model::{ModelConfig, StgnnModel};
use stgnn_core::synth::{generate, PlantSpec};
use stgnn_core::tensor::Tensor;
use stgnn_core::train::{evaluate, train_loop, Datasets, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(12);
    let batches: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(60);

    let plant = PlantSpec::default();
    let t0 = Instant::now();
    let (frame, coupling) = generate(&plant).unwrap();
    println!(
        "dataset: {} min x {} ch in {:.1}s",
        frame.len(),
        frame.channel_count(),
        t0.elapsed().as_secs_f64()
    );

    let window = WindowSpec::new(24, 1, Default::default());
    let model_cfg = ModelConfig {
        embed_dim: 16,
        hidden_width: 16,
        dropout: 0.15,
        target_channels: frame.electric_indices(),
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 32,
        max_epochs: epochs,
        patience: epochs,
        max_batches_per_epoch: Some(batches),
        val_max_windows: Some(256),
        seed,
        ..TrainConfig::default()
    };

    // Fused model.
    let data = Datasets::prepare(&frame, (0.7, 0.15, 0.15), window).unwrap();
    let t1 = Instant::now();
    let mut fused = StgnnModel::new(model_cfg.clone(), frame.channel_count(), seed).unwrap();
    let report_fused = train_loop(&mut fused, &data, &train_cfg).unwrap();
    println!(
        "el+hyd: test {:.5e} (best val {:.5e} @ {}) in {:.0}s, curve {:?}",
        report_fused.test_nmse,
        report_fused.best_val_nmse,
        report_fused.best_epoch,
        t1.elapsed().as_secs_f64(),
        report_fused
            .epochs
            .iter()
            .map(|e| (e.val_nmse * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    let eval_fused = evaluate(&fused, &data, &data.test_anchors(), true).unwrap();
    let attention = eval_fused.avg_attention.unwrap();

    // Electric-only model.
    let el_frame = frame.electric_only().unwrap();
    let el_cfg = ModelConfig {
        target_channels: el_frame.electric_indices(),
        ..model_cfg.clone()
    };
    let el_data = Datasets::prepare(&el_frame, (0.7, 0.15, 0.15), window).unwrap();
    let t2 = Instant::now();
    let mut el_model = StgnnModel::new(el_cfg, el_frame.channel_count(), seed).unwrap();
    let report_el = train_loop(&mut el_model, &el_data, &train_cfg).unwrap();
    println!(
        "el-only: test {:.5e} in {:.0}s",
        report_el.test_nmse,
        t2.elapsed().as_secs_f64()
    );
    println!(
        "fusion improvement: {:.2}%",
        100.0 * relative_improvement(report_el.test_nmse, report_fused.test_nmse)
    );
    let improved = report_el
        .per_node_test_nmse
        .iter()
        .zip(&report_fused.per_node_test_nmse)
        .filter(|(el, fused)| fused < el)
        .count();
    println!("per-node improvements: {improved}/21");

    // Baselines.
    let t3 = Instant::now();
    let linear = linear_baseline(&data).unwrap();
    println!("linear: test {:.5e} in {:.0}s", linear.nmse, t3.elapsed().as_secs_f64());
    let t4 = Instant::now();
    let mlp_epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(30);
    let mlp_cfg = TrainConfig {
        max_epochs: mlp_epochs,
        patience: 8,
        max_batches_per_epoch: Some(120),
        ..train_cfg.clone()
    };
    let input_dim = (frame.channel_count() + 4) * 24;
    let mut mlp = MlpModel::new(input_dim, &[256, 128, 64], 1, 21, seed).unwrap();
    let report_mlp = train_loop(&mut mlp, &data, &mlp_cfg).unwrap();
    println!(
        "mlp: test {:.5e} in {:.0}s",
        report_mlp.test_nmse,
        t4.elapsed().as_secs_f64()
    );
    println!(
        "ordering: stgnn {:.4e} < mlp {:.4e} < linear {:.4e}: {} / gaps {:.1}% {:.1}%",
        report_fused.test_nmse,
        report_mlp.test_nmse,
        linear.nmse,
        report_fused.test_nmse < report_mlp.test_nmse && report_mlp.test_nmse < linear.nmse,
        100.0 * relative_improvement(report_mlp.test_nmse, report_fused.test_nmse),
        100.0 * relative_improvement(linear.nmse, report_mlp.test_nmse),
    );

    // Attention structure vs ground truth.
    let electric = frame.electric_indices();
    let hydraulic = frame.hydraulic_indices();
    let mut parent_mass = 0.0;
    let mut random_mass = 0.0;
    let mut rng_state = 12345u64;
    for (j, &ej) in electric.iter().enumerate() {
        let parents = coupling.parents_of(j);
        for &p in &parents {
            parent_mass += attention.at(ej, hydraulic[p]);
        }
        // equally sized random non-parent set
        let non_parents: Vec<usize> = (0..hydraulic.len()).filter(|i| !parents.contains(i)).collect();
        for k in 0..parents.len() {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let pick = non_parents[(rng_state >> 33) as usize % non_parents.len()];
            let _ = k;
            random_mass += attention.at(ej, hydraulic[pick]);
        }
    }
    println!("attention mass: parents {parent_mass:.4} vs random non-parents {random_mass:.4}");

    // Row profile for one electric node: where does its attention go?
    let j = 0;
    let ej = electric[j];
    let parents = coupling.parents_of(j);
    let mut cols: Vec<(usize, f64)> = (0..attention.cols())
        .map(|c| (c, attention.at(ej, c)))
        .collect();
    cols.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = cols[..6]
        .iter()
        .map(|(c, v)| format!("{}:{:.3}", frame.channels[*c].name, v))
        .collect();
    println!(
        "el00 row: parents {:?}, top attention [{}]",
        parents
            .iter()
            .map(|&p| frame.channels[hydraulic[p]].name.clone())
            .collect::<Vec<_>>(),
        top.join(", ")
    );

    // Attention self-similarity across two seeds would need a second run;
    // report the flattened attention norm for reference instead.
    let flat: Vec<f64> = attention.data().to_vec();
    println!(
        "attention self-pearson sanity: {:.3}",
        pearson(&flat, &flat).unwrap()
    );
    let _ = Tensor::zeros(&[1]);
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
