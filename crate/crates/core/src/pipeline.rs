//! End-to-end runs: resolve a declarative run configuration into datasets,
//! train/evaluate/ablate models, and write the artifact files (checkpoints,
//! reports, per-node metrics, attention matrices) consumed by plotting and
//! scripting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_csv, TimeSeriesFrame, WindowSpec};
use crate::error::{CoreError, Result};
use crate::metrics::{pearson, relative_improvement};
use crate::model::{ModelConfig, StgnnModel};
use crate::synth::{generate, GroundTruthCoupling, PlantSpec};
use crate::tensor::Tensor;
use crate::train::{evaluate, train_loop, Datasets, TrainConfig, TrainReport};

/// Where the input frame comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(PlantSpec),
    Csv { path: String },
}

/// Complete declarative description of one run; round-trips losslessly
/// through its JSON file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_ratios")]
    pub split_ratios: (f64, f64, f64),
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_ratios() -> (f64, f64, f64) {
    (0.70, 0.15, 0.15)
}

fn default_out_dir() -> String {
    "out".into()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec::new(self.model.w, self.model.h, self.model.covariates)
    }
}

/// Build the rayon pool from `STGNN_THREADS` once; later calls are no-ops.
pub fn configure_threads_from_env() {
    if let Ok(v) = std::env::var("STGNN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Load or synthesize the input frame.
pub fn load_frame(source: &DataSource) -> Result<(TimeSeriesFrame, Option<GroundTruthCoupling>)> {
    match source {
        DataSource::Synthetic(spec) => {
            let (frame, coupling) = generate(spec)?;
            Ok((frame, Some(coupling)))
        }
        DataSource::Csv { path } => Ok((load_csv(path)?, None)),
    }
}

/// Fill the target-channel list with the frame's electric columns when the
/// config leaves it empty.
pub fn resolve_model_config(config: &ModelConfig, frame: &TimeSeriesFrame) -> Result<ModelConfig> {
    let mut resolved = config.clone();
    if resolved.target_channels.is_empty() {
        resolved.target_channels = frame.electric_indices();
    }
    resolved.validate(frame.channel_count())?;
    Ok(resolved)
}

pub struct TrainArtifacts {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
}

fn ensure_out_dir(dir: &str) -> Result<PathBuf> {
    let path = PathBuf::from(dir);
    std::fs::create_dir_all(&path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Train the graph model described by `config` and write checkpoint, report
/// and per-node metrics under the output directory.
pub fn run_train(config: &RunConfig) -> Result<TrainArtifacts> {
    let (frame, _) = load_frame(&config.data)?;
    let model_cfg = resolve_model_config(&config.model, &frame)?;
    let data = Datasets::prepare(&frame, config.split_ratios, config.window_spec())?;
    let mut model = StgnnModel::new(model_cfg, frame.channel_count(), config.seed)?;

    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    let report = train_loop(&mut model, &data, &train_cfg)?;

    let out = ensure_out_dir(&config.out_dir)?;
    let checkpoint = Checkpoint::from_model(
        &model,
        frame.channels.clone(),
        data.stats.clone(),
        config.split_ratios,
        config.seed,
    );
    let checkpoint_path = out.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;

    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| CoreError::io(report_path.display().to_string(), e))?;

    let names: Vec<String> = model
        .config
        .target_channels
        .iter()
        .map(|&i| frame.channels[i].name.clone())
        .collect();
    write_per_node_csv(&names, &report.per_node_test_nmse, out.join("per_node_nmse.csv"))?;

    Ok(TrainArtifacts {
        report,
        checkpoint,
        checkpoint_path,
        report_path,
    })
}

pub struct EvalOutcome {
    pub nmse: f64,
    pub per_node: Vec<f64>,
    pub node_names: Vec<String>,
}

fn check_channels_match(ckpt: &Checkpoint, frame: &TimeSeriesFrame) -> Result<()> {
    if ckpt.channels != frame.channels {
        return Err(CoreError::Config(
            "checkpoint and data disagree on channels (names, subsystems or rates)".into(),
        ));
    }
    Ok(())
}

/// Rebuild the checkpoint's datasets over `frame` (same stats, same ratios).
pub fn datasets_for_checkpoint(ckpt: &Checkpoint, frame: &TimeSeriesFrame) -> Result<Datasets> {
    let window = WindowSpec::new(ckpt.model.w, ckpt.model.h, ckpt.model.covariates);
    Datasets::with_stats(frame, ckpt.split_ratios, window, ckpt.stats.clone())
}

/// Score a checkpoint on the given data's test split, reproducing the split
/// and normalization recorded at training time.
pub fn run_evaluate(
    checkpoint_path: impl AsRef<Path>,
    data_path: impl AsRef<Path>,
    out_csv: Option<&Path>,
) -> Result<EvalOutcome> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let frame = load_csv(data_path)?;
    check_channels_match(&ckpt, &frame)?;
    let data = datasets_for_checkpoint(&ckpt, &frame)?;
    let model = ckpt.instantiate()?;
    let anchors = data.test_anchors();
    let eval = evaluate(&model, &data, &anchors, false)?;
    let node_names: Vec<String> = ckpt
        .model
        .target_channels
        .iter()
        .map(|&i| frame.channels[i].name.clone())
        .collect();
    if let Some(path) = out_csv {
        write_per_node_csv(&node_names, &eval.per_node, path)?;
    }
    Ok(EvalOutcome {
        nmse: eval.nmse,
        per_node: eval.per_node,
        node_names,
    })
}

/// Test-set-averaged attention matrix of a checkpointed model.
pub fn averaged_attention(ckpt: &Checkpoint, frame: &TimeSeriesFrame) -> Result<Tensor> {
    check_channels_match(ckpt, frame)?;
    let data = datasets_for_checkpoint(ckpt, frame)?;
    let model = ckpt.instantiate()?;
    let anchors = data.test_anchors();
    let eval = evaluate(&model, &data, &anchors, true)?;
    eval.avg_attention
        .ok_or_else(|| CoreError::Config("model produced no attention".into()))
}

/// Write a named square matrix as CSV with channel-name headers.
pub fn write_attention_csv(
    names: &[String],
    attention: &Tensor,
    path: impl AsRef<Path>,
) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    if attention.rows() != names.len() || attention.cols() != names.len() {
        return Err(CoreError::Shape(format!(
            "attention is {:?} but there are {} channel names",
            attention.shape(),
            names.len()
        )));
    }
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    write!(out, "node").map_err(io_err)?;
    for name in names {
        write!(out, ",{name}").map_err(io_err)?;
    }
    writeln!(out).map_err(io_err)?;
    for (i, name) in names.iter().enumerate() {
        write!(out, "{name}").map_err(io_err)?;
        for j in 0..names.len() {
            write!(out, ",{}", attention.at(i, j)).map_err(io_err)?;
        }
        writeln!(out).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_per_node_csv(names: &[String], values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    writeln!(out, "node,nmse").map_err(io_err)?;
    for (name, v) in names.iter().zip(values) {
        writeln!(out, "{name},{v}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Export the test-averaged attention of one checkpoint to CSV; with extra
/// checkpoints, also report pairwise Pearson correlations of the flattened
/// matrices.
pub fn run_export_attention(
    checkpoint_path: impl AsRef<Path>,
    data_path: impl AsRef<Path>,
    out_csv: impl AsRef<Path>,
    compare: &[PathBuf],
) -> Result<Vec<(String, String, f64)>> {
    let frame = load_csv(data_path)?;
    let primary = Checkpoint::load(&checkpoint_path)?;
    let names: Vec<String> = frame.channels.iter().map(|c| c.name.clone()).collect();
    let primary_att = averaged_attention(&primary, &frame)?;
    write_attention_csv(&names, &primary_att, out_csv)?;

    if compare.is_empty() {
        return Ok(Vec::new());
    }
    let mut labeled: Vec<(String, Tensor)> = vec![(
        checkpoint_path.as_ref().display().to_string(),
        primary_att,
    )];
    for path in compare {
        let ckpt = Checkpoint::load(path)?;
        labeled.push((path.display().to_string(), averaged_attention(&ckpt, &frame)?));
    }
    let mut out = Vec::new();
    for i in 0..labeled.len() {
        for j in i + 1..labeled.len() {
            let r = pearson(labeled[i].1.data(), labeled[j].1.data())?;
            out.push((labeled[i].0.clone(), labeled[j].0.clone(), r));
        }
    }
    Ok(out)
}

/// Everything the ablation run produces.
#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub nmse_el: f64,
    pub nmse_elhyd: f64,
    /// (el - elhyd) / el: positive when fusing hydraulic data helps.
    pub relative_improvement: f64,
    pub per_node: Vec<AblationNode>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationNode {
    pub node: String,
    pub nmse_el: f64,
    pub nmse_elhyd: f64,
    pub relative_improvement: f64,
}

pub struct AblationArtifacts {
    pub summary: AblationSummary,
    pub attention_elhyd: Tensor,
    pub attention_el: Tensor,
}

/// Train the fused (el+hyd) and electric-only variants on identical splits
/// and seeds, and write the per-node comparison plus both test-averaged
/// attention matrices.
pub fn run_ablate(config: &RunConfig) -> Result<AblationArtifacts> {
    let (full_frame, _) = load_frame(&config.data)?;
    let el_frame = full_frame.electric_only()?;
    let out = ensure_out_dir(&config.out_dir)?;

    let train_one = |frame: &TimeSeriesFrame, tag: &str| -> Result<(TrainReport, Tensor)> {
        let model_cfg = resolve_model_config(&config.model, frame)?;
        let data = Datasets::prepare(frame, config.split_ratios, config.window_spec())?;
        let mut model = StgnnModel::new(model_cfg, frame.channel_count(), config.seed)?;
        let mut train_cfg = config.train.clone();
        train_cfg.seed = config.seed;
        let report = train_loop(&mut model, &data, &train_cfg)?;
        let eval = evaluate(&model, &data, &data.test_anchors(), true)?;
        let attention = eval
            .avg_attention
            .ok_or_else(|| CoreError::Config("model produced no attention".into()))?;
        let ckpt = Checkpoint::from_model(
            &model,
            frame.channels.clone(),
            data.stats.clone(),
            config.split_ratios,
            config.seed,
        );
        ckpt.save(out.join(format!("checkpoint_{tag}.json")))?;
        let names: Vec<String> = frame.channels.iter().map(|c| c.name.clone()).collect();
        write_attention_csv(&names, &attention, out.join(format!("attention_{tag}.csv")))?;
        Ok((report, attention))
    };

    let (report_elhyd, attention_elhyd) = train_one(&full_frame, "elhyd")?;
    let (report_el, attention_el) = train_one(&el_frame, "el")?;

    let electric_names: Vec<String> = full_frame
        .electric_indices()
        .iter()
        .map(|&i| full_frame.channels[i].name.clone())
        .collect();
    let per_node: Vec<AblationNode> = electric_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let el = report_el.per_node_test_nmse[k];
            let elhyd = report_elhyd.per_node_test_nmse[k];
            AblationNode {
                node: name.clone(),
                nmse_el: el,
                nmse_elhyd: elhyd,
                relative_improvement: relative_improvement(el, elhyd),
            }
        })
        .collect();
    let summary = AblationSummary {
        nmse_el: report_el.test_nmse,
        nmse_elhyd: report_elhyd.test_nmse,
        relative_improvement: relative_improvement(report_el.test_nmse, report_elhyd.test_nmse),
        per_node,
    };

    let cmp_path = out.join("ablation.csv");
    {
        use std::io::Write;
        let file = std::fs::File::create(&cmp_path)
            .map_err(|e| CoreError::io(cmp_path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| CoreError::io(cmp_path.display().to_string(), e);
        writeln!(w, "node,nmse_el,nmse_elhyd,relative_improvement").map_err(io_err)?;
        for row in &summary.per_node {
            writeln!(
                w,
                "{},{},{},{}",
                row.node, row.nmse_el, row.nmse_elhyd, row.relative_improvement
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    let summary_path = out.join("ablation_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| CoreError::io(summary_path.display().to_string(), e))?;

    Ok(AblationArtifacts {
        summary,
        attention_elhyd,
        attention_el,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips() {
        let config = RunConfig {
            data: DataSource::Synthetic(PlantSpec {
                n_hydraulic: 3,
                n_electric: 2,
                length_minutes: 500,
                seed: 4,
                ..PlantSpec::default()
            }),
            model: ModelConfig {
                w: 12,
                target_channels: vec![0, 1],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 3,
                ..TrainConfig::default()
            },
            split_ratios: (0.8, 0.1, 0.1),
            seed: 9,
            out_dir: "/tmp/stgnn-test".into(),
        };
        let text = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn csv_source_round_trips_through_config() {
        let config = RunConfig {
            data: DataSource::Csv {
                path: "data.csv".into(),
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split_ratios: default_ratios(),
            seed: 0,
            out_dir: default_out_dir(),
        };
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), config);
    }
}
