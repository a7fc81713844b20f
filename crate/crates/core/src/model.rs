//! Residual spectral model assembly: backcast/forecast blocks over the
//! learned graph, skip-summed forecast head, and backcast projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::{CovariateSpec, WindowSample};
use crate::error::{CoreError, Result};
use crate::filter::{spectral_filter_block, ChebyshevFilterParams, SpeSeqCellParams};
use crate::graph::{
    attention_scores, build_laplacians, embed_nodes, GraphLearnerParams, LearnedGraph,
    LearnedGraphVars,
};
use crate::init;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input window length.
    pub w: usize,
    /// Forecast horizon.
    pub h: usize,
    pub block_count: usize,
    pub chebyshev_order: usize,
    pub spe_seq_layers: usize,
    pub hidden_width: usize,
    /// GRU embedding size d_e for graph learning.
    pub embed_dim: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub covariates: CovariateSpec,
    /// Indices of the forecast targets (electric channels) within the input
    /// channel ordering.
    pub target_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            w: 24,
            h: 1,
            block_count: 2,
            chebyshev_order: 4,
            spe_seq_layers: 5,
            hidden_width: 32,
            embed_dim: 32,
            leaky_slope: 0.2,
            dropout: 0.5,
            covariates: CovariateSpec::Sinusoidal,
            target_channels: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, n_channels: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.block_count == 0 {
            return Err(CoreError::Config(
                "window, horizon and block count must be positive".into(),
            ));
        }
        if self.spe_seq_layers == 0 || self.hidden_width == 0 || self.embed_dim == 0 {
            return Err(CoreError::Config(
                "layer counts and widths must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.target_channels.is_empty() {
            return Err(CoreError::Config("target channel set is empty".into()));
        }
        if let Some(&bad) = self.target_channels.iter().find(|&&i| i >= n_channels) {
            return Err(CoreError::Config(format!(
                "target channel {bad} out of range for {n_channels} channels"
            )));
        }
        Ok(())
    }
}

/// One residual block's parameters.
#[derive(Debug, Clone)]
struct BlockParams {
    cheb: ChebyshevFilterParams,
    cell: SpeSeqCellParams,
    forecast_map: ParamId,
    forecast_bias: ParamId,
    backcast_map: ParamId,
    backcast_bias: ParamId,
    /// Linear bypass applied to the previous block's backcast state; absent
    /// for block 0, which consumes the window directly.
    bypass: Option<(ParamId, ParamId)>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub forecast: Var,
    pub backcast: Option<Var>,
    pub graph: Option<LearnedGraphVars>,
}

/// Plain-tensor output of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub forecast: Tensor,
    pub backcast: Tensor,
    pub graph: LearnedGraph,
}

/// A model that maps a window sample to forecast (and optionally backcast)
/// nodes on a tape. Implemented by the graph model and the MLP baseline so
/// both share one training loop.
pub trait Forecaster: Send + Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn forward_vars(
        &self,
        tape: &mut Tape,
        sample: &WindowSample,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardVars>;
}

/// The spectral-temporal graph model.
#[derive(Debug, Clone)]
pub struct StgnnModel {
    pub config: ModelConfig,
    pub n_channels: usize,
    store: ParamStore,
    graph_params: GraphLearnerParams,
    blocks: Vec<BlockParams>,
    head_weight: ParamId,
    head_bias: ParamId,
    backcast_proj: ParamId,
    backcast_proj_bias: ParamId,
}

impl StgnnModel {
    pub fn new(config: ModelConfig, n_channels: usize, seed: u64) -> Result<Self> {
        config.validate(n_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.w;
        let e = config.target_channels.len();
        let node_input_dim = 1 + config.covariates.width();

        let graph_params = GraphLearnerParams::register(
            &mut store,
            "graph",
            node_input_dim,
            config.embed_dim,
            &mut rng,
        );

        let mut blocks = Vec::with_capacity(config.block_count);
        for k in 0..config.block_count {
            let prefix = format!("block{k}");
            let cheb =
                ChebyshevFilterParams::register(&mut store, &prefix, config.chebyshev_order, w);
            let cell = SpeSeqCellParams::register(
                &mut store,
                &prefix,
                config.spe_seq_layers,
                w,
                &mut rng,
            )?;
            let forecast_map = store.register(
                format!("{prefix}.forecast_map"),
                init::fan_in_uniform(&mut rng, &[w, config.hidden_width], w),
            );
            let forecast_bias = store.register(
                format!("{prefix}.forecast_bias"),
                init::zeros(&[config.hidden_width]),
            );
            let backcast_map = store.register(
                format!("{prefix}.backcast_map"),
                init::fan_in_uniform(&mut rng, &[w, w], w),
            );
            let backcast_bias =
                store.register(format!("{prefix}.backcast_bias"), init::zeros(&[w]));
            let bypass = (k > 0).then(|| {
                (
                    store.register(
                        format!("{prefix}.bypass_map"),
                        init::near_identity(&mut rng, w, 0.02),
                    ),
                    store.register(format!("{prefix}.bypass_bias"), init::zeros(&[w])),
                )
            });
            blocks.push(BlockParams {
                cheb,
                cell,
                forecast_map,
                forecast_bias,
                backcast_map,
                backcast_bias,
                bypass,
            });
        }

        let head_in = n_channels * config.hidden_width;
        let head_out = config.h * e;
        let head_weight = store.register(
            "head.weight",
            init::fan_in_uniform(&mut rng, &[head_in, head_out], head_in),
        );
        let head_bias = store.register("head.bias", init::zeros(&[head_out]));
        let backcast_proj = store.register(
            "backcast.proj",
            init::fan_in_uniform(&mut rng, &[e, n_channels], n_channels),
        );
        let backcast_proj_bias = store.register("backcast.bias", init::zeros(&[e]));

        Ok(StgnnModel {
            config,
            n_channels,
            store,
            graph_params,
            blocks,
            head_weight,
            head_bias,
            backcast_proj,
            backcast_proj_bias,
        })
    }

    /// Total scalar count across the filtering and graph-learning parameter
    /// sets.
    pub fn count_parameters(&self) -> usize {
        self.store.total_scalars()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Per-step (N x node_input_dim) matrices fed to the graph learner: each
    /// node's own value plus the shared covariate columns.
    fn graph_steps(&self, sample: &WindowSample) -> Vec<Tensor> {
        let n = self.n_channels;
        let d = 1 + self.config.covariates.width();
        (0..self.config.w)
            .map(|t| {
                Tensor::from_fn(&[n, d], |i| {
                    let (node, k) = (i / d, i % d);
                    if k == 0 {
                        sample.input.at(t, node)
                    } else {
                        sample.input.at(t, n + k - 1)
                    }
                })
            })
            .collect()
    }

    /// Node-major window signal (N x w), sensor columns only.
    fn node_signal(&self, sample: &WindowSample) -> Tensor {
        let n = self.n_channels;
        let w = self.config.w;
        Tensor::from_fn(&[n, w], |i| sample.input.at(i % w, i / w))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        sample: &WindowSample,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let expect_cols = self.n_channels + cfg.covariates.width();
        if sample.input.rows() != cfg.w || sample.input.cols() != expect_cols {
            return Err(CoreError::Shape(format!(
                "window input is {:?}, expected [{}, {}]",
                sample.input.shape(),
                cfg.w,
                expect_cols
            )));
        }

        // Graph learned once per window, shared by every block.
        let steps = self.graph_steps(sample);
        let embeddings = embed_nodes(tape, &self.store, &self.graph_params, &steps)?;
        let attention = attention_scores(tape, &self.store, &self.graph_params, embeddings)?;
        let graph = build_laplacians(tape, attention)?;

        let window_signal = tape.constant(self.node_signal(sample));
        let mut prev_backcast = window_signal;
        let mut sum_forecast: Option<Var> = None;
        let mut sum_backcast: Option<Var> = None;

        for block in &self.blocks {
            let input = match &block.bypass {
                None => prev_backcast,
                Some((map, bias)) => {
                    let map = tape.param(&self.store, *map);
                    let bias = tape.param(&self.store, *bias);
                    let passed = tape.matmul(prev_backcast, map)?;
                    let passed = tape.add_row_broadcast(passed, bias)?;
                    let diff = tape.sub(prev_backcast, passed)?;
                    tape.leaky_relu(diff, cfg.leaky_slope)
                }
            };
            let filtered = spectral_filter_block(
                tape,
                &self.store,
                &block.cheb,
                &block.cell,
                input,
                graph.scaled_laplacian,
            )?;

            let fmap = tape.param(&self.store, block.forecast_map);
            let fbias = tape.param(&self.store, block.forecast_bias);
            let mut s_f = tape.matmul(filtered, fmap)?;
            s_f = tape.add_row_broadcast(s_f, fbias)?;

            let bmap = tape.param(&self.store, block.backcast_map);
            let bbias = tape.param(&self.store, block.backcast_bias);
            let mut s_b = tape.matmul(filtered, bmap)?;
            s_b = tape.add_row_broadcast(s_b, bbias)?;

            if mode == Mode::Train && cfg.dropout > 0.0 {
                s_f = tape.dropout(s_f, cfg.dropout, rng)?;
                s_b = tape.dropout(s_b, cfg.dropout, rng)?;
            }

            sum_forecast = Some(match sum_forecast {
                None => s_f,
                Some(acc) => tape.add(acc, s_f)?,
            });
            sum_backcast = Some(match sum_backcast {
                None => s_b,
                Some(acc) => tape.add(acc, s_b)?,
            });
            prev_backcast = s_b;
        }

        let sum_f = sum_forecast.expect("at least one block");
        let sum_b = sum_backcast.expect("at least one block");
        let e = cfg.target_channels.len();

        // Forecast head: flatten the aggregated skip state and map to h x E.
        let flat = tape.reshape(sum_f, vec![1, self.n_channels * cfg.hidden_width])?;
        let head_w = tape.param(&self.store, self.head_weight);
        let head_b = tape.param(&self.store, self.head_bias);
        let out = tape.matmul(flat, head_w)?;
        let out = tape.add_row_broadcast(out, head_b)?;
        let forecast = tape.reshape(out, vec![cfg.h, e])?;

        // Backcast: project the node axis onto the electric channels.
        let proj = tape.param(&self.store, self.backcast_proj);
        let proj_bias = tape.param(&self.store, self.backcast_proj_bias);
        let bc = tape.matmul(proj, sum_b)?;
        let bc = tape.transpose(bc);
        let backcast = tape.add_row_broadcast(bc, proj_bias)?;

        Ok(ForwardVars {
            forecast,
            backcast: Some(backcast),
            graph: Some(graph),
        })
    }

    /// Eval-mode forward returning plain tensors.
    pub fn predict(&self, sample: &WindowSample) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward(&mut tape, sample, Mode::Eval, &mut rng)?;
        let graph = vars.graph.expect("graph model always learns a graph");
        Ok(ModelOutput {
            forecast: tape.value(vars.forecast).clone(),
            backcast: tape.value(vars.backcast.expect("backcast branch")).clone(),
            graph: LearnedGraph::from_vars(&tape, &graph),
        })
    }
}

impl Forecaster for StgnnModel {
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
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardVars> {
        self.forward(tape, sample, mode, rng)
    }
}
