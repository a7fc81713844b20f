//! Synthetic coupled electric-hydraulic plant data with known causal
//! structure.
//!
//! A shared periodic control signal (random amplitude per schedule cycle)
//! drives every hydraulic channel through a smooth saturating response; each
//! hydraulic channel also carries its own slow AR(1) component, so channels
//! are informative about each other only through real coupling. Electric
//! channels follow the control signal directly plus a sparse weighted sum of
//! lagged hydraulic states; the sparse parent map is returned as ground
//! truth. Channels are simulated at their native sub-minute rates and
//! block-averaged onto the 1-minute grid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{smooth, ChannelMeta, Subsystem, TimeSeriesFrame};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub n_hydraulic: usize,
    pub n_electric: usize,
    /// Output length after warmup, in minutes.
    pub length_minutes: usize,
    /// Minutes by which electric channels lag the hydraulic state.
    pub coupling_lag: usize,
    /// Per-channel observation noise, in post-smoothing units.
    pub noise_std: f64,
    /// Control-signal cycle length in minutes.
    pub schedule_period: usize,
    /// Hydraulic parents per electric channel.
    pub parents_per_electric: usize,
    /// Stationary std of each hydraulic channel's private AR(1) component.
    pub idiosyncratic_std: f64,
    /// Per-minute AR(1) coefficient of that component.
    pub idiosyncratic_decay: f64,
    /// Saturation s of the coupling map tanh(s x)/s; 0 means identity.
    pub coupling_saturation: f64,
    /// Strength of the multiplicative control modulation of the coupling
    /// (regime-dependent gain); 0 keeps the electric map additive.
    pub coupling_modulation: f64,
    /// Scales all hydraulic-to-electric weights; 0 severs the coupling.
    pub coupling_strength: f64,
    /// Scale of the electric channels' direct control-signal response.
    pub direct_drive: f64,
    /// Raw samples per output minute.
    pub hydraulic_rate: u32,
    pub electric_rate: u32,
    pub start_minute: i64,
    pub seed: u64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            n_hydraulic: 37,
            n_electric: 21,
            length_minutes: 20_160,
            coupling_lag: 2,
            noise_std: 0.05,
            schedule_period: 30,
            parents_per_electric: 3,
            idiosyncratic_std: 0.25,
            idiosyncratic_decay: 0.98,
            coupling_saturation: 2.5,
            coupling_modulation: 0.6,
            coupling_strength: 1.0,
            direct_drive: 0.6,
            hydraulic_rate: 4,
            electric_rate: 2,
            start_minute: 0,
            seed: 0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_hydraulic == 0 || self.n_electric == 0 {
            return Err(CoreError::Config("channel counts must be positive".into()));
        }
        if self.parents_per_electric == 0 || self.parents_per_electric > self.n_hydraulic {
            return Err(CoreError::Config(format!(
                "parents_per_electric must be in 1..={}",
                self.n_hydraulic
            )));
        }
        if self.schedule_period == 0 || self.length_minutes == 0 {
            return Err(CoreError::Config(
                "schedule period and length must be positive".into(),
            ));
        }
        if self.hydraulic_rate == 0 || self.electric_rate == 0 {
            return Err(CoreError::Config("native rates must be positive".into()));
        }
        if self.noise_std < 0.0 || self.idiosyncratic_std < 0.0 || self.coupling_strength < 0.0 {
            return Err(CoreError::Config(
                "noise, idiosyncratic and coupling magnitudes must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.idiosyncratic_decay) {
            return Err(CoreError::Config(
                "idiosyncratic_decay must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Which hydraulic channels drive each electric channel, with the mixing
/// weights actually used by the generator (zero for non-parents), plus the
/// shared control signal on the output minute grid for conditional
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthCoupling {
    pub electric_names: Vec<String>,
    pub hydraulic_names: Vec<String>,
    /// n_electric x n_hydraulic weight matrix.
    pub weights: Tensor,
    /// Per-minute mean of the control signal, aligned with the frame rows.
    pub control: Vec<f64>,
}

impl GroundTruthCoupling {
    pub fn parents_of(&self, electric: usize) -> Vec<usize> {
        (0..self.hydraulic_names.len())
            .filter(|&i| self.weights.at(electric, i) != 0.0)
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        use std::io::Write;
        let path = path.as_ref();
        let file = std::fs::File::create(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut out = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
        write!(out, "electric").map_err(io_err)?;
        for name in &self.hydraulic_names {
            write!(out, ",{name}").map_err(io_err)?;
        }
        writeln!(out).map_err(io_err)?;
        for (j, name) in self.electric_names.iter().enumerate() {
            write!(out, "{name}").map_err(io_err)?;
            for i in 0..self.hydraulic_names.len() {
                write!(out, ",{}", self.weights.at(j, i)).map_err(io_err)?;
            }
            writeln!(out).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u32, b: u32) -> u32 {
    a / gcd(a, b) * b
}

/// Coupling nonlinearity `tanh(s x)/s`, identity at s = 0.
fn saturate(s: f64, x: f64) -> f64 {
    if s == 0.0 {
        x
    } else {
        (s * x).tanh() / s
    }
}

struct HydraulicShape {
    gain: f64,
    kappa: f64,
    offset: f64,
}

struct ElectricShape {
    direct: f64,
    kappa: f64,
    offset: f64,
}

/// Generate one plant dataset. Deterministic given the spec (seed included).
pub fn generate(spec: &PlantSpec) -> Result<(TimeSeriesFrame, GroundTruthCoupling)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let fine_rate = lcm(spec.hydraulic_rate, spec.electric_rate) as usize;
    let warmup = spec.coupling_lag + 8;
    let total_minutes = warmup + spec.length_minutes;
    let fine_len = total_minutes * fine_rate;
    let lag_fine = spec.coupling_lag * fine_rate;

    // Per-channel response shapes.
    let hydraulic: Vec<HydraulicShape> = (0..spec.n_hydraulic)
        .map(|_| HydraulicShape {
            gain: rng.random_range(0.5..1.5),
            kappa: rng.random_range(0.8..2.0),
            offset: rng.random_range(-0.3..0.3),
        })
        .collect();
    let electric: Vec<ElectricShape> = (0..spec.n_electric)
        .map(|_| ElectricShape {
            direct: spec.direct_drive * rng.random_range(0.7..1.3),
            kappa: rng.random_range(0.8..2.0),
            offset: rng.random_range(-0.2..0.2),
        })
        .collect();

    // Sparse parent map with weights normalized to sum to 1 per electric
    // channel, then scaled by the coupling strength.
    let mut weights = Tensor::zeros(&[spec.n_electric, spec.n_hydraulic]);
    let mut all_hydraulic: Vec<usize> = (0..spec.n_hydraulic).collect();
    for j in 0..spec.n_electric {
        all_hydraulic.shuffle(&mut rng);
        let parents = &all_hydraulic[..spec.parents_per_electric];
        let raw: Vec<f64> = parents.iter().map(|_| rng.random_range(0.5..1.5)).collect();
        let sum: f64 = raw.iter().sum();
        for (&p, &r) in parents.iter().zip(&raw) {
            weights.set(j, p, spec.coupling_strength * r / sum);
        }
    }

    // Shared control signal: smooth bump per cycle with a random amplitude
    // drawn from one of two operating regimes per cycle.
    let cycles = total_minutes / spec.schedule_period + 2;
    let amplitudes: Vec<f64> = (0..cycles)
        .map(|_| {
            if rng.random::<f64>() < 0.5 {
                rng.random_range(0.15..0.45)
            } else {
                rng.random_range(0.65..0.95)
            }
        })
        .collect();
    let period = spec.schedule_period as f64;
    let control: Vec<f64> = (0..fine_len)
        .map(|t| {
            let minutes = t as f64 / fine_rate as f64;
            let cycle = (minutes / period) as usize;
            let phase = (minutes - cycle as f64 * period) / period;
            let bump = 0.5 - 0.5 * (std::f64::consts::TAU * phase).cos();
            0.1 + amplitudes[cycle] * bump
        })
        .collect();

    // Hydraulic clean states: response to the control plus a private AR(1).
    let phi = spec.idiosyncratic_decay.powf(1.0 / fine_rate as f64);
    let innov = spec.idiosyncratic_std * (1.0 - phi * phi).sqrt();
    let mut h_clean = vec![vec![0.0; fine_len]; spec.n_hydraulic];
    for (i, shape) in hydraulic.iter().enumerate() {
        let mut rho = spec.idiosyncratic_std * normal.sample(&mut rng);
        for t in 0..fine_len {
            if t > 0 {
                rho = phi * rho + innov * normal.sample(&mut rng);
            }
            h_clean[i][t] = shape.offset + shape.gain * (shape.kappa * control[t]).tanh() + rho;
        }
    }

    // Electric clean states: lagged direct drive plus lagged parent mix.
    // The coupling nonlinearity is centered on each parent's operating
    // point, so its curvature acts where the data actually lives and a
    // linear read of the window stays beatable.
    let mut e_clean = vec![vec![0.0; fine_len]; spec.n_electric];
    for (j, shape) in electric.iter().enumerate() {
        for t in 0..fine_len {
            let src = t.saturating_sub(lag_fine);
            let mut mix = 0.0;
            for i in 0..spec.n_hydraulic {
                let w = weights.at(j, i);
                if w != 0.0 {
                    let centered = h_clean[i][src] - hydraulic[i].offset;
                    mix += w * saturate(spec.coupling_saturation, centered);
                }
            }
            let gain = 1.0 + spec.coupling_modulation * (control[src] - 0.6);
            e_clean[j][t] = shape.offset
                + shape.direct * (shape.kappa * (control[src] - 0.6)).tanh()
                + gain * mix;
        }
    }

    // Sample each channel at its native rate (with per-raw-sample noise
    // scaled so the smoothed series keeps ~noise_std), then block-average.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(spec.n_electric + spec.n_hydraulic);
    let mut channels: Vec<ChannelMeta> = Vec::with_capacity(spec.n_electric + spec.n_hydraulic);
    let sample_channel = |clean: &[f64],
                              rate: u32,
                              rng: &mut ChaCha8Rng|
     -> Result<Vec<f64>> {
        let stride = fine_rate / rate as usize;
        let raw_noise = spec.noise_std * (rate as f64).sqrt();
        let raw: Vec<f64> = (warmup * fine_rate..fine_len)
            .step_by(stride)
            .map(|t| clean[t] + raw_noise * normal.sample(rng))
            .collect();
        smooth(&raw, rate)
    };

    for (j, clean) in e_clean.iter().enumerate() {
        columns.push(sample_channel(clean, spec.electric_rate, &mut rng)?);
        channels.push(ChannelMeta::new(
            format!("el{j:02}_current"),
            Subsystem::Electric,
            spec.electric_rate,
        ));
    }
    let kinds = ["pressure", "flow", "level"];
    for (i, clean) in h_clean.iter().enumerate() {
        columns.push(sample_channel(clean, spec.hydraulic_rate, &mut rng)?);
        channels.push(ChannelMeta::new(
            format!("hy{i:02}_{}", kinds[i % kinds.len()]),
            Subsystem::Hydraulic,
            spec.hydraulic_rate,
        ));
    }

    let t = spec.length_minutes;
    let c = channels.len();
    let mut values = Tensor::zeros(&[t, c]);
    for (j, col) in columns.iter().enumerate() {
        debug_assert_eq!(col.len(), t);
        for (r, &v) in col.iter().enumerate() {
            values.set(r, j, v);
        }
    }
    let timestamps: Vec<i64> = (0..t as i64).map(|m| spec.start_minute + m).collect();
    let frame = TimeSeriesFrame::new(values, timestamps, channels)?;

    let control_minutes: Vec<f64> = (0..t)
        .map(|m| {
            let base = (warmup + m) * fine_rate;
            control[base..base + fine_rate].iter().sum::<f64>() / fine_rate as f64
        })
        .collect();
    let coupling = GroundTruthCoupling {
        electric_names: frame
            .electric_indices()
            .iter()
            .map(|&i| frame.channels[i].name.clone())
            .collect(),
        hydraulic_names: frame
            .hydraulic_indices()
            .iter()
            .map(|&i| frame.channels[i].name.clone())
            .collect(),
        weights,
        control: control_minutes,
    };
    Ok((frame, coupling))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PlantSpec {
        PlantSpec {
            n_hydraulic: 5,
            n_electric: 3,
            length_minutes: 600,
            parents_per_electric: 2,
            seed: 42,
            ..PlantSpec::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = small_spec();
        let (a, ca) = generate(&spec).unwrap();
        let (b, cb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let (c, _) = generate(&PlantSpec {
            seed: 43,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_spec_matches_case_study_shape() {
        let spec = PlantSpec {
            length_minutes: 300,
            ..PlantSpec::default()
        };
        let (frame, coupling) = generate(&spec).unwrap();
        assert_eq!(frame.channel_count(), 58);
        assert_eq!(frame.electric_indices().len(), 21);
        assert_eq!(frame.hydraulic_indices().len(), 37);
        for j in 0..21 {
            assert!(!coupling.parents_of(j).is_empty());
        }
    }

    #[test]
    fn degenerate_coupling_is_exact_passthrough() {
        let spec = PlantSpec {
            n_hydraulic: 1,
            n_electric: 1,
            length_minutes: 120,
            coupling_lag: 0,
            noise_std: 0.0,
            parents_per_electric: 1,
            coupling_saturation: 0.0,
            coupling_modulation: 0.0,
            direct_drive: 0.0,
            hydraulic_rate: 1,
            electric_rate: 1,
            seed: 7,
            ..PlantSpec::default()
        };
        let (frame, coupling) = generate(&spec).unwrap();
        assert_eq!(coupling.weights.at(0, 0), 1.0);
        let e = frame.electric_indices()[0];
        let h = frame.hydraulic_indices()[0];
        for r in 0..frame.len() {
            let de = frame.values.at(r, e);
            let dh = frame.values.at(r, h);
            // Same clean state, no noise, identity coupling: only the
            // electric offset separates them.
            assert!((de - dh).abs() < 1e-12 + 0.21, "row {r}: {de} vs {dh}");
        }
        // And the offset is constant across rows.
        let d0 = frame.values.at(0, e) - frame.values.at(0, h);
        for r in 1..frame.len() {
            let d = frame.values.at(r, e) - frame.values.at(r, h);
            assert!((d - d0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_correlation_peaks_at_coupling_lag() {
        let spec = PlantSpec {
            n_hydraulic: 1,
            n_electric: 1,
            length_minutes: 3000,
            coupling_lag: 2,
            noise_std: 0.001,
            parents_per_electric: 1,
            direct_drive: 0.0,
            idiosyncratic_std: 0.35,
            seed: 5,
            ..PlantSpec::default()
        };
        let (frame, _) = generate(&spec).unwrap();
        let e = frame.electric_indices()[0];
        let h = frame.hydraulic_indices()[0];
        let t = frame.len();
        let corr_at = |lag: usize| {
            let n = t - 8;
            let xs: Vec<f64> = (8..t).map(|r| frame.values.at(r - lag, h)).collect();
            let ys: Vec<f64> = (8..t).map(|r| frame.values.at(r, e)).collect();
            let mx = xs.iter().sum::<f64>() / n as f64;
            let my = ys.iter().sum::<f64>() / n as f64;
            let mut cov = 0.0;
            let mut vx = 0.0;
            let mut vy = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                cov += (x - mx) * (y - my);
                vx += (x - mx) * (x - mx);
                vy += (y - my) * (y - my);
            }
            cov / (vx.sqrt() * vy.sqrt())
        };
        let best = (0..=6).max_by(|&a, &b| corr_at(a).total_cmp(&corr_at(b))).unwrap();
        assert_eq!(best, spec.coupling_lag, "correlation peak at wrong lag");
    }

    #[test]
    fn output_is_roughly_stationary_across_halves() {
        // Long enough that the AR(1) components mix across each half.
        let spec = PlantSpec {
            length_minutes: 6000,
            ..small_spec()
        };
        let (frame, _) = generate(&spec).unwrap();
        let t = frame.len();
        for j in 0..frame.channel_count() {
            let col: Vec<f64> = (0..t).map(|r| frame.values.at(r, j)).collect();
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let m_all = mean(&col);
            let sd = (col.iter().map(|v| (v - m_all) * (v - m_all)).sum::<f64>()
                / col.len() as f64)
                .sqrt();
            let drift = (mean(&col[..t / 2]) - mean(&col[t / 2..])).abs();
            assert!(drift < 0.75 * sd + 0.05, "channel {j} drifts: {drift} vs sd {sd}");
        }
    }

    #[test]
    fn zero_coupling_strength_severs_parents() {
        let spec = PlantSpec {
            coupling_strength: 0.0,
            ..small_spec()
        };
        let (_, coupling) = generate(&spec).unwrap();
        assert!(coupling.weights.data().iter().all(|&w| w == 0.0));
    }
}
