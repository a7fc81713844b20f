//! Time-series ingestion and dataset construction: moving-average smoothing,
//! min-max normalization fitted on the training range only, temporal
//! splitting, covariate attachment, and sliding-window samples.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MINUTES_PER_DAY: i64 = 1440;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    Electric,
    Hydraulic,
}

impl fmt::Display for Subsystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subsystem::Electric => write!(f, "electric"),
            Subsystem::Hydraulic => write!(f, "hydraulic"),
        }
    }
}

impl std::str::FromStr for Subsystem {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "electric" => Ok(Subsystem::Electric),
            "hydraulic" => Ok(Subsystem::Hydraulic),
            other => Err(CoreError::Parse(format!("unknown subsystem tag {other:?}"))),
        }
    }
}

/// Per-channel metadata. `native_rate` is the number of raw samples that are
/// averaged into one output sample for this channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub subsystem: Subsystem,
    pub native_rate: u32,
}

impl ChannelMeta {
    pub fn new(name: impl Into<String>, subsystem: Subsystem, native_rate: u32) -> Self {
        ChannelMeta {
            name: name.into(),
            subsystem,
            native_rate,
        }
    }

    fn header(&self) -> String {
        format!("{}|{}|{}", self.name, self.subsystem, self.native_rate)
    }
}

/// A T x C matrix of sensor readings on a uniform 1-minute grid, with
/// per-channel metadata. Timestamps are minutes since the Unix epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub values: Tensor,
    pub timestamps: Vec<i64>,
    pub channels: Vec<ChannelMeta>,
}

impl TimeSeriesFrame {
    pub fn new(values: Tensor, timestamps: Vec<i64>, channels: Vec<ChannelMeta>) -> Result<Self> {
        if values.rows() != timestamps.len() {
            return Err(CoreError::Shape(format!(
                "{} rows vs {} timestamps",
                values.rows(),
                timestamps.len()
            )));
        }
        if values.cols() != channels.len() {
            return Err(CoreError::Shape(format!(
                "{} columns vs {} channel descriptors",
                values.cols(),
                channels.len()
            )));
        }
        for pair in timestamps.windows(2) {
            if pair[1] - pair[0] != 1 {
                return Err(CoreError::Parse(format!(
                    "timestamps must be strictly increasing at 1-minute spacing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if !values.is_finite() {
            return Err(CoreError::Parse("frame contains non-finite values".into()));
        }
        Ok(TimeSeriesFrame {
            values,
            timestamps,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn electric_indices(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.subsystem == Subsystem::Electric)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn hydraulic_indices(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.subsystem == Subsystem::Hydraulic)
            .map(|(i, _)| i)
            .collect()
    }

    /// Frame restricted to the given channel columns, preserving order.
    pub fn select_channels(&self, idx: &[usize]) -> Result<TimeSeriesFrame> {
        let (t, c) = (self.len(), self.channel_count());
        for &i in idx {
            if i >= c {
                return Err(CoreError::Shape(format!("channel index {i} out of {c}")));
            }
        }
        let mut values = Tensor::zeros(&[t, idx.len()]);
        for r in 0..t {
            for (k, &i) in idx.iter().enumerate() {
                values.set(r, k, self.values.at(r, i));
            }
        }
        TimeSeriesFrame::new(
            values,
            self.timestamps.clone(),
            idx.iter().map(|&i| self.channels[i].clone()).collect(),
        )
    }

    /// Drop hydraulic channels; used by the ablation path.
    pub fn electric_only(&self) -> Result<TimeSeriesFrame> {
        self.select_channels(&self.electric_indices())
    }
}

/// Moving-average smoothing: each output sample is the mean of one block of
/// `rate` consecutive raw samples; a trailing partial block is dropped.
pub fn smooth(raw: &[f64], rate: u32) -> Result<Vec<f64>> {
    if rate < 1 {
        return Err(CoreError::Config("native rate must be >= 1".into()));
    }
    let rate = rate as usize;
    Ok(raw
        .chunks_exact(rate)
        .map(|block| block.iter().sum::<f64>() / rate as f64)
        .collect())
}

/// Per-channel min/max fitted on the training range only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_channel_min: Vec<f64>,
    pub per_channel_max: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(frame: &TimeSeriesFrame, train_range: &Range<usize>) -> Result<Self> {
        if train_range.is_empty() || train_range.end > frame.len() {
            return Err(CoreError::Config(format!(
                "normalizer range {train_range:?} invalid for frame of length {}",
                frame.len()
            )));
        }
        let c = frame.channel_count();
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for r in train_range.clone() {
            for j in 0..c {
                let v = frame.values.at(r, j);
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(NormalizationStats {
            per_channel_min: min,
            per_channel_max: max,
        })
    }

    /// `(x - min) / (max - min)` with the denominator guarded for constant
    /// channels. Values outside [0,1] are expected on val/test rows.
    pub fn apply(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        if self.per_channel_min.len() != frame.channel_count() {
            return Err(CoreError::Shape(format!(
                "stats for {} channels applied to {}-channel frame",
                self.per_channel_min.len(),
                frame.channel_count()
            )));
        }
        let (t, c) = (frame.len(), frame.channel_count());
        let mut out = Tensor::zeros(&[t, c]);
        for j in 0..c {
            let lo = self.per_channel_min[j];
            let span = (self.per_channel_max[j] - lo).max(1e-12);
            for r in 0..t {
                out.set(r, j, (frame.values.at(r, j) - lo) / span);
            }
        }
        TimeSeriesFrame::new(out, frame.timestamps.clone(), frame.channels.clone())
    }
}

/// Contiguous, ordered, non-overlapping index ranges: every validation index
/// exceeds every training index, every test index exceeds every validation
/// index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    /// Windows of shape (w, h) must fit in each non-empty split.
    pub fn validate_for_windows(&self, w: usize, h: usize) -> Result<()> {
        for (name, r) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if !r.is_empty() && r.len() < w + h {
                return Err(CoreError::Config(format!(
                    "{name} split of length {} cannot hold a window of {w}+{h}",
                    r.len()
                )));
            }
        }
        Ok(())
    }
}

/// Temporal split with floor-then-remainder rounding: train and val lengths
/// are floored, the remainder goes to test.
pub fn split(len: usize, ratios: (f64, f64, f64)) -> Result<SplitRanges> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    if ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(CoreError::Config("split ratios must be non-negative".into()));
    }
    let n_train = (len as f64 * ratios.0).floor() as usize;
    let n_val = (len as f64 * ratios.1).floor() as usize;
    let ranges = SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..len,
    };
    debug_assert!(ranges.test.end == len);
    Ok(ranges)
}

/// Covariate columns appended to every window's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSpec {
    None,
    /// sin/cos of minute-of-day and day-of-week: 4 columns in [-1, 1].
    #[default]
    Sinusoidal,
}

impl CovariateSpec {
    pub fn width(&self) -> usize {
        match self {
            CovariateSpec::None => 0,
            CovariateSpec::Sinusoidal => 4,
        }
    }

    pub fn encode(&self, timestamp_minutes: i64, out: &mut [f64]) {
        match self {
            CovariateSpec::None => {}
            CovariateSpec::Sinusoidal => {
                let tau = std::f64::consts::TAU;
                let minute = timestamp_minutes.rem_euclid(MINUTES_PER_DAY) as f64;
                let day = timestamp_minutes.div_euclid(MINUTES_PER_DAY).rem_euclid(7) as f64;
                let am = tau * minute / MINUTES_PER_DAY as f64;
                let ad = tau * day / 7.0;
                out[0] = am.sin();
                out[1] = am.cos();
                out[2] = ad.sin();
                out[3] = ad.cos();
            }
        }
    }
}

/// One training item anchored at time t: the full input window over all
/// channels plus covariates, and the electric-column forecast/backcast
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// w x (C + d-1) matrix: sensor columns then covariate columns.
    pub input: Tensor,
    /// h x E electric rows at [t, t+h).
    pub target_forecast: Tensor,
    /// w x E electric rows at [t-w, t).
    pub target_backcast: Tensor,
    pub anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub w: usize,
    pub h: usize,
    pub covariates: CovariateSpec,
}

impl WindowSpec {
    pub fn new(w: usize, h: usize, covariates: CovariateSpec) -> Self {
        WindowSpec { w, h, covariates }
    }
}

/// Anchor indices t for which both the input window [t-w, t) and the target
/// rows [t, t+h) lie inside `range`. Count is `len(range) - w - h + 1`, or
/// zero when the range is too short.
pub fn window_anchors(range: &Range<usize>, w: usize, h: usize) -> Vec<usize> {
    if range.len() < w + h {
        return Vec::new();
    }
    (range.start + w..=range.end - h).collect()
}

/// Materialize the sample anchored at `t`.
pub fn make_window(frame: &TimeSeriesFrame, t: usize, spec: &WindowSpec) -> Result<WindowSample> {
    let (w, h) = (spec.w, spec.h);
    if t < w || t + h > frame.len() {
        return Err(CoreError::Config(format!(
            "anchor {t} out of bounds for window {w}+{h} in frame of length {}",
            frame.len()
        )));
    }
    let c = frame.channel_count();
    let d_cov = spec.covariates.width();
    let electric = frame.electric_indices();
    let e = electric.len();

    let mut input = Tensor::zeros(&[w, c + d_cov]);
    let mut cov = vec![0.0; d_cov.max(1)];
    for r in 0..w {
        let src = t - w + r;
        for j in 0..c {
            input.set(r, j, frame.values.at(src, j));
        }
        if d_cov > 0 {
            spec.covariates.encode(frame.timestamps[src], &mut cov);
            for (k, &v) in cov[..d_cov].iter().enumerate() {
                input.set(r, c + k, v);
            }
        }
    }

    let mut target_forecast = Tensor::zeros(&[h, e]);
    for r in 0..h {
        for (k, &j) in electric.iter().enumerate() {
            target_forecast.set(r, k, frame.values.at(t + r, j));
        }
    }
    let mut target_backcast = Tensor::zeros(&[w, e]);
    for r in 0..w {
        for (k, &j) in electric.iter().enumerate() {
            target_backcast.set(r, k, frame.values.at(t - w + r, j));
        }
    }

    Ok(WindowSample {
        input,
        target_forecast,
        target_backcast,
        anchor: t,
    })
}

/// Materialize every window in `range`. Large runs should prefer
/// [`window_anchors`] + [`make_window`] to keep memory flat.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    range: &Range<usize>,
    spec: &WindowSpec,
) -> Result<Vec<WindowSample>> {
    window_anchors(range, spec.w, spec.h)
        .into_iter()
        .map(|t| make_window(frame, t, spec))
        .collect()
}

// ── CSV interchange ─────────────────────────────────────────────────────
//
// First column `timestamp` (ISO-8601 or integer minutes); each data column
// header is `name|subsystem|rate`. Comma-separated, LF line endings.

pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<TimeSeriesFrame> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CoreError::Parse("empty file".into()))?;
    let mut cols = header.split(',');
    let first = cols.next().unwrap_or_default().trim();
    if first != "timestamp" {
        return Err(CoreError::Parse(format!(
            "first header column must be 'timestamp', got {first:?}"
        )));
    }
    let mut channels = Vec::new();
    for (j, spec) in cols.enumerate() {
        channels.push(parse_channel_header(spec.trim(), j)?);
    }
    if channels.is_empty() {
        return Err(CoreError::Parse("no data columns in header".into()));
    }

    let c = channels.len();
    let mut timestamps: Vec<i64> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let ts_field = fields.next().unwrap_or_default().trim();
        let ts = parse_timestamp(ts_field).map_err(|e| {
            CoreError::Parse(format!("row {}: bad timestamp {ts_field:?}: {e}", lineno + 1))
        })?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(CoreError::Parse(format!(
                    "row {}: duplicate or decreasing timestamp {ts}",
                    lineno + 1
                )));
            }
        }
        timestamps.push(ts);
        let mut count = 0;
        for (j, field) in fields.enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CoreError::Parse(format!(
                    "row {}, column {} ({}): non-numeric cell {field:?}",
                    lineno + 1,
                    j + 2,
                    channels.get(j).map(|c| c.name.as_str()).unwrap_or("?")
                ))
            })?;
            data.push(v);
            count += 1;
        }
        if count != c {
            return Err(CoreError::Parse(format!(
                "row {}: expected {} data cells, got {}",
                lineno + 1,
                c,
                count
            )));
        }
    }
    let t = timestamps.len();
    TimeSeriesFrame::new(Tensor::new(vec![t, c], data)?, timestamps, channels)
}

fn parse_channel_header(spec: &str, col: usize) -> Result<ChannelMeta> {
    let parts: Vec<&str> = spec.split('|').collect();
    if parts.len() != 3 {
        return Err(CoreError::Parse(format!(
            "data column {} header {spec:?} is not name|subsystem|rate",
            col + 2
        )));
    }
    let subsystem: Subsystem = parts[1].parse().map_err(|_| {
        CoreError::Parse(format!(
            "data column {} ({}): unknown subsystem tag {:?}",
            col + 2,
            parts[0],
            parts[1]
        ))
    })?;
    let rate: u32 = parts[2].parse().map_err(|_| {
        CoreError::Parse(format!(
            "data column {} ({}): bad native rate {:?}",
            col + 2,
            parts[0],
            parts[2]
        ))
    })?;
    if rate == 0 {
        return Err(CoreError::Parse(format!(
            "data column {} ({}): native rate must be positive",
            col + 2,
            parts[0]
        )))
    }
    Ok(ChannelMeta::new(parts[0], subsystem, rate))
}

fn parse_timestamp(s: &str) -> std::result::Result<i64, String> {
    if let Ok(minutes) = s.parse::<i64>() {
        return Ok(minutes);
    }
    let seconds = if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        dt.timestamp()
    } else if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        dt.and_utc().timestamp()
    } else if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        dt.and_utc().timestamp()
    } else {
        return Err("not an integer minute or ISO-8601 datetime".into());
    };
    if seconds % 60 != 0 {
        return Err("timestamp is not on a whole minute".into());
    }
    Ok(seconds / 60)
}

pub fn write_csv(frame: &TimeSeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);

    let mut header = String::from("timestamp");
    for ch in &frame.channels {
        header.push(',');
        header.push_str(&ch.header());
    }
    writeln!(out, "{header}").map_err(io_err)?;
    let c = frame.channel_count();
    for r in 0..frame.len() {
        write!(out, "{}", frame.timestamps[r]).map_err(io_err)?;
        for j in 0..c {
            write!(out, ",{}", frame.values.at(r, j)).map_err(io_err)?;
        }
        writeln!(out).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}
