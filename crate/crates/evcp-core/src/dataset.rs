//! Dataset pipeline: load and validate the demand/price/temperature tables,
//! interpolate coarse covariates onto the 5-minute grid, split chronologically,
//! cut sliding windows, min-max scale covariates, and generate synthetic
//! city bundles for desk-scale testing.
//!
//! File formats are delimited text with a one-line header naming areas
//! (`time,<area_id_1>,...`), one row per step. A small TOML descriptor names
//! the paths, step sizes, orientation, and horizon list.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::PoiCorpus;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io ({path}): {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: data row {row}, column `{column}`: {detail}")]
    Parse { path: String, row: usize, column: String, detail: String },
    #[error("occupancy outside [0,1]: {}", format_offenders(.offenders))]
    OutOfRange { offenders: Vec<(usize, String, f64)> },
    #[error("{what}: expected {expected} samples, got {got}")]
    Alignment { what: String, expected: usize, got: usize },
    #[error("interpolation needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("interpolation sample times must be strictly increasing")]
    NonMonotonicTimes,
    #[error("need at least 10 steps to split, got {0}")]
    SplitTooShort(usize),
    #[error("range of length {len} too short for lookback {tau} plus horizon {max_horizon}")]
    RangeTooShort { len: usize, tau: usize, max_horizon: usize },
    #[error("covariate step of {got} min is not a multiple of the {base} min demand step")]
    StepRatio { got: u32, base: u32 },
    #[error("config: {0}")]
    Config(String),
}

fn format_offenders(offenders: &[(usize, String, f64)]) -> String {
    let mut s = String::new();
    for (i, (row, area, v)) in offenders.iter().take(8).enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "row {row} area {area} value {v}");
    }
    if offenders.len() > 8 {
        let _ = write!(s, " (+{} more)", offenders.len() - 8);
    }
    s
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Per-area occupancy-ratio series on the 5-minute grid, `values: [n_areas, t_steps]`.
#[derive(Debug, Clone)]
pub struct DemandSeries {
    pub values: Array2<f64>,
    pub area_ids: Vec<String>,
    pub step_minutes: u32,
    pub start_time: String,
}

impl DemandSeries {
    pub fn n_areas(&self) -> usize {
        self.values.nrows()
    }

    pub fn t_steps(&self) -> usize {
        self.values.ncols()
    }
}

/// Price and temperature on the same grid as the paired [`DemandSeries`].
#[derive(Debug, Clone)]
pub struct CovariateSeries {
    pub price: Array2<f64>,
    pub temperature: Array2<f64>,
}

/// Half-open chronological index ranges over the step axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Sliding-window samples: `inputs [b, n, tau, f]` with features ordered
/// (demand, price, temperature), `targets [b, n, h]` at the horizon offsets.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Array4<f64>,
    pub targets: Array3<f64>,
    pub horizon_offsets: Vec<usize>,
    /// Absolute step index of each window's last input step.
    pub anchors: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_areas(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn lookback(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn n_features(&self) -> usize {
        self.inputs.shape()[3]
    }

    /// Copies the selected samples into a new batch (mini-batch assembly).
    pub fn gather(&self, idx: &[usize]) -> WindowBatch {
        let (_, n, tau, f) = self.inputs.dim();
        let h = self.targets.shape()[2];
        let mut inputs = Array4::zeros((idx.len(), n, tau, f));
        let mut targets = Array3::zeros((idx.len(), n, h));
        for (row, &i) in idx.iter().enumerate() {
            inputs.index_axis_mut(Axis(0), row).assign(&self.inputs.index_axis(Axis(0), i));
            targets.index_axis_mut(Axis(0), row).assign(&self.targets.index_axis(Axis(0), i));
        }
        WindowBatch {
            inputs,
            targets,
            horizon_offsets: self.horizon_offsets.clone(),
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
        }
    }
}

/// Min-max statistics of one covariate over the training range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
    /// Constant over the training range; scaled output is all zeros.
    pub degenerate: bool,
}

impl MinMaxStats {
    pub fn apply(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            y * (self.max - self.min) + self.min
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormStats {
    pub price: MinMaxStats,
    pub temperature: MinMaxStats,
}

// ---------------------------------------------------------------------------
// Descriptor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One row per time step (header `time,<area ids>`).
    TimeRows,
    /// One row per area (header `area_id,<times>`).
    AreaRows,
}

fn default_step() -> u32 {
    5
}

fn default_orientation() -> Orientation {
    Orientation::TimeRows
}

fn default_horizons() -> Vec<usize> {
    vec![3, 6, 9, 12]
}

fn default_start_time() -> String {
    "2024-01-01T00:00".to_string()
}

/// `dataset.toml`: paths, step sizes, orientation, horizon list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub demand: PathBuf,
    pub price: PathBuf,
    pub temperature: PathBuf,
    #[serde(default)]
    pub poi: Option<PathBuf>,
    #[serde(default)]
    pub adjacency: Option<PathBuf>,
    #[serde(default = "default_step")]
    pub step_minutes: u32,
    #[serde(default = "default_step")]
    pub price_step_minutes: u32,
    #[serde(default = "default_step")]
    pub temperature_step_minutes: u32,
    #[serde(default = "default_orientation")]
    pub orientation: Orientation,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_start_time")]
    pub start_time: String,
}

impl DatasetDescriptor {
    /// Loads the descriptor and resolves its paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut desc: DatasetDescriptor =
            toml::from_str(&text).map_err(|e| DatasetError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        desc.demand = resolve(&desc.demand);
        desc.price = resolve(&desc.price);
        desc.temperature = resolve(&desc.temperature);
        desc.poi = desc.poi.as_ref().map(resolve);
        desc.adjacency = desc.adjacency.as_ref().map(resolve);
        Ok(desc)
    }
}

// ---------------------------------------------------------------------------
// Table IO
// ---------------------------------------------------------------------------

/// Parses a numeric table; returns `(series_ids, values [n_series, t_steps])`.
pub fn read_table(path: &Path, orientation: Orientation) -> Result<(Vec<String>, Array2<f64>), DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pathstr = path.display().to_string();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| DatasetError::Parse {
        path: pathstr.clone(),
        row: 0,
        column: "-".into(),
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(DatasetError::Parse {
            path: pathstr,
            row: 0,
            column: "-".into(),
            detail: "header needs a label column plus at least one series".into(),
        });
    }
    let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut data: Vec<f64> = Vec::new();
    let mut n_rows = 0usize;
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(DatasetError::Parse {
                path: pathstr,
                row: row + 1,
                column: "-".into(),
                detail: format!("{} fields, expected {}", fields.len(), cols.len()),
            });
        }
        for (c, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| DatasetError::Parse {
                path: pathstr.clone(),
                row: row + 1,
                column: names[c].clone(),
                detail: format!("`{f}` is not a number"),
            })?;
            data.push(v);
        }
        n_rows += 1;
    }
    let table = Array2::from_shape_vec((n_rows, names.len()), data)
        .expect("row-major fill matches counted shape");
    match orientation {
        // rows are time steps, columns are areas: transpose to [n, t]
        Orientation::TimeRows => Ok((names, table.t().to_owned())),
        Orientation::AreaRows => {
            // rows are areas already; `names` were column labels (times), so
            // series ids come from the first column instead
            let text2 = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let ids: Vec<String> = text2
                .lines()
                .filter(|l| !l.trim().is_empty())
                .skip(1)
                .map(|l| l.split(',').next().unwrap_or("").trim().to_string())
                .collect();
            Ok((ids, table))
        }
    }
}

/// Writes a `[n_series, t_steps]` matrix in the `time,<ids>` layout. Values
/// print with Rust's shortest round-trip float formatting, so a re-read
/// reproduces the matrix exactly.
pub fn write_series_csv(
    path: &Path,
    ids: &[String],
    values: &Array2<f64>,
    step_minutes: u32,
) -> Result<(), DatasetError> {
    let mut out = String::from("time");
    for id in ids {
        let _ = write!(out, ",{id}");
    }
    out.push('\n');
    for t in 0..values.ncols() {
        let _ = write!(out, "{}", t as u64 * step_minutes as u64);
        for n in 0..values.nrows() {
            let _ = write!(out, ",{}", values[[n, t]]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Options resolved from a [`DatasetDescriptor`] (or defaults: everything on
/// the 5-minute grid, time-row orientation).
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub orientation: Orientation,
    pub step_minutes: u32,
    pub price_step_minutes: u32,
    pub temperature_step_minutes: u32,
    pub start_time: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            orientation: Orientation::TimeRows,
            step_minutes: 5,
            price_step_minutes: 5,
            temperature_step_minutes: 5,
            start_time: default_start_time(),
        }
    }
}

impl From<&DatasetDescriptor> for LoadOptions {
    fn from(d: &DatasetDescriptor) -> Self {
        LoadOptions {
            orientation: d.orientation,
            step_minutes: d.step_minutes,
            price_step_minutes: d.price_step_minutes,
            temperature_step_minutes: d.temperature_step_minutes,
            start_time: d.start_time.clone(),
        }
    }
}

/// Loads and validates the three tables onto a common 5-minute grid.
///
/// Citywide (single-column) price or temperature broadcasts across areas;
/// covariates sampled on a coarser grid are linearly interpolated.
pub fn load_dataset(
    demand_path: &Path,
    price_path: &Path,
    temperature_path: &Path,
) -> Result<(DemandSeries, CovariateSeries), DatasetError> {
    load_dataset_with(demand_path, price_path, temperature_path, &LoadOptions::default())
}

pub fn load_dataset_with(
    demand_path: &Path,
    price_path: &Path,
    temperature_path: &Path,
    opts: &LoadOptions,
) -> Result<(DemandSeries, CovariateSeries), DatasetError> {
    let (area_ids, demand) = read_table(demand_path, opts.orientation)?;
    let (n, t) = demand.dim();
    if n == 0 || t == 0 {
        return Err(DatasetError::Config("demand table is empty".into()));
    }
    let mut offenders = Vec::new();
    for ((a, s), &v) in demand.indexed_iter() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            offenders.push((s + 1, area_ids[a].clone(), v));
        }
    }
    if !offenders.is_empty() {
        offenders.sort_by_key(|(row, _, _)| *row);
        return Err(DatasetError::OutOfRange { offenders });
    }

    let price = load_covariate(price_path, opts, &area_ids, t, opts.price_step_minutes, "price")?;
    let temperature = load_covariate(
        temperature_path,
        opts,
        &area_ids,
        t,
        opts.temperature_step_minutes,
        "temperature",
    )?;
    Ok((
        DemandSeries {
            values: demand,
            area_ids,
            step_minutes: opts.step_minutes,
            start_time: opts.start_time.clone(),
        },
        CovariateSeries { price, temperature },
    ))
}

fn load_covariate(
    path: &Path,
    opts: &LoadOptions,
    area_ids: &[String],
    t_steps: usize,
    step_minutes: u32,
    what: &str,
) -> Result<Array2<f64>, DatasetError> {
    let (ids, table) = read_table(path, opts.orientation)?;
    let dense = if step_minutes == opts.step_minutes {
        if table.ncols() != t_steps {
            return Err(DatasetError::Alignment {
                what: format!("{what} at {step_minutes} min"),
                expected: t_steps,
                got: table.ncols(),
            });
        }
        table
    } else {
        if step_minutes % opts.step_minutes != 0 {
            return Err(DatasetError::StepRatio { got: step_minutes, base: opts.step_minutes });
        }
        let ratio = (step_minutes / opts.step_minutes) as usize;
        let expected = t_steps.div_ceil(ratio);
        if table.ncols() != expected {
            return Err(DatasetError::Alignment {
                what: format!("{what} at {step_minutes} min"),
                expected,
                got: table.ncols(),
            });
        }
        let times: Vec<usize> = (0..table.ncols()).map(|i| i * ratio).collect();
        let mut dense = Array2::zeros((table.nrows(), t_steps));
        for (i, row) in table.rows().into_iter().enumerate() {
            let vals = interpolate_linear(&times, row.as_slice().unwrap(), t_steps)?;
            for (s, v) in vals.into_iter().enumerate() {
                dense[[i, s]] = v;
            }
        }
        dense
    };
    // broadcast a citywide series; otherwise require one row per area
    if dense.nrows() == 1 && area_ids.len() > 1 {
        let row = dense.row(0).to_owned();
        let mut out = Array2::zeros((area_ids.len(), t_steps));
        for mut r in out.rows_mut() {
            r.assign(&row);
        }
        Ok(out)
    } else if dense.nrows() == area_ids.len() {
        let _ = ids;
        Ok(dense)
    } else {
        Err(DatasetError::Alignment {
            what: format!("{what} series count"),
            expected: area_ids.len(),
            got: dense.nrows(),
        })
    }
}

/// Piecewise-linear interpolation onto the dense grid `0..out_len`.
///
/// `times` are sample positions in dense-grid steps. Values at sample points
/// are preserved exactly; positions beyond the last sample hold its value.
pub fn interpolate_linear(
    times: &[usize],
    values: &[f64],
    out_len: usize,
) -> Result<Vec<f64>, DatasetError> {
    if times.len() < 2 {
        return Err(DatasetError::InsufficientSamples(times.len()));
    }
    debug_assert_eq!(times.len(), values.len());
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DatasetError::NonMonotonicTimes);
    }
    let mut out = Vec::with_capacity(out_len);
    let mut seg = 0usize;
    for t in 0..out_len {
        if t <= times[0] {
            if t == times[0] {
                out.push(values[0]);
            } else {
                out.push(values[0]); // before the first sample: hold first
            }
            continue;
        }
        while seg + 1 < times.len() && times[seg + 1] < t {
            seg += 1;
        }
        if seg + 1 >= times.len() || t > *times.last().unwrap() {
            out.push(*values.last().unwrap()); // beyond the last sample: hold last
        } else if times[seg + 1] == t {
            out.push(values[seg + 1]); // exact sample point preserved
        } else {
            let (t0, t1) = (times[seg] as f64, times[seg + 1] as f64);
            let alpha = (t as f64 - t0) / (t1 - t0);
            out.push(values[seg] + alpha * (values[seg + 1] - values[seg]));
        }
    }
    Ok(out)
}

/// Chronological split with floor rounding for train and val; the remainder
/// goes to test.
pub fn chronological_split(
    t_steps: usize,
    ratios: (usize, usize, usize),
) -> Result<SplitIndex, DatasetError> {
    if t_steps < 10 {
        return Err(DatasetError::SplitTooShort(t_steps));
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    let train = t_steps * ratios.0 / total;
    let val = t_steps * ratios.1 / total;
    Ok(SplitIndex {
        train: 0..train,
        val: train..train + val,
        test: train + val..t_steps,
    })
}

/// Cuts one window per admissible anchor inside `range`: inputs cover steps
/// `[t - tau + 1, t]`, targets are demand at `t + h` for each horizon `h`.
pub fn make_windows(
    demand: &DemandSeries,
    cov: &CovariateSeries,
    range: &Range<usize>,
    tau: usize,
    horizons: &[usize],
) -> Result<WindowBatch, DatasetError> {
    if horizons.is_empty() || tau == 0 {
        return Err(DatasetError::Config("lookback and horizons must be nonzero".into()));
    }
    let max_h = *horizons.iter().max().unwrap();
    let len = range.end.saturating_sub(range.start);
    if len < tau + max_h {
        return Err(DatasetError::RangeTooShort { len, tau, max_horizon: max_h });
    }
    let n = demand.n_areas();
    let b = len - tau - max_h + 1;
    let mut inputs = Array4::zeros((b, n, tau, 3));
    let mut targets = Array3::zeros((b, n, horizons.len()));
    let mut anchors = Vec::with_capacity(b);
    for i in 0..b {
        let anchor = range.start + tau - 1 + i;
        anchors.push(anchor);
        for a in 0..n {
            for s in 0..tau {
                let t = anchor + 1 - tau + s;
                inputs[[i, a, s, 0]] = demand.values[[a, t]];
                inputs[[i, a, s, 1]] = cov.price[[a, t]];
                inputs[[i, a, s, 2]] = cov.temperature[[a, t]];
            }
            for (hi, &h) in horizons.iter().enumerate() {
                targets[[i, a, hi]] = demand.values[[a, anchor + h]];
            }
        }
    }
    Ok(WindowBatch { inputs, targets, horizon_offsets: horizons.to_vec(), anchors })
}

/// Min-max scales price and temperature to `[0,1]` with statistics from the
/// training range only. Values outside the training range extrapolate past
/// the unit interval (no clamping); a constant covariate scales to all zeros
/// and is flagged degenerate.
pub fn normalize_covariates(
    cov: &CovariateSeries,
    train_range: &Range<usize>,
) -> Result<(CovariateSeries, NormStats), DatasetError> {
    if train_range.is_empty() {
        return Err(DatasetError::Config("training range is empty".into()));
    }
    let fit = |m: &Array2<f64>| -> MinMaxStats {
        let slice = m.slice(ndarray::s![.., train_range.clone()]);
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in slice.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        MinMaxStats { min, max, degenerate: max == min }
    };
    let price_stats = fit(&cov.price);
    let temp_stats = fit(&cov.temperature);
    Ok((
        CovariateSeries {
            price: cov.price.mapv(|v| price_stats.apply(v)),
            temperature: cov.temperature.mapv(|v| temp_stats.apply(v)),
        },
        NormStats { price: price_stats, temperature: temp_stats },
    ))
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration of the synthetic city generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_areas: usize,
    pub n_groups: usize,
    pub t_steps: usize,
    pub step_minutes: u32,
    /// Smallest lookback the bundle must support (`t_steps >= 10 * lookback`).
    pub lookback: usize,
    pub k_categories: usize,
    /// Std-dev of the Gaussian noise added to each occupancy value.
    pub demand_noise: f64,
    /// Intensity of the signed Poisson jitter on POI counts: each count gets
    /// `Poisson(intensity * base) - round(intensity * base)` added, clamped at 0.
    pub poi_noise: f64,
    /// POI count for a group's signature categories.
    pub poi_rate_hi: f64,
    /// POI count for all other categories.
    pub poi_rate_lo: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_areas: 20,
            n_groups: 3,
            t_steps: 4032,
            step_minutes: 5,
            lookback: 12,
            k_categories: 14,
            demand_noise: 0.02,
            poi_noise: 0.0,
            poi_rate_hi: 40.0,
            poi_rate_lo: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_areas < 4 {
            return Err(DatasetError::Config("n_areas must be >= 4".into()));
        }
        if self.n_groups < 2 || self.n_groups > self.n_areas {
            return Err(DatasetError::Config("n_groups must be in [2, n_areas]".into()));
        }
        if self.t_steps < 10 * self.lookback {
            return Err(DatasetError::Config(format!(
                "t_steps must be >= 10 * lookback = {}",
                10 * self.lookback
            )));
        }
        if self.k_categories < self.n_groups {
            return Err(DatasetError::Config("k_categories must be >= n_groups".into()));
        }
        if self.demand_noise < 0.0 || self.poi_noise < 0.0 {
            return Err(DatasetError::Config("noise intensities must be nonnegative".into()));
        }
        if self.step_minutes == 0 || !self.poi_rate_hi.is_finite() || !self.poi_rate_lo.is_finite()
        {
            return Err(DatasetError::Config("bad step or POI rates".into()));
        }
        Ok(())
    }
}

/// A generated bundle plus its ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub demand: DemandSeries,
    pub covariates: CovariateSeries,
    pub poi: PoiCorpus,
    pub adjacency_pairs: Vec<(usize, usize)>,
    pub group_labels: Vec<usize>,
}

/// Deterministic synthetic city: latent groups with distinct daily occupancy
/// profiles and POI mixtures, a connected grid adjacency, a daily price step,
/// and a smooth temperature sinusoid.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthDataset, DatasetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t, g_count) = (config.n_areas, config.t_steps, config.n_groups);
    let steps_per_day = (24 * 60 / config.step_minutes) as f64;

    let group_labels: Vec<usize> = (0..n).map(|a| a % g_count).collect();

    let mut demand = Array2::zeros((n, t));
    for a in 0..n {
        let g = group_labels[a] as f64;
        let phase = std::f64::consts::TAU * g / g_count as f64;
        let amp = 0.24 + 0.05 * (group_labels[a] % 2) as f64;
        for s in 0..t {
            let day_pos = std::f64::consts::TAU * s as f64 / steps_per_day;
            let base = 0.5
                + amp * (day_pos + phase).sin()
                + 0.08 * (2.0 * day_pos + 1.3 * phase).sin();
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * config.demand_noise;
            demand[[a, s]] = (base + noise).clamp(0.0, 1.0);
        }
    }

    // citywide daily price step and temperature sinusoid, broadcast to areas
    let mut price = Array2::zeros((n, t));
    let mut temperature = Array2::zeros((n, t));
    for s in 0..t {
        let hour = (s as f64 * config.step_minutes as f64 / 60.0) % 24.0;
        let p = if (8.0..22.0).contains(&hour) { 1.4 } else { 0.8 };
        let day_pos = std::f64::consts::TAU * s as f64 / steps_per_day;
        let week_pos = day_pos / 7.0;
        let temp = 27.0 + 4.0 * (day_pos - std::f64::consts::FRAC_PI_2).sin() + 0.5 * week_pos.sin();
        for a in 0..n {
            price[[a, s]] = p;
            temperature[[a, s]] = temp;
        }
    }

    // POI mixture: signature categories (c mod groups == g) are frequent
    let mut counts = Array2::<u64>::zeros((n, config.k_categories));
    for a in 0..n {
        let g = group_labels[a];
        for c in 0..config.k_categories {
            let base = if c % g_count == g { config.poi_rate_hi } else { config.poi_rate_lo };
            let mut count = base.round() as i64;
            if config.poi_noise > 0.0 {
                let rate = config.poi_noise * base;
                if rate > 0.0 {
                    let jitter: f64 = Poisson::new(rate)
                        .map_err(|e| DatasetError::Config(format!("poisson: {e}")))?
                        .sample(&mut rng);
                    count += jitter as i64 - rate.round() as i64;
                }
            }
            counts[[a, c]] = count.max(0) as u64;
        }
    }

    // connected grid graph, 4-neighborhood
    let width = (n as f64).sqrt().ceil() as usize;
    let mut pairs = Vec::new();
    for a in 0..n {
        let (r, c) = (a / width, a % width);
        if c + 1 < width && a + 1 < n {
            pairs.push((a, a + 1));
        }
        if (r + 1) * width + c < n {
            pairs.push((a, (r + 1) * width + c));
        }
    }

    let area_ids: Vec<String> = (0..n).map(|a| format!("a{a:03}")).collect();
    Ok(SynthDataset {
        demand: DemandSeries {
            values: demand,
            area_ids: area_ids.clone(),
            step_minutes: config.step_minutes,
            start_time: default_start_time(),
        },
        covariates: CovariateSeries { price, temperature },
        poi: PoiCorpus {
            counts,
            categories: (0..config.k_categories).map(|c| format!("cat{c:02}")).collect(),
            area_ids,
        },
        adjacency_pairs: pairs,
        group_labels,
    })
}
