//! Sparse readings to dense mass-by-time rasters.
//!
//! Pipeline order for the standard representation:
//! time scaling, intensity scaling, binning, log scaling, row/column
//! normalization, positional channels. The swapped representation puts
//! log intensity on the y-axis and encodes mass as the cell value.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::error::{GcmsError, Result};
use crate::ingest::RawSample;
use crate::N_MASS_BINS;

pub const MIN_TIME_SLOTS: usize = 2;
pub const MAX_TIME_SLOTS: usize = 4096;
pub const DEFAULT_TIME_SLOTS: usize = 192;

/// Lower clip of the clipped log mode.
pub const LOG_CLIP_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormMode {
    None,
    /// Divide each time column by its maximum.
    #[default]
    Mass,
    /// Divide each mass row by its maximum.
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LogMode {
    /// `log10(1 + 1000 a) / log10(1001)`
    #[default]
    Shifted,
    /// `(log10(max(a, 1e-4)) + 4) / 4`
    Clipped,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Representation {
    #[default]
    MassByTime,
    IntensityByTime,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, { $($variant:path => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = GcmsError;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(GcmsError::invalid(format!("unknown {} `{other}`", $what))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name,)+ })
            }
        }
    };
}

text_enum!(NormMode, "norm mode", {
    NormMode::None => "none",
    NormMode::Mass => "mass",
    NormMode::Time => "time",
});
text_enum!(LogMode, "log mode", {
    LogMode::Shifted => "shifted",
    LogMode::Clipped => "clipped",
    LogMode::Linear => "linear",
});
text_enum!(Representation, "representation", {
    Representation::MassByTime => "mass_by_time",
    Representation::IntensityByTime => "intensity_by_time",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RasterConfig {
    pub n_time_slots: usize,
    pub norm_mode: NormMode,
    pub log_mode: LogMode,
    pub with_positional_channels: bool,
    pub representation: Representation,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            n_time_slots: DEFAULT_TIME_SLOTS,
            norm_mode: NormMode::default(),
            log_mode: LogMode::default(),
            with_positional_channels: true,
            representation: Representation::default(),
        }
    }
}

impl RasterConfig {
    /// Rows are always the 256 integer m/z values (or intensity levels).
    pub fn n_mass_bins(&self) -> usize {
        N_MASS_BINS
    }

    pub fn validate(&self) -> Result<()> {
        validate_time_slots(self.n_time_slots)
    }

    pub fn with_time_slots(mut self, n_time_slots: usize) -> Self {
        self.n_time_slots = n_time_slots;
        self
    }
}

pub(crate) fn validate_time_slots(n: usize) -> Result<()> {
    if (MIN_TIME_SLOTS..=MAX_TIME_SLOTS).contains(&n) {
        Ok(())
    } else {
        Err(GcmsError::invalid(format!(
            "time slots {n} outside [{MIN_TIME_SLOTS}, {MAX_TIME_SLOTS}]"
        )))
    }
}

/// Green (time) and blue (mass) positional planes.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalChannels {
    pub time: Array2<f64>,
    pub mass: Array2<f64>,
}

impl PositionalChannels {
    pub fn new(rows: usize, cols: usize) -> Self {
        let col_den = cols.saturating_sub(1).max(1) as f64;
        let row_den = rows.saturating_sub(1).max(1) as f64;
        Self {
            time: Array2::from_shape_fn((rows, cols), |(_, c)| c as f64 / col_den),
            mass: Array2::from_shape_fn((rows, cols), |(m, _)| m as f64 / row_den),
        }
    }
}

/// Dense raster. Row `m` is integer m/z `m`; column `c` is time slot `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub values: Array2<f64>,
    pub channels: Option<PositionalChannels>,
    pub sample_id: String,
    pub config: RasterConfig,
}

impl RasterGrid {
    /// Wraps a bare intensity matrix, with no channels and a config whose
    /// time slot count matches the column count.
    pub fn from_values(values: Array2<f64>) -> Self {
        let config = RasterConfig {
            n_time_slots: values.ncols(),
            with_positional_channels: false,
            ..RasterConfig::default()
        };
        Self {
            values,
            channels: None,
            sample_id: String::new(),
            config,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Minimum and maximum of an iterator, or `None` when empty.
fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Per-reading times scaled to [0, 1]; a zero time span maps to all zeros.
pub fn normalize_time(sample: &RawSample) -> Vec<f64> {
    let Some((lo, hi)) = min_max(sample.readings.iter().map(|r| r.time_minutes)) else {
        return Vec::new();
    };
    let span = hi - lo;
    sample
        .readings
        .iter()
        .map(|r| {
            if span > 0.0 {
                ((r.time_minutes - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-reading intensities divided by the sample maximum.
pub fn normalize_intensity(sample: &RawSample) -> Vec<f64> {
    let max = sample
        .readings
        .iter()
        .map(|r| r.intensity)
        .fold(0.0, f64::max);
    sample
        .readings
        .iter()
        .map(|r| if max > 0.0 { r.intensity / max } else { 0.0 })
        .collect()
}

/// Round-half-up integer m/z, or `None` past the last mass row.
pub fn mass_bin(mass_mz: f64) -> Option<usize> {
    let bin = (mass_mz + 0.5).floor();
    (bin >= 0.0 && bin < N_MASS_BINS as f64).then_some(bin as usize)
}

/// Half-open time slot `[k/N, (k+1)/N)`, with `t = 1` in the last slot.
pub fn time_bin(normalized_time: f64, n_time_slots: usize) -> usize {
    let k = (normalized_time * n_time_slots as f64).floor();
    (k.max(0.0) as usize).min(n_time_slots - 1)
}

/// Bins a sample with standard time and intensity scaling. Produces the raw
/// binned grid only; see [`rasterize`] for the full pipeline.
pub fn bin_to_grid(sample: &RawSample, config: &RasterConfig) -> Result<RasterGrid> {
    bin_with_times(sample, &normalize_time(sample), config)
}

/// Bins a sample using caller-supplied normalized times (one per reading),
/// e.g. after a time warp.
pub fn bin_with_times(
    sample: &RawSample,
    normalized_times: &[f64],
    config: &RasterConfig,
) -> Result<RasterGrid> {
    if config.representation != Representation::MassByTime {
        return Err(GcmsError::invalid(
            "bin_to_grid needs the mass_by_time representation",
        ));
    }
    config.validate()?;
    if normalized_times.len() != sample.len() {
        return Err(GcmsError::ShapeMismatch(format!(
            "{} times for {} readings",
            normalized_times.len(),
            sample.len()
        )));
    }
    let n = config.n_time_slots;
    let intensities = normalize_intensity(sample);

    // Sorting contributions by (cell, value) fixes the summation order, so
    // the result does not depend on input row order.
    let mut contributions: Vec<(usize, f64)> = sample
        .readings
        .iter()
        .zip(normalized_times)
        .zip(&intensities)
        .filter_map(|((r, &t), &v)| mass_bin(r.mass_mz).map(|m| (m * n + time_bin(t, n), v)))
        .collect();
    if contributions.is_empty() {
        log::warn!(
            "sample {}: every reading lies above m/z {}; raster is empty",
            sample.sample_id,
            N_MASS_BINS - 1
        );
    }
    contributions.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut values = Array2::zeros((N_MASS_BINS, n));
    let flat = values
        .as_slice_mut()
        .expect("freshly allocated arrays are contiguous");
    for group in contributions.chunk_by(|a, b| a.0 == b.0) {
        let sum: f64 = group.iter().map(|&(_, v)| v).sum();
        flat[group[0].0] = sum / group.len() as f64;
    }

    Ok(RasterGrid {
        values,
        channels: None,
        sample_id: sample.sample_id.clone(),
        config: *config,
    })
}

/// Log scaling of one value in [0, 1], rescaled so the output is in [0, 1].
pub fn log_scale(v: f64, mode: LogMode) -> f64 {
    match mode {
        LogMode::Shifted => (1.0 + 1000.0 * v).log10() / 1001f64.log10(),
        LogMode::Clipped => ((v.max(LOG_CLIP_FLOOR).log10() + 4.0) / 4.0).clamp(0.0, 1.0),
        LogMode::Linear => v,
    }
}

pub fn apply_log(mut grid: RasterGrid, mode: LogMode) -> RasterGrid {
    if mode != LogMode::Linear {
        grid.values.mapv_inplace(|v| log_scale(v, mode));
    }
    grid.config.log_mode = mode;
    grid
}

fn divide_lanes_by_max(values: &mut Array2<f64>, axis: Axis) {
    for mut lane in values.lanes_mut(axis) {
        let max = lane.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            lane.mapv_inplace(|v| v / max);
        }
    }
}

/// Mass-normalization: each time column divided by its maximum.
pub fn normalize_mass(mut grid: RasterGrid) -> RasterGrid {
    divide_lanes_by_max(&mut grid.values, Axis(0));
    grid
}

/// Time-normalization: each mass row divided by its maximum.
pub fn normalize_time_rows(mut grid: RasterGrid) -> RasterGrid {
    divide_lanes_by_max(&mut grid.values, Axis(1));
    grid
}

pub fn apply_norm(grid: RasterGrid, mode: NormMode) -> RasterGrid {
    let mut grid = match mode {
        NormMode::None => grid,
        NormMode::Mass => normalize_mass(grid),
        NormMode::Time => normalize_time_rows(grid),
    };
    grid.config.norm_mode = mode;
    grid
}

/// Attaches `G = c/(N_t - 1)` and `B = m/255` planes.
pub fn encode_channels(mut grid: RasterGrid) -> RasterGrid {
    let (rows, cols) = grid.shape();
    grid.channels = Some(PositionalChannels::new(rows, cols));
    grid.config.with_positional_channels = true;
    grid
}

/// Swapped representation: rows are 256 levels of log-scaled normalized
/// intensity, columns are time slots, and a cell holds the largest
/// contributing `mass_bin / 255`. No positional channels.
pub fn rasterize_swapped(sample: &RawSample, config: &RasterConfig) -> Result<RasterGrid> {
    if config.representation != Representation::IntensityByTime {
        return Err(GcmsError::invalid(
            "rasterize_swapped needs the intensity_by_time representation",
        ));
    }
    config.validate()?;
    let n = config.n_time_slots;
    let times = normalize_time(sample);
    let intensities = normalize_intensity(sample);
    let mut values = Array2::<f64>::zeros((N_MASS_BINS, n));
    let top = (N_MASS_BINS - 1) as f64;
    for ((r, &t), &a) in sample.readings.iter().zip(&times).zip(&intensities) {
        let Some(m) = mass_bin(r.mass_mz) else {
            continue;
        };
        let level = log_scale(a, config.log_mode);
        let row = ((level * N_MASS_BINS as f64).floor().max(0.0) as usize).min(N_MASS_BINS - 1);
        let cell = &mut values[[row, time_bin(t, n)]];
        *cell = cell.max(m as f64 / top);
    }
    Ok(RasterGrid {
        values,
        channels: None,
        sample_id: sample.sample_id.clone(),
        config: RasterConfig {
            with_positional_channels: false,
            ..*config
        },
    })
}

/// Full rasterization for either representation.
pub fn rasterize(sample: &RawSample, config: &RasterConfig) -> Result<RasterGrid> {
    match config.representation {
        Representation::MassByTime => Ok(finish(bin_to_grid(sample, config)?, config)),
        Representation::IntensityByTime => rasterize_swapped(sample, config),
    }
}

/// Log scaling, normalization and channels applied to a binned grid.
pub(crate) fn finish(grid: RasterGrid, config: &RasterConfig) -> RasterGrid {
    let grid = apply_norm(apply_log(grid, config.log_mode), config.norm_mode);
    if config.with_positional_channels {
        encode_channels(grid)
    } else {
        grid
    }
}

/// Start/end temperatures of a sample's ramp and the end temperature of the
/// reference ramp the base slot count was chosen for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureHint {
    pub t_start: f64,
    pub t_end: f64,
    pub reference_t_end: f64,
}

/// Time slot count proportional to the sample's temperature span relative
/// to the reference span, clamped to the valid slot range.
pub fn temperature_scaled_slots(hint: &TemperatureHint, base_slots: usize) -> Result<usize> {
    let span = hint.t_end - hint.t_start;
    let reference_span = hint.reference_t_end - hint.t_start;
    if !(span.is_finite() && span > 0.0) {
        return Err(GcmsError::invalid(format!(
            "temperature span {span} must be positive"
        )));
    }
    if !(reference_span.is_finite() && reference_span > 0.0 && hint.reference_t_end > 0.0) {
        return Err(GcmsError::invalid(format!(
            "reference temperature span {reference_span} must be positive"
        )));
    }
    let slots = (base_slots as f64 * span / reference_span).round();
    Ok((slots as usize).clamp(MIN_TIME_SLOTS, MAX_TIME_SLOTS))
}
