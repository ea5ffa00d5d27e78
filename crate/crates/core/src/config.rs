//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. A `version = 1` line is
//! required; unknown keys are rejected. Relative paths resolve against the
//! directory holding the config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{GcmsError, Result};
use crate::model::TrainConfig;
use crate::raster::RasterConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset root holding `labels.csv`, `metadata.csv` and the samples.
    pub dataset_root: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub metadata_path: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub raster: RasterConfig,
    /// Schedule, augmentation and the run seed (`train.rng_seed`).
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            labels_path: None,
            metadata_path: None,
            output: None,
            raster: RasterConfig::default(),
            train: TrainConfig::linear_profile(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        GcmsError::invalid(format!(
            "config line {line}: bad value `{value}` for `{key}`"
        ))
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(GcmsError::invalid(format!(
            "config line {line}: `{key}` expects true or false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.rng_seed
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GcmsError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config = Self::default();
        let mut version = None;
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                GcmsError::invalid(format!("config line {line}: expected `key = value`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let (r, t) = (&mut config.raster, &mut config.train);
            match key {
                "version" => version = Some(parse_value::<u32>(key, value, line)?),
                "data" => config.dataset_root = Some(resolve(value)),
                "labels" => config.labels_path = Some(resolve(value)),
                "metadata" => config.metadata_path = Some(resolve(value)),
                "out" => config.output = Some(resolve(value)),
                "seed" => t.rng_seed = parse_value(key, value, line)?,
                "time_slots" => r.n_time_slots = parse_value(key, value, line)?,
                "norm" => r.norm_mode = value.parse()?,
                "log" => r.log_mode = value.parse()?,
                "representation" => r.representation = value.parse()?,
                "positional_channels" => r.with_positional_channels = parse_bool(key, value, line)?,
                "epochs" => t.epochs = parse_value(key, value, line)?,
                "base_lr" => t.base_lr = parse_value(key, value, line)?,
                "warmup_epochs" => t.warmup_epochs = parse_value(key, value, line)?,
                "batch_size" => t.batch_size = parse_value(key, value, line)?,
                "optimizer" => t.optimizer = value.parse()?,
                "resize" => t.augment.resize_enabled = parse_bool(key, value, line)?,
                "resize_min" => t.augment.resize_min = parse_value(key, value, line)?,
                "resize_max" => t.augment.resize_max = parse_value(key, value, line)?,
                "warp" => t.augment.warp_enabled = parse_bool(key, value, line)?,
                "warp_alpha_min" => t.augment.warp_alpha_min = parse_value(key, value, line)?,
                "warp_alpha_max" => t.augment.warp_alpha_max = parse_value(key, value, line)?,
                "mixup_probability" => t.augment.mixup_probability = parse_value(key, value, line)?,
                other => {
                    return Err(GcmsError::invalid(format!(
                        "config line {line}: unknown key `{other}`"
                    )))
                }
            }
        }
        match version {
            Some(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(GcmsError::invalid(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(GcmsError::invalid("config is missing `version = 1`")),
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.raster.validate()?;
        self.train.validate()
    }

    /// Every configured path that does not exist.
    pub fn missing_paths(&self) -> Vec<&Path> {
        [&self.dataset_root, &self.labels_path, &self.metadata_path]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .filter(|p| !p.exists())
            .collect()
    }

    /// Serializes every setting; [`RunConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut out = format!("version = {CONFIG_VERSION}\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        for (key, path) in [
            ("data", &self.dataset_root),
            ("labels", &self.labels_path),
            ("metadata", &self.metadata_path),
            ("out", &self.output),
        ] {
            if let Some(p) = path {
                put(key, p.display().to_string());
            }
        }
        let (r, t) = (&self.raster, &self.train);
        put("seed", t.rng_seed.to_string());
        put("time_slots", r.n_time_slots.to_string());
        put("norm", r.norm_mode.to_string());
        put("log", r.log_mode.to_string());
        put("representation", r.representation.to_string());
        put(
            "positional_channels",
            r.with_positional_channels.to_string(),
        );
        put("epochs", t.epochs.to_string());
        put("base_lr", t.base_lr.to_string());
        put("warmup_epochs", t.warmup_epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("optimizer", t.optimizer.to_string());
        put("resize", t.augment.resize_enabled.to_string());
        put("resize_min", t.augment.resize_min.to_string());
        put("resize_max", t.augment.resize_max.to_string());
        put("warp", t.augment.warp_enabled.to_string());
        put("warp_alpha_min", t.augment.warp_alpha_min.to_string());
        put("warp_alpha_max", t.augment.warp_alpha_max.to_string());
        put("mixup_probability", t.augment.mixup_probability.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{LogMode, NormMode};

    #[test]
    fn parses_overrides_and_resolves_paths() {
        let text = "# run\nversion = 1\ndata = ds\nnorm = time  # per-row\nlog = clipped\ntime_slots = 128\nseed = 42\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.dataset_root.as_deref(), Some(Path::new("/base/ds")));
        assert_eq!(c.raster.norm_mode, NormMode::Time);
        assert_eq!(c.raster.log_mode, LogMode::Clipped);
        assert_eq!(c.raster.n_time_slots, 128);
        assert_eq!(c.seed(), 42);
    }

    #[test]
    fn requires_known_version_and_keys() {
        assert!(RunConfig::parse("seed = 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("version = 2\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("version = 1\ncolour = red\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("version = 1\nepochs = many\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("version = 1\ntime_slots = 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn text_form_reads_back() {
        let mut c = RunConfig {
            output: Some(PathBuf::from("/tmp/out")),
            ..RunConfig::default()
        };
        c.train.augment.warp_enabled = true;
        c.raster.norm_mode = NormMode::None;
        assert_eq!(RunConfig::parse(&c.to_text(), Path::new("/")).unwrap(), c);
    }
}
