//! Synthetic GCMS datasets with known labels.
//!
//! Each label owns three m/z values no other label uses. A positive label
//! contributes a Gaussian elution peak on each of its masses; every sample
//! also carries a broad water trace at m/z 18 and, when `noise_level > 0`,
//! low-level background ions at random masses.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{GcmsError, Result};
use crate::ingest::{
    self, DatasetManifest, Derivatized, IonReading, LabelVector, LabeledSample, ManifestEntry,
    RawSample, Split,
};
use crate::rng;
use crate::NUM_LABELS;

pub const MIN_SAMPLES: usize = 10;

pub const LABEL_NAMES: [&str; NUM_LABELS] = [
    "aromatic",
    "hydrocarbon",
    "carboxylic_acid",
    "nitrogen_bearing_compound",
    "chlorine_bearing_compound",
    "sulfur_bearing_compound",
    "alcohol",
    "other_oxygen_bearing_compound",
    "mineral",
];

const SIGNATURE_RATIOS: [f64; 3] = [1.0, 0.6, 0.3];
const WATER_MZ: f64 = 18.0;

/// The m/z values owned by `label`.
pub fn signature_masses(label: usize) -> [u32; 3] {
    let base = 30 + 24 * label as u32;
    [base, base + 8, base + 16]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Background ion intensity relative to the typical peak height.
    pub noise_level: f64,
    pub positive_rate: f64,
    pub scans: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            seed: 7,
            noise_level: 0.01,
            positive_rate: 0.35,
            scans: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<RawSample>,
}

impl SynthDataset {
    pub fn labeled_samples(&self) -> Vec<LabeledSample> {
        self.samples
            .iter()
            .zip(&self.manifest.entries)
            .map(|(s, e)| LabeledSample {
                sample: s.clone(),
                labels: e.labels.expect("synthetic samples are labeled"),
            })
            .collect()
    }

    /// Writes `samples/<id>.csv`, `labels.csv` and `metadata.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let sample_dir = dir.join("samples");
        fs::create_dir_all(&sample_dir).map_err(|e| GcmsError::io(&sample_dir, e))?;
        for (sample, entry) in self.samples.iter().zip(&self.manifest.entries) {
            let path = dir.join(&entry.path);
            let file = fs::File::create(&path).map_err(|e| GcmsError::io(&path, e))?;
            ingest::write_sample_csv(sample, std::io::BufWriter::new(file))?;
        }
        let create = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path).map_err(|e| GcmsError::io(&path, e))
        };
        ingest::write_labels_csv(&self.manifest, create("labels.csv")?)?;
        ingest::write_metadata_csv(&self.manifest, create("metadata.csv")?)?;
        Ok(())
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    if config.n_samples < MIN_SAMPLES {
        return Err(GcmsError::invalid(format!(
            "synthetic datasets need at least {MIN_SAMPLES} samples, got {}",
            config.n_samples
        )));
    }
    if !(config.noise_level >= 0.0 && config.noise_level.is_finite()) {
        return Err(GcmsError::invalid(
            "noise level must be finite and non-negative",
        ));
    }
    if config.scans < 2 {
        return Err(GcmsError::invalid("need at least 2 scans per sample"));
    }
    let mut r = rng::stream(config.seed, "synth");
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut entries = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let sample_id = format!("S{i:04}");
        let labels = LabelVector(std::array::from_fn(|_| r.random_bool(config.positive_rate)));
        let derivatized = match r.random_range(0..3) {
            0 => Derivatized::Yes,
            1 => Derivatized::No,
            _ => Derivatized::Unknown,
        };
        let readings = sample_readings(&labels, config, &mut r);
        samples.push(RawSample::new(sample_id.clone(), readings, derivatized)?);
        entries.push(ManifestEntry {
            path: ingest::default_sample_path(&sample_id),
            sample_id,
            derivatized,
            labels: Some(labels),
            split: Split::Train,
        });
    }
    Ok(SynthDataset {
        manifest: DatasetManifest {
            label_names: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            entries,
        },
        samples,
    })
}

fn sample_readings<R: Rng>(
    labels: &LabelVector,
    config: &SynthConfig,
    r: &mut R,
) -> Vec<IonReading> {
    const PEAK_SCALE: f64 = 1e5;
    let duration = r.random_range(20.0..40.0);
    let times: Vec<f64> = (0..config.scans)
        .map(|i| duration * i as f64 / (config.scans - 1) as f64)
        .collect();
    let jitter = Uniform::new_inclusive(-0.3, 0.3).expect("valid range");
    let mut readings = Vec::new();

    // Water: broad, always present.
    let water_height = r.random_range(0.5..2.0) * PEAK_SCALE;
    let water_center = r.random_range(0.1..0.3) * duration;
    for &t in &times {
        let v = water_height * gaussian(t, water_center, 0.25 * duration);
        readings.push(IonReading::new(t, WATER_MZ + jitter.sample(r), v));
    }

    for (label, _) in labels.0.iter().enumerate().filter(|(_, &on)| on) {
        let center = r.random_range(0.15..0.85) * duration;
        let width = r.random_range(0.02..0.06) * duration;
        let height = r.random_range(0.2..1.0) * PEAK_SCALE;
        for (mass, ratio) in signature_masses(label).into_iter().zip(SIGNATURE_RATIOS) {
            for &t in &times {
                let v = height * ratio * gaussian(t, center, width);
                if v > 1e-3 * height {
                    readings.push(IonReading::new(t, f64::from(mass) + jitter.sample(r), v));
                }
            }
        }
    }

    if config.noise_level > 0.0 {
        for &t in &times {
            for _ in 0..4 {
                let mass = r.random_range(1..=250) as f64 + jitter.sample(r);
                let v = config.noise_level * PEAK_SCALE * r.random_range(0.0..1.0);
                readings.push(IonReading::new(t, mass.max(0.6), v));
            }
        }
    }
    readings
}

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((t - center) / width).powi(2)).exp()
}
