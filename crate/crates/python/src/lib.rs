//! Python bindings: rasterization, training, prediction, ensembling and the
//! evaluation metric. Grids cross the boundary as nested lists.

use std::collections::{BTreeMap, HashMap};

use gcms_core::augment::{self, AugmentConfig};
use gcms_core::ensemble::{self, EnsembleSpec, CLIP_EPSILON, TTA_SIZES};
use gcms_core::ingest::{self, Derivatized, IonReading, LabelVector, LabeledSample, RawSample};
use gcms_core::model::{self, ModelParams, TrainConfig};
use gcms_core::raster::{self, TemperatureHint};
use gcms_core::{formats, synth, GcmsError, NUM_LABELS};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: GcmsError) -> PyErr {
    match e {
        GcmsError::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_input_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn labels9(values: &[f64]) -> PyResult<[f64; NUM_LABELS]> {
    values.try_into().map_err(|_| {
        PyValueError::new_err(format!(
            "expected {NUM_LABELS} labels, got {}",
            values.len()
        ))
    })
}

#[pyclass(name = "RasterConfig", from_py_object)]
#[derive(Clone)]
pub struct PyRasterConfig {
    inner: raster::RasterConfig,
}

#[pymethods]
impl PyRasterConfig {
    #[new]
    #[pyo3(signature = (n_time_slots=192, norm="mass", log="shifted", positional_channels=true, representation="mass_by_time"))]
    fn new(
        n_time_slots: usize,
        norm: &str,
        log: &str,
        positional_channels: bool,
        representation: &str,
    ) -> PyResult<Self> {
        let inner = raster::RasterConfig {
            n_time_slots,
            norm_mode: norm.parse().map_err(to_py)?,
            log_mode: log.parse().map_err(to_py)?,
            with_positional_channels: positional_channels,
            representation: representation.parse().map_err(to_py)?,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_time_slots(&self) -> usize {
        self.inner.n_time_slots
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "RasterConfig(n_time_slots={}, norm='{}', log='{}', positional_channels={}, representation='{}')",
            c.n_time_slots,
            c.norm_mode,
            c.log_mode,
            if c.with_positional_channels { "True" } else { "False" },
            c.representation
        )
    }
}

#[pyclass(name = "Sample", from_py_object)]
#[derive(Clone)]
pub struct PySample {
    inner: RawSample,
}

#[pymethods]
impl PySample {
    /// Builds a sample from parallel reading columns; invalid rows are dropped.
    #[new]
    #[pyo3(signature = (sample_id, times, masses, intensities, derivatized=None))]
    fn new(
        sample_id: &str,
        times: Vec<f64>,
        masses: Vec<f64>,
        intensities: Vec<f64>,
        derivatized: Option<bool>,
    ) -> PyResult<Self> {
        if times.len() != masses.len() || times.len() != intensities.len() {
            return Err(PyValueError::new_err("reading columns differ in length"));
        }
        let readings = times
            .iter()
            .zip(&masses)
            .zip(&intensities)
            .map(|((&t, &m), &v)| IonReading::new(t, m, v));
        let derivatized = match derivatized {
            Some(true) => Derivatized::Yes,
            Some(false) => Derivatized::No,
            None => Derivatized::Unknown,
        };
        Ok(Self {
            inner: RawSample::new(sample_id, readings, derivatized).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ingest::parse_sample_csv(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn sample_id(&self) -> &str {
        &self.inner.sample_id
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample('{}', {} readings)",
            self.inner.sample_id,
            self.inner.len()
        )
    }
}

#[pyclass(name = "Raster", from_py_object)]
#[derive(Clone)]
pub struct PyRaster {
    inner: raster::RasterGrid,
}

#[pymethods]
impl PyRaster {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: formats::read_raster(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    /// Intensity channel as a list of rows (row index = m/z bin).
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner
            .values
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }

    fn count_nonzero(&self) -> usize {
        self.inner.count_nonzero()
    }

    fn resize(&self, n_time_slots: usize) -> PyResult<Self> {
        Ok(Self {
            inner: augment::resize_time(&self.inner, n_time_slots).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        formats::write_raster(path, &self.inner).map_err(to_py)
    }

    fn to_gcr1<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &formats::encode_raster(&self.inner))
    }

    #[pyo3(signature = (mz_zero_top=false))]
    fn to_png<'py>(&self, py: Python<'py>, mz_zero_top: bool) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = formats::encode_png(&self.inner, mz_zero_top).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn __repr__(&self) -> String {
        let (rows, cols) = self.inner.shape();
        format!(
            "Raster({rows}x{cols}, nonzero={})",
            self.inner.count_nonzero()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (sample, config=None))]
fn rasterize(sample: &PySample, config: Option<&PyRasterConfig>) -> PyResult<PyRaster> {
    let config = config.map(|c| c.inner).unwrap_or_default();
    Ok(PyRaster {
        inner: raster::rasterize(&sample.inner, &config).map_err(to_py)?,
    })
}

#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    params: ModelParams,
    #[pyo3(get)]
    loss_trace: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// Trains on `(sample, labels)` pairs with the linear-head profile.
    #[staticmethod]
    #[pyo3(signature = (samples, config=None, epochs=20, base_lr=TrainConfig::LINEAR_BASE_LR, seed=0, augment=true))]
    fn train(
        py: Python<'_>,
        samples: Vec<(PySample, Vec<f64>)>,
        config: Option<&PyRasterConfig>,
        epochs: usize,
        base_lr: f64,
        seed: u64,
        augment: bool,
    ) -> PyResult<Self> {
        let labeled = samples
            .into_iter()
            .map(|(s, l)| {
                let l = labels9(&l)?;
                Ok(LabeledSample {
                    sample: s.inner,
                    labels: LabelVector(l.map(|v| v >= 0.5)),
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let train_config = TrainConfig {
            epochs,
            base_lr,
            warmup_epochs: TrainConfig::default()
                .warmup_epochs
                .min(epochs.saturating_sub(1)),
            rng_seed: seed,
            augment: if augment {
                AugmentConfig::default()
            } else {
                AugmentConfig::disabled()
            },
            ..TrainConfig::linear_profile()
        };
        let raster_config = config.map(|c| c.inner).unwrap_or_default();
        let outcome = py
            .detach(|| model::train(&labeled, &train_config, &raster_config))
            .map_err(to_py)?;
        Ok(Self {
            params: outcome.params,
            loss_trace: outcome.loss_trace,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            params: formats::read_params(path).map_err(to_py)?,
            loss_trace: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        formats::write_params(path, &self.params).map_err(to_py)
    }

    /// Per-label probabilities; `tta=True` averages the five TTA sizes in logit space.
    #[pyo3(signature = (sample, config=None, tta=false))]
    fn predict(
        &self,
        sample: &PySample,
        config: Option<&PyRasterConfig>,
        tta: bool,
    ) -> PyResult<Vec<f64>> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        let probs = if tta {
            ensemble::tta_predict(&self.params, &sample.inner, &config, &TTA_SIZES)
        } else {
            ensemble::predict_sample(&self.params, &sample.inner, &config)
        };
        Ok(probs.map_err(to_py)?.to_vec())
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        self.params
            .weights
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }

    fn bias(&self) -> Vec<f64> {
        self.params.bias.to_vec()
    }
}

#[pyfunction]
#[pyo3(signature = (p, epsilon=CLIP_EPSILON))]
fn clip_probs(p: f64, epsilon: f64) -> f64 {
    ensemble::clip_probs(p, epsilon)
}

#[pyfunction]
fn prob_to_logit(p: f64) -> PyResult<f64> {
    ensemble::prob_to_logit(p).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (probs, epsilon=CLIP_EPSILON))]
fn combine_probs(probs: Vec<f64>, epsilon: f64) -> PyResult<f64> {
    ensemble::combine_probs(&probs, epsilon).map_err(to_py)
}

fn prediction_set(
    members: HashMap<String, Vec<f64>>,
) -> PyResult<BTreeMap<String, [f64; NUM_LABELS]>> {
    members
        .into_iter()
        .map(|(id, p)| Ok((id, labels9(&p)?)))
        .collect()
}

/// Logit-space ensemble of `{sample_id: [9 probs]}` dicts.
#[pyfunction]
#[pyo3(signature = (members, epsilon=CLIP_EPSILON))]
fn ensemble_predictions(
    members: Vec<HashMap<String, Vec<f64>>>,
    epsilon: f64,
) -> PyResult<BTreeMap<String, Vec<f64>>> {
    let members = members
        .into_iter()
        .map(prediction_set)
        .collect::<PyResult<Vec<_>>>()?;
    let spec = EnsembleSpec {
        members,
        clip_epsilon: epsilon,
    };
    let out = ensemble::ensemble(&spec).map_err(to_py)?;
    Ok(out.into_iter().map(|(id, p)| (id, p.to_vec())).collect())
}

#[pyfunction]
#[pyo3(signature = (predictions, labels, epsilon=CLIP_EPSILON))]
fn aggregated_log_loss(
    predictions: HashMap<String, Vec<f64>>,
    labels: HashMap<String, Vec<f64>>,
    epsilon: f64,
) -> PyResult<f64> {
    let preds = prediction_set(predictions)?;
    let labels = labels
        .into_iter()
        .map(|(id, l)| Ok((id, LabelVector(labels9(&l)?.map(|v| v >= 0.5)))))
        .collect::<PyResult<HashMap<_, _>>>()?;
    ensemble::aggregated_log_loss(&preds, &labels, epsilon).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (step_fraction, epochs=20, warmup_epochs=2, base_lr=1e-4))]
fn lr_at(step_fraction: f64, epochs: usize, warmup_epochs: usize, base_lr: f64) -> f64 {
    let config = TrainConfig {
        epochs,
        warmup_epochs,
        base_lr,
        ..TrainConfig::default()
    };
    model::lr_at(step_fraction, &config)
}

#[pyfunction]
fn warp_time(times: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    augment::warp_time(&times, alpha, &AugmentConfig::default()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (t_start, t_end, reference_t_end, base_slots=192))]
fn temperature_scaled_slots(
    t_start: f64,
    t_end: f64,
    reference_t_end: f64,
    base_slots: usize,
) -> PyResult<usize> {
    let hint = TemperatureHint {
        t_start,
        t_end,
        reference_t_end,
    };
    raster::temperature_scaled_slots(&hint, base_slots).map_err(to_py)
}

/// Synthetic labeled samples as `[(Sample, [9 labels])]`; writes the
/// dataset files too when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (n_samples=100, seed=7, noise_level=0.01, out_dir=None))]
fn synth_dataset(
    n_samples: usize,
    seed: u64,
    noise_level: f64,
    out_dir: Option<&str>,
) -> PyResult<Vec<(PySample, Vec<f64>)>> {
    let config = synth::SynthConfig {
        n_samples,
        seed,
        noise_level,
        ..synth::SynthConfig::default()
    };
    let data = synth::generate(&config).map_err(to_py)?;
    if let Some(dir) = out_dir {
        data.write(std::path::Path::new(dir)).map_err(to_py)?;
    }
    Ok(data
        .labeled_samples()
        .into_iter()
        .map(|s| (PySample { inner: s.sample }, s.labels.as_f64().to_vec()))
        .collect())
}

#[pymodule]
fn gcms_raster(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRasterConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyRaster>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(clip_probs, m)?)?;
    m.add_function(wrap_pyfunction!(prob_to_logit, m)?)?;
    m.add_function(wrap_pyfunction!(combine_probs, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(aggregated_log_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(warp_time, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_scaled_slots, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add("NUM_LABELS", NUM_LABELS)?;
    m.add("TTA_SIZES", TTA_SIZES.to_vec())?;
    m.add("LABEL_NAMES", synth::LABEL_NAMES.to_vec())?;
    Ok(())
}
