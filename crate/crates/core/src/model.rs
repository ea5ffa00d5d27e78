//! Time-averaged head: per-mass means over the time axis plus derivatized
//! one-hot features, followed by a linear map to one logit per label.

use std::borrow::Cow;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::augment::{self, AugmentConfig};
use crate::error::{GcmsError, Result};
use crate::ingest::{Derivatized, LabeledSample};
use crate::raster::{self, RasterConfig, RasterGrid};
use crate::rng;
use crate::{NUM_LABELS, N_MASS_BINS};

/// Probabilities below/above this are clipped inside the training loss.
pub const LOSS_CLIP: f64 = 1e-7;

/// Feature count for a standard 256-row raster.
pub const N_FEATURES: usize = N_MASS_BINS + 2;

pub type Probs = [f64; NUM_LABELS];

/// Per-row time means followed by the two derivatized one-hot slots.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Correctly rounded sum of `values` (Shewchuk partials with a final
/// half-even fix-up), hence independent of summation order.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Order-independent sum of raster values. Values in [-1, 1] are summed as
/// fixed-point integers scaled by `2^(62 - ceil(log2(n + 1)))`, which
/// truncates each value by less than one unit of that scale (about 5e-17
/// for 192 columns); anything larger falls back to [`exact_sum`].
pub fn row_sum(values: &[f64]) -> f64 {
    if values.iter().any(|v| v.abs() > 1.0 || v.is_nan()) {
        return exact_sum(values.iter().copied());
    }
    let headroom = usize::BITS - values.len().leading_zeros();
    let scale = 2f64.powi(62 - headroom as i32);
    let acc: i64 = values.iter().map(|&v| (v * scale) as i64).sum();
    acc as f64 / scale
}

fn row_mean(row: ndarray::ArrayView1<f64>) -> f64 {
    match row.as_slice() {
        Some(values) => row_sum(values) / values.len() as f64,
        None => row_sum(&row.to_vec()) / row.len() as f64,
    }
}

fn derivatized_one_hot(derivatized: Derivatized) -> [f64; 2] {
    match derivatized {
        Derivatized::Yes => [1.0, 0.0],
        Derivatized::No => [0.0, 1.0],
        Derivatized::Unknown => [0.0, 0.0],
    }
}

/// Averages every mass row over time only, keeping the mass axis.
pub fn time_average_features(grid: &RasterGrid, derivatized: Derivatized) -> FeatureVector {
    let mut values: Vec<f64> = grid.values.rows().into_iter().map(row_mean).collect();
    values.extend(derivatized_one_hot(derivatized));
    FeatureVector(values)
}

/// Weights (labels x features) and one bias per label.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            weights: Array2::zeros((NUM_LABELS, n_features)),
            bias: Array1::zeros(NUM_LABELS),
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }

    fn check(&self, features: &FeatureVector) -> Result<()> {
        if self.weights.nrows() != NUM_LABELS || self.bias.len() != NUM_LABELS {
            return Err(GcmsError::ShapeMismatch(format!(
                "params have {} weight rows and {} biases, expected {NUM_LABELS}",
                self.weights.nrows(),
                self.bias.len()
            )));
        }
        if features.len() != self.n_features() {
            return Err(GcmsError::ShapeMismatch(format!(
                "{} features for a {}-input model",
                features.len(),
                self.n_features()
            )));
        }
        if !self.is_finite() {
            return Err(GcmsError::invalid(
                "model parameters contain non-finite values",
            ));
        }
        Ok(())
    }

    /// `w_k . x + b_k` per label; shapes are assumed checked.
    fn logits_unchecked(&self, features: &FeatureVector) -> Probs {
        let x = Array1::from(features.0.clone());
        let z = self.weights.dot(&x) + &self.bias;
        std::array::from_fn(|k| z[k])
    }

    pub fn logits(&self, features: &FeatureVector) -> Result<Probs> {
        self.check(features)?;
        Ok(self.logits_unchecked(features))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-label probabilities `sigmoid(w_k . x + b_k)`.
pub fn predict(params: &ModelParams, features: &FeatureVector) -> Result<Probs> {
    Ok(params.logits(features)?.map(|z| {
        // Keep results strictly inside (0, 1) for saturated logits.
        sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }))
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(LOSS_CLIP, 1.0 - LOSS_CLIP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy over the labels, with probabilities clipped
/// to `[1e-7, 1 - 1e-7]`. Soft targets are allowed.
pub fn bce_loss(pred: &Probs, target: &Probs) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| bce_term(p, y))
        .sum::<f64>()
        / NUM_LABELS as f64
}

/// Gradient of the mean batch loss with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Mean [`bce_loss`] over `batch` and its analytic gradient. Clipped
/// probabilities contribute zero gradient, matching the clipped loss.
pub fn loss_and_gradient(
    params: &ModelParams,
    batch: &[(FeatureVector, Probs)],
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient {
        weights: Array2::zeros(params.weights.dim()),
        bias: Array1::zeros(NUM_LABELS),
    };
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / (batch.len() * NUM_LABELS) as f64;
    let mut total = 0.0;
    for (features, target) in batch {
        params.check(features)?;
        let z = params.logits_unchecked(features);
        for k in 0..NUM_LABELS {
            let p = sigmoid(z[k]);
            total += bce_term(p, target[k]);
            if p <= LOSS_CLIP || p >= 1.0 - LOSS_CLIP {
                continue;
            }
            let dz = (p - target[k]) * scale;
            grad.bias[k] += dz;
            grad.weights
                .row_mut(k)
                .zip_mut_with(&ndarray::ArrayView1::from(&features.0), |g, &x| {
                    *g += dz * x
                });
        }
    }
    Ok((total * scale, grad))
}

/// Parameter update rule used by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    /// `theta -= lr * grad`
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    #[default]
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = GcmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(GcmsError::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub augment: AugmentConfig,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 1e-4,
            warmup_epochs: 2,
            batch_size: 16,
            optimizer: Optimizer::default(),
            augment: AugmentConfig::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Base learning rate suited to the linear head on [0, 1] features.
    pub const LINEAR_BASE_LR: f64 = 1.0;

    /// Default schedule with the learning rate scaled for the linear head.
    pub fn linear_profile() -> Self {
        Self {
            base_lr: Self::LINEAR_BASE_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(GcmsError::invalid(format!(
                "base learning rate {} must be finite and non-negative",
                self.base_lr
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(GcmsError::invalid(format!(
                "warmup epochs {} must be fewer than epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(GcmsError::invalid("batch size must be positive"));
        }
        self.augment.validate()
    }
}

/// Linear warm-up from 0 to `base_lr` over the first
/// `warmup_epochs / epochs` of training, then cosine decay to 0.
pub fn lr_at(step_fraction: f64, config: &TrainConfig) -> f64 {
    let f = step_fraction.clamp(0.0, 1.0);
    let warm = if config.epochs == 0 {
        0.0
    } else {
        config.warmup_epochs as f64 / config.epochs as f64
    };
    if f < warm {
        return config.base_lr * f / warm;
    }
    let u = if warm < 1.0 {
        (f - warm) / (1.0 - warm)
    } else {
        1.0
    };
    config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}

struct Adam {
    step: i32,
    m: Gradient,
    v: Gradient,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        let zeros = || Gradient {
            weights: Array2::zeros(params.weights.dim()),
            bias: Array1::zeros(params.bias.len()),
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn update(&mut self, params: &mut ModelParams, grad: &Gradient, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let apply = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        ndarray::Zip::from(&mut params.weights)
            .and(&mut self.m.weights)
            .and(&mut self.v.weights)
            .and(&grad.weights)
            .for_each(|t, m, v, &g| apply(t, m, v, g));
        ndarray::Zip::from(&mut params.bias)
            .and(&mut self.m.bias)
            .and(&mut self.v.bias)
            .and(&grad.bias)
            .for_each(|t, m, v, &g| apply(t, m, v, g));
    }
}

/// Same result as `time_average_features(&resize_time(grid, size)?, ..)`
/// without materializing the resized raster.
pub fn features_at_size(grid: &RasterGrid, size: usize, derivatized: Derivatized) -> FeatureVector {
    let plan = augment::ResizePlan::new(grid.cols(), size);
    let mut scratch = vec![0.0; size];
    let mut values: Vec<f64> = grid
        .values
        .rows()
        .into_iter()
        .map(|row| {
            if row.len() == size {
                row_mean(row)
            } else {
                plan.apply(row, &mut scratch);
                row_sum(&scratch) / size as f64
            }
        })
        .collect();
    values.extend(derivatized_one_hot(derivatized));
    FeatureVector(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Clean (un-augmented) mean training loss after each epoch.
    pub loss_trace: Vec<f64>,
}

fn targets_of(sample: &LabeledSample) -> Probs {
    sample.labels.as_f64()
}

/// Mini-batch training on [`bce_loss`] with the warm-up/cosine schedule,
/// batch-wise random time resizing, optional time warp and per-sample
/// mixup with a partner drawn from the same batch.
pub fn train(
    samples: &[LabeledSample],
    config: &TrainConfig,
    raster_config: &RasterConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(GcmsError::invalid("no labeled training samples"));
    }
    config.validate()?;
    let base_grids: Vec<RasterGrid> = samples
        .par_iter()
        .map(|s| raster::rasterize(&s.sample, raster_config))
        .collect::<Result<_>>()?;
    let clean: Vec<(FeatureVector, Probs)> = base_grids
        .iter()
        .zip(samples)
        .map(|(g, s)| {
            (
                time_average_features(g, s.sample.derivatized),
                targets_of(s),
            )
        })
        .collect();
    let mut params = ModelParams::zeros(clean[0].0.len());
    let mut loss_trace = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, loss_trace });
    }

    let mut shuffle_rng = rng::stream(config.rng_seed, "shuffle");
    let mut aug_rng = rng::stream(config.rng_seed, "augment");
    let aug = &config.augment;
    let batches_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let size = if aug.resize_enabled {
                augment::sample_resize(aug, &mut aug_rng)
            } else {
                raster_config.n_time_slots
            };
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let derivatized = samples[i].sample.derivatized;
                let grid = source_grid(
                    &samples[i],
                    &base_grids[i],
                    raster_config,
                    aug,
                    &mut aug_rng,
                )?;
                let mixed =
                    aug.mixup_probability > 0.0 && aug_rng.random_bool(aug.mixup_probability);
                if !mixed {
                    batch.push((
                        features_at_size(&grid, size, derivatized),
                        targets_of(&samples[i]),
                    ));
                    continue;
                }
                let j = chunk[aug_rng.random_range(0..chunk.len())];
                let partner = source_grid(
                    &samples[j],
                    &base_grids[j],
                    raster_config,
                    aug,
                    &mut aug_rng,
                )?;
                let lambda = augment::sample_mixup_lambda(&mut aug_rng);
                let (grid, targets) = augment::mixup(
                    &augment::resize_time(&grid, size)?,
                    &augment::resize_time(&partner, size)?,
                    &targets_of(&samples[i]),
                    &targets_of(&samples[j]),
                    lambda,
                )?;
                let mut features = time_average_features(&grid, Derivatized::Unknown);
                let (a, b) = (
                    derivatized_one_hot(derivatized),
                    derivatized_one_hot(samples[j].sample.derivatized),
                );
                let n = features.len();
                for k in 0..2 {
                    features.0[n - 2 + k] = lambda * a[k] + (1.0 - lambda) * b[k];
                }
                batch.push((features, targets));
            }

            let (loss, grad) = loss_and_gradient(&params, &batch)?;
            if !loss.is_finite() {
                return Err(GcmsError::Divergence { step, loss });
            }
            let lr = lr_at(step as f64 / total_steps as f64, config);
            match config.optimizer {
                Optimizer::Sgd => {
                    params.weights.scaled_add(-lr, &grad.weights);
                    params.bias.scaled_add(-lr, &grad.bias);
                }
                Optimizer::Adam => adam.update(&mut params, &grad, lr),
            }
            step += 1;
        }
        let (loss, _) = loss_and_gradient(&params, &clean)?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(GcmsError::Divergence { step, loss });
        }
        loss_trace.push(loss);
    }
    Ok(TrainOutcome { params, loss_trace })
}

fn source_grid<'a, R: Rng>(
    sample: &LabeledSample,
    base: &'a RasterGrid,
    raster_config: &RasterConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Cow<'a, RasterGrid>> {
    if aug.warp_enabled {
        let alpha = augment::sample_warp_alpha(aug, rng);
        Ok(Cow::Owned(augment::rasterize_warped(
            &sample.sample,
            raster_config,
            alpha,
            aug,
        )?))
    } else {
        Ok(Cow::Borrowed(base))
    }
}

/// Gradient of logit `label` with respect to each raster cell. The time
/// mean spreads `w_label[m]` evenly over the row: every cell gets
/// `w_label[m] / n_time_slots`.
pub fn saliency(params: &ModelParams, grid: &RasterGrid, label: usize) -> Result<Array2<f64>> {
    if label >= NUM_LABELS {
        return Err(GcmsError::invalid(format!(
            "label index {label} outside 0..{NUM_LABELS}"
        )));
    }
    let (rows, cols) = grid.shape();
    if params.n_features() < rows {
        return Err(GcmsError::ShapeMismatch(format!(
            "{}-input model for a {rows}-row raster",
            params.n_features()
        )));
    }
    let w = params.weights.row(label);
    Ok(Array2::from_shape_fn((rows, cols), |(m, _)| {
        w[m] / cols as f64
    }))
}
