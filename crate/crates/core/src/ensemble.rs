//! Probability clipping, logit-space ensembling, test-time augmentation,
//! the aggregated multilabel log loss and a k-fold out-of-fold harness.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment;
use crate::error::{GcmsError, Result};
use crate::ingest::{LabelVector, LabeledSample, RawSample};
use crate::model::{self, exact_sum, ModelParams, Probs, TrainConfig};
use crate::raster::{self, RasterConfig, RasterGrid};
use crate::rng;
use crate::NUM_LABELS;

/// Default probability clip for ensembling and scoring.
pub const CLIP_EPSILON: f64 = 1e-4;

/// Five time sizes, 32 apart, centred on 192.
pub const TTA_SIZES: [usize; 5] = [128, 160, 192, 224, 256];

/// Per-sample label probabilities keyed (and therefore ordered) by id.
pub type PredictionSet = BTreeMap<String, Probs>;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    pub sample_id: String,
    pub probs: Probs,
}

pub fn clip_probs(p: f64, epsilon: f64) -> f64 {
    p.max(epsilon).min(1.0 - epsilon)
}

/// `ln(p / (1 - p))` for `p` strictly inside (0, 1).
pub fn prob_to_logit(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(GcmsError::invalid(format!(
            "probability {p} outside (0, 1); clip before taking logits"
        )))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 0.5 {
        Ok(())
    } else {
        Err(GcmsError::invalid(format!(
            "clip epsilon {epsilon} outside (0, 0.5)"
        )))
    }
}

/// Sigmoid of the mean clipped logit. The mean is summed exactly so member
/// order cannot matter, and the result is held within the members' clipped
/// range (where the exact value always lies).
pub fn combine_probs(probs: &[f64], epsilon: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(GcmsError::invalid("nothing to combine"));
    }
    let clipped: Vec<f64> = probs.iter().map(|&p| clip_probs(p, epsilon)).collect();
    let logits = clipped
        .iter()
        .map(|&p| prob_to_logit(p))
        .collect::<Result<Vec<_>>>()?;
    let mean = exact_sum(logits) / clipped.len() as f64;
    let lo = clipped.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(model::sigmoid(mean).clamp(lo, hi))
}

pub fn combine_vectors(members: &[Probs], epsilon: f64) -> Result<Probs> {
    let mut out = [0.0; NUM_LABELS];
    let mut column = Vec::with_capacity(members.len());
    for (k, slot) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(members.iter().map(|m| m[k]));
        *slot = combine_probs(&column, epsilon)?;
    }
    Ok(out)
}

/// Member prediction sets to combine, all over the same sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<PredictionSet>,
    pub clip_epsilon: f64,
}

impl EnsembleSpec {
    pub fn new(members: Vec<PredictionSet>) -> Self {
        Self {
            members,
            clip_epsilon: CLIP_EPSILON,
        }
    }
}

fn same_ids<A, B>(a: &BTreeMap<String, A>, b: &BTreeMap<String, B>) -> bool {
    a.len() == b.len() && a.keys().zip(b.keys()).all(|(x, y)| x == y)
}

/// Logit-average of every member, per sample and label.
pub fn ensemble(spec: &EnsembleSpec) -> Result<PredictionSet> {
    check_epsilon(spec.clip_epsilon)?;
    let Some(first) = spec.members.first() else {
        return Err(GcmsError::invalid("ensemble needs at least one member"));
    };
    if let Some((i, _)) = spec
        .members
        .iter()
        .enumerate()
        .find(|(_, m)| !same_ids(first, m))
    {
        return Err(GcmsError::ShapeMismatch(format!(
            "ensemble member {i} covers different sample ids than member 0"
        )));
    }
    first
        .keys()
        .map(|id| {
            let rows: Vec<Probs> = spec.members.iter().map(|m| m[id]).collect();
            Ok((id.clone(), combine_vectors(&rows, spec.clip_epsilon)?))
        })
        .collect()
}

/// Predicts a rasterized sample at every time size in `sizes` and combines
/// the results in logit space.
pub fn tta_predict_grid(
    params: &ModelParams,
    grid: &RasterGrid,
    derivatized: crate::ingest::Derivatized,
    sizes: &[usize],
    epsilon: f64,
) -> Result<Probs> {
    if sizes.is_empty() {
        return Err(GcmsError::invalid("TTA needs at least one time size"));
    }
    check_epsilon(epsilon)?;
    let members = sizes
        .iter()
        .map(|&size| {
            let resized = augment::resize_time(grid, size)?;
            model::predict(params, &model::time_average_features(&resized, derivatized))
        })
        .collect::<Result<Vec<_>>>()?;
    combine_vectors(&members, epsilon)
}

/// Rasterizes `sample` at the configured size, then runs
/// [`tta_predict_grid`] with the default clip.
pub fn tta_predict(
    params: &ModelParams,
    sample: &RawSample,
    raster_config: &RasterConfig,
    sizes: &[usize],
) -> Result<Probs> {
    let grid = raster::rasterize(sample, raster_config)?;
    tta_predict_grid(params, &grid, sample.derivatized, sizes, CLIP_EPSILON)
}

/// Plain single-size prediction of a raw sample.
pub fn predict_sample(
    params: &ModelParams,
    sample: &RawSample,
    raster_config: &RasterConfig,
) -> Result<Probs> {
    let grid = raster::rasterize(sample, raster_config)?;
    model::predict(
        params,
        &model::time_average_features(&grid, sample.derivatized),
    )
}

/// Mean binary cross-entropy over every (sample, label) pair, with
/// predictions clipped to `[epsilon, 1 - epsilon]`.
pub fn aggregated_log_loss(
    preds: &PredictionSet,
    labels: &HashMap<String, LabelVector>,
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    if preds.len() != labels.len() {
        return Err(GcmsError::ShapeMismatch(format!(
            "{} predictions for {} labeled samples",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(GcmsError::invalid("no predictions to score"));
    }
    let mut terms = Vec::with_capacity(preds.len() * NUM_LABELS);
    for (id, probs) in preds {
        let truth = labels
            .get(id)
            .ok_or_else(|| GcmsError::UnknownSample(id.clone()))?;
        for (&p, &y) in probs.iter().zip(&truth.0) {
            let p = clip_probs(p, epsilon);
            terms.push(if y { -p.ln() } else { -(1.0 - p).ln() });
        }
    }
    Ok(exact_sum(terms.iter().copied()) / terms.len() as f64)
}

/// Seeded fold assignment stratified by positive-label count: samples are
/// grouped by cardinality, shuffled within each group, and dealt to folds
/// round-robin across the concatenated groups.
pub fn assign_folds(samples: &[LabeledSample], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(GcmsError::invalid(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if samples.len() < k {
        return Err(GcmsError::invalid(format!(
            "{} labeled samples cannot fill {k} folds",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&samples[a], &samples[b]);
        sa.labels
            .cardinality()
            .cmp(&sb.labels.cardinality())
            .then_with(|| sa.sample.sample_id.cmp(&sb.sample.sample_id))
    });
    let mut r = rng::stream(seed, "folds");
    for group in order
        .chunk_by_mut(|&a, &b| samples[a].labels.cardinality() == samples[b].labels.cardinality())
    {
        group.shuffle(&mut r);
    }
    let mut folds = vec![0; samples.len()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OofResult {
    pub predictions: PredictionSet,
    pub fold_of: BTreeMap<String, usize>,
    pub fold_losses: Vec<f64>,
    pub overall_loss: f64,
}

/// Trains `k` models, each on all folds but one, and predicts the held-out
/// fold. With `tta_sizes` set, held-out predictions use TTA.
pub fn kfold_oof(
    samples: &[LabeledSample],
    k: usize,
    train_config: &TrainConfig,
    raster_config: &RasterConfig,
    tta_sizes: Option<&[usize]>,
) -> Result<OofResult> {
    let folds = assign_folds(samples, k, train_config.rng_seed)?;
    let per_fold: Vec<Vec<(String, Probs)>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_set: Vec<LabeledSample> = samples
                .iter()
                .zip(&folds)
                .filter(|(_, &f)| f != fold)
                .map(|(s, _)| s.clone())
                .collect();
            let config = TrainConfig {
                rng_seed: rng::sub_seed(train_config.rng_seed, &format!("fold-{fold}")),
                ..*train_config
            };
            let outcome = model::train(&train_set, &config, raster_config)?;
            samples
                .iter()
                .zip(&folds)
                .filter(|(_, &f)| f == fold)
                .map(|(s, _)| {
                    let probs = match tta_sizes {
                        Some(sizes) => {
                            tta_predict(&outcome.params, &s.sample, raster_config, sizes)?
                        }
                        None => predict_sample(&outcome.params, &s.sample, raster_config)?,
                    };
                    Ok((s.sample.sample_id.clone(), probs))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let truth: HashMap<String, LabelVector> = samples
        .iter()
        .map(|s| (s.sample.sample_id.clone(), s.labels))
        .collect();
    let mut fold_losses = Vec::with_capacity(k);
    let mut predictions = PredictionSet::new();
    for rows in per_fold {
        let fold_preds: PredictionSet = rows.into_iter().collect();
        let fold_truth = fold_preds
            .keys()
            .map(|id| (id.clone(), truth[id]))
            .collect();
        fold_losses.push(aggregated_log_loss(&fold_preds, &fold_truth, CLIP_EPSILON)?);
        predictions.extend(fold_preds);
    }
    let overall_loss = aggregated_log_loss(&predictions, &truth, CLIP_EPSILON)?;
    let fold_of = samples
        .iter()
        .zip(&folds)
        .map(|(s, &f)| (s.sample.sample_id.clone(), f))
        .collect();
    Ok(OofResult {
        predictions,
        fold_of,
        fold_losses,
        overall_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Derivatized, IonReading};
    use ndarray::Array2;
    use rand::Rng;

    fn set(rows: &[(&str, f64)]) -> PredictionSet {
        rows.iter()
            .map(|&(id, p)| (id.to_string(), [p; 9]))
            .collect()
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_probs(0.0, 1e-4), 1e-4);
        assert_eq!(clip_probs(0.5, 1e-4), 0.5);
        assert_eq!(clip_probs(1.0, 1e-4), 0.9999);
    }

    #[test]
    fn logit_examples() {
        assert_eq!(prob_to_logit(0.5).unwrap(), 0.0);
        assert!((prob_to_logit(0.9).unwrap() - 2.197225).abs() < 1e-6);
        assert!(prob_to_logit(0.0).is_err());
        assert!(prob_to_logit(1.0).is_err());
        for i in 0..=1000 {
            let p = clip_probs(i as f64 / 1000.0, 1e-4);
            assert!((model::sigmoid(prob_to_logit(p).unwrap()) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_examples() {
        let one = set(&[("a", 0.9), ("b", 1.0)]);
        let out = ensemble(&EnsembleSpec::new(vec![one.clone()])).unwrap();
        assert_eq!(out["a"], [0.9; 9]);
        assert_eq!(out["b"], [0.9999; 9]);

        let out = ensemble(&EnsembleSpec::new(vec![
            one.clone(),
            one.clone(),
            one.clone(),
        ]))
        .unwrap();
        assert_eq!(out["a"], [0.9; 9]);

        let out = ensemble(&EnsembleSpec::new(vec![
            set(&[("a", 0.9)]),
            set(&[("a", 0.5)]),
        ]))
        .unwrap();
        let expect = model::sigmoid(9f64.ln() / 2.0);
        assert!((out["a"][0] - expect).abs() < 1e-12);
        assert!((expect - 0.75).abs() < 1e-12);

        let err = ensemble(&EnsembleSpec::new(vec![
            set(&[("a", 0.9)]),
            set(&[("b", 0.9)]),
        ]));
        assert!(matches!(err, Err(GcmsError::ShapeMismatch(_))));
        assert!(ensemble(&EnsembleSpec::new(vec![])).is_err());
    }

    #[test]
    fn log_loss_examples() {
        let mut y = [false; 9];
        y[0] = true;
        let labels: HashMap<String, LabelVector> =
            [("a".to_string(), LabelVector(y))].into_iter().collect();
        let half = set(&[("a", 0.5)]);
        assert!(
            (aggregated_log_loss(&half, &labels, 1e-4).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-12
        );

        let exact: PredictionSet = [("a".to_string(), LabelVector(y).as_f64())]
            .into_iter()
            .collect();
        let floor = -(1.0f64 - 1e-4).ln();
        assert!((aggregated_log_loss(&exact, &labels, 1e-4).unwrap() - floor).abs() < 1e-15);
        assert!((floor - 1.00005e-4).abs() < 1e-9);

        let other = set(&[("b", 0.5)]);
        assert!(aggregated_log_loss(&other, &labels, 1e-4).is_err());
        let two = set(&[("a", 0.5), ("b", 0.5)]);
        assert!(aggregated_log_loss(&two, &labels, 1e-4).is_err());
    }

    fn tiny_sample(id: &str, mass: f64) -> RawSample {
        RawSample::new(
            id,
            (0..20).map(|i| IonReading::new(i as f64, mass, 1.0 + i as f64)),
            Derivatized::No,
        )
        .unwrap()
    }

    #[test]
    fn tta_single_size_equals_plain_prediction() {
        let mut params = ModelParams::zeros(model::N_FEATURES);
        params.weights[[0, 40]] = 2.0;
        params.bias[3] = -1.0;
        let s = tiny_sample("S", 40.0);
        let config = RasterConfig::default();
        let plain = predict_sample(&params, &s, &config).unwrap();
        assert_eq!(tta_predict(&params, &s, &config, &[192]).unwrap(), plain);
        assert!(tta_predict(&params, &s, &config, &[]).is_err());
    }

    #[test]
    fn tta_on_time_constant_grid_is_size_free() {
        let mut values = Array2::zeros((256, 192));
        values.row_mut(44).fill(0.6);
        values.row_mut(18).fill(0.25);
        let grid = raster::encode_channels(RasterGrid::from_values(values));
        let mut params = ModelParams::zeros(model::N_FEATURES);
        let mut r = rng::stream(5, "w");
        params.weights.mapv_inplace(|_| r.random_range(-3.0..3.0));
        let single = model::predict(
            &params,
            &model::time_average_features(&grid, Derivatized::Yes),
        )
        .unwrap();
        let tta =
            tta_predict_grid(&params, &grid, Derivatized::Yes, &TTA_SIZES, CLIP_EPSILON).unwrap();
        for k in 0..9 {
            assert!((tta[k] - clip_probs(single[k], CLIP_EPSILON)).abs() < 1e-12);
        }
    }

    fn labeled(id: &str, labels: [bool; 9]) -> LabeledSample {
        LabeledSample {
            sample: tiny_sample(id, 30.0),
            labels: LabelVector(labels),
        }
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let samples: Vec<LabeledSample> = (0..20)
            .map(|i| {
                let mut l = [false; 9];
                for slot in l.iter_mut().take(i % 3) {
                    *slot = true;
                }
                labeled(&format!("S{i:02}"), l)
            })
            .collect();
        let a = assign_folds(&samples, 4, 42).unwrap();
        assert_eq!(a, assign_folds(&samples, 4, 42).unwrap());
        let mut sizes = [0; 4];
        for &f in &a {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [5, 5, 5, 5]);
        assert!(assign_folds(&samples, 1, 0).is_err());
        assert!(assign_folds(&samples[..3], 4, 0).is_err());
    }

    #[test]
    fn oof_predicts_every_sample_once_from_an_unseen_model() {
        let samples: Vec<LabeledSample> = (0..4)
            .map(|i| {
                let mut l = [false; 9];
                l[i % 2] = true;
                labeled(&format!("S{i}"), l)
            })
            .collect();
        let config = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            ..TrainConfig::linear_profile()
        };
        let raster_config = RasterConfig::default();
        let out = kfold_oof(&samples, 2, &config, &raster_config, None).unwrap();
        assert_eq!(out.predictions.len(), 4);
        assert_eq!(out.fold_losses.len(), 2);
        let folds = assign_folds(&samples, 2, config.rng_seed).unwrap();
        for (s, &f) in samples.iter().zip(&folds) {
            assert_eq!(out.fold_of[&s.sample.sample_id], f);
            // Retrain the fold model and check it reproduces the OOF row.
            let train_set: Vec<_> = samples
                .iter()
                .zip(&folds)
                .filter(|(_, &g)| g != f)
                .map(|(x, _)| x.clone())
                .collect();
            assert!(train_set
                .iter()
                .all(|x| x.sample.sample_id != s.sample.sample_id));
            let fold_config = TrainConfig {
                rng_seed: rng::sub_seed(config.rng_seed, &format!("fold-{f}")),
                ..config
            };
            let params = model::train(&train_set, &fold_config, &raster_config)
                .unwrap()
                .params;
            let p = predict_sample(&params, &s.sample, &raster_config).unwrap();
            assert_eq!(out.predictions[&s.sample.sample_id], p);
        }
        assert!(kfold_oof(&samples[..1], 2, &config, &raster_config, None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ensemble_is_bounded_and_order_free(
                members in prop::collection::vec(prop::array::uniform9(0.0..=1.0f64), 1..6),
                seed in any::<u64>(),
            ) {
                let sets: Vec<PredictionSet> = members
                    .iter()
                    .map(|m| [("x".to_string(), *m)].into_iter().collect())
                    .collect();
                let out = ensemble(&EnsembleSpec::new(sets.clone())).unwrap()["x"];
                let mut shuffled = sets.clone();
                shuffled.shuffle(&mut rng::stream(seed, "p"));
                prop_assert_eq!(ensemble(&EnsembleSpec::new(shuffled)).unwrap()["x"], out);
                for k in 0..9 {
                    let clipped: Vec<f64> = members.iter().map(|m| clip_probs(m[k], CLIP_EPSILON)).collect();
                    let lo = clipped.iter().copied().fold(1.0, f64::min);
                    let hi = clipped.iter().copied().fold(0.0, f64::max);
                    prop_assert!(lo <= out[k] && out[k] <= hi);
                }
                let same = vec![sets[0].clone(); 4];
                let fixed = ensemble(&EnsembleSpec::new(same)).unwrap()["x"];
                prop_assert_eq!(fixed, members[0].map(|p| clip_probs(p, CLIP_EPSILON)));
            }

            #[test]
            fn log_loss_has_clip_floor(
                rows in prop::collection::vec(prop::array::uniform9(any::<bool>()), 1..10),
            ) {
                let labels: HashMap<String, LabelVector> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (format!("s{i}"), LabelVector(*r)))
                    .collect();
                let exact: PredictionSet = labels.iter().map(|(id, l)| (id.clone(), l.as_f64())).collect();
                let floor = -(1.0 - CLIP_EPSILON).ln();
                let loss = aggregated_log_loss(&exact, &labels, CLIP_EPSILON).unwrap();
                prop_assert!((loss - floor).abs() < 1e-15);
                let blurred: PredictionSet = exact.iter().map(|(id, p)| (id.clone(), p.map(|v| (v + 0.5) / 2.0))).collect();
                prop_assert!(aggregated_log_loss(&blurred, &labels, CLIP_EPSILON).unwrap() > floor);
            }
        }
    }
}
