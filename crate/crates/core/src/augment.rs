//! Time-axis augmentations and mixup.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{GcmsError, Result};
use crate::ingest::RawSample;
use crate::raster::{self, PositionalChannels, RasterConfig, RasterGrid};
use crate::NUM_LABELS;

/// Beta(a, a) shape parameter for mixup weights.
pub const MIXUP_BETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub resize_enabled: bool,
    pub resize_min: usize,
    pub resize_max: usize,
    pub warp_enabled: bool,
    pub warp_alpha_min: f64,
    pub warp_alpha_max: f64,
    pub mixup_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize_enabled: true,
            resize_min: 128,
            resize_max: 256,
            warp_enabled: false,
            warp_alpha_min: 0.5,
            warp_alpha_max: 2.0,
            mixup_probability: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No resize, warp or mixup.
    pub fn disabled() -> Self {
        Self {
            resize_enabled: false,
            warp_enabled: false,
            mixup_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_min > self.resize_max {
            return Err(GcmsError::invalid(format!(
                "resize_min {} > resize_max {}",
                self.resize_min, self.resize_max
            )));
        }
        raster::validate_time_slots(self.resize_min)?;
        raster::validate_time_slots(self.resize_max)?;
        if !(self.warp_alpha_min > 0.0 && self.warp_alpha_min <= self.warp_alpha_max) {
            return Err(GcmsError::invalid(format!(
                "warp alpha range [{}, {}] must satisfy 0 < min <= max",
                self.warp_alpha_min, self.warp_alpha_max
            )));
        }
        if !(0.0..=1.0).contains(&self.mixup_probability) {
            return Err(GcmsError::invalid(format!(
                "mixup probability {} outside [0, 1]",
                self.mixup_probability
            )));
        }
        Ok(())
    }
}

/// Linear resampling of every row along the time axis. Output column `c`
/// reads source coordinate `c * (old - 1) / (new - 1)`, so both endpoints
/// stay aligned. The time channel is regenerated for the new width.
pub fn resize_time(grid: &RasterGrid, new_size: usize) -> Result<RasterGrid> {
    if new_size < 2 {
        return Err(GcmsError::invalid(format!(
            "resize target {new_size} must be at least 2"
        )));
    }
    let (rows, old) = grid.shape();
    if old == new_size {
        return Ok(grid.clone());
    }
    let plan = ResizePlan::new(old, new_size);
    let mut values = Array2::zeros((rows, new_size));
    for (src, mut dst) in grid.values.rows().into_iter().zip(values.rows_mut()) {
        plan.apply(src, dst.as_slice_mut().expect("standard layout"));
    }
    Ok(RasterGrid {
        values,
        channels: grid
            .channels
            .as_ref()
            .map(|_| PositionalChannels::new(rows, new_size)),
        sample_id: grid.sample_id.clone(),
        config: grid.config.with_time_slots(new_size),
    })
}

/// Precomputed source positions for endpoint-aligned linear resampling
/// from `old` to `new` columns: output column `c` reads source coordinate
/// `c * (old - 1) / (new - 1)`.
#[derive(Debug, Clone)]
pub struct ResizePlan {
    old: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    pub fn new(old: usize, new_size: usize) -> Self {
        let den = new_size.max(2) - 1;
        let taps = (0..new_size)
            .map(|c| {
                // Integer position keeps source indices exact.
                let num = c * old.saturating_sub(1);
                let i0 = num / den;
                let frac = (num % den) as f64 / den as f64;
                (i0, (i0 + 1).min(old.saturating_sub(1)), frac)
            })
            .collect();
        Self { old, taps }
    }

    pub fn new_size(&self) -> usize {
        self.taps.len()
    }

    /// Resamples `src` (length `old`) into `out` (length `new`).
    pub fn apply(&self, src: ArrayView1<f64>, out: &mut [f64]) {
        debug_assert_eq!(src.len(), self.old);
        if self.old == out.len() {
            out.iter_mut().zip(src.iter()).for_each(|(o, &v)| *o = v);
            return;
        }
        for (slot, &(i0, i1, frac)) in out.iter_mut().zip(&self.taps) {
            let (a, b) = (src[i0], src[i1]);
            // a + f(b - a) is exact when a == b; clamping keeps it in [a, b].
            *slot = (a + frac * (b - a)).clamp(a.min(b), a.max(b));
        }
    }
}

/// Power-law warp `t^alpha` of normalized times.
pub fn warp_time(normalized_times: &[f64], alpha: f64, config: &AugmentConfig) -> Result<Vec<f64>> {
    if !(config.warp_alpha_min..=config.warp_alpha_max).contains(&alpha) {
        return Err(GcmsError::invalid(format!(
            "warp alpha {alpha} outside [{}, {}]",
            config.warp_alpha_min, config.warp_alpha_max
        )));
    }
    Ok(normalized_times.iter().map(|t| t.powf(alpha)).collect())
}

/// Uniform time size in `[resize_min, resize_max]`.
pub fn sample_resize<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> usize {
    rng.random_range(config.resize_min..=config.resize_max)
}

/// Warp exponent drawn log-uniformly, so `alpha` and `1/alpha` are equally
/// likely for the default symmetric range.
pub fn sample_warp_alpha<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> f64 {
    let (lo, hi) = (config.warp_alpha_min.ln(), config.warp_alpha_max.ln());
    if lo == hi {
        return config.warp_alpha_min;
    }
    rng.random_range(lo..=hi)
        .exp()
        .clamp(config.warp_alpha_min, config.warp_alpha_max)
}

/// Mixup weight drawn from Beta(0.2, 0.2).
pub fn sample_mixup_lambda<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Beta::new(MIXUP_BETA, MIXUP_BETA)
        .expect("valid beta parameters")
        .sample(rng)
}

/// Bins `sample` after warping its normalized times by `alpha`, then runs
/// the rest of the raster pipeline.
pub fn rasterize_warped(
    sample: &RawSample,
    raster_config: &RasterConfig,
    alpha: f64,
    config: &AugmentConfig,
) -> Result<RasterGrid> {
    let times = warp_time(&raster::normalize_time(sample), alpha, config)?;
    let grid = raster::bin_with_times(sample, &times, raster_config)?;
    Ok(raster::finish(grid, raster_config))
}

/// Convex combination `lambda * a + (1 - lambda) * b` of two rasters and
/// their (soft) label vectors.
pub fn mixup(
    a: &RasterGrid,
    b: &RasterGrid,
    labels_a: &[f64; NUM_LABELS],
    labels_b: &[f64; NUM_LABELS],
    lambda: f64,
) -> Result<(RasterGrid, [f64; NUM_LABELS])> {
    if a.shape() != b.shape() {
        return Err(GcmsError::ShapeMismatch(format!(
            "mixup of {:?} and {:?} rasters",
            a.shape(),
            b.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GcmsError::invalid(format!(
            "mixup lambda {lambda} outside [0, 1]"
        )));
    }
    let mu = 1.0 - lambda;
    let mut out = a.clone();
    out.values
        .zip_mut_with(&b.values, |x, &y| *x = lambda * *x + mu * y);
    let labels = std::array::from_fn(|k| lambda * labels_a[k] + mu * labels_b[k]);
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::encode_channels;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn identity_resize_is_exact() {
        let g = RasterGrid::from_values(array![[0.1, 0.7, 0.3], [0.9, 0.0, 0.5]]);
        assert_eq!(resize_time(&g, 3).unwrap(), g);
    }

    #[test]
    fn constant_grid_survives_any_size() {
        let g = encode_channels(RasterGrid::from_values(Array2::from_elem((256, 192), 0.7)));
        for size in [2, 128, 160, 191, 193, 224, 256, 1000] {
            let r = resize_time(&g, size).unwrap();
            assert_eq!(r.shape(), (256, size));
            assert!(r.values.iter().all(|&v| v == 0.7), "size {size}");
            let ch = r.channels.unwrap();
            assert_eq!(ch.time[[0, size - 1]], 1.0);
            assert_eq!(ch.mass[[255, 0]], 1.0);
            assert_eq!(r.config.n_time_slots, size);
        }
    }

    #[test]
    fn two_point_row_interpolates_midpoint() {
        let g = RasterGrid::from_values(array![[0.0, 1.0]]);
        assert_eq!(resize_time(&g, 3).unwrap().values, array![[0.0, 0.5, 1.0]]);
        assert!(resize_time(&g, 1).is_err());
    }

    #[test]
    fn warp_examples() {
        let cfg = AugmentConfig::default();
        let ts = [0.0, 0.25, 0.6, 1.0];
        assert_eq!(warp_time(&ts, 1.0, &cfg).unwrap(), ts.to_vec());
        assert_eq!(warp_time(&[0.25], 2.0, &cfg).unwrap(), vec![0.0625]);
        for alpha in [0.5, 1.3, 2.0] {
            assert_eq!(warp_time(&[0.0, 1.0], alpha, &cfg).unwrap(), vec![0.0, 1.0]);
        }
        assert!(warp_time(&ts, 2.5, &cfg).is_err());
        assert!(warp_time(&ts, 0.4, &cfg).is_err());
    }

    #[test]
    fn resize_sampling_respects_range_and_seed() {
        let fixed = AugmentConfig {
            resize_min: 192,
            resize_max: 192,
            ..AugmentConfig::default()
        };
        let mut r = rng::stream(1, "t");
        assert!((0..50).all(|_| sample_resize(&fixed, &mut r) == 192));

        let cfg = AugmentConfig::default();
        let draw = |seed| {
            let mut r = rng::stream(seed, "t");
            (0..200)
                .map(|_| sample_resize(&cfg, &mut r))
                .collect::<Vec<_>>()
        };
        let a = draw(9);
        assert!(a.iter().all(|s| (128..=256).contains(s)));
        assert_eq!(a, draw(9));
    }

    #[test]
    fn mixup_examples() {
        let a = RasterGrid::from_values(array![[0.8]]);
        let b = RasterGrid::from_values(array![[0.4]]);
        let mut la = [0.0; 9];
        la[0] = 1.0;
        let mut lb = [0.0; 9];
        lb[1] = 1.0;

        let (g, l) = mixup(&a, &b, &la, &lb, 1.0).unwrap();
        assert_eq!((g, l), (a.clone(), la));

        let (_, l) = mixup(&a, &b, &la, &lb, 0.5).unwrap();
        assert_eq!(&l[..3], &[0.5, 0.5, 0.0]);

        let (g, _) = mixup(&a, &b, &la, &lb, 0.25).unwrap();
        assert!((g.values[[0, 0]] - 0.5).abs() < 1e-15);

        let c = RasterGrid::from_values(array![[0.1, 0.2]]);
        assert!(matches!(
            mixup(&a, &c, &la, &lb, 0.5),
            Err(GcmsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            resize_min: 300,
            resize_max: 200,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            warp_alpha_min: 0.0,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn resize_never_overshoots(
                values in prop::collection::vec(0.0..1.0f64, 3 * 20),
                size in 2usize..400,
            ) {
                let g = RasterGrid::from_values(Array2::from_shape_vec((3, 20), values).unwrap());
                let r = resize_time(&g, size).unwrap();
                for (src, dst) in g.values.rows().into_iter().zip(r.values.rows()) {
                    let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(dst.iter().all(|v| (lo..=hi).contains(v)));
                    prop_assert_eq!(dst[0], src[0]);
                    prop_assert_eq!(dst[size - 1], src[19]);
                }
            }

            #[test]
            fn double_resize_keeps_constants(v in 0.0..1.0f64, n in 2usize..300) {
                let g = RasterGrid::from_values(Array2::from_elem((4, n), v));
                let r = resize_time(&resize_time(&g, 2 * n).unwrap(), n).unwrap();
                prop_assert_eq!(r.values, g.values);
            }

            #[test]
            fn warp_is_strictly_monotone(
                a in 1e-6..1.0f64, b in 1e-6..1.0f64, alpha in 0.5..=2.0f64,
            ) {
                prop_assume!(a != b);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let w = warp_time(&[lo, hi], alpha, &AugmentConfig::default()).unwrap();
                prop_assert!(w[0] < w[1] || (hi - lo) < 1e-15);
            }

            #[test]
            fn mixup_stays_in_unit_range(
                x in 0.0..=1.0f64, y in 0.0..=1.0f64, lambda in 0.0..=1.0f64,
            ) {
                let a = RasterGrid::from_values(array![[x]]);
                let b = RasterGrid::from_values(array![[y]]);
                let (g, l) = mixup(&a, &b, &[1.0; 9], &[0.0; 9], lambda).unwrap();
                prop_assert!((0.0..=1.0).contains(&g.values[[0, 0]]));
                prop_assert!(l.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
