use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use gcms_core::config::RunConfig;
use gcms_core::ensemble::{self, EnsembleSpec, PredictionSet, TTA_SIZES};
use gcms_core::formats;
use gcms_core::ingest::{self, DatasetManifest, LabeledSample, ManifestEntry, Split};
use gcms_core::raster;
use gcms_core::synth::{self, SynthConfig};
use gcms_core::{GcmsError, Result};
use log::info;
use rayon::prelude::*;

use crate::{Cli, Command, Failure, GlobalArgs};

/// Resolved settings for one invocation: the config file (if any) with the
/// command-line overrides applied.
struct Run {
    config: RunConfig,
    seed_given: bool,
    tta: bool,
}

impl Run {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(data) = &global.data {
            config.dataset_root = Some(data.clone());
        }
        if let Some(out) = &global.out {
            config.output = Some(out.clone());
        }
        if let Some(seed) = global.seed {
            config.train.rng_seed = seed;
        }
        if let Some(n) = global.time_slots {
            config.raster.n_time_slots = n;
        }
        if let Some(mode) = global.norm {
            config.raster.norm_mode = mode;
        }
        if let Some(mode) = global.log {
            config.raster.log_mode = mode;
        }
        config.validate()?;
        if let Some(missing) = config.missing_paths().first() {
            return Err(GcmsError::io(
                missing,
                io::Error::new(io::ErrorKind::NotFound, "configured path does not exist"),
            ));
        }
        Ok(Self {
            config,
            seed_given: global.seed.is_some() || global.config.is_some(),
            tta: global.tta,
        })
    }

    fn root(&self) -> Result<&Path> {
        self.config.dataset_root.as_deref().ok_or_else(|| {
            GcmsError::invalid("no dataset given (use --data or `data =` in the config)")
        })
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let root = self.root()?;
        let labels = self
            .config
            .labels_path
            .clone()
            .unwrap_or_else(|| root.join("labels.csv"));
        let metadata = self
            .config
            .metadata_path
            .clone()
            .unwrap_or_else(|| root.join("metadata.csv"));
        ingest::parse_manifest(labels, metadata)
    }

    fn out_or(&self, fallback: &str) -> PathBuf {
        self.config
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from(fallback))
    }

    fn training_samples(&self, manifest: &DatasetManifest) -> Result<Vec<LabeledSample>> {
        let samples = manifest.load_labeled(self.root()?, |e| e.split == Split::Train)?;
        if samples.is_empty() {
            return Err(GcmsError::invalid(
                "manifest has no labeled training samples",
            ));
        }
        info!("loaded {} labeled training samples", samples.len());
        Ok(samples)
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(Failure::Input("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let run = Run::new(&cli.global)?;
    match cli.command {
        Command::Rasterize { ids } => rasterize(&run, &ids),
        Command::Render {
            raster,
            mz_zero_top,
        } => Ok(render(&run, &raster, mz_zero_top)?),
        Command::Synth { n, noise } => Ok(synth(&run, n, noise)?),
        Command::Train { epochs } => Ok(train(run, epochs)?),
        Command::Predict { params, ids } => Ok(predict(&run, &params, &ids)?),
        Command::Ensemble { predictions } => Ok(ensemble(&run, &predictions)?),
        Command::Evaluate { predictions } => Ok(evaluate(&run, &predictions)?),
        Command::Oof { folds } => Ok(oof(&run, folds)?),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GcmsError::io(dir, e))
}

fn select<'m>(
    manifest: &'m DatasetManifest,
    ids: &[String],
) -> Vec<std::result::Result<&'m ManifestEntry, String>> {
    if ids.is_empty() {
        return manifest.entries.iter().map(Ok).collect();
    }
    ids.iter()
        .map(|id| {
            manifest
                .entry(id)
                .ok_or_else(|| format!("unknown sample id `{id}`"))
        })
        .collect()
}

fn rasterize(run: &Run, ids: &[String]) -> std::result::Result<(), Failure> {
    let manifest = run.manifest()?;
    let root = run.root()?;
    let out = run.out_or("rasters");
    create_dir(&out)?;
    let results: Vec<std::result::Result<String, String>> = select(&manifest, ids)
        .into_par_iter()
        .map(|entry| {
            let entry = entry?;
            let fail = |e: GcmsError| format!("{}: {e}", entry.sample_id);
            let sample = manifest.load_sample(root, entry).map_err(fail)?;
            let grid = raster::rasterize(&sample, &run.config.raster).map_err(fail)?;
            formats::write_raster(out.join(format!("{}.gcr1", entry.sample_id)), &grid)
                .map_err(fail)?;
            Ok(format!(
                "{}\t{}\t{:.6}",
                entry.sample_id,
                grid.count_nonzero(),
                grid.max_value()
            ))
        })
        .collect();
    let mut failed = 0;
    let mut stdout = io::stdout().lock();
    for result in results {
        match result {
            Ok(line) => {
                let _ = writeln!(stdout, "{line}");
            }
            Err(msg) => {
                failed += 1;
                eprintln!("error: {msg}");
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Input(format!(
            "{failed} sample(s) failed to rasterize"
        )));
    }
    Ok(())
}

fn render(run: &Run, raster_path: &Path, mz_zero_top: bool) -> Result<()> {
    let grid = formats::read_raster(raster_path)?;
    let out = run
        .config
        .output
        .clone()
        .unwrap_or_else(|| raster_path.with_extension("png"));
    formats::write_png(&out, &grid, mz_zero_top)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn synth(run: &Run, n: usize, noise: f64) -> Result<()> {
    let mut config = SynthConfig {
        n_samples: n,
        noise_level: noise,
        ..SynthConfig::default()
    };
    if run.seed_given {
        config.seed = run.config.seed();
    }
    let data = synth::generate(&config)?;
    let out = run.out_or("synth");
    create_dir(&out)?;
    data.write(&out)?;
    info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train(mut run: Run, epochs: Option<usize>) -> Result<()> {
    if let Some(epochs) = epochs {
        run.config.train.epochs = epochs;
        run.config.train.warmup_epochs =
            run.config.train.warmup_epochs.min(epochs.saturating_sub(1));
        run.config.validate()?;
    }
    let manifest = run.manifest()?;
    let samples = run.training_samples(&manifest)?;
    let outcome = gcms_core::model::train(&samples, &run.config.train, &run.config.raster)?;
    for (epoch, loss) in outcome.loss_trace.iter().enumerate() {
        info!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    }
    let out = run.out_or("model");
    create_dir(&out)?;
    formats::write_params(out.join("params.gcmp"), &outcome.params)?;
    let mut trace = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{},{loss:.9}\n", epoch + 1));
    }
    let trace_path = out.join("loss_trace.csv");
    fs::write(&trace_path, trace).map_err(|e| GcmsError::io(&trace_path, e))?;
    // Absolute paths so the saved config works from any directory.
    let mut saved = run.config.clone();
    for path in [
        &mut saved.dataset_root,
        &mut saved.labels_path,
        &mut saved.metadata_path,
        &mut saved.output,
    ]
    .into_iter()
    .flatten()
    {
        *path = std::path::absolute(&*path).map_err(|e| GcmsError::io(&*path, e))?;
    }
    let config_path = out.join("run.cfg");
    fs::write(&config_path, saved.to_text()).map_err(|e| GcmsError::io(&config_path, e))?;
    info!("wrote model to {}", out.display());
    Ok(())
}

fn emit(run: &Run, label_names: &[String], preds: &PredictionSet) -> Result<()> {
    match &run.config.output {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let file = fs::File::create(path).map_err(|e| GcmsError::io(path, e))?;
            formats::write_predictions(label_names, preds, io::BufWriter::new(file))?;
            info!("wrote {} predictions to {}", preds.len(), path.display());
            Ok(())
        }
        None => formats::write_predictions(label_names, preds, io::stdout().lock()),
    }
}

fn predict(run: &Run, params_path: &Path, ids: &[String]) -> Result<()> {
    let params = formats::read_params(params_path)?;
    let manifest = run.manifest()?;
    let root = run.root()?;
    let entries = select(&manifest, ids)
        .into_iter()
        .map(|e| e.map_err(GcmsError::invalid))
        .collect::<Result<Vec<_>>>()?;
    let preds = entries
        .par_iter()
        .map(|entry| {
            let sample = manifest.load_sample(root, entry)?;
            let probs = if run.tta {
                ensemble::tta_predict(&params, &sample, &run.config.raster, &TTA_SIZES)?
            } else {
                ensemble::predict_sample(&params, &sample, &run.config.raster)?
            };
            Ok((entry.sample_id.clone(), probs))
        })
        .collect::<Result<PredictionSet>>()?;
    emit(run, &manifest.label_names, &preds)
}

fn ensemble(run: &Run, paths: &[PathBuf]) -> Result<()> {
    let mut label_names: Option<Vec<String>> = None;
    let mut members = Vec::with_capacity(paths.len());
    for path in paths {
        let (names, preds) = formats::read_predictions_file(path)?;
        match &label_names {
            Some(first) if *first != names => {
                return Err(GcmsError::ShapeMismatch(format!(
                    "{} has different label columns",
                    path.display()
                )))
            }
            Some(_) => {}
            None => label_names = Some(names),
        }
        members.push(preds);
    }
    let combined = ensemble::ensemble(&EnsembleSpec::new(members))?;
    emit(run, &label_names.unwrap_or_default(), &combined)
}

fn evaluate(run: &Run, path: &Path) -> Result<()> {
    let (_, preds) = formats::read_predictions_file(path)?;
    let manifest = run.manifest()?;
    let all = manifest.label_map();
    let labels = preds
        .keys()
        .map(|id| {
            all.get(id)
                .map(|l| (id.clone(), *l))
                .ok_or_else(|| GcmsError::UnknownSample(id.clone()))
        })
        .collect::<Result<_>>()?;
    let loss = ensemble::aggregated_log_loss(&preds, &labels, ensemble::CLIP_EPSILON)?;
    println!("{loss:.6}");
    Ok(())
}

fn oof(run: &Run, folds: usize) -> Result<()> {
    let manifest = run.manifest()?;
    let samples = run.training_samples(&manifest)?;
    let tta = run.tta.then_some(&TTA_SIZES[..]);
    let result = ensemble::kfold_oof(&samples, folds, &run.config.train, &run.config.raster, tta)?;
    for (fold, loss) in result.fold_losses.iter().enumerate() {
        info!("fold {fold}  loss {loss:.6}");
    }
    eprintln!("oof loss {:.6}", result.overall_loss);
    emit(run, &manifest.label_names, &result.predictions)
}
