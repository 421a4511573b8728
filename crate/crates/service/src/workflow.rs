//! Dataset-to-bundle workflows behind the CLI: curation, training,
//! evaluation, seed sweeps and the interpretability outputs.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use redreflex::bundle::ModelBundle;
use redreflex::classifier::{
    embed_batch, evaluate, seed_sweep, train_head, EvalReport, HeadModel, LabeledImage, Model, Prediction, Providers,
    SweepSummary, TrainingLog, Ensemble,
};
use redreflex::config::AppConfig;
use redreflex::curate::{curate, curation_summary, usable_crops, CuratedEye, CurationSummary};
use redreflex::dataset::{mirror_left_eyes, split_dataset, DatasetManifest, EyeRecord, Label, Split};
use redreflex::imaging::compute_properties;
use redreflex::interpret::{
    boundary_distance_report, fit_feedback_rules, occlusion_map, radial_focus, radial_report, tsne_embed,
    BoundaryReport, FeedbackRule, FocusMode, RadialFocus, RadialReport, TsneConfig,
};
use redreflex::par::{self, Exec};
use redreflex::pipeline::Detector;
use redreflex::Error;

/// Splits the manifest when no entry has a split yet; otherwise keeps the
/// assignment it already carries.
pub fn assign_splits(manifest: &DatasetManifest, cfg: &AppConfig, seed: u64) -> Result<DatasetManifest> {
    if manifest.entries.iter().all(|e| e.split == Split::Unassigned) {
        Ok(split_dataset(manifest, cfg.split, seed)?)
    } else {
        Ok(manifest.clone())
    }
}

/// A manifest loaded, mirrored and run through the pupil stages.
pub struct Prepared {
    pub manifest: DatasetManifest,
    /// Mirrored eye images, aligned with `curated`.
    pub records: Vec<EyeRecord>,
    pub curated: Vec<CuratedEye>,
}

impl Prepared {
    pub fn summary(&self) -> CurationSummary {
        curation_summary(&self.curated)
    }

    pub fn crops(&self, split: Split) -> Vec<LabeledImage> {
        usable_crops(&self.curated, split)
    }

    /// Full (mirrored) eye images of the usable records of one split, keyed
    /// like [`Prepared::crops`].
    pub fn full_eyes(&self, split: Split) -> Vec<&EyeRecord> {
        self.records
            .iter()
            .zip(&self.curated)
            .filter(|(_, c)| c.split == split && c.is_usable())
            .map(|(r, _)| r)
            .collect()
    }
}

pub fn prepare(manifest: &DatasetManifest, cfg: &AppConfig, seed: u64, detector: &dyn Detector, exec: Exec) -> Result<Prepared> {
    let manifest = assign_splits(manifest, cfg, seed)?;
    let records = par::try_map(exec, &manifest.entries, |e| manifest.load_record(e))?;
    let records = mirror_left_eyes(records);
    let curated = curate(&records, detector, &cfg.gate, exec)?;
    Ok(Prepared {
        manifest,
        records,
        curated,
    })
}

fn pairs(set: &[LabeledImage]) -> Vec<(redreflex::RgbImage, Label)> {
    set.iter().map(|x| (x.image.clone(), x.label)).collect()
}

/// Everything produced by one training run.
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub logs: Vec<TrainingLog>,
    pub test_report: EvalReport,
    pub predictions: Vec<Prediction>,
}

/// Trains one head per seed (an ensemble when more than one), evaluates it on
/// the test crops, and fits feedback rules on the validation split.
pub fn train(prepared: &Prepared, cfg: &AppConfig, seeds: &[u64], providers: &Providers, provider: &str, exec: Exec) -> Result<TrainOutcome> {
    let train_set = pairs(&prepared.crops(Split::Train));
    let val_set = pairs(&prepared.crops(Split::Validation));
    let mix = cfg.augment.mix()?;
    let embedder = providers.get(provider)?;

    let mut heads = Vec::new();
    let mut logs = Vec::new();
    for &seed in seeds {
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let (head, log) = train_head(embedder, &train_set, &val_set, &tc, &mix, exec)?;
        log::info!("seed {seed}: best epoch {} val loss {:.4}", log.best_epoch, log.best_val_loss);
        heads.push(head.rounded_to_f32());
        logs.push(log);
    }
    let model = match heads.len() {
        0 => anyhow::bail!("no training seeds given"),
        1 => Model::Single(heads.pop().expect("one head")),
        _ => Model::Ensemble(Ensemble::new(heads)?),
    };

    let mut bundle = ModelBundle::new(model);
    bundle.augment = mix;
    bundle.gate = cfg.gate;
    bundle.feedback = cfg.feedback.clone();
    bundle.feedback_rules = fit_rules(&bundle, prepared, providers, exec)?;
    let (test_report, predictions) = evaluate(&bundle.model, providers, &prepared.crops(Split::Test), exec)?;
    bundle.metrics = Some(test_report.clone());
    Ok(TrainOutcome {
        bundle,
        logs,
        test_report,
        predictions,
    })
}

/// Fits feedback rules from validation confidences and full-eye properties.
/// Too small a validation split yields no rules, with a warning.
pub fn fit_rules(bundle: &ModelBundle, prepared: &Prepared, providers: &Providers, exec: Exec) -> Result<Vec<FeedbackRule>> {
    let crops = prepared.crops(Split::Validation);
    let eyes = prepared.full_eyes(Split::Validation);
    let (_, predictions) = evaluate(&bundle.model, providers, &crops, exec)?;
    let confidences: Vec<f64> = predictions.iter().map(Prediction::confidence).collect();
    let properties = par::try_map(exec, &eyes, |r| compute_properties(&r.image, None))?;
    match fit_feedback_rules(&confidences, &properties, &bundle.feedback) {
        Ok(rules) => Ok(rules),
        Err(Error::InsufficientData { needed, got }) => {
            log::warn!("only {got} validation samples (need {needed}); bundle carries no feedback rules");
            Ok(Vec::new())
        }
        Err(e) => Err(e.into()),
    }
}

/// Per-seed reports and their summary.
pub fn sweep(prepared: &Prepared, cfg: &AppConfig, seeds: &[u64], providers: &Providers, provider: &str, exec: Exec) -> Result<(SweepSummary, Vec<EvalReport>)> {
    let train_set = pairs(&prepared.crops(Split::Train));
    let val_set = pairs(&prepared.crops(Split::Validation));
    let test_set = prepared.crops(Split::Test);
    let mix = cfg.augment.mix()?;
    let embedder = providers.get(provider)?;
    Ok(seed_sweep(seeds, |seed| {
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let (head, _) = train_head(embedder, &train_set, &val_set, &tc, &mix, exec)?;
        let (report, _) = evaluate(&Model::Single(head), providers, &test_set, exec)?;
        log::info!("seed {seed}: {report}");
        Ok(report)
    })?)
}

#[derive(Clone, Debug, Serialize)]
pub struct FocusRow {
    pub id: String,
    pub label: Label,
    pub correct: bool,
    pub focus: RadialFocus,
}

#[derive(Clone, Debug, Serialize)]
pub struct RadialOutput {
    pub mode: FocusMode,
    pub images: Vec<FocusRow>,
    pub report: RadialReport,
}

#[derive(Clone, Debug)]
pub struct ExplainOutput {
    pub radial: RadialOutput,
    pub boundary: Option<BoundaryReport>,
    pub rules: Vec<FeedbackRule>,
}

/// Writes `heatmaps/<id>.png`, `radial.json`, `embedding.csv` and
/// `boundary.json` under `out`, and refits the bundle's feedback rules.
/// `limit` caps how many test crops get an occlusion map.
#[allow(clippy::too_many_arguments)]
pub fn explain(
    bundle: &mut ModelBundle,
    prepared: &Prepared,
    cfg: &AppConfig,
    providers: &Providers,
    out: &Path,
    limit: Option<usize>,
    mode: FocusMode,
    exec: Exec,
) -> Result<ExplainOutput> {
    let heatmaps = out.join("heatmaps");
    std::fs::create_dir_all(&heatmaps).with_context(|| format!("creating {}", heatmaps.display()))?;
    let test = prepared.crops(Split::Test);
    let (_, predictions) = evaluate(&bundle.model, providers, &test, exec)?;

    let n_maps = limit.unwrap_or(test.len()).min(test.len());
    let mut images = Vec::with_capacity(n_maps);
    for (x, p) in test.iter().zip(&predictions).take(n_maps) {
        let map = occlusion_map(&bundle.model, providers, &x.image, &cfg.occlusion, exec)?;
        map.to_image().save_png(&heatmaps.join(format!("{}.png", x.id)))?;
        images.push(FocusRow {
            id: x.id.clone(),
            label: x.label,
            correct: p.correct(),
            focus: radial_focus(&map, mode)?,
        });
    }
    let items: Vec<(f64, Label, bool)> = images.iter().map(|r| (r.focus.r_norm, r.label, r.correct)).collect();
    let radial = RadialOutput {
        mode,
        report: radial_report(&items)?,
        images,
    };
    write_json(&out.join("radial.json"), &radial)?;

    let boundary = embedding_csv(bundle, &test, &predictions, providers, &cfg.tsne, &out.join("embedding.csv"), exec)?;
    if let Some(b) = &boundary {
        write_json(&out.join("boundary.json"), b)?;
    }

    bundle.feedback = cfg.feedback.clone();
    bundle.feedback_rules = fit_rules(bundle, prepared, providers, exec)?;
    Ok(ExplainOutput {
        radial,
        boundary,
        rules: bundle.feedback_rules.clone(),
    })
}

/// t-SNE of the normalised head inputs of the first model member. Returns the
/// boundary report when both classes are present.
fn embedding_csv(
    bundle: &ModelBundle,
    test: &[LabeledImage],
    predictions: &[Prediction],
    providers: &Providers,
    tsne: &TsneConfig,
    path: &Path,
    exec: Exec,
) -> Result<Option<BoundaryReport>> {
    let head: &HeadModel = &bundle.model.members()[0];
    let images: Vec<_> = test.iter().map(|x| x.image.clone()).collect();
    let features: Vec<Vec<f64>> = embed_batch(exec, providers.get(&head.provider)?, &images)?
        .iter()
        .map(|f| head.norm.apply(f))
        .collect();
    let mut file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "id,x,y,label,predicted,correct")?;
    if features.len() < 2 || tsne.perplexity >= features.len() as f64 {
        log::warn!("{} test crops are too few for perplexity {}; embedding skipped", features.len(), tsne.perplexity);
        return Ok(None);
    }
    let result = tsne_embed(&features, tsne)?;
    for ((x, p), c) in test.iter().zip(predictions).zip(&result.coords) {
        writeln!(file, "{},{},{},{},{},{}", x.id, c[0], c[1], x.label, p.predicted(), p.correct())?;
    }
    let labels: Vec<Label> = test.iter().map(|x| x.label).collect();
    let correct: Vec<bool> = predictions.iter().map(Prediction::correct).collect();
    Ok(boundary_distance_report(&result.coords, &labels, &correct).ok())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn curation_json(prepared: &Prepared) -> serde_json::Value {
    let per_split = |s: Split| curation_summary(&prepared.curated.iter().filter(|c| c.split == s).cloned().collect::<Vec<_>>());
    serde_json::json!({
        "all": prepared.summary(),
        "train": per_split(Split::Train),
        "validation": per_split(Split::Validation),
        "test": per_split(Split::Test),
    })
}
