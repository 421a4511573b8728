//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use redreflex::bundle::ModelBundle;
use redreflex::classifier::{PixelPca, Providers, SweepSummary};
use redreflex::config::{AppConfig, DetectorChoice};
use redreflex::dataset::{load_manifest, Label};
use redreflex::imaging::{compute_properties, property_class_report, PropertyVector};
use redreflex::interpret::FocusMode;
use redreflex::par::{self, Exec};
use redreflex::pipeline::{Detector, FallbackDetector, RemoteConfig, RemoteDetector, WithFallback};
use redreflex::synth::{generate, write_dataset, SynthConfig};

use crate::screen::{EyeChoice, Screener};
use crate::workflow;

#[derive(Debug, Parser)]
#[command(name = "redreflex", version, about = "Red-reflex screening: data, training, analysis and serving")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting and training; overrides `[train] seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run batch work on a single thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Assign splits, mirror left eyes and curate usable crops.
    Ingest(IngestArgs),
    /// Per-image property CSV and an optional class-comparison report.
    Properties(PropertiesArgs),
    /// Train a head (or an ensemble) and write a model bundle.
    Train(TrainArgs),
    /// Evaluate a bundle on the test split.
    Eval(EvalArgs),
    /// Train and evaluate over several seeds and report mean ± std.
    Sweep(SweepArgs),
    /// Attention maps, radial report, embedding and feedback rules.
    Explain(ExplainArgs),
    /// Screen one image file.
    Screen(ScreenArgs),
    /// Run the HTTP screening service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of subjects; each contributes two eye images.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0.28)]
    pub abnormal_frac: f64,
    /// Per-channel Gaussian noise standard deviation.
    #[arg(long, default_value_t = 2.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest with split assignments.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PropertiesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the per-property KS comparison of the two classes.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding provider.
    #[arg(long, default_value = PixelPca::NAME)]
    pub provider: String,
    /// ONNX backbone to register as the `onnx-file` provider.
    #[cfg(feature = "onnx")]
    #[arg(long)]
    pub onnx: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Ensemble size; members use consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub members: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Per-image predictions as JSON lines.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of seeds, starting from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Summary JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FocusArg {
    Argmax,
    Region,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum number of occlusion maps.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value = "argmax")]
    pub focus: FocusArg,
    /// Where to write the bundle with refitted feedback rules; defaults to `--bundle`.
    #[arg(long)]
    pub bundle_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value = "right")]
    pub eye: EyeChoice,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    /// Keep a copy of every upload in this directory.
    #[arg(long)]
    pub retain_uploads: Option<PathBuf>,
}

impl Cli {
    fn app_config(&self) -> Result<AppConfig> {
        let mut cfg = match &self.config {
            Some(p) => AppConfig::load(p)?,
            None => AppConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

fn providers(data: &DataArgs) -> Result<Providers> {
    #[allow(unused_mut)]
    let mut p = Providers::builtin();
    #[cfg(feature = "onnx")]
    if let Some(path) = &data.onnx {
        p.insert(Arc::new(redreflex::classifier::OnnxFileProvider::load(path)?));
    }
    p.get(&data.provider)?;
    Ok(p)
}

/// Detector chosen in the configuration.
pub fn detector(choice: DetectorChoice) -> Result<Arc<dyn Detector>> {
    Ok(match choice {
        DetectorChoice::Fallback => Arc::new(FallbackDetector),
        DetectorChoice::Remote => Arc::new(WithFallback {
            primary: RemoteDetector::new(RemoteConfig::from_env()?)?,
            fallback: FallbackDetector,
        }),
    })
}

fn prepare(data: &DataArgs, cfg: &AppConfig, exec: Exec) -> Result<workflow::Prepared> {
    let manifest = load_manifest(&data.manifest).with_context(|| format!("loading {}", data.manifest.display()))?;
    let det = detector(cfg.service.detector)?;
    let prepared = workflow::prepare(&manifest, cfg, cfg.train.seed, det.as_ref(), exec)?;
    log::info!("curation: {}", serde_json::to_string(&prepared.summary())?);
    Ok(prepared)
}

fn bundle_path<'a>(arg: &'a Option<PathBuf>, cfg: &'a AppConfig) -> Result<&'a Path> {
    arg.as_deref()
        .or(cfg.service.bundle.as_deref())
        .context("no model bundle given (use --bundle or [service] bundle)")
}

pub fn load_screener(path: &Path, cfg: &AppConfig) -> Result<Screener> {
    let (bundle, version) = ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Screener::new(bundle, version, Providers::builtin(), detector(cfg.service.detector)?)?)
}

fn print_sweep(summary: &SweepSummary, reports: &[redreflex::classifier::EvalReport]) {
    for (seed, r) in summary.seeds.iter().zip(reports) {
        println!("seed {seed}: {r}");
    }
    println!("{}", SweepSummary::HEADER);
    println!("{}", summary.row());
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.app_config()?;
    let exec = cli.exec();
    match &cli.command {
        Command::Synth(a) => {
            let sc = SynthConfig {
                n_subjects: a.n,
                abnormal_fraction: a.abnormal_frac,
                image_size: a.image_size,
                seed: cli.seed.unwrap_or(0),
                noise: a.noise,
                ..SynthConfig::default()
            };
            let ds = generate(&sc, exec)?;
            let manifest = write_dataset(&ds, &a.out, exec)?;
            println!(
                "wrote {} records ({} abnormal) to {}",
                manifest.len(),
                ds.count(Label::Abnormal),
                a.out.display()
            );
        }
        Command::Ingest(a) => {
            let data = DataArgs {
                manifest: a.manifest.clone(),
                provider: PixelPca::NAME.into(),
                #[cfg(feature = "onnx")]
                onnx: None,
            };
            let prepared = prepare(&data, &cfg, exec)?;
            prepared.manifest.save(&a.out)?;
            println!("{}", serde_json::to_string_pretty(&workflow::curation_json(&prepared))?);
        }
        Command::Properties(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let rows = par::try_map(exec, &manifest.entries, |e| {
                let r = manifest.load_record(e)?;
                let r = redreflex::dataset::mirror_left_eyes(vec![r]).pop().expect("one record");
                Ok::<_, redreflex::Error>((r.id, compute_properties(&r.image, None)?, r.label))
            })?;
            let mut csv = format!("id,{},label\n", PropertyVector::csv_header());
            for (id, p, label) in &rows {
                csv.push_str(&format!("{id},{},{label}\n", p.csv_row()));
            }
            match &a.out {
                Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(csv.as_bytes())?,
            }
            if let Some(path) = &a.report {
                let labelled: Vec<(PropertyVector, Label)> =
                    rows.into_iter().filter(|r| r.2 != Label::Unlabeled).map(|(_, p, l)| (p, l)).collect();
                workflow::write_json(path, &property_class_report(&labelled)?)?;
            }
        }
        Command::Train(a) => {
            let providers = providers(&a.data)?;
            let prepared = prepare(&a.data, &cfg, exec)?;
            let seeds: Vec<u64> = (0..a.members.max(1)).map(|i| cfg.train.seed + i).collect();
            let outcome = workflow::train(&prepared, &cfg, &seeds, &providers, &a.data.provider, exec)?;
            let version = outcome.bundle.save(&a.out)?;
            println!("test: {}", outcome.test_report);
            println!("feedback rules: {}", outcome.bundle.feedback_rules.len());
            println!("bundle {} written to {}", version, a.out.display());
        }
        Command::Eval(a) => {
            let providers = providers(&a.data)?;
            let prepared = prepare(&a.data, &cfg, exec)?;
            let (bundle, version) = ModelBundle::load(&a.bundle)?;
            let (report, predictions) = redreflex::classifier::evaluate(
                &bundle.model,
                &providers,
                &prepared.crops(redreflex::dataset::Split::Test),
                exec,
            )?;
            if let Some(path) = &a.predictions {
                let mut text = String::new();
                for p in &predictions {
                    text.push_str(&serde_json::to_string(p)?);
                    text.push('\n');
                }
                std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("model {version}");
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep(a) => {
            let providers = providers(&a.data)?;
            let prepared = prepare(&a.data, &cfg, exec)?;
            let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.train.seed + i).collect();
            let (summary, reports) = workflow::sweep(&prepared, &cfg, &seeds, &providers, &a.data.provider, exec)?;
            print_sweep(&summary, &reports);
            if let Some(path) = &a.out {
                workflow::write_json(path, &summary)?;
            }
        }
        Command::Explain(a) => {
            let providers = providers(&a.data)?;
            let prepared = prepare(&a.data, &cfg, exec)?;
            let (mut bundle, _) = ModelBundle::load(&a.bundle)?;
            let mode = match a.focus {
                FocusArg::Argmax => FocusMode::Argmax,
                FocusArg::Region => FocusMode::RegionCentroid,
            };
            let out = workflow::explain(&mut bundle, &prepared, &cfg, &providers, &a.out, a.limit, mode, exec)?;
            let target = a.bundle_out.as_ref().unwrap_or(&a.bundle);
            let version = bundle.save(target)?;
            for g in &out.radial.report.groups {
                println!("{:<18} n={:<4} median r_norm {:.3}", g.name(), g.n, g.median);
            }
            for c in &out.radial.report.comparisons {
                println!("KS {} vs {}: D={:.3} p={:.2e}", c.a, c.b, c.ks.statistic, c.ks.p_value);
            }
            for w in &out.radial.report.warnings {
                println!("warning: {w}");
            }
            println!("{} feedback rules; bundle {} written to {}", out.rules.len(), version, target.display());
        }
        Command::Screen(a) => {
            let screener = load_screener(bundle_path(&a.bundle, &cfg)?, &cfg)?;
            let bytes = std::fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
            let result = screener.screen(&bytes, a.eye)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Serve(a) => {
            let path = bundle_path(&a.bundle, &cfg)?.to_path_buf();
            let bind = a.bind.clone().unwrap_or_else(|| cfg.service.bind.clone());
            let retain = a.retain_uploads.clone().or_else(|| cfg.service.retain_uploads.clone());
            let max = cfg.service.max_upload_bytes;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::http::serve(&bind, max, retain, move || load_screener(&path, &cfg)))?;
        }
    }
    Ok(())
}
