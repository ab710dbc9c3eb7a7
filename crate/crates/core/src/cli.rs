//! The `fusionpose` command line.
//!
//! Exit codes: 0 on success, 1 on a runtime or data failure, 2 on a usage
//! error. `FUSIONPOSE_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, bail};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use crate::dataio::{self, DatasetManifest};
use crate::eval::{self, EvalReport};
use crate::model::{FilterThresholds, NUM_JOINTS, Pose3D};
use crate::nn::{self, Architecture, Variant};
use crate::pseudolabel::{self, PseudoLabelConfig, Weighting};
use crate::synth::{self, NoiseProfile, SynthConfig};
use crate::train::{self, GradCheckConfig, Model, TrainConfig, TrainMode};

#[derive(Debug, Parser)]
#[command(name = "fusionpose", version, about = "Weakly supervised 3D pose estimation from LiDAR and keypoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Split a dataset into train and test files.
    Split(SplitArgs),
    /// Fill in 3D pseudo-labels from keypoints and LiDAR returns.
    Pseudolabel(PseudolabelArgs),
    /// Train a model and write a checkpoint and an epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Evaluate pseudo-labels directly against ground truth.
    EvalPseudo(EvalPseudoArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset (`.gz` for gzip).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = NoiseProfile::Nominal)]
    pub noise_profile: NoiseProfile,
    /// Manifest path [default: <out>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
    /// Fraction of samples kept for training.
    #[arg(long, default_value_t = 0.834)]
    pub fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 3d: softmax over 3D distance to the neighborhood mean; 2d: softmax
    /// over pixel distance divided by the radius.
    #[arg(long, value_enum, default_value_t = Weighting::ThreeD)]
    pub weighting: Weighting,
    #[arg(long, default_value_t = 10.0)]
    pub radius_px: f64,
    #[arg(long, default_value_t = 20)]
    pub max_neighbors: usize,
    #[arg(long, default_value_t = 1)]
    pub min_neighbors: usize,
    /// Minimum keypoint confidence for a joint to get a label.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Validation set with ground truth, scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// [default: supervised]
    #[arg(long, value_enum)]
    pub mode: Option<TrainMode>,
    /// [default: fusion]
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Layer sizes: paper, desk or compact [default: paper].
    #[arg(long)]
    pub arch: Option<String>,
    /// [default: 250 supervised, 25 weak]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 5e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch decay, weak mode only [default: 0.95].
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Confidence threshold t for weak targets [default: 0.8].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Chance of hiding one branch per sample and step [default: 0.1].
    #[arg(long)]
    pub branch_dropout: Option<f64>,
    /// JSON file with any of the settings above; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    #[arg(long)]
    pub log_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Must match the checkpoint [default: the checkpoint's variant].
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Per-sample errors as JSON lines.
    #[arg(long)]
    pub per_sample_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPseudoArgs {
    #[arg(long)]
    pub test: PathBuf,
    /// [default: both]
    #[arg(long, value_enum)]
    pub weighting: Option<Weighting>,
    #[arg(long, default_value_t = 10.0)]
    pub radius_px: f64,
    #[arg(long, default_value_t = 20)]
    pub max_neighbors: usize,
    #[arg(long, default_value_t = 1)]
    pub min_neighbors: usize,
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Central-difference step.
    #[arg(long, default_value = "1e-5")]
    pub epsilon: f64,
    /// Layer sizes: compact, desk or paper.
    #[arg(long, default_value = "compact")]
    pub arch: String,
    #[arg(long, value_enum, default_value_t = Variant::Fusion)]
    pub variant: Variant,
    /// Number of randomly drawn coordinates to check; 0 checks all.
    #[arg(long, default_value_t = 0)]
    pub coords: usize,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Partial training settings read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    mode: Option<TrainMode>,
    variant: Option<Variant>,
    arch: Option<String>,
    epochs: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    batch_size: Option<usize>,
    threshold: Option<f64>,
    seed: Option<u64>,
    branch_dropout: Option<f64>,
}

fn arch_named(name: &str) -> anyhow::Result<Architecture> {
    Architecture::by_name(name).with_context(|| format!("unknown architecture {name:?} (paper, desk, compact)"))
}

fn default_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig::profile(a.noise_profile, a.n, a.seed);
    let data = synth::generate_dataset(&cfg)?;
    let (kept, stats) = dataio::filter_dataset(data, &FilterThresholds::default());
    let file = dataio::write_samples(&kept, &a.out)?;
    let mut manifest = DatasetManifest::with_config(a.seed, &cfg);
    manifest.filter = stats;
    manifest.files.push(file);
    let mpath = a.manifest.clone().unwrap_or_else(|| default_manifest(&a.out));
    manifest.write(&mpath)?;
    println!(
        "generated {} samples ({:?}, seed {}) -> {}",
        kept.len(),
        a.noise_profile,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn split(a: &SplitArgs) -> anyhow::Result<()> {
    let data = dataio::read_samples(&a.input)?;
    let n = data.len();
    let (train, test) = dataio::split(data, a.fraction, a.seed)?;
    let files = vec![dataio::write_samples(&train, &a.train_out)?, dataio::write_samples(&test, &a.test_out)?];
    let manifest = DatasetManifest {
        seed: a.seed,
        split: Some((train.len(), test.len())),
        files,
        ..DatasetManifest::with_config(a.seed, &serde_json::json!({ "fraction": a.fraction, "input": n }))
    };
    manifest.write(default_manifest(&a.train_out))?;
    println!("split {n} samples into {} train / {} test", train.len(), test.len());
    Ok(())
}

fn pseudolabel_cmd(a: &PseudolabelArgs) -> anyhow::Result<()> {
    let cfg = PseudoLabelConfig {
        radius_px: a.radius_px,
        max_neighbors: a.max_neighbors,
        min_neighbors: a.min_neighbors,
        weighting: a.weighting,
        confidence_threshold: a.threshold,
    };
    if !cfg.is_valid() {
        bail!("need radius > 0 and max-neighbors >= min-neighbors >= 1");
    }
    let mut data = dataio::read_samples(&a.input)?;
    let labels: Vec<Pose3D> = data.par_iter().map(|s| pseudolabel::pseudo_labels_vehicle_frame(s, &cfg)).collect();
    let (mut confident, mut labeled, mut samples_with_label) = (0usize, 0usize, 0usize);
    for (s, p) in data.iter_mut().zip(labels) {
        confident += (0..NUM_JOINTS)
            .filter(|&j| s.keypoints2d.confidence[j] > 0.0 && s.keypoints2d.confidence[j] >= a.threshold)
            .count();
        labeled += p.n_valid();
        samples_with_label += usize::from(p.n_valid() > 0);
        s.pseudo3d = Some(p);
    }
    let data: Vec<_> = data.iter().map(dataio::canonicalize).collect();
    dataio::write_samples(&data, &a.out)?;
    let coverage = if confident > 0 { labeled as f64 / confident as f64 } else { 0.0 };
    println!(
        "weighting {:?}: {labeled} of {confident} confident joints labeled ({:.1}%), {samples_with_label} of {} samples",
        a.weighting,
        100.0 * coverage,
        data.len()
    );
    if samples_with_label == 0 {
        bail!("no sample obtained a pseudo-label");
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let file: TrainFile = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainFile::default(),
    };
    let mode = a.mode.or(file.mode).unwrap_or(TrainMode::Supervised);
    let d = TrainConfig::defaults(mode);
    let arch = match a.arch.as_ref().or(file.arch.as_ref()) {
        Some(n) => arch_named(n)?,
        None => d.arch.clone(),
    };
    Ok(TrainConfig {
        mode,
        variant: a.variant.or(file.variant).unwrap_or(d.variant),
        arch,
        epochs: a.epochs.or(file.epochs).unwrap_or(d.epochs),
        learning_rate: a.lr.or(file.lr).unwrap_or(d.learning_rate),
        lr_decay_per_epoch: a.lr_decay.or(file.lr_decay).unwrap_or(d.lr_decay_per_epoch),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        confidence_threshold: a.threshold.or(file.threshold).unwrap_or(d.confidence_threshold),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        branch_dropout_prob: a.branch_dropout.or(file.branch_dropout).unwrap_or(d.branch_dropout_prob),
    })
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(a)?;
    cfg.validate()?;
    println!(
        "mode={} variant={} epochs={} lr={:e} decay={} batch={} t={} seed={} branch_dropout={}",
        cfg.mode.label(),
        cfg.variant,
        cfg.epochs,
        cfg.learning_rate,
        cfg.lr_decay_per_epoch,
        cfg.batch_size,
        cfg.confidence_threshold,
        cfg.seed,
        cfg.branch_dropout_prob
    );
    let data = dataio::read_samples(&a.train)?;
    let val = a.val.as_ref().map(dataio::read_samples).transpose()?;
    let out = train::train_with(&data, val.as_deref(), &cfg, |r| {
        let val = r.val_mpjpe_cm.map(|v| format!(" val {v:.2} cm")).unwrap_or_default();
        println!("epoch {:>4} lr {:.3e} loss {:.5}{val}", r.epoch, r.lr, r.train_loss);
    })?;
    nn::write_checkpoint(&out.model.to_checkpoint(), &a.checkpoint_out)?;
    if let Some(p) = &a.log_out {
        write_text(p, &train::log_csv(&out.log))?;
    }
    println!("checkpoint -> {}", a.checkpoint_out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let ck = nn::read_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    if let Some(v) = a.variant {
        if v != ck.variant {
            bail!("checkpoint holds a {} model, not {}", ck.variant, v);
        }
    }
    let test = dataio::read_samples(&a.test)?;
    let model = Model::from_checkpoint(ck);
    let report = eval::evaluate(&model, &test)?;
    print!("{}", EvalReport::table(std::slice::from_ref(&report)));
    if let Some(p) = &a.report_out {
        write_text(p, &EvalReport::to_csv(std::slice::from_ref(&report)))?;
    }
    if let Some(p) = &a.per_sample_out {
        write_text(p, &report.per_sample_jsonl())?;
    }
    Ok(())
}

fn eval_pseudo_cmd(a: &EvalPseudoArgs) -> anyhow::Result<()> {
    let test = dataio::read_samples(&a.test)?;
    let weightings = match a.weighting {
        Some(w) => vec![w],
        None => vec![Weighting::ThreeD, Weighting::TwoDBaseline],
    };
    let reports = weightings
        .into_iter()
        .map(|weighting| {
            let cfg = PseudoLabelConfig {
                radius_px: a.radius_px,
                max_neighbors: a.max_neighbors,
                min_neighbors: a.min_neighbors,
                weighting,
                confidence_threshold: a.threshold,
            };
            if !cfg.is_valid() {
                bail!("need radius > 0 and max-neighbors >= min-neighbors >= 1");
            }
            Ok(eval::evaluate_pseudo_labels(&test, &cfg)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    print!("{}", EvalReport::table(&reports));
    if let Some(p) = &a.report_out {
        write_text(p, &EvalReport::to_csv(&reports))?;
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<bool> {
    if a.epsilon >= 1e-3 {
        eprintln!(
            "warning: epsilon {} is large; truncation error of the central difference dominates and the check may fail on a correct gradient",
            a.epsilon
        );
    }
    let cfg = GradCheckConfig {
        seed: a.seed,
        batch: a.batch,
        epsilon: a.epsilon,
        arch: arch_named(&a.arch)?,
        variant: a.variant,
        coords: a.coords,
        inject_fault: a.inject_fault,
    };
    let r = train::gradient_check(&cfg)?;
    let params = nn::ModelParams::zeros(&cfg.arch);
    let (name, offset) = params.locate(r.worst_index).unwrap_or(("?", 0));
    let pass = r.max_rel_error < 1e-4 && r.checked > 0;
    println!(
        "{}: max relative error {:.3e} at parameter {} ({name}[{offset}]); {} checked, {} skipped at kinks",
        if pass { "PASS" } else { "FAIL" },
        r.max_rel_error,
        r.worst_index,
        r.checked,
        r.skipped
    );
    Ok(pass)
}

fn dispatch(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Split(a) => split(a).map(|_| true),
        Command::Pseudolabel(a) => pseudolabel_cmd(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::EvalPseudo(a) => eval_pseudo_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("FUSIONPOSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A pool built earlier in this process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses arguments (the first is the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_threads();
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

