//! The `kgs` command line: render, topology, gradcheck, train, eval and synth.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::error::{KgsError, Result};
use crate::export::{write_heatmaps, write_prior_csv, RunManifest};
use crate::network::gradcheck::{gradient_check, GradCheckOptions};
use crate::network::{build_dataset, build_sample, evaluate, train_epoch, Ablation, EpochMetrics, Model, RunConfig};
use crate::skeleton::{load_sequence, prepare, NormalizationParams, SkeletonSequence};
use crate::splat::{build_primitives, render_sequence_parallel, Aggregation, RenderConfig};
use crate::synth::{generate, write_dataset, Manifest, SyntheticTaskSpec, TaskKind};
use crate::topology::build_prior_adjacency;

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "kgs", version, about = "Kinematic Gaussian splatting and gated ST-GCN training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    Kgsm,
    Pt,
    Vcg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render per-view heatmaps of a skeleton sequence.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, value_enum, default_value_t = AggArg::Max)]
        agg: AggArg,
        #[arg(long = "log-scale", allow_hyphen_values = true)]
        log_scale: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        isotropic: bool,
    },
    /// Write the prior adjacency of a sequence as CSV.
    Topology {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter gradient of the network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train (or resume training) on a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
    },
    /// Print the Top-1 accuracy of a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
}

/// Runs a parsed command, writing human-readable results to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Render { input, out, size, agg, log_scale, alpha, isotropic } => {
            let mut manifest = RunManifest::new("render", &out);
            manifest.inputs.push(input.clone());
            manifest.write()?;
            let seq = load_sequence(&input)?;
            let mut config = RenderConfig::for_channels(seq.channels());
            config.height = size;
            config.width = size;
            config.aggregation = match agg {
                AggArg::Max => Aggregation::Max,
                AggArg::Sum => Aggregation::ClampedSum,
            };
            if let Some(r) = log_scale {
                config.log_scale = r;
            }
            if let Some(a) = alpha {
                config.alpha = a;
            }
            config.isotropic = isotropic;
            config.validate()?;
            let kin = prepare(&seq, &NormalizationParams::default())?;
            let (mut stack, _) = render_sequence_parallel(&kin, &config)?;
            stack.source = Some(input.display().to_string());
            let sidecar = write_heatmaps(&out, &stack)?;
            emit(stdout, format_args!("wrote {} heatmaps to {}", stack.views * stack.frames, sidecar.display()))
        }
        Command::Topology { input, out } => {
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut manifest = RunManifest::new("topology", dir);
            manifest.inputs.push(input.clone());
            manifest.write()?;
            let seq = load_sequence(&input)?;
            let kin = prepare(&seq, &NormalizationParams::default())?;
            let grids = build_primitives(&kin, &RenderConfig::for_channels(seq.channels()))?;
            let prior = build_prior_adjacency(&grids)?;
            write_prior_csv(&out, &prior)?;
            emit(stdout, format_args!("wrote {}×{} prior to {}", prior.joints, prior.joints, out.display()))
        }
        Command::Gradcheck { config, seed } => {
            let run = RunConfig::load(&config)?;
            let seed = seed.unwrap_or(run.train.seed);
            let report = gradcheck(&run, seed)?;
            for g in &report.groups {
                emit(stdout, format_args!("{:<28} {:>4} {:.3e} (entry-wise {:.3e})", g.name, g.checked, g.max_rel_error, g.max_entry_rel_error))?;
            }
            emit(stdout, format_args!("max relative error {:.3e}", report.worst()))?;
            if report.passed() {
                Ok(())
            } else {
                Err(KgsError::Contract(format!(
                    "gradient check failed: max relative error {:.3e} ≥ {:.0e}",
                    report.worst(),
                    report.tolerance
                )))
            }
        }
        Command::Train { config, data, out, ablate } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(a) = ablate {
                run.model.ablation = Ablation::parse(match a {
                    AblateArg::Kgsm => "kgsm",
                    AblateArg::Pt => "pt",
                    AblateArg::Vcg => "vcg",
                })?;
            }
            let mut manifest = RunManifest::new("train", &out);
            manifest.config = Some(config);
            manifest.inputs.push(data.clone());
            manifest.seed = Some(run.train.seed);
            manifest.write()?;
            let metrics = train(&run, &data, &out)?;
            match metrics.last() {
                Some(m) => emit(stdout, format_args!("epoch {} accuracy {}", m.epoch, m.accuracy)),
                None => emit(stdout, format_args!("nothing to do: {} epochs already completed", run.train.epochs)),
            }
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.restore()?;
            let seqs = Manifest::load(&data)?.load_sequences(&data)?;
            let samples = build_dataset(&seqs, &model)?;
            let acc = evaluate(&model, &samples, ckpt.run.train.batch_size)?;
            emit(stdout, format_args!("top1 {acc}"))
        }
        Command::Synth { task, out, spec } => {
            let task = TaskKind::parse(&task)?;
            let text = std::fs::read_to_string(&spec).map_err(|e| KgsError::io(&spec, e))?;
            let mut parsed: SyntheticTaskSpec = toml::from_str(&text).map_err(|e| KgsError::from_toml(&text, e))?;
            parsed.task = task;
            parsed.validate()?;
            let mut manifest = RunManifest::new("synth", &out);
            manifest.config = Some(spec);
            manifest.seed = Some(parsed.seed);
            manifest.write()?;
            let seqs = generate(&parsed)?;
            let path = write_dataset(&out, &parsed, &seqs)?;
            emit(stdout, format_args!("wrote {} samples, manifest {}", seqs.len(), path.display()))
        }
    }
}

fn emit(stdout: &mut dyn Write, args: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(stdout, "{args}").map_err(|e| KgsError::io("<stdout>", e))
}

/// Two labeled samples shaped like the configured model, for gradient checking.
fn gradcheck_sequences(run: &RunConfig, seed: u64) -> Result<Vec<(String, SkeletonSequence)>> {
    let spec = SyntheticTaskSpec {
        task: TaskKind::SpeedDiscrimination,
        joints: run.model.num_joints,
        frames: 16,
        samples_per_class: 1,
        noise_std: 0.01,
        seed,
        ..SyntheticTaskSpec::default()
    };
    let channels = run.model.in_channels;
    generate(&spec)?
        .into_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut seq = if channels == 3 {
                seq
            } else {
                let data = seq.positions().chunks(3).flat_map(|p| p[..channels].to_vec()).collect();
                SkeletonSequence::new(seq.frames(), seq.joints(), channels, data, seq.label)?
            };
            let label = seq.label.unwrap_or(0) % run.model.num_classes;
            seq.label = Some(label);
            Ok((format!("gradcheck_{i}"), seq))
        })
        .collect()
}

/// Builds the configured model with `seed` as its initialization seed and checks every gradient.
pub fn gradcheck(run: &RunConfig, seed: u64) -> Result<crate::network::gradcheck::GradCheckReport> {
    let mut config = run.model.clone();
    config.init_seed = seed;
    let model = Model::new(config)?;
    let samples = build_dataset(&gradcheck_sequences(run, seed)?, &model)?;
    let options = GradCheckOptions { seed, ..GradCheckOptions::default() };
    gradient_check(&model, &samples, &run.loss, &options)
}

/// Trains from scratch, or resumes from `out/checkpoint.json`, appending one
/// metrics row per epoch and checkpointing after every epoch.
pub fn train(run: &RunConfig, data: &Path, out: &Path) -> Result<Vec<EpochMetrics>> {
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let (mut model, start) = if ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        info!("resuming from {} at epoch {}", ckpt_path.display(), ckpt.epoch);
        (ckpt.restore()?, ckpt.epoch)
    } else {
        (Model::new(run.model.clone())?, 0)
    };
    let seqs = Manifest::load(data)?.load_sequences(data)?;
    let samples = seqs
        .iter()
        .map(|(id, seq)| build_sample(seq, id.clone(), &model))
        .collect::<Result<Vec<_>>>()?;
    let mut file = if start > 0 && metrics_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| KgsError::io(&metrics_path, e))?
    } else {
        let mut f = std::fs::File::create(&metrics_path).map_err(|e| KgsError::io(&metrics_path, e))?;
        writeln!(f, "{}", EpochMetrics::CSV_HEADER).map_err(|e| KgsError::io(&metrics_path, e))?;
        f
    };
    let mut history = Vec::new();
    for epoch in start..run.train.epochs {
        let metrics = train_epoch(&samples, &mut model, epoch, run)?;
        info!("epoch {epoch}: ce {:.4} acc {:.3}", metrics.loss_ce, metrics.accuracy);
        writeln!(file, "{}", metrics.csv_row()).map_err(|e| KgsError::io(&metrics_path, e))?;
        Checkpoint::capture(&model, run, epoch + 1).save(&ckpt_path)?;
        history.push(metrics);
    }
    Ok(history)
}
