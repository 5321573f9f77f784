//! `spg`: generate data, train, evaluate, verify gradients, run ablations
//! and render frames.
//!
//! Exit codes: 0 success, 1 usage/configuration/IO failure, 2 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use spglift::config::{read_json, resolve};
use spglift::dataio::{generate_dataset, Dataset, GeneratorConfig, ValidationTolerance};
use spglift::evaluator::{ablation_suite, evaluate_clips, Protocols};
use spglift::gradcheck::{run_suite, GradcheckOptions};
use spglift::render::{frame_layers, render_svg};
use spglift::trainer::{train, Checkpoint, TrainConfig, TrainIo};
use spglift::{Error, Result};

#[derive(Parser)]
#[command(name = "spg", version, about = "Temporal 2D-to-3D human pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes the latest and best checkpoints and a CSV log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the best one goes next to it as `<stem>.best.spg`.
        #[arg(long)]
        out: PathBuf,
        /// CSV log (default: checkpoint path with a `.csv` extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// 1, 2 or both.
        #[arg(long, default_value = "both")]
        protocol: Protocols,
        /// test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Compare absolute camera-space positions instead of root-relative ones.
        #[arg(long)]
        absolute: bool,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Loss-term and window-size ablations over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw input, prediction and ground truth of one frame as SVG.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Adds the re-projected prediction layer.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolved<T>(cfg: &ConfigArgs) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned + Default,
{
    let file = cfg.config.as_deref().map(read_json).transpose()?;
    resolve(file.as_ref(), &cfg.overrides)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SPG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("SPG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))
}

/// `SPG_INJECT_NAN=epoch,batch` poisons one training loss (test hook).
fn injected_nan() -> Result<Option<(usize, usize)>> {
    let Ok(raw) = std::env::var("SPG_INJECT_NAN") else {
        return Ok(None);
    };
    let parsed = raw
        .split_once(',')
        .and_then(|(e, b)| Some((e.trim().parse().ok()?, b.trim().parse().ok()?)));
    parsed
        .map(Some)
        .ok_or_else(|| Error::Config(format!("SPG_INJECT_NAN must be \"epoch,batch\", got {raw:?}")))
}

fn best_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.best.spg"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, seed, cfg } => {
            let gen: GeneratorConfig = resolved(&cfg)?;
            println!("{}", pretty(&json!({"seed": seed, "generator": gen}))?);
            let data = generate_dataset(&gen, seed)?;
            data.write(&out)?;
            // re-read what was written and check it
            Dataset::read(&out)?.validate(ValidationTolerance::STORED)?;
            println!(
                "wrote {} clips, {} frames to {}",
                data.clips.len(),
                data.num_frames(),
                out.display()
            );
            println!("dataset sha256 {}", data.hash()?);
        }
        Command::Train {
            data,
            out,
            log,
            resume,
            seed,
            cfg,
        } => {
            let mut config: TrainConfig = resolved(&cfg)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            println!("{}", pretty(&config)?);
            let dataset = Dataset::read(&data)?;
            let resume = resume.as_deref().map(Checkpoint::read).transpose()?;
            let io = TrainIo {
                best_checkpoint: Some(best_path(&out)),
                log: Some(log.unwrap_or_else(|| out.with_extension("csv"))),
                checkpoint: Some(out.clone()),
                inject_nan_at: injected_nan()?,
            };
            let outcome = train(&dataset, &config, &io, resume)?;
            let meta = &outcome.last.meta;
            println!(
                "trained {} epochs; val MPJPE {:.2} mm (untrained {:.2} mm, best {:.2} mm)",
                meta.epochs_completed,
                meta.val_mpjpe_mm.last().copied().unwrap_or(f64::NAN),
                meta.initial_val_mpjpe_mm,
                meta.best_val_mpjpe_mm
            );
            println!("checkpoint sha256 {}", outcome.last.hash()?);
        }
        Command::Eval {
            data,
            ckpt,
            protocol,
            split,
            absolute,
            report,
        } => {
            let dataset = Dataset::read(&data)?;
            let ck = Checkpoint::read(&ckpt)?;
            let clips = match split.as_str() {
                "test" => dataset.test_clips(),
                "train" => dataset.train_clips(),
                "all" => dataset.clips.clone(),
                other => return Err(Error::Config(format!("unknown split {other:?} (test, train or all)"))),
            };
            if clips.is_empty() {
                return Err(Error::Config(format!("split {split:?} has no clips")));
            }
            let mut r = evaluate_clips(&ck.model, &clips, &dataset.skeleton, protocol, !absolute)?;
            r.split = split;
            r.config = json!({
                "data": data.display().to_string(),
                "dataset_sha256": dataset.hash()?,
                "checkpoint": ckpt.display().to_string(),
                "train_config": ck.meta.train_config,
                "epochs_completed": ck.meta.epochs_completed,
            });
            print!("{}", r.to_table());
            if let Some(p) = report {
                write_text(&p, &pretty(&r)?)?;
            }
        }
        Command::Gradcheck {
            points,
            seed,
            inject_fault,
        } => {
            let report = run_suite(&GradcheckOptions {
                points,
                seed,
                fault: inject_fault,
            })?;
            print!("{}", report.to_table());
            if !report.passed() {
                return Err(Error::Contract(format!(
                    "gradient check failed for: {}",
                    report.failures().join(", ")
                )));
            }
        }
        Command::Ablate {
            data,
            seeds,
            report,
            cfg,
        } => {
            let config: TrainConfig = resolved(&cfg)?;
            println!("{}", pretty(&config)?);
            let dataset = Dataset::read(&data)?;
            let r = ablation_suite(&dataset, &config, &seeds)?;
            print!("{}", r.to_table());
            if let Some(p) = report {
                write_text(&p, &pretty(&r)?)?;
            }
        }
        Command::Render {
            data,
            ckpt,
            clip,
            frame,
            out,
        } => {
            let dataset = Dataset::read(&data)?;
            let c = dataset.clips.get(clip).ok_or_else(|| {
                Error::Config(format!(
                    "clip {clip} out of range: dataset has clips 0..={}",
                    dataset.clips.len().saturating_sub(1)
                ))
            })?;
            let ck = ckpt.as_deref().map(Checkpoint::read).transpose()?;
            let layers = frame_layers(c, frame, ck.as_ref().map(|k| &k.model))?;
            let desc: Value = json!({
                "data": data.display().to_string(),
                "checkpoint": ckpt.as_ref().map(|p| p.display().to_string()),
                "clip": clip,
                "frame": frame,
                "action": c.action_tag,
                "subject": c.subject_id,
            });
            write_text(&out, &render_svg(&layers, &dataset.skeleton, &c.camera, &desc.to_string()))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
