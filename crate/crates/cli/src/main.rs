//! `cham`: corpus generation, training, evaluation and model inspection.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cham::corpus::{generate_split, load_corpus, save_corpus, Split};
use cham::{
    load_checkpoint, save_checkpoint, AcousticModel, Census, Error, RunConfig, Scalar, Trainer, Utterance,
};

#[derive(Parser)]
#[command(name = "cham", version, about = "Conformer hybrid acoustic model trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned corpus from the [corpus] section of a config
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the held-out split
        #[arg(long)]
        dev_out: Option<PathBuf>,
        /// Replace existing output files
        #[arg(long)]
        force: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model, writing metrics and a checkpoint per epoch
    Train(TrainArgs),
    /// Frame-level cross-entropy and error rate of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the corpus the checkpoint's config generates
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Print the parameter census of a checkpoint or config
    Inspect {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Required unless resuming
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides run.output_dir
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint; its config is used
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[arg(long)]
    no_specaugment: bool,
    #[arg(long)]
    no_intermediate_loss: bool,
    #[arg(long)]
    no_long_skip: bool,
    #[arg(long)]
    no_focal_loss: bool,
    #[arg(long)]
    share_mlp: bool,
    #[arg(long)]
    no_share_transposed_conv: bool,
}

impl TrainArgs {
    /// Ablation flags expressed as config overrides, appended after `--set`.
    fn all_overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        let flags = [
            (self.no_specaugment, "augment.enabled=false"),
            (self.no_intermediate_loss, "heads.intermediate_loss=false"),
            (self.no_long_skip, "blocks.long_skip=false"),
            (self.no_focal_loss, "heads.focal_loss=false"),
            (self.share_mlp, "heads.share_mlp=true"),
            (self.no_share_transposed_conv, "heads.share_transposed_conv=false"),
        ];
        out.extend(flags.iter().filter(|(on, _)| *on).map(|(_, o)| o.to_string()));
        out
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus {
            config,
            out,
            dev_out,
            force,
            overrides,
        } => gen_corpus(&config, &out, dev_out.as_deref(), force, &overrides),
        Command::Train(args) => match args.precision {
            Precision::F64 => train::<f64>(&args),
            Precision::F32 => train::<f32>(&args),
        },
        Command::Eval {
            checkpoint,
            corpus,
            precision,
        } => match precision {
            Precision::F64 => eval::<f64>(&checkpoint, corpus.as_deref()),
            Precision::F32 => eval::<f32>(&checkpoint, corpus.as_deref()),
        },
        Command::Inspect {
            checkpoint,
            config,
            overrides,
        } => inspect(checkpoint.as_deref(), config.as_deref(), &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    Ok(RunConfig::load(path, overrides)?)
}

/// Like `load_checkpoint`, with the path in I/O error messages.
fn read_checkpoint<S: Scalar>(path: &Path) -> CliResult<Trainer<S>> {
    load_checkpoint::<S>(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))).into(),
        e => e.into(),
    })
}

fn gen_corpus(config: &Path, out: &Path, dev_out: Option<&Path>, force: bool, overrides: &[String]) -> CliResult<()> {
    let cfg = load_config(config, overrides)?;
    for path in std::iter::once(out).chain(dev_out) {
        if path.exists() && !force {
            return Err(Failure::Usage(format!(
                "{} exists, pass --force to overwrite",
                path.display()
            )));
        }
    }
    let train = generate_split(&cfg.corpus, Split::Train)?;
    save_corpus(out, &train)?;
    println!("wrote {} utterances to {}", train.len(), out.display());
    if let Some(dev_out) = dev_out {
        let dev = generate_split(&cfg.corpus, Split::Dev)?;
        save_corpus(dev_out, &dev)?;
        println!("wrote {} utterances to {}", dev.len(), dev_out.display());
    }
    Ok(())
}

/// Training and dev corpora named by the config, or generated from it.
fn corpora(cfg: &RunConfig) -> CliResult<(Vec<Utterance>, Vec<Utterance>)> {
    let train = match &cfg.run.train_corpus {
        Some(p) => load_corpus(p)?,
        None => generate_split(&cfg.corpus, Split::Train)?,
    };
    let dev = match (&cfg.run.dev_corpus, &cfg.run.train_corpus) {
        (Some(p), _) => load_corpus(p)?,
        (None, None) => generate_split(&cfg.corpus, Split::Dev)?,
        // An explicit training file with no dev file: evaluate on training data.
        (None, Some(_)) => Vec::new(),
    };
    if let Some(u) = train.first() {
        if u.feature_dim() != cfg.corpus.feature_dim {
            return Err(Failure::Usage(format!(
                "corpus has feature_dim {} but the config expects {}",
                u.feature_dim(),
                cfg.corpus.feature_dim
            )));
        }
    }
    Ok((train, dev))
}

fn train<S: Scalar>(args: &TrainArgs) -> CliResult<()> {
    let overrides = args.all_overrides();
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let mut t = read_checkpoint::<S>(ckpt)?;
            let cfg = RunConfig::parse_with_overrides(&t.config.to_toml(), &overrides)?;
            if cfg.model_config() != t.config.model_config() {
                return Err(Failure::Usage("cannot change the model shape when resuming".into()));
            }
            t.config = cfg;
            t
        }
        None => {
            let path = args.config.as_deref().expect("clap requires --config without --resume");
            Trainer::<S>::new(&load_config(path, &overrides)?)?
        }
    };
    if let Some(dir) = &args.out_dir {
        trainer.config.run.output_dir = dir.display().to_string();
    }
    let out_dir = PathBuf::from(&trainer.config.run.output_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.toml"), trainer.config.to_toml())?;

    let (train, dev) = corpora(&trainer.config)?;
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(out_dir.join("metrics.jsonl"))?;
    let checkpoint = out_dir.join("last.ckpt");

    let epochs = trainer.config.optim.epochs as u64;
    let mut last = None;
    let mut wall_ms = 0u64;
    let mut outcome = Ok(());
    while trainer.state.epoch < epochs {
        match trainer.run_epoch(&train, &dev) {
            Ok(m) => {
                writeln!(metrics, "{}", m.to_json())?;
                save_checkpoint(&checkpoint, &trainer)?;
                eprintln!(
                    "epoch {:>3}  train_ce {:.4}  dev_ce {:.4}  fer {:.4}  lr {:.3e}  {} ms",
                    m.epoch, m.train_ce, m.dev_ce, m.frame_error_rate, m.lr, m.wall_ms
                );
                wall_ms += m.wall_ms;
                last = Some(m);
            }
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }

    if outcome.is_ok() {
        // Also covers runs with nothing left to train.
        save_checkpoint(&checkpoint, &trainer)?;
    }
    let summary = json!({
        "status": if outcome.is_ok() { "completed" } else { "aborted" },
        "error": outcome.as_ref().err().map(|e| e.to_string()),
        "epochs": trainer.state.epoch,
        "steps": trainer.state.step(),
        "train_ce": last.as_ref().map(|m| m.train_ce),
        "dev_ce": last.as_ref().map(|m| m.dev_ce),
        "frame_error_rate": last.as_ref().map(|m| m.frame_error_rate),
        "best_dev_ce": trainer.state.newbob.best,
        "lr_decays": trainer.state.newbob.decays,
        "wall_ms": wall_ms,
        "parameters": trainer.store.unique_count(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(out_dir.join("summary.json"), format!("{text}\n"))?;
    println!("{text}");
    outcome.map_err(Failure::Core)
}

fn eval<S: Scalar>(checkpoint: &Path, corpus: Option<&Path>) -> CliResult<()> {
    let trainer = read_checkpoint::<S>(checkpoint)?;
    let data = match corpus {
        Some(p) => load_corpus(p)?,
        None => corpora(&trainer.config)?.0,
    };
    let stats = trainer.evaluate(&data)?;
    let out = json!({
        "ce": stats.ce(),
        "frame_error_rate": stats.frame_error_rate(),
        "frames": stats.frames,
    });
    println!("{out}");
    Ok(())
}

/// Census group of a parameter: `frontend.conv1`, `blocks.3`, `heads.final`,
/// `heads.shared.tconv`, ...
fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts.get(1) == Some(&"shared") { 3 } else { 2 };
    parts[..depth.min(parts.len())].join(".")
}

fn print_census(census: &Census) {
    let mut groups: BTreeMap<(u8, usize, String), (usize, usize)> = BTreeMap::new();
    for p in census.params() {
        let module = module_of(&p.name);
        // Keep frontend, blocks and heads in model order, blocks numerically.
        let rank = match module.split('.').next() {
            Some("frontend") => 0,
            Some("blocks") => 1,
            _ => 2,
        };
        let index = module
            .split('.')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let entry = groups.entry((rank, index, module)).or_default();
        entry.0 += p.numel();
        entry.1 += p.numel() * p.uses;
    }
    println!("{:<24} {:>14} {:>14}", "module", "unique", "aliased");
    for ((_, _, module), (unique, aliased)) in &groups {
        println!("{module:<24} {unique:>14} {aliased:>14}");
    }
    let unique = census.unique_count();
    let aliased = census.aliased_count();
    println!("{:<24} {:>14} {:>14}", "total", unique, aliased);
    println!(
        "total {:.2}M unique, {:.2}M without sharing",
        unique as f64 / 1e6,
        aliased as f64 / 1e6
    );
}

fn inspect(checkpoint: Option<&Path>, config: Option<&Path>, overrides: &[String]) -> CliResult<()> {
    match (checkpoint, config) {
        (Some(ckpt), _) => {
            if !overrides.is_empty() {
                return Err(Failure::Usage("--set applies to --config only".into()));
            }
            let trainer = read_checkpoint::<f64>(ckpt)?;
            print_census(&AcousticModel::census(&trainer.config.model_config())?);
            let s = &trainer.state;
            println!("epoch {}  step {}  lr {:.6e}", s.epoch, s.step(), trainer.current_lr());
            if let Some(best) = s.newbob.best {
                println!("best dev ce {best:.6}  lr decays {}", s.newbob.decays);
            }
        }
        (None, Some(path)) => {
            let cfg = load_config(path, overrides)?;
            print_census(&AcousticModel::census(&cfg.model_config())?);
        }
        (None, None) => unreachable!("clap requires one of --checkpoint or --config"),
    }
    Ok(())
}
