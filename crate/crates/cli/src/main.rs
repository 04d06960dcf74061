use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mitml::evalkit::{render_table, Direction, EvalReport};
use mitml::experiment::{evaluate_model, run_sweep, sweep_csv, EvalOptions, Sweep};
use mitml::gradsuite::{self, CheckOutcome, Module};
use mitml::synthdata::{generate_corpus, Corpus, SynthConfig};
use mitml::training::{Checkpoint, Method, TrainConfig, Trainer};

const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "mitml", version, about = "Cross-modal video re-identification experiments")]
struct Cli {
    /// Worker threads for feature extraction; 1 keeps every output reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-modality tracklet corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        ids: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tracklets per identity and modality.
        #[arg(long, default_value_t = 4)]
        tracklets: usize,
        /// Fraction of identities that come in look-alike pairs.
        #[arg(long, default_value_t = 0.5)]
        confusable: f64,
    },
    /// Train a model, then evaluate it on the test split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Config file of `key = value` lines; desk-scale settings when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_method)]
        mode: Option<Method>,
        /// Randomly permute the frames of every training clip.
        #[arg(long)]
        shuffle_frames: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run into `--out`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
        direction: DirectionArg,
        /// Frames per tracklet; defaults to the trained sequence length.
        #[arg(long)]
        frames: Option<usize>,
        /// Write the metrics CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Train and evaluate one model per setting of a sweep.
    Ablate {
        #[arg(long, value_parser = parse_sweep)]
        sweep: Sweep,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Both,
    I2v,
    V2i,
}

impl DirectionArg {
    fn directions(self) -> Vec<Direction> {
        match self {
            Self::Both => Direction::BOTH.to_vec(),
            Self::I2v => vec![Direction::IrToVis],
            Self::V2i => vec![Direction::VisToIr],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Ops,
    Conv,
    Lstm,
    Tmr,
    Losses,
}

impl ModuleArg {
    fn modules(self) -> Vec<Module> {
        match self {
            Self::All => Module::ALL.to_vec(),
            Self::Ops => vec![Module::Ops],
            Self::Conv => vec![Module::Conv],
            Self::Lstm => vec![Module::Lstm],
            Self::Tmr => vec![Module::Tmr],
            Self::Losses => vec![Module::Losses],
        }
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: mitml::Error| e.to_string())
}

fn parse_sweep(s: &str) -> std::result::Result<Sweep, String> {
    s.parse().map_err(|e: mitml::Error| e.to_string())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::desk(0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<()> {
    mitml::evalkit::write_reports(out, reports).with_context(|| format!("writing {}", out.display()))
}

fn gen_data(out: &Path, ids: usize, seed: u64, tracklets: usize, confusable: f64) -> Result<()> {
    let cfg = SynthConfig {
        num_ids: ids,
        tracklets_per_id_per_modality: tracklets,
        confusable_fraction: confusable,
        seed,
        ..SynthConfig::default()
    };
    let manifest = generate_corpus(&cfg, out)?;
    println!("wrote {} tracklets to {}", manifest.records.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    mode: Option<Method>,
    shuffle_frames: bool,
    seed: Option<u64>,
    epochs: Option<usize>,
    resume: Option<&Path>,
    threads: usize,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(m) = mode {
        cfg.method = m;
    }
    if shuffle_frames {
        cfg.shuffle_frames = true;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let corpus = load_corpus(data)?;
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::<f64>::resume(cfg.clone(), &corpus, ckpt)?,
        None => Trainer::<f64>::new(cfg.clone(), &corpus)?,
    };
    info!("training {} for {} epochs", cfg.method.name(), cfg.epochs);
    trainer.fit(out)?;
    let opts = EvalOptions {
        threads,
        ..EvalOptions::new(cfg.frames_per_tracklet)
    };
    let reports = evaluate_model(trainer.model(), trainer.aggregation(), &corpus, &Direction::BOTH, &opts)?;
    write_reports(&out.join(METRICS_FILE), &reports)?;
    print!("{}", render_table(&reports));
    Ok(())
}

fn eval(data: &Path, ckpt: &Path, direction: DirectionArg, frames: Option<usize>, out: Option<&Path>, threads: usize) -> Result<()> {
    let ck = Checkpoint::<f64>::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let corpus = load_corpus(data)?;
    let opts = EvalOptions {
        threads,
        ..EvalOptions::new(frames.unwrap_or(ck.model.config().backbone.seq_len))
    };
    let reports = evaluate_model(&ck.model, ck.aggregation, &corpus, &direction.directions(), &opts)?;
    print!("{}", render_table(&reports));
    match out {
        Some(path) => write_reports(path, &reports)?,
        None => {
            println!();
            println!("{}", EvalReport::CSV_HEADER);
            for r in &reports {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn gradcheck(module: ModuleArg, seeds: u64) -> Result<bool> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut all: Vec<CheckOutcome> = Vec::new();
    for m in module.modules() {
        all.extend(gradsuite::run_module(m, seeds)?);
    }
    println!("{:<8} {:<36} {:>12} {:>6}  result", "module", "check", "max rel err", "seed");
    for c in &all {
        println!(
            "{:<8} {:<36} {:>12.3e} {:>6}  {}",
            c.module.name(),
            c.name,
            c.max_rel_error,
            c.worst_seed,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = all.iter().filter(|c| !c.passed()).count();
    println!("{} checks on {seeds} seeds, {failed} failed (tolerance {:e})", all.len(), gradsuite::TOLERANCE);
    Ok(failed == 0)
}

fn ablate(sweep: Sweep, data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>, epochs: Option<usize>, threads: usize) -> Result<()> {
    let mut base = load_config(config, seed)?;
    if let Some(e) = epochs {
        base.epochs = e;
    }
    base.validate()?;
    let corpus = load_corpus(data)?;
    fs::create_dir_all(out)?;
    let entries = run_sweep::<f64>(sweep, &base, &corpus, threads)?;
    let csv_path = out.join(format!("{}.csv", sweep.name()));
    fs::write(&csv_path, sweep_csv(&entries)).with_context(|| format!("writing {}", csv_path.display()))?;
    let mut text = String::new();
    for e in &entries {
        text.push_str(&format!("[{} = {}]\n", sweep.name(), e.setting));
        text.push_str(&render_table(&e.reports));
        text.push('\n');
    }
    fs::write(out.join(format!("{}.txt", sweep.name())), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let threads = cli.threads;
    match cli.command {
        Command::GenData {
            out,
            ids,
            seed,
            tracklets,
            confusable,
        } => gen_data(&out, ids, seed, tracklets, confusable)?,
        Command::Train {
            data,
            config,
            out,
            mode,
            shuffle_frames,
            seed,
            epochs,
            resume,
        } => train(
            &data,
            config.as_deref(),
            &out,
            mode,
            shuffle_frames,
            seed,
            epochs,
            resume.as_deref(),
            threads,
        )?,
        Command::Eval {
            data,
            ckpt,
            direction,
            frames,
            out,
        } => eval(&data, &ckpt, direction, frames, out.as_deref(), threads)?,
        Command::Gradcheck { module, seeds } => return gradcheck(module, seeds),
        Command::Ablate {
            sweep,
            data,
            config,
            out,
            seed,
            epochs,
        } => ablate(sweep, &data, config.as_deref(), &out, seed, epochs, threads)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MITML_LOG", "info")).init();
    // clap prints usage and exits with status 2 on bad arguments
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
