use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use uct::dataset::{
    corpus_specs, generate_all, generate_synthetic, load_sequence, occlusion_scenario, save_annotated, suite_specs,
    zoom_scenario, Sequence, GROUNDTRUTH_FILE,
};
use uct::eval::{emit_report, format_table, run_ope, AblationVariant, OpeOptions, OpeResult, Pooling, UctRunner};
use uct::features::ConvStack;
use uct::model::{initial_model, pretrain, Model};
use uct::tracker::{format_records, FrameRecord, Tracker};
use uct::Config;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Gradient tolerance for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "uct", version, about = "Convolutional correlation-filter tracker")]
struct Cli {
    /// TOML config file; keys layer over the preset it names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tracker.beta_pnr=0.8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed; tracker, offline and suite seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `eval` and `ablate`. 1 is the reference path.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scenario {
    /// The evaluation suite.
    Suite,
    /// The offline training corpus.
    Corpus,
    /// 100 frames of steady motion with an occluder on frames 40 to 50.
    Occlusion,
    /// A static object growing 2% per frame.
    Zoom,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic sequences in the on-disk sequence layout.
    Synth {
        #[arg(long, value_enum, default_value = "suite")]
        scenario: Scenario,
        /// Truncate each sequence to this many frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the feature stack and filters offline and write a model snapshot.
    Pretrain,
    /// Track one sequence and write per-frame records.
    Track {
        /// Sequence directory holding `img/` and the ground-truth file.
        #[arg(long)]
        sequence: PathBuf,
        /// Model snapshot; pretrained in-process when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write every frame with the predicted and true boxes drawn.
        #[arg(long)]
        annotate: bool,
    },
    /// One-pass evaluation of one variant.
    Eval {
        /// A sequence directory or a directory of them; the synthetic suite when omitted.
        #[arg(long)]
        sequences: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Average per sequence instead of pooling frames.
        #[arg(long)]
        per_sequence: bool,
    },
    /// Evaluate every ablation variant and write a comparison table.
    Ablate {
        #[arg(long)]
        sequences: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        per_sequence: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Random instances per suite.
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<uct::Error>() {
        Some(err) if err.is_numerical() => EXIT_NUMERICAL,
        Some(uct::Error::Config(_)) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if e.downcast_ref::<Usage>().is_some() => EXIT_USAGE,
        None => EXIT_DATA,
    }
}

/// Marks an error as a usage mistake.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(cli: &Cli) -> Result<Config> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = Config::from_toml_with_overrides(&text, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        bail!(Usage("--workers must be at least 1".into()));
    }

    match &cli.command {
        Command::Synth { scenario, frames } => synth(&cfg, *scenario, *frames, out)?,
        Command::Pretrain => {
            let model = pretrain_model(&cfg, Some(out))?;
            model.save(&out.join("model.bin"))?;
        }
        Command::Track {
            sequence,
            model,
            annotate,
        } => track(&cfg, sequence, model.as_deref(), *annotate, out)?,
        Command::Eval {
            sequences,
            model,
            variant,
            per_sequence,
        } => {
            let variant = AblationVariant::from_name(variant).map_err(|e| Usage(e.to_string()))?;
            let results = evaluate(&cfg, sequences.as_deref(), model.as_deref(), &[variant], workers, *per_sequence)?;
            finish_report(&results, out)?;
        }
        Command::Ablate {
            sequences,
            model,
            per_sequence,
        } => {
            let results = evaluate(
                &cfg,
                sequences.as_deref(),
                model.as_deref(),
                &AblationVariant::ALL,
                workers,
                *per_sequence,
            )?;
            finish_report(&results, out)?;
        }
        Command::Gradcheck { instances } => {
            let reports = uct::gradcheck::run_all(*instances, cfg.seed)?;
            let mut ok = true;
            for r in &reports {
                println!("{:<8} instances {:>4}  max relative error {:.3e}", r.name, r.instances, r.max_relative_error);
                ok &= r.max_relative_error < GRADCHECK_TOLERANCE;
            }
            fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
            if !ok {
                eprintln!("gradient check failed: tolerance {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(cfg: &Config, scenario: Scenario, frames: Option<usize>, out: &Path) -> Result<()> {
    let mut specs = match scenario {
        Scenario::Suite => suite_specs(&cfg.suite),
        Scenario::Corpus => corpus_specs(&cfg.offline),
        Scenario::Occlusion => vec![occlusion_scenario(cfg.suite.seed)],
        Scenario::Zoom => vec![zoom_scenario(cfg.suite.seed, 1.02, 20)],
    };
    if let Some(n) = frames {
        if n == 0 {
            bail!(Usage("--frames must be positive".into()));
        }
        specs.iter_mut().for_each(|s| s.frames = s.frames.min(n));
    }
    for spec in &specs {
        let seq = generate_synthetic(spec)?;
        seq.export(&out.join(&seq.name))?;
        info!("wrote {} ({} frames)", seq.name, seq.len());
    }
    Ok(())
}

/// Offline training on the configured corpus. Epoch losses go to
/// `pretrain.json` when `out` is given.
fn pretrain_model(cfg: &Config, out: Option<&Path>) -> Result<Model> {
    let corpus = generate_all(&corpus_specs(&cfg.offline))?;
    info!(
        "offline training on {} sequences for {} epochs",
        corpus.len(),
        cfg.offline.epochs
    );
    let (model, report) = pretrain(&corpus, cfg)?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        info!("mean epoch loss {first:.4} -> {last:.4}");
    }
    if let Some(dir) = out {
        let json = serde_json::json!({
            "samples_per_epoch": report.samples_per_epoch,
            "epoch_losses": report.epoch_losses,
        });
        fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(model)
}

fn model_or_pretrain(cfg: &Config, path: Option<&Path>) -> Result<Model> {
    match path {
        Some(p) => Ok(Model::load(p)?),
        None => {
            info!("no --model given; training one");
            pretrain_model(cfg, None)
        }
    }
}

fn track(cfg: &Config, dir: &Path, model: Option<&Path>, annotate: bool, out: &Path) -> Result<()> {
    let seq = load_sequence(dir)?;
    let n = seq.annotated_len();
    if n == 0 {
        bail!(uct::Error::InvalidInput(format!("{} has no annotated frames", dir.display())));
    }
    let stack = model_or_pretrain(cfg, model)?.stack;
    let frames_dir = out.join("frames");
    if annotate {
        fs::create_dir_all(&frames_dir)?;
    }
    let first = seq.frame(0)?;
    let mut tracker = Tracker::init(&first, seq.annotations[0], &stack, &cfg.tracker)?;
    let mut records = vec![FrameRecord {
        bbox: seq.annotations[0],
        ..FrameRecord::from_state(0, tracker.state())
    }];
    for t in 1..seq.len() {
        let state = tracker.step(&seq.frame(t)?)?;
        records.push(FrameRecord::from_state(t, &state));
    }
    if annotate {
        for (t, r) in records.iter().enumerate() {
            let mut boxes = vec![(r.bbox, [255, 40, 40])];
            if let Some(gt) = seq.annotations.get(t) {
                boxes.push((*gt, [40, 220, 40]));
            }
            save_annotated(&seq.frame(t)?, &boxes, &frames_dir.join(format!("{:04}.png", t + 1)))?;
        }
    }
    fs::write(out.join("records.txt"), format_records(&records))?;
    info!("tracked {} frames of {}", records.len(), seq.name);
    Ok(())
}

fn load_sequences(cfg: &Config, dir: Option<&Path>) -> Result<Vec<Sequence>> {
    let Some(dir) = dir else {
        return Ok(generate_all(&suite_specs(&cfg.suite))?);
    };
    if dir.join(GROUNDTRUTH_FILE).is_file() {
        return Ok(vec![load_sequence(dir)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(uct::Error::InvalidInput(format!("no sequences under {}", dir.display())));
    }
    Ok(dirs.iter().map(|d| load_sequence(d)).collect::<uct::Result<_>>()?)
}

fn evaluate(
    cfg: &Config,
    sequences: Option<&Path>,
    model: Option<&Path>,
    variants: &[AblationVariant],
    workers: usize,
    per_sequence: bool,
) -> Result<Vec<OpeResult>> {
    let seqs = load_sequences(cfg, sequences)?;
    let needs_trained = variants.iter().any(|v| v.pretrained());
    let trained = if needs_trained {
        model_or_pretrain(cfg, model)?.stack
    } else {
        ConvStack::empty()
    };
    let untrained = initial_model(cfg)?.stack;
    let opts = OpeOptions {
        workers,
        pooling: if per_sequence { Pooling::Sequences } else { Pooling::Frames },
    };
    let mut results = Vec::with_capacity(variants.len());
    for &v in variants {
        let runner = UctRunner::for_variant(v, &cfg.tracker, &trained, &untrained);
        let r = run_ope(v.name(), &seqs, &runner, opts)?;
        if r.aggregate.is_none() {
            bail!(uct::Error::InvalidInput(format!("variant {}: every sequence failed", v.name())));
        }
        info!("{}: {} sequences, {} failed", v.name(), r.sequences.len(), r.failures.len());
        results.push(r);
    }
    Ok(results)
}

fn finish_report(results: &[OpeResult], out: &Path) -> Result<()> {
    emit_report(results, out)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    fs::write(out.join("run.log"), format!("finished_unix_seconds {stamp}\n"))?;
    print!("{}", format_table(results, true));
    Ok(())
}
