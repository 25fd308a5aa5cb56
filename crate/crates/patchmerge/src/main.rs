use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use patchmerge::format::{Checkpoint, CorpusFile};
use patchmerge::pipeline;
use patchmerge::report::{overlays, to_json, write_json, SceneReport};
use patchmerge::{Error, Result, RunConfig};
use patchmerge_core::inference::Mode;

#[derive(Parser)]
#[command(name = "patchmerge", version, about = "Compose patch proposals into panoptic segmentations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overrides the corpus seed (gen) or the training seed (train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Closed)]
    mode: ModeArg,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen,
    /// Train a model; writes a checkpoint and `<out>.log.jsonl`.
    Train,
    /// Evaluate a checkpoint on the evaluation split.
    Eval,
    /// Write overlays and a segment report for one evaluation scene.
    Infer {
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Best-proposal statistics of a corpus.
    Diagnose,
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print or write a configuration with every default filled in.
    Init,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Closed,
    Open,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mode = match cli.mode {
        ModeArg::Closed => Mode::Closed,
        ModeArg::Open => Mode::Open,
    };
    match cli.command {
        Command::Config { action: ConfigAction::Init } => emit(&cli.out, &config.to_toml()),
        Command::Gen => {
            if let Some(s) = cli.seed {
                config.corpus_seed = s;
            }
            let out = required(&cli.out, "out")?;
            config.validate()?;
            let file = pipeline::with_threads(cli.threads, || pipeline::generate(&config))??;
            file.save(out)
        }
        Command::Train => {
            if let Some(s) = cli.seed {
                config.train.seed = s;
            }
            let out = required(&cli.out, "out")?;
            let corpus = CorpusFile::load(required(&cli.corpus, "corpus")?)?;
            let mut log_path = out.as_os_str().to_owned();
            log_path.push(".log.jsonl");
            let log_path = PathBuf::from(log_path);
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            let ckpt = pipeline::with_threads(cli.threads, || {
                pipeline::train(&config, &corpus.corpus, |log| {
                    eprintln!("epoch {:>3}  all {:.4}  cls {:.4}  mfl {:.4}  dice {:.4}", log.epoch, log.all, log.cls, log.mfl, log.dice);
                    pipeline::append_log(&log_path, log)
                })
            })??;
            ckpt.save(out)
        }
        Command::Eval => {
            let corpus = CorpusFile::load(required(&cli.corpus, "corpus")?)?;
            let (ckpt, model) = Checkpoint::load(required(&cli.checkpoint, "checkpoint")?)?;
            let report = pipeline::with_threads(cli.threads, || {
                pipeline::evaluate(&model, &ckpt.store, &corpus.corpus, &config.inference, mode)
            })??;
            emit(&cli.out, &to_json(&report))
        }
        Command::Infer { scene } => {
            let corpus = CorpusFile::load(required(&cli.corpus, "corpus")?)?;
            let (ckpt, model) = Checkpoint::load(required(&cli.checkpoint, "checkpoint")?)?;
            let dir = required(&cli.out, "out")?;
            let c = &corpus.corpus;
            let s = c.eval.get(scene).ok_or_else(|| Error::Usage(format!("no evaluation scene {scene}")))?;
            let out = pipeline::infer_scene(&model, &ckpt.store, c, s, &config.inference, mode)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (name, bytes) in overlays(s, &c.classes, &out) {
                let p = dir.join(name);
                std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            write_json(&dir.join("scene.json"), &SceneReport::new(scene, s, &c.classes, &out))
        }
        Command::Diagnose => {
            let corpus = CorpusFile::load(required(&cli.corpus, "corpus")?)?;
            let report = pipeline::with_threads(cli.threads, || pipeline::diagnose(&corpus.corpus, config.loss.tau))??;
            emit(&cli.out, &to_json(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
