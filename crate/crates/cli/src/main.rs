use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcm_cli::{data, evaluate, export, gradsuite, init_threads, train, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "gcm", version, about = "Context-block speaker embedder: data, training, evaluation, diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic corpus, manifests and a balanced trial list.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on `<data_dir>/train_manifest.txt`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trial list with a checkpoint and report EER / minDCF.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every block kind, both losses and a tiny network.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Add a fixture with a deliberately wrong derivative rule.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Write the lowest K DCT basis grids as CSV files.
    ExportDct {
        #[arg(long, default_value_t = 8)]
        freq: usize,
        #[arg(long, default_value_t = 25)]
        time: usize,
        #[arg(long, default_value_t = 16)]
        components: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine score between two WAV files.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        enroll: PathBuf,
        test: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::SynthData { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.corpus.seed = s;
            }
            let out = out.unwrap_or(cfg.paths.data_dir.clone());
            let p = data::synth_corpus(&out, &cfg.data)?;
            println!("manifest {}", p.manifest.display());
            println!("train_manifest {}", p.train_manifest.display());
            println!("eval_manifest {}", p.eval_manifest.display());
            println!("trials {}", p.trials.display());
        }
        Cmd::Train { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            init_threads(cfg.train.threads);
            let out = out.unwrap_or(cfg.paths.out_dir.clone());
            let manifest = cfg.paths.data_dir.join(data::TRAIN_MANIFEST);
            let s = train::train(&cfg, &manifest, &out)?;
            println!(
                "checkpoint {} first_loss={:.6} last_loss={:.6} seconds={:.1}",
                s.checkpoint.display(),
                s.first_step.total,
                s.last_step.total,
                s.seconds
            );
        }
        Cmd::Eval { checkpoint, trials, out } => {
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            let r = evaluate::run_eval(&checkpoint, &trials, &out)?;
            println!("{}", r.report);
            if !r.missing.is_empty() {
                for m in &r.missing {
                    eprintln!("missing: {m}");
                }
                return Err(CliError::Data(format!("{} utterance(s) missing; their trials were skipped", r.missing.len())));
            }
        }
        Cmd::GradCheck { config, inject_fault } => {
            let cfg = load_config(config.as_deref())?;
            init_threads(cfg.train.threads);
            let rows = gradsuite::run_suite(inject_fault)?;
            print!("{}", gradsuite::format_table(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::Numerical(format!("{failed} gradient check(s) failed")));
            }
        }
        Cmd::ExportDct { freq, time, components, out } => {
            for p in export::export_dct(freq, time, components, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Score { checkpoint, enroll, test } => {
            println!("{:.6}", evaluate::score_pair(&checkpoint, &enroll, &test)?);
        }
    }
    Ok(())
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
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
