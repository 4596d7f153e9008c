use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mambatrack::harness::bench::{bench_scan, BenchConfig};
use mambatrack::harness::gradcheck::{self, Scope};
use mambatrack::harness::model::ABLATION_ROWS;
use mambatrack::harness::train::load_sequences;
use mambatrack::harness::{evaluate_model, synth_sequence, train, Checkpoint, SynthConfig, TrainConfig};
use mambatrack::head::SrMode;
use mambatrack::{Error, Result};

#[derive(Parser)]
#[command(name = "mambatrack", version, about = "Desk-scale RGB-Event tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic sequence.
    Synth {
        /// JSON synth config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every sequence under --data and print SR/PR/NPR.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "auc")]
        sr_mode: String,
        /// Also write the report as key=value lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate one model per ablation row.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "auc")]
        sr_mode: String,
    },
    /// Time the sequential and chunked scans.
    Bench {
        #[arg(long = "L")]
        len: usize,
        #[arg(long = "D")]
        channels: usize,
        #[arg(long = "N")]
        state: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "primitives")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Synth { config, out } => {
            let cfg = match config {
                Some(p) => serde_json::from_str::<SynthConfig>(&fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(e.to_string()))?,
                None => SynthConfig::default(),
            };
            let seq = synth_sequence(&cfg)?;
            seq.write(&out)?;
            println!(
                "wrote {} frames and {} events to {}",
                seq.len(),
                seq.events.len(),
                out.display()
            );
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_train_config(&config)?;
            let seqs = load_sequences(&data, &cfg.model())?;
            let t = train(&cfg, &seqs)?;
            Checkpoint::from_trained(&t).save(&out)?;
            let (first, last) = (t.losses.first(), t.losses.last());
            if let (Some(a), Some(b)) = (first, last) {
                println!("loss {a:.5} -> {b:.5} over {} steps", t.losses.len());
            }
            println!("checkpoint {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            sr_mode,
            report,
        } => {
            let mode: SrMode = sr_mode.parse()?;
            let t = Checkpoint::load(&ckpt)?.restore()?;
            let seqs = load_sequences(&data, &t.model.cfg)?;
            let r = evaluate_model(&t.model, &t.store, &seqs, mode)?;
            println!("{}", r.metrics);
            println!("mIoU {:.4} over {} frames", r.mean_iou, r.frames);
            if let Some(p) = report {
                fs::write(p, r.to_key_value())?;
            }
        }
        Cmd::Ablate {
            config,
            data,
            sr_mode,
        } => {
            let mode: SrMode = sr_mode.parse()?;
            let base = load_train_config(&config)?;
            for ab in ABLATION_ROWS {
                let cfg = TrainConfig {
                    rgb_only: ab.rgb_only,
                    event_only: ab.event_only,
                    disable_dssm: ab.disable_dssm,
                    disable_gpf: ab.disable_gpf,
                    ..base.clone()
                };
                let seqs = load_sequences(&data, &cfg.model())?;
                let t = train(&cfg, &seqs)?;
                println!("{}", evaluate_model(&t.model, &t.store, &seqs, mode)?);
            }
        }
        Cmd::Bench {
            len,
            channels,
            state,
            reps,
            chunk,
        } => {
            let cfg = BenchConfig {
                chunk,
                ..BenchConfig::new(len, channels, state, reps)
            };
            println!("{}", bench_scan(cfg)?);
        }
        Cmd::Gradcheck { scope, seed } => {
            let scope: Scope = scope.parse()?;
            let r = gradcheck::run(scope, seed, None)?;
            println!("{r}");
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        // a check ran and failed
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
