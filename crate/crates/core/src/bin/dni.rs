use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dni::harness::{self, ExperimentConfig, Fault, RunOptions, SweepSpec, TrainerState};

#[derive(Parser)]
#[command(name = "dni", version, about = "Train networks with synthetic gradients")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once the step counter reaches this and write a checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Run one experiment per value of a swept parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Override the sweep's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Verify {
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Print a checkpoint's header and what it holds.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    LinearBackward,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> dni::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            out,
            resume,
            max_steps,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let s = harness::run(&cfg, &RunOptions { resume, max_steps })?;
            println!(
                "{} steps, {} samples, {}",
                s.steps,
                s.samples,
                if s.finished { "finished" } else { "stopped early" }
            );
            println!("metrics: {}", s.metrics.display());
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Cmd::Sweep { config, out } => {
            let mut spec = SweepSpec::load(&config)?;
            if let Some(o) = out {
                spec.out_dir = o;
            }
            let m = harness::sweep(&spec)?;
            for r in &m.runs {
                println!("{:>3} {}={} seed {} -> {}", r.index, m.param, r.value, r.seed, r.metrics.display());
            }
        }
        Cmd::Verify { inject_fault } => {
            let fault = inject_fault.map(|FaultArg::LinearBackward| Fault::LinearBackward);
            let report = harness::verify(fault);
            for c in &report.checks {
                println!("{} {:<44} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = report.failed().len();
            println!("{} checks, {} failed", report.checks.len(), failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::InspectCheckpoint { path } => {
            let bytes = std::fs::read(&path)?;
            let info = harness::container_info(&bytes)?;
            let ck = harness::decode(&bytes)?;
            println!("format version {}, payload {} bytes", info.version, info.payload_len);
            println!("experiment {} seed {} budget {}", ck.config.experiment.kind(), ck.config.seed, ck.config.budget);
            let what = match &ck.state {
                TrainerState::Ff(_) => "feed-forward trainer",
                TrainerState::Rnn(_) => "copy-task trainer",
                TrainerState::Chars(_) => "character-stream trainer",
                TrainerState::Multi(_) => "two-network trainer",
                TrainerState::BpLambda(_) => "BP(λ) cross-check",
            };
            println!("{what} at step {} ({} samples)", ck.state.steps(), ck.state.samples());
        }
    }
    Ok(ExitCode::SUCCESS)
}
