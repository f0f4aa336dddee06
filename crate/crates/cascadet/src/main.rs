use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use cascadet::commands::{self, Checkpoint, Variant};
use cascadet::config::{BackendKind, RunConfig};
use cascadet::stub::{StubScript, StubServer};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cascadet", version, about = "Quality-aware detector/verifier cascade")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset manifest (.json) or annotation file (.jsonl).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ablation variant; repeat to list several, baseline first.
    #[arg(long = "variant", global = true)]
    variants: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cascade over a dataset and write reports.
    Run,
    /// Score model responses against the dataset's annotations.
    Score {
        /// JSONL of {"frame_id", "raw_response"} records.
        #[arg(long)]
        responses: PathBuf,
    },
    /// Train the toy verifier policy.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare pipeline variants on the same dataset.
    Ablate {
        /// Policy for the adaptive-grpo variant; trained on the fly if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve a scripted verifier over HTTP until killed.
    ServeStub {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Model text returned for every verify request.
        #[arg(long)]
        response: Option<String>,
        /// Answer the first N requests with HTTP 500.
        #[arg(long, default_value_t = 0)]
        fail_first: usize,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
        /// Adverse flag returned by /v1/assess.
        #[arg(long)]
        adverse: Option<bool>,
    },
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(b) = c.backend {
        cfg.backend.kind = b;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit status 2 flags partial failure; errors (exit 1) are returned.
fn execute(cli: Cli) -> anyhow::Result<u8> {
    if let Command::ServeStub {
        addr,
        response,
        fail_first,
        delay_ms,
        adverse,
    } = &cli.command
    {
        let mut script = StubScript {
            fail_first: *fail_first,
            delay: Duration::from_millis(*delay_ms),
            adverse: *adverse,
            ..StubScript::default()
        };
        if let Some(r) = response {
            script.raw_response = r.clone();
        }
        let server = StubServer::start(addr, script).with_context(|| format!("binding {addr}"))?;
        println!("serving on {}", server.endpoint());
        server.wait();
        return Ok(0);
    }

    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Run => {
            let s = commands::cmd_run(&cfg)?;
            print!("{}", std::fs::read_to_string(&s.artifacts.report_txt)?);
            Ok(if s.failed() { 2 } else { 0 })
        }
        Command::Score { responses } => {
            let s = commands::cmd_score(&cfg, &responses)?;
            println!(
                "{} records, {} unscored; mean r_total {:.4}",
                s.records, s.unscored, s.overall.r_total
            );
            Ok(0)
        }
        Command::Train { resume } => {
            let s = commands::cmd_train(&cfg, resume.as_deref())?;
            println!(
                "steps {}..{}: mean reward {:.4} -> {:.4}; held-out recall {:.3}",
                s.first_step,
                s.first_step + s.steps_run,
                s.start_reward,
                s.final_reward,
                s.heldout_recall
            );
            Ok(0)
        }
        Command::Ablate { checkpoint } => {
            let names = if cli.common.variants.is_empty() {
                Variant::ALL.iter().map(|v| v.name().to_string()).collect()
            } else {
                cli.common.variants.clone()
            };
            let variants = names.iter().map(|n| n.parse()).collect::<Result<Vec<Variant>, _>>()?;
            let policy = checkpoint
                .as_deref()
                .map(Checkpoint::load)
                .transpose()?
                .map(|c| c.state.policy);
            let s = commands::cmd_ablate(&cfg, &variants, policy)?;
            print!("{}", commands::ablation_text(&s));
            Ok(if s.failed() { 2 } else { 0 })
        }
        Command::ServeStub { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
