use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdbench_cli::bench::{self, BenchConfig};
use kdbench_cli::commands;
use kdbench_cli::compare::{self, CompareConfig};
use kdbench_cli::config::{
    load_json, shift_seeds, DistillConfig, MultistageConfig, PretrainTeacherConfig, ProbeCommandConfig,
};
use kdbench_cli::reward::nas_reward;
use kdbench_cli::{CliError, Result};
use kdbench_core::training::{smoothed_endpoints, RunManifest};
use kdbench_core::transformer::Preset;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "kdbench", version, about = "Distillation workbench for Transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (comparison cells run in parallel).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn required<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        let path = self.config.as_ref().ok_or_else(|| CliError::config("--config is required"))?;
        load_json(path)
    }

    fn optional<T: for<'de> Deserialize<'de> + Default>(&self) -> Result<T> {
        self.config.as_deref().map(load_json).unwrap_or_else(|| Ok(T::default()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a teacher with masked-token prediction.
    PretrainTeacher(Common),
    /// Distill one student with a single objective.
    Distill(Common),
    /// Intermediate-layer transfer followed by output transfer.
    DistillMultistage(Common),
    /// Distill and probe a grid of methods, writing comparison.csv and comparison.txt.
    Compare(Common),
    /// Probe a checkpoint or a random model over several seeds.
    Probe(Common),
    /// Forward latency of model presets, written to latency.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated preset names.
        #[arg(long, value_delimiter = ',')]
        presets: Option<Vec<String>>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Reward of a candidate architecture from its hidden-state loss and latencies.
    NasReward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hs_loss: Option<f64>,
        /// Student latency (ms).
        #[arg(long)]
        lat_s: Option<f64>,
        /// Teacher latency (ms).
        #[arg(long)]
        lat_t: Option<f64>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardInput {
    hs_loss: f64,
    lat_s: f64,
    lat_t: f64,
}

fn init_threads(threads: Option<usize>) -> Result<usize> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        builder = builder.num_threads(n);
    }
    builder.build_global().map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(rayon::current_num_threads())
}

fn report_run(manifest: &RunManifest, out: &Path) {
    for stage in &manifest.stages {
        let losses: Vec<f64> = stage.losses.iter().map(|r| r.loss).collect();
        if let Some((start, end)) = smoothed_endpoints(&losses, 100) {
            println!("{}: smoothed loss {start:.4} -> {end:.4}", stage.name);
        }
    }
    println!("checkpoint {} ({})", out.join(commands::CHECKPOINT_FILE).display(), manifest.final_checkpoint);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainTeacher(c) => {
            init_threads(c.threads)?;
            let mut cfg: PretrainTeacherConfig = c.optional()?;
            if let Some(s) = c.seed {
                cfg.override_seed(s);
            }
            let summary = commands::pretrain_teacher(&cfg, &c.out)?;
            println!("checkpoint {} ({})", summary.checkpoint.display(), summary.checkpoint_id);
            if let Some(e) = summary.eval {
                println!("masked-token accuracy {:.4} (majority baseline {:.4})", e.accuracy, e.majority_baseline);
            }
        }
        Command::Distill(c) => {
            init_threads(c.threads)?;
            let mut cfg: DistillConfig = c.required()?;
            if let Some(s) = c.seed {
                cfg.override_seed(s);
            }
            report_run(&commands::distill(&cfg, &c.out)?, &c.out);
        }
        Command::DistillMultistage(c) => {
            init_threads(c.threads)?;
            let mut cfg: MultistageConfig = c.required()?;
            if let Some(s) = c.seed {
                cfg.override_seed(s);
            }
            report_run(&commands::distill_multistage(&cfg, &c.out)?, &c.out);
        }
        Command::Compare(c) => {
            init_threads(c.threads)?;
            let mut cfg: CompareConfig = c.required()?;
            if let Some(s) = c.seed {
                cfg.override_seed(s);
            }
            let table = compare::run_compare(&cfg, &c.out)?;
            print!("{}", compare::render_text(&table));
        }
        Command::Probe(c) => {
            init_threads(c.threads)?;
            let mut cfg: ProbeCommandConfig = c.required()?;
            if let Some(s) = c.seed {
                shift_seeds(&mut cfg.seeds, s);
            }
            let s = commands::probe(&cfg, &c.out)?;
            println!("accuracy {:.4} ± {:.4} over {} seeds", s.mean, s.stdev, s.seeds.len());
        }
        Command::Bench { common: c, presets, batch, seq_len, runs, warmup } => {
            let threads = init_threads(Some(c.threads.unwrap_or(1)))?;
            let mut cfg: BenchConfig = c.optional()?;
            if let Some(names) = presets {
                cfg.presets = names.iter().map(|n| n.parse::<Preset>()).collect::<kdbench_core::Result<_>>()?;
            }
            cfg.batch = batch.unwrap_or(cfg.batch);
            cfg.seq_len = seq_len.unwrap_or(cfg.seq_len);
            cfg.runs = runs.unwrap_or(cfg.runs);
            cfg.warmup = warmup.unwrap_or(cfg.warmup);
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            let rows = bench::run_bench(&cfg, threads)?;
            commands::create_out_dir(&c.out)?;
            bench::write_csv(&rows, &c.out.join("latency.csv"))?;
            print!("{}", bench::render_text(&rows));
        }
        Command::NasReward { common: c, hs_loss, lat_s, lat_t } => {
            let input = match (hs_loss, lat_s, lat_t, &c.config) {
                (Some(hs_loss), Some(lat_s), Some(lat_t), None) => RewardInput { hs_loss, lat_s, lat_t },
                (None, None, None, Some(path)) => load_json(path)?,
                _ => return Err(CliError::config("give --hs-loss, --lat-s and --lat-t, or --config")),
            };
            println!("{:.6}", nas_reward(input.hs_loss, input.lat_s, input.lat_t)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kdbench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
