//! Forward-pass latency of encoder presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use kdbench_core::data::NUM_RESERVED;
use kdbench_core::transformer::{EncoderInput, Preset, TransformerModel};
use kdbench_core::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::load_checkpoint;
use crate::error::{CliError, Result};
use crate::stats::{mean, stdev};

fn reference() -> Vec<Preset> {
    Preset::REFERENCE.to_vec()
}

fn one() -> usize {
    1
}

fn default_seq_len() -> usize {
    64
}

fn default_warmup() -> usize {
    2
}

fn default_runs() -> usize {
    5
}

pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "reference")]
    pub presets: Vec<Preset>,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Seed of random weights and input tokens.
    #[serde(default)]
    pub seed: u64,
    /// Trained weights per preset name; other presets use random weights.
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            presets: reference(),
            batch: 1,
            seq_len: default_seq_len(),
            runs: default_runs(),
            warmup: default_warmup(),
            seed: 0,
            checkpoints: BTreeMap::new(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() {
            return Err(CliError::config("bench needs at least one preset"));
        }
        if self.runs < MIN_RUNS {
            return Err(CliError::config(format!("runs must be at least {MIN_RUNS}, got {}", self.runs)));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(CliError::config("batch and seq_len must be positive"));
        }
        if let Some(p) = self.presets.iter().find(|p| p.config().max_seq_len < self.seq_len) {
            return Err(CliError::config(format!("seq_len {} exceeds {}'s maximum", self.seq_len, p.name())));
        }
        if let Some(name) = self.checkpoints.keys().find(|k| !self.presets.iter().any(|p| p.name() == k.as_str())) {
            return Err(CliError::config(format!("checkpoint given for {name}, which is not benchmarked")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub preset: String,
    pub batch: usize,
    pub seq_len: usize,
    pub threads: usize,
    pub runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub stdev_ms: f64,
    /// Seconds since the Unix epoch when the measurement finished.
    pub timestamp: u64,
}

/// Inference-mode encoder pass timings in milliseconds, after discarding `warmup` passes.
pub fn time_forward(model: &TransformerModel, input: &EncoderInput, runs: usize, warmup: usize) -> Result<Vec<f64>> {
    let pass = || -> Result<f64> {
        let start = Instant::now();
        let g = Graph::new();
        let h = model.bind_frozen(&g).encode(input)?;
        std::hint::black_box(h.value());
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..warmup {
        pass()?;
    }
    (0..runs).map(|_| pass()).collect()
}

pub fn random_input(vocab_size: usize, batch: usize, seq_len: usize, seed: u64) -> Result<EncoderInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..batch * seq_len).map(|_| rng.random_range(NUM_RESERVED..vocab_size)).collect();
    Ok(EncoderInput::new(tokens, batch, seq_len, None)?)
}

pub fn bench_model(model: &TransformerModel, cfg: &BenchConfig, threads: usize, name: &str) -> Result<LatencyRow> {
    let input = random_input(model.config().vocab_size, cfg.batch, cfg.seq_len, cfg.seed)?;
    let times = time_forward(model, &input, cfg.runs, cfg.warmup)?;
    Ok(LatencyRow {
        preset: name.to_string(),
        batch: cfg.batch,
        seq_len: cfg.seq_len,
        threads,
        runs: cfg.runs,
        warmup: cfg.warmup,
        mean_ms: mean(&times),
        stdev_ms: stdev(&times),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

/// Measures every preset in turn; each model is dropped before the next is built.
pub fn run_bench(cfg: &BenchConfig, threads: usize) -> Result<Vec<LatencyRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.presets.len());
    for &preset in &cfg.presets {
        let model = match cfg.checkpoints.get(preset.name()) {
            Some(path) => {
                let m = load_checkpoint(path, preset.name())?;
                if m.config() != &preset.config() {
                    return Err(CliError::config(format!(
                        "{} does not hold a {} model",
                        path.display(),
                        preset.name()
                    )));
                }
                m
            }
            None => TransformerModel::init(&preset.config(), cfg.seed)?,
        };
        let row = bench_model(&model, cfg, threads, preset.name())?;
        log::info!("{}: {:.2} ms ({:.2})", row.preset, row.mean_ms, row.stdev_ms);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv(rows: &[LatencyRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::write(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::write(path, e))?;
    }
    w.flush().map_err(|e| CliError::write(path, e))
}

/// `mean (stdev)` table in milliseconds.
pub fn render_text(rows: &[LatencyRow]) -> String {
    let width = rows.iter().map(|r| r.preset.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  latency ms\n", "preset");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:.2} ({:.2})\n", r.preset, r.mean_ms, r.stdev_ms));
    }
    out
}
