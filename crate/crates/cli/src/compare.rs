//! Method comparison: distill each configured cell, probe over several seeds,
//! tabulate mean and spread.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kdbench_core::objectives::{DistillSpec, Method};
use kdbench_core::training::{self, ProbeConfig, ProbeTask, Stage, TrainConfig};
use kdbench_core::transformer::{Preset, TransformerModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{create_out_dir, probe_seeds, validate_strict, ProbeSummary};
use crate::config::{default_seeds, default_train, load_checkpoint, CorpusSource, ProbeTaskSource};
use crate::error::{CliError, Result};

pub const BASELINE_METHOD: &str = "random-init";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub spec: DistillSpec,
    /// Output-distribution stage run from the result of `spec`.
    #[serde(default)]
    pub then_od: Option<DistillSpec>,
}

impl CellConfig {
    pub fn method_label(&self) -> String {
        match &self.then_od {
            Some(_) => format!("{}+od", self.spec.method),
            None => self.spec.method.to_string(),
        }
    }

    /// Mapping strategy, teacher layer or temperature, whichever the method uses.
    pub fn choice_label(&self) -> String {
        let s = &self.spec;
        match s.method {
            Method::HiddenState | Method::CosineHiddenState => s.strategy.map(|m| m.to_string()).unwrap_or_default(),
            Method::MiniLmV2 | Method::DirectMiniLm => s.teacher_layer.map(|t| t.to_string()).unwrap_or_default(),
            Method::OutputDistribution => format!("T={}", s.temperature),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub teacher: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default)]
    pub task: ProbeTaskSource,
    pub students: Vec<Preset>,
    pub cells: Vec<CellConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub od_train: Option<TrainConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Adds a randomly initialized, probe-only row per student.
    #[serde(default = "yes")]
    pub baseline: bool,
    #[serde(default)]
    pub student_seed: u64,
}

impl CompareConfig {
    fn train_for(&self, student: Preset) -> (TrainConfig, TrainConfig) {
        (
            self.train.clone().unwrap_or_else(|| default_train(student, Stage::Distill)),
            self.od_train.clone().unwrap_or_else(|| default_train(student, Stage::OdAfterDistill)),
        )
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.student_seed = seed;
        for t in [&mut self.train, &mut self.od_train].into_iter().flatten() {
            t.seed = seed;
        }
        crate::config::shift_seeds(&mut self.seeds, seed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub choice: String,
    pub student: String,
    pub probe: Option<ProbeSummary>,
    pub best_per_method: bool,
    pub status: CellStatus,
}

impl ComparisonRow {
    pub fn mean(&self) -> Option<f64> {
        self.probe.as_ref().map(|p| p.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

enum Job<'a> {
    Baseline(Preset),
    Cell(Preset, &'a CellConfig),
}

impl Job<'_> {
    fn labels(&self) -> (String, String, Preset) {
        match self {
            Job::Baseline(p) => (BASELINE_METHOD.into(), "-".into(), *p),
            Job::Cell(p, c) => (c.method_label(), c.choice_label(), *p),
        }
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

struct Shared<'a> {
    cfg: &'a CompareConfig,
    teacher: &'a TransformerModel,
    corpus: &'a [Vec<usize>],
    task: &'a ProbeTask,
    cells_dir: PathBuf,
}

fn run_job(job: &Job<'_>, sh: &Shared<'_>) -> Result<ProbeSummary> {
    let (method, choice, preset) = job.labels();
    let student = TransformerModel::init(&preset.config(), sh.cfg.student_seed)?;
    let student = match job {
        Job::Baseline(_) => student,
        Job::Cell(_, cell) => {
            let (train, od_train) = sh.cfg.train_for(preset);
            let (model, manifest) = match &cell.then_od {
                None => {
                    let o = training::distill(sh.teacher, student, &cell.spec, &train, sh.corpus)?;
                    (o.student, o.manifest)
                }
                Some(od) => {
                    let o = training::distill_multistage(
                        sh.teacher, student, &cell.spec, od, &train, &od_train, sh.corpus,
                    )?;
                    (o.student, o.manifest)
                }
            };
            let path = sh.cells_dir.join(format!("{}__{}__{}.json", preset.name(), slug(&method), slug(&choice)));
            manifest.save(&path).map_err(|e| CliError::write(&path, e))?;
            model
        }
    };
    log::info!("probing {method}:{choice} on {}", preset.name());
    probe_seeds(&student, sh.task, &sh.cfg.probe, &sh.cfg.seeds)
}

/// Marks, per (method, student), the choice with the highest mean.
fn mark_best(rows: &mut [ComparisonRow]) {
    let mut best: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in rows.iter() {
        if let Some(m) = r.mean() {
            let e = best.entry((r.method.clone(), r.student.clone())).or_insert(f64::NEG_INFINITY);
            *e = e.max(m);
        }
    }
    for r in rows.iter_mut() {
        r.best_per_method = r.mean().is_some_and(|m| best.get(&(r.method.clone(), r.student.clone())) == Some(&m));
    }
}

pub fn run_compare(cfg: &CompareConfig, out: &Path) -> Result<ComparisonTable> {
    if cfg.students.is_empty() || (cfg.cells.is_empty() && !cfg.baseline) {
        return Err(CliError::config("compare needs at least one student and one cell"));
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::config("compare needs at least one probe seed"));
    }
    let teacher = load_checkpoint(&cfg.teacher, "teacher")?;
    for &student in &cfg.students {
        let s = student.config();
        for cell in &cfg.cells {
            validate_strict(&cell.spec, &s, teacher.config())?;
            if let Some(od) = &cell.then_od {
                validate_strict(od, &s, teacher.config())?;
                if od.method != Method::OutputDistribution {
                    return Err(CliError::config(format!("then_od must use od, got {}", od.method)));
                }
            }
        }
        let (a, b) = cfg.train_for(student);
        a.validate()?;
        b.validate()?;
    }
    let corpus = cfg.corpus.load(teacher.config().vocab_size)?;
    let task = cfg.task.load()?;
    let cells_dir = out.join("cells");
    create_out_dir(&cells_dir)?;

    let mut jobs = Vec::new();
    for &student in &cfg.students {
        if cfg.baseline {
            jobs.push(Job::Baseline(student));
        }
        jobs.extend(cfg.cells.iter().map(|c| Job::Cell(student, c)));
    }
    let shared = Shared { cfg, teacher: &teacher, corpus: &corpus.seqs, task: &task, cells_dir };
    let mut rows: Vec<ComparisonRow> = jobs
        .par_iter()
        .map(|job| {
            let (method, choice, preset) = job.labels();
            let (probe, status) = match run_job(job, &shared) {
                Ok(p) => (Some(p), CellStatus::Ok),
                Err(e) => {
                    log::error!("{method}:{choice} on {} failed: {e}", preset.name());
                    (None, CellStatus::Failed(e.to_string()))
                }
            };
            ComparisonRow { method, choice, student: preset.name().into(), probe, best_per_method: false, status }
        })
        .collect();
    mark_best(&mut rows);
    let table = ComparisonTable { rows };
    write_csv(&table, &out.join("comparison.csv"))?;
    let path = out.join("comparison.txt");
    fs::write(&path, render_text(&table)).map_err(|e| CliError::write(&path, e))?;
    Ok(table)
}

pub const CSV_HEADER: [&str; 9] =
    ["method", "choice", "student", "seeds", "mean", "stdev", "accuracies", "best_per_method", "status"];

pub fn write_csv(table: &ComparisonTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::write(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| CliError::write(path, e))?;
    for r in &table.rows {
        let (seeds, mean, sd, accs) = match &r.probe {
            Some(p) => (
                p.seeds.len().to_string(),
                format!("{:.6}", p.mean),
                format!("{:.6}", p.stdev),
                p.accuracies.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(";"),
            ),
            None => Default::default(),
        };
        let status = match &r.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(m) => format!("failed: {m}"),
        };
        let best = if r.best_per_method { "*" } else { "" };
        w.write_record([&r.method, &r.choice, &r.student, &seeds, &mean, &sd, &accs, best, &status])
            .map_err(|e| CliError::write(path, e))?;
    }
    w.flush().map_err(|e| CliError::write(path, e))
}

/// Aligned text view: one row per (method, choice), one column per student,
/// cells as `mean±stdev` in percent with `*` for the best choice of a method.
pub fn render_text(table: &ComparisonTable) -> String {
    let mut students: Vec<&str> = Vec::new();
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in &table.rows {
        if !students.contains(&r.student.as_str()) {
            students.push(&r.student);
        }
        if !keys.contains(&(r.method.as_str(), r.choice.as_str())) {
            keys.push((&r.method, &r.choice));
        }
    }
    let cell = |m: &str, c: &str, s: &str| -> String {
        match table.rows.iter().find(|r| r.method == m && r.choice == c && r.student == s) {
            None => String::new(),
            Some(ComparisonRow { probe: Some(p), best_per_method, .. }) => {
                format!("{:.1}±{:.1}{}", 100.0 * p.mean, 100.0 * p.stdev, if *best_per_method { "*" } else { "" })
            }
            Some(_) => "failed".into(),
        }
    };
    let mut grid: Vec<Vec<String>> = vec![["method", "choice"]
        .iter()
        .map(|s| s.to_string())
        .chain(students.iter().map(|s| s.to_string()))
        .collect()];
    for (m, c) in &keys {
        grid.push([m.to_string(), c.to_string()].into_iter().chain(students.iter().map(|s| cell(m, c, s))).collect());
    }
    let widths: Vec<usize> =
        (0..grid[0].len()).map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for row in &grid {
        let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use kdbench_core::objectives::{MappingStrategy, TeacherLayer};

    fn row(method: &str, choice: &str, mean: f64) -> ComparisonRow {
        ComparisonRow {
            method: method.into(),
            choice: choice.into(),
            student: "desk-6l".into(),
            probe: Some(ProbeSummary { seeds: vec![0], accuracies: vec![mean], mean, stdev: 0.0 }),
            best_per_method: false,
            status: CellStatus::Ok,
        }
    }

    #[test]
    fn best_marker_is_per_method() {
        let mut rows = vec![row("hs", "last", 0.6), row("hs", "uniform", 0.7), row("minilmv2", "L-1", 0.5)];
        rows.push(ComparisonRow { probe: None, status: CellStatus::Failed("x".into()), ..row("hs", "single", 0.0) });
        mark_best(&mut rows);
        assert_eq!(rows.iter().map(|r| r.best_per_method).collect::<Vec<_>>(), [false, true, true, false]);
        let text = render_text(&ComparisonTable { rows });
        assert!(text.contains("70.0±0.0*"));
        assert!(text.contains("failed"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn labels_follow_the_method() {
        let hs =
            CellConfig { spec: DistillSpec::hs(MappingStrategy::UniformPlusLast), then_od: Some(DistillSpec::od(1.0)) };
        assert_eq!((hs.method_label(), hs.choice_label()), ("hs+od".into(), "uniform+last".into()));
        let m = CellConfig { spec: DistillSpec::minilmv2(TeacherLayer::from_top(1), None), then_od: None };
        assert_eq!((m.method_label(), m.choice_label()), ("minilmv2".into(), "L-1".into()));
    }

    #[test]
    fn csv_is_written_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_csv(&ComparisonTable { rows: vec![row("od", "T=1", 0.5)] }, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,choice,student,seeds,mean,stdev,accuracies,best_per_method,status\n"));
        assert!(text.contains("od,T=1,desk-6l,1,0.500000,0.000000,0.500000,,ok"));
    }
}
