//! Single-run commands: teacher pretraining, distillation and probing.

use std::fs;
use std::path::{Path, PathBuf};

use kdbench_core::data::MaskConfig;
use kdbench_core::objectives::{DistillSpec, ProjectionBank};
use kdbench_core::training::{
    self, mlm_accuracy, probe_finetune, write_loss_csv, MlmEval, ProbeConfig, ProbeTask, RunManifest,
};
use kdbench_core::transformer::checkpoint::{self, write_tensors};
use kdbench_core::transformer::{ModelConfig, TransformerModel};
use serde::Serialize;

use crate::config::{load_checkpoint, DistillConfig, MultistageConfig, PretrainTeacherConfig, ProbeCommandConfig};
use crate::error::{CliError, Result};
use crate::stats::{mean, stdev};

pub const CHECKPOINT_FILE: &str = "model.kdt";
pub const PROJECTIONS_FILE: &str = "projections.kdt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "losses.csv";

pub fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::write(out, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::write(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::write(path, e))
}

/// Rejects specs the core would only warn about.
pub fn validate_strict(spec: &DistillSpec, student: &ModelConfig, teacher: &ModelConfig) -> Result<()> {
    let warnings = spec.validate(student, teacher)?;
    if warnings.is_empty() {
        Ok(())
    } else {
        Err(CliError::config(format!("rejected spec: {}", warnings.join("; "))))
    }
}

fn save_projections(bank: &ProjectionBank, path: &Path) -> Result<()> {
    let named = bank.named();
    let file = fs::File::create(path).map_err(|e| CliError::write(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors(&mut w, named.iter().map(|(n, t)| (n.as_str(), *t))).map_err(|e| CliError::write(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::write(path, e))
}

fn write_run(
    out: &Path,
    student: &TransformerModel,
    manifest: &RunManifest,
    projections: Option<&ProjectionBank>,
) -> Result<()> {
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(student, &ckpt).map_err(|e| CliError::write(&ckpt, e))?;
    if let Some(bank) = projections.filter(|b| !b.is_empty()) {
        save_projections(bank, &out.join(PROJECTIONS_FILE))?;
    }
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path).map_err(|e| CliError::write(&path, e))?;
    let path = out.join(LOSS_FILE);
    write_loss_csv(&path, manifest.losses()).map_err(|e| CliError::write(&path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub eval: Option<MlmEval>,
}

pub fn pretrain_teacher(cfg: &PretrainTeacherConfig, out: &Path) -> Result<PretrainSummary> {
    let model_cfg = cfg.model.config();
    let train = cfg.train_config();
    train.validate()?;
    let corpus = cfg.corpus.load(model_cfg.vocab_size)?;
    let eval_corpus = cfg.eval_source().map(|s| s.load(model_cfg.vocab_size)).transpose()?;
    create_out_dir(out)?;
    log::info!("pretraining {} for {} steps on {} sequences", cfg.model.name(), train.total_steps, corpus.seqs.len());
    let outcome = training::pretrain_teacher(&corpus.seqs, &model_cfg, &train)?;
    write_run(out, &outcome.model, &outcome.manifest, None)?;
    if let Some(vocab) = &corpus.vocab {
        let path = out.join("vocab.txt");
        vocab.save(&path).map_err(|e| CliError::write(&path, e))?;
    }
    let mask = MaskConfig { mask_prob: train.mask_prob, split: true };
    let eval = eval_corpus.map(|c| mlm_accuracy(&outcome.model, &c.seqs, mask, train.seed)).transpose()?;
    let summary = PretrainSummary {
        checkpoint: out.join(CHECKPOINT_FILE),
        checkpoint_id: outcome.manifest.final_checkpoint.clone(),
        eval,
    };
    write_json(&out.join("eval.json"), &summary)?;
    Ok(summary)
}

pub fn distill(cfg: &DistillConfig, out: &Path) -> Result<RunManifest> {
    let teacher = load_checkpoint(&cfg.teacher, "teacher")?;
    let student_cfg = cfg.student.config();
    validate_strict(&cfg.spec, &student_cfg, teacher.config())?;
    let train = cfg.train_config();
    train.validate()?;
    let corpus = cfg.corpus.load(teacher.config().vocab_size)?;
    create_out_dir(out)?;
    let student = TransformerModel::init(&student_cfg, cfg.student_seed)?;
    log::info!("distilling {} with {} for {} steps", cfg.student.name(), cfg.spec.method, train.total_steps);
    let outcome = training::distill(&teacher, student, &cfg.spec, &train, &corpus.seqs)?;
    write_run(out, &outcome.student, &outcome.manifest, Some(&outcome.projections))?;
    Ok(outcome.manifest)
}

pub fn distill_multistage(cfg: &MultistageConfig, out: &Path) -> Result<RunManifest> {
    let teacher = load_checkpoint(&cfg.teacher, "teacher")?;
    let student_cfg = cfg.student.config();
    validate_strict(&cfg.transfer, &student_cfg, teacher.config())?;
    validate_strict(&cfg.od, &student_cfg, teacher.config())?;
    let (transfer_train, od_train) = cfg.train_configs();
    transfer_train.validate()?;
    od_train.validate()?;
    let corpus = cfg.corpus.load(teacher.config().vocab_size)?;
    create_out_dir(out)?;
    let student = TransformerModel::init(&student_cfg, cfg.student_seed)?;
    let outcome = training::distill_multistage(
        &teacher,
        student,
        &cfg.transfer,
        &cfg.od,
        &transfer_train,
        &od_train,
        &corpus.seqs,
    )?;
    write_run(out, &outcome.student, &outcome.manifest, Some(&outcome.stage1_projections))?;
    Ok(outcome.manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub stdev: f64,
}

/// Probe accuracy of `model` for every seed.
pub fn probe_seeds(
    model: &TransformerModel,
    task: &ProbeTask,
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<ProbeSummary> {
    if seeds.is_empty() {
        return Err(CliError::config("at least one probe seed is required"));
    }
    let accuracies = seeds
        .iter()
        .map(|&seed| Ok(probe_finetune(model, task, &ProbeConfig { seed, ..cfg.clone() })?.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ProbeSummary { seeds: seeds.to_vec(), mean: mean(&accuracies), stdev: stdev(&accuracies), accuracies })
}

pub fn probe(cfg: &ProbeCommandConfig, out: &Path) -> Result<ProbeSummary> {
    let model = cfg.model.load()?;
    let task = cfg.task.load()?;
    create_out_dir(out)?;
    let summary = probe_seeds(&model, &task, &cfg.probe, &cfg.seeds)?;
    let path = out.join("probe.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::write(&path, e))?;
    w.write_record(["seed", "accuracy"]).map_err(|e| CliError::write(&path, e))?;
    for (seed, acc) in summary.seeds.iter().zip(&summary.accuracies) {
        w.write_record([seed.to_string(), format!("{acc:.6}")]).map_err(|e| CliError::write(&path, e))?;
    }
    w.flush().map_err(|e| CliError::write(&path, e))?;
    Ok(summary)
}
