//! JSON run configurations. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use kdbench_core::data::{io, synth_corpus, SynthConfig, Vocab};
use kdbench_core::objectives::DistillSpec;
use kdbench_core::training::{ProbeConfig, ProbeTask, Stage, TrainConfig};
use kdbench_core::transformer::{checkpoint, Preset, TransformerModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    parse_json(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> std::result::Result<T, serde_json::Error> {
    serde_json::from_str(text)
}

/// Loads a checkpoint, reporting a missing file as a config error.
pub fn load_checkpoint(path: &Path, role: &str) -> Result<TransformerModel> {
    if !path.is_file() {
        return Err(CliError::config(format!("{role} checkpoint not found: {}", path.display())));
    }
    checkpoint::load(path).map_err(|e| CliError::config(format!("{role} checkpoint {}: {e}", path.display())))
}

/// Desk presets train with the desk budget, reference presets with the full-scale one.
pub fn default_train(preset: Preset, stage: Stage) -> TrainConfig {
    if preset.is_desk() {
        TrainConfig::desk(stage)
    } else {
        TrainConfig::full_scale(stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic {
        num_seqs: usize,
        seed: u64,
        #[serde(default)]
        grammar: SynthConfig,
    },
    /// One sequence per line; the vocabulary is built from the file unless given.
    Text {
        path: PathBuf,
        #[serde(default)]
        vocab: Option<PathBuf>,
    },
    /// Space-separated token ids, one sequence per line.
    Pretokenized { path: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic { num_seqs: 4000, seed: 1, grammar: SynthConfig::default() }
    }
}

pub struct Corpus {
    pub vocab: Option<Vocab>,
    pub seqs: Vec<Vec<usize>>,
}

fn check_vocab(vocab: &Vocab, vocab_size: usize) -> Result<()> {
    if vocab.len() > vocab_size {
        return Err(CliError::config(format!("vocabulary of {} exceeds the model's {vocab_size}", vocab.len())));
    }
    Ok(())
}

impl CorpusSource {
    pub fn load(&self, vocab_size: usize) -> Result<Corpus> {
        match self {
            CorpusSource::Synthetic { num_seqs, seed, grammar } => {
                let vocab = grammar.vocab()?;
                check_vocab(&vocab, vocab_size)?;
                let seqs = synth_corpus(*num_seqs, *seed, grammar)?.encode(&vocab);
                Ok(Corpus { vocab: Some(vocab), seqs })
            }
            CorpusSource::Text { path, vocab } => {
                let lines = io::read_corpus(path).map_err(|e| CliError::config(e.to_string()))?;
                let vocab = match vocab {
                    Some(p) => Vocab::load(p).map_err(|e| CliError::config(e.to_string()))?,
                    None => Vocab::build(lines.iter().map(String::as_str), vocab_size)?,
                };
                check_vocab(&vocab, vocab_size)?;
                let seqs = lines.iter().map(|l| vocab.encode_sequence(l)).collect();
                Ok(Corpus { vocab: Some(vocab), seqs })
            }
            CorpusSource::Pretokenized { path } => {
                let seqs = io::read_pretokenized(path).map_err(|e| CliError::config(e.to_string()))?;
                if let Some(&id) = seqs.iter().flatten().find(|&&id| id >= vocab_size) {
                    return Err(CliError::config(format!(
                        "token id {id} outside the model's vocabulary of {vocab_size}"
                    )));
                }
                Ok(Corpus { vocab: None, seqs })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProbeTaskSource {
    /// Majority-gender task of the synthetic grammar; the sentence marker is masked.
    Synthetic {
        num_train: usize,
        num_test: usize,
        seed: u64,
        #[serde(default)]
        grammar: SynthConfig,
    },
    /// Pre-tokenized sequences with `line_index,label` CSVs.
    Pretokenized { train: PathBuf, train_labels: PathBuf, test: PathBuf, test_labels: PathBuf, num_classes: usize },
}

impl Default for ProbeTaskSource {
    fn default() -> Self {
        ProbeTaskSource::Synthetic { num_train: 1000, num_test: 1000, seed: 3, grammar: SynthConfig::default() }
    }
}

impl ProbeTaskSource {
    pub fn load(&self) -> Result<ProbeTask> {
        let task = match self {
            ProbeTaskSource::Synthetic { num_train, num_test, seed, grammar } => {
                let vocab = grammar.vocab()?;
                let data = synth_corpus(num_train + num_test, *seed, grammar)?;
                let mut seqs = data.probe_inputs(&vocab);
                let test = seqs.split_off(*num_train);
                ProbeTask {
                    train: seqs,
                    train_labels: data.labels[..*num_train].to_vec(),
                    test,
                    test_labels: data.labels[*num_train..].to_vec(),
                    num_classes: 2,
                }
            }
            ProbeTaskSource::Pretokenized { train, train_labels, test, test_labels, num_classes } => {
                let read = |seqs: &Path, labels: &Path| -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
                    let s = io::read_pretokenized(seqs).map_err(|e| CliError::config(e.to_string()))?;
                    let l = io::read_probe_labels(labels, s.len()).map_err(|e| CliError::config(e.to_string()))?;
                    Ok((s, l))
                };
                let (train, train_labels) = read(train, train_labels)?;
                let (test, test_labels) = read(test, test_labels)?;
                ProbeTask { train, train_labels, test, test_labels, num_classes: *num_classes }
            }
        };
        task.validate()?;
        Ok(task)
    }
}

fn desk_teacher() -> Preset {
    Preset::DeskTeacher
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainTeacherConfig {
    #[serde(default = "desk_teacher")]
    pub model: Preset,
    #[serde(default)]
    pub corpus: CorpusSource,
    /// Held-out data for masked-token accuracy; synthetic corpora default to a fresh seed.
    #[serde(default)]
    pub eval: Option<CorpusSource>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl Default for PretrainTeacherConfig {
    fn default() -> Self {
        Self { model: desk_teacher(), corpus: CorpusSource::default(), eval: None, train: None }
    }
}

impl PretrainTeacherConfig {
    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| default_train(self.model, Stage::TeacherPretrain))
    }

    pub fn eval_source(&self) -> Option<CorpusSource> {
        match (&self.eval, &self.corpus) {
            (Some(e), _) => Some(e.clone()),
            (None, CorpusSource::Synthetic { seed, grammar, .. }) => Some(CorpusSource::Synthetic {
                num_seqs: 1000,
                seed: seed.wrapping_add(1000),
                grammar: grammar.clone(),
            }),
            _ => None,
        }
    }

    pub fn override_seed(&mut self, seed: u64) {
        let mut train = self.train_config();
        train.seed = seed;
        self.train = Some(train);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub teacher: PathBuf,
    pub student: Preset,
    #[serde(default)]
    pub student_seed: u64,
    #[serde(default)]
    pub corpus: CorpusSource,
    pub spec: DistillSpec,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl DistillConfig {
    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| default_train(self.student, Stage::Distill))
    }

    pub fn override_seed(&mut self, seed: u64) {
        let mut train = self.train_config();
        train.seed = seed;
        self.train = Some(train);
        self.student_seed = seed;
    }
}

fn od_spec() -> DistillSpec {
    DistillSpec::od(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultistageConfig {
    pub teacher: PathBuf,
    pub student: Preset,
    #[serde(default)]
    pub student_seed: u64,
    #[serde(default)]
    pub corpus: CorpusSource,
    /// First stage: hidden-state or attention transfer.
    pub transfer: DistillSpec,
    #[serde(default = "od_spec")]
    pub od: DistillSpec,
    #[serde(default)]
    pub transfer_train: Option<TrainConfig>,
    #[serde(default)]
    pub od_train: Option<TrainConfig>,
}

impl MultistageConfig {
    pub fn train_configs(&self) -> (TrainConfig, TrainConfig) {
        (
            self.transfer_train.clone().unwrap_or_else(|| default_train(self.student, Stage::Distill)),
            self.od_train.clone().unwrap_or_else(|| default_train(self.student, Stage::OdAfterDistill)),
        )
    }

    pub fn override_seed(&mut self, seed: u64) {
        let (mut a, mut b) = self.train_configs();
        a.seed = seed;
        b.seed = seed;
        self.transfer_train = Some(a);
        self.od_train = Some(b);
        self.student_seed = seed;
    }
}

/// A trained checkpoint or a freshly initialized preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Random {
        preset: Preset,
        #[serde(default)]
        seed: u64,
    },
}

impl ModelSource {
    pub fn load(&self) -> Result<TransformerModel> {
        match self {
            ModelSource::Checkpoint(p) => load_checkpoint(p, "model"),
            ModelSource::Random { preset, seed } => Ok(TransformerModel::init(&preset.config(), *seed)?),
        }
    }
}

pub fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCommandConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub task: ProbeTaskSource,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

/// Replaces `seeds` by as many consecutive seeds starting at `seed`.
pub fn shift_seeds(seeds: &mut [u64], seed: u64) {
    for (i, s) in seeds.iter_mut().enumerate() {
        *s = seed + i as u64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let ok = r#"{"teacher": "t.kdt", "student": "desk-6l", "spec": {"method": "hs", "strategy": "uniform+last"}}"#;
        assert!(parse_json::<DistillConfig>(ok).is_ok());
        let typo = r#"{"teacher": "t.kdt", "student": "desk-6l", "spec": {"method": "hs", "strategy": "uniform+last"}, "lr": 1}"#;
        assert!(parse_json::<DistillConfig>(typo).is_err());
        let bad_strategy =
            r#"{"teacher": "t.kdt", "student": "6l", "spec": {"method": "hs", "strategy": "uniform_last"}}"#;
        assert!(parse_json::<DistillConfig>(bad_strategy).is_err());
    }

    #[test]
    fn corpus_sources_parse() {
        let c: CorpusSource = parse_json(r#"{"synthetic": {"num_seqs": 10, "seed": 4}}"#).unwrap();
        assert_eq!(c, CorpusSource::Synthetic { num_seqs: 10, seed: 4, grammar: SynthConfig::default() });
        assert!(parse_json::<CorpusSource>(r#"{"synthetic": {"num_seqs": 10, "seed": 4, "x": 1}}"#).is_err());
        let p: CorpusSource = parse_json(r#"{"pretokenized": {"path": "a.ids"}}"#).unwrap();
        assert_eq!(p, CorpusSource::Pretokenized { path: "a.ids".into() });
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut c: MultistageConfig =
            parse_json(r#"{"teacher": "t", "student": "desk-3l", "transfer": {"method": "hs", "strategy": "last"}}"#)
                .unwrap();
        c.override_seed(9);
        let (a, b) = c.train_configs();
        assert_eq!((a.seed, b.seed, c.student_seed), (9, 9, 9));
        assert_eq!(b.stage, Stage::OdAfterDistill);
        let mut seeds = default_seeds();
        shift_seeds(&mut seeds, 5);
        assert_eq!(seeds, [5, 6, 7]);
    }

    #[test]
    fn synthetic_probe_task_masks_the_marker() {
        let src = ProbeTaskSource::Synthetic { num_train: 20, num_test: 10, seed: 1, grammar: SynthConfig::default() };
        let task = src.load().unwrap();
        assert_eq!((task.train.len(), task.test.len()), (20, 10));
        assert!(task.train.iter().chain(&task.test).all(|s| s[0] == kdbench_core::data::MASK));
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let err = load_checkpoint(Path::new("/nonexistent/t.kdt"), "teacher").unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
        assert!(err.to_string().contains("not found"));
    }
}
