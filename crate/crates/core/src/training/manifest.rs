use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::objectives::DistillSpec;
use crate::transformer::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DistillSpec>,
    pub train: TrainConfig,
    pub initial_checkpoint: String,
    pub final_checkpoint: String,
    pub losses: Vec<LossRecord>,
}

/// Everything needed to rerun a training job and check its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<String>,
    pub model: ModelConfig,
    pub stages: Vec<StageRecord>,
    pub final_checkpoint: String,
}

impl RunManifest {
    pub fn losses(&self) -> impl Iterator<Item = &LossRecord> {
        self.stages.iter().flat_map(|s| &s.losses)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Loss log as CSV with columns `step,stage,loss,lr`.
pub fn write_loss_csv<'a>(path: &Path, records: impl IntoIterator<Item = &'a LossRecord>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(mean of the first window, mean of the last window)` with the window
/// capped at a quarter of the curve.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len() / 4);
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Stage;

    #[test]
    fn csv_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let recs = [LossRecord { step: 0, stage: "distill".into(), loss: 1.5, lr: 0.0 }];
        write_loss_csv(&path, &recs).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,stage,loss,lr\n0,distill,1.5,0.0\n");
    }

    #[test]
    fn manifest_json_roundtrip() {
        let m = RunManifest {
            teacher_checkpoint: Some("ab".into()),
            model: crate::transformer::Preset::DeskThreeLayer.config(),
            stages: vec![StageRecord {
                name: "distill".into(),
                spec: Some(DistillSpec::od(2.0)),
                train: TrainConfig::desk(Stage::Distill),
                initial_checkpoint: "00".into(),
                final_checkpoint: "11".into(),
                losses: vec![],
            }],
            final_checkpoint: "11".into(),
        };
        let back: RunManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn smoothing_windows() {
        let l: Vec<f64> = (0..400).map(|i| 400.0 - i as f64).collect();
        assert_eq!(smoothed_endpoints(&l, 100), Some((350.5, 50.5)));
        assert_eq!(smoothed_endpoints(&l[..3], 100), None);
    }
}
