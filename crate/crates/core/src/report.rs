//! Run-directory artifacts and per-stage evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::correct::CorrectionLog;
use crate::data::pgm::write_pgm;
use crate::data::{save_masks, ConfidenceMap, Dataset, EvalSet, LabelMask, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{metrics_csv, ClassScore, Confusion, LabelQuality, StageCounts};
use crate::net::{predict, ModelParams};
use crate::scalar::Scalar;
use crate::train::TrainHistory;

/// Scores `labels` against the training ground truth. `None` (with a
/// warning) when some sample has no ground truth.
pub fn label_stage<T: Scalar>(
    stage: &str,
    labels: &[LabelMask],
    dataset: &Dataset<T>,
) -> Result<Option<StageCounts>> {
    let Some(gt) = dataset.ground_truth() else {
        warn!("no ground truth for every training image; skipping stage {stage}");
        return Ok(None);
    };
    let confusion = Confusion::from_pairs(dataset.classes(), labels.iter().zip(gt))?;
    Ok(Some(StageCounts {
        stage: stage.into(),
        confusion,
    }))
}

/// Predicts every held-out image with `model` and scores the result.
pub fn prediction_stage<T: Scalar>(
    stage: &str,
    model: &ModelParams<T>,
    eval: &EvalSet<T>,
) -> Result<StageCounts> {
    let preds: Vec<LabelMask> = eval
        .images
        .par_iter()
        .map(|img| predict(model, img))
        .collect::<Result<_>>()?;
    let confusion = Confusion::from_pairs(model.classes(), preds.iter().zip(&eval.ground_truth))?;
    Ok(StageCounts {
        stage: stage.into(),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: usize,
    pub label_quality: Option<LabelQuality>,
    pub score: Option<ClassScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub classes: Vec<ClassSummary>,
}

impl From<&StageCounts> for StageSummary {
    fn from(s: &StageCounts) -> Self {
        let seg = s.confusion.seg_score();
        StageSummary {
            stage: s.stage.clone(),
            classes: (0..s.confusion.classes())
                .map(|class| ClassSummary {
                    class,
                    label_quality: s.confusion.label_quality(class).ok(),
                    score: seg.class(class),
                })
                .collect(),
        }
    }
}

/// Summary of an executed pipeline: the stages that ran, their scores, and
/// the configuration and seed that produced them.
#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub config: RunConfig,
    pub stages: Vec<StageSummary>,
    /// Wall-clock seconds per stage; logged, not serialized, so that reruns
    /// stay byte-identical.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Dice of `class` for stage `name`, if both exist and are defined.
    pub fn dice(&self, name: &str, class: usize) -> Option<f64> {
        self.stage(name)?.classes.get(class)?.score.map(|s| s.dice)
    }
}

/// Writer for `<runs-root>/<name>/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        self.write("config.txt", config.to_config_string().as_bytes())
    }

    pub fn model_path(&self, round: usize) -> PathBuf {
        self.root.join(format!("model_round{round}.bin"))
    }

    pub fn write_model<T: Scalar>(&self, round: usize, model: &ModelParams<T>) -> Result<()> {
        model.save(self.model_path(round))
    }

    pub fn write_history(&self, round: usize, history: &TrainHistory) -> Result<()> {
        self.write(&format!("history_round{round}.csv"), &history.to_csv()?)
    }

    pub fn write_confidence(&self, ids: &[&str], maps: &[ConfidenceMap]) -> Result<()> {
        let dir = self.root.join("confidence");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (id, map) in ids.iter().zip(maps) {
            write_pgm(map, dir.join(format!("{id}.pgm")))?;
        }
        Ok(())
    }

    pub fn write_corrected(&self, ids: &[&str], labels: &[LabelMask]) -> Result<()> {
        save_masks(
            self.root.join("corrected_labels"),
            ids.iter().copied().zip(labels),
        )
    }

    pub fn corrected_dir(&self) -> PathBuf {
        self.root.join("corrected_labels")
    }

    /// `corrections.csv`; rounds are appended in order.
    pub fn write_corrections<'a>(&self, logs: impl IntoIterator<Item = &'a CorrectionLog>) -> Result<()> {
        let mut out = String::from("id,candidates,corrected,mean_cs_corrected\n");
        for l in logs {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                l.id, l.candidates_count, l.corrected_count, l.mean_cs_corrected
            ));
        }
        self.write("corrections.csv", out.as_bytes())
    }

    pub fn write_metrics(&self, stages: &[StageCounts]) -> Result<()> {
        self.write("metrics.csv", metrics_csv(stages).as_bytes())
    }

    pub fn write_report(&self, report: &PipelineReport) -> Result<()> {
        let json = serde_json::to_string_pretty(report)
            .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?;
        self.write("report.json", json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    #[test]
    fn report_lookup_and_skipped_timings() {
        let gt = LabelMask::new(1, 4, 2, vec![0, 1, 1, 0], Provenance::GroundTruth).unwrap();
        let counts = StageCounts {
            stage: "pred_noisy".into(),
            confusion: Confusion::from_pairs(2, [(&gt, &gt)]).unwrap(),
        };
        let report = PipelineReport {
            seed: 1,
            config: RunConfig::default(),
            stages: vec![StageSummary::from(&counts)],
            timings: vec![("train".into(), 1.5)],
        };
        assert_eq!(report.dice("pred_noisy", 1), Some(100.0));
        assert_eq!(report.dice("pred_corrected", 1), None);
        let json = serde_json::to_string(&report).unwrap();
        assert!(!json.contains("timings"));
        assert!(json.contains("\"tp_rate\":100.0"));
    }

    #[test]
    fn run_dir_files() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path().join("r")).unwrap();
        dir.write_config(&RunConfig::default()).unwrap();
        let logs = [CorrectionLog {
            id: "0000".into(),
            candidates_count: 3,
            corrected_count: 1,
            mean_cs_corrected: 0.95,
        }];
        dir.write_corrections(&logs).unwrap();
        let text = fs::read_to_string(dir.path().join("corrections.csv")).unwrap();
        assert_eq!(text, "id,candidates,corrected,mean_cs_corrected\n0000,3,1,0.950000\n");
        let cfg = crate::data::parse_config(dir.path().join("config.txt")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}
