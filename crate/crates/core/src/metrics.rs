//! Label-quality rates and per-class segmentation scores.
//!
//! Dataset-level numbers pool pixel counts over all images before dividing
//! (micro-average). All rates are percentages.

use serde::Serialize;

use crate::data::{ensure_same_shape, LabelMask, Provenance};
use crate::error::{Error, Result};

/// Pixel confusion counts, indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        ensure_same_shape("prediction vs ground truth", pred, gt)?;
        if pred.classes() != self.classes || gt.classes() != self.classes {
            return Err(Error::DimensionMismatch(format!(
                "masks with k={} / k={} in a k={} tally",
                pred.classes(),
                gt.classes(),
                self.classes
            )));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn from_pairs<'a>(
        classes: usize,
        pairs: impl IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
    ) -> Result<Self> {
        let mut c = Confusion::new(classes);
        for (pred, gt) in pairs {
            c.add(pred, gt)?;
        }
        Ok(c)
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    fn gt_total(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.count(class, p)).sum()
    }

    fn pred_total(&self, class: usize) -> u64 {
        (0..self.classes).map(|g| self.count(g, class)).sum()
    }

    fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// One-vs-rest rates treating `class` as positive.
    pub fn label_quality(&self, class: usize) -> Result<LabelQuality> {
        let pos = self.gt_total(class);
        let neg = self.total() - pos;
        if pos == 0 {
            return Err(Error::DegenerateClass { class });
        }
        if neg == 0 {
            // the complement is what is missing
            return Err(Error::DegenerateClass {
                class: usize::from(class == 0),
            });
        }
        let tp = self.count(class, class);
        let fp = self.pred_total(class) - tp;
        let tp_rate = 100.0 * tp as f64 / pos as f64;
        let fp_rate = 100.0 * fp as f64 / neg as f64;
        Ok(LabelQuality {
            tp_rate,
            fp_rate,
            tn_rate: 100.0 - fp_rate,
            fn_rate: 100.0 - tp_rate,
        })
    }

    pub fn seg_score(&self) -> SegScore {
        let classes = (0..self.classes)
            .map(|l| {
                let gt = self.gt_total(l);
                if gt == 0 {
                    return None;
                }
                let hit = self.count(l, l);
                let pred = self.pred_total(l);
                Some(ClassScore {
                    accuracy: 100.0 * hit as f64 / gt as f64,
                    dice: 100.0 * 2.0 * hit as f64 / (pred + gt) as f64,
                })
            })
            .collect();
        SegScore { classes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LabelQuality {
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub tn_rate: f64,
    pub fn_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    /// Per-class recall.
    pub accuracy: f64,
    pub dice: f64,
}

/// Per-class scores; `None` where the class is absent from the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegScore {
    pub classes: Vec<Option<ClassScore>>,
}

impl SegScore {
    pub fn class(&self, l: usize) -> Option<ClassScore> {
        self.classes.get(l).copied().flatten()
    }
}

fn require_gt(gt: &LabelMask) -> Result<()> {
    if gt.provenance() != Provenance::GroundTruth {
        return Err(Error::InvalidArgument(
            "reference mask must be ground truth".into(),
        ));
    }
    Ok(())
}

/// Binary (k = 2) foreground rates of `candidate` against `gt`.
pub fn label_quality(candidate: &LabelMask, gt: &LabelMask) -> Result<LabelQuality> {
    label_quality_pooled([(candidate, gt)])
}

pub fn label_quality_pooled<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
) -> Result<LabelQuality> {
    let mut c = Confusion::new(2);
    for (cand, gt) in pairs {
        require_gt(gt)?;
        if gt.classes() != 2 {
            return Err(Error::InvalidArgument(
                "label quality is defined for binary masks".into(),
            ));
        }
        c.add(cand, gt)?;
    }
    c.label_quality(1)
}

pub fn seg_score(pred: &LabelMask, gt: &LabelMask) -> Result<SegScore> {
    seg_score_pooled(gt.classes(), [(pred, gt)])
}

pub fn seg_score_pooled<'a>(
    classes: usize,
    pairs: impl IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
) -> Result<SegScore> {
    Ok(Confusion::from_pairs(classes, pairs)?.seg_score())
}

/// Confusion counts of one evaluated stage (pseudo, corrected, pred_noisy, ...).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCounts {
    pub stage: String,
    pub confusion: Confusion,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.2}"))
}

/// `stage,class,tp,fp,tn,fn,acc,dice` with one row per class. Rates treat
/// the row's class as positive; undefined values are written as `NA`.
pub fn metrics_csv(stages: &[StageCounts]) -> String {
    let mut out = String::from("stage,class,tp,fp,tn,fn,acc,dice\n");
    for s in stages {
        let seg = s.confusion.seg_score();
        for class in 0..s.confusion.classes() {
            let q = s.confusion.label_quality(class).ok();
            let c = seg.class(class);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.stage,
                class,
                pct(q.map(|q| q.tp_rate)),
                pct(q.map(|q| q.fp_rate)),
                pct(q.map(|q| q.tn_rate)),
                pct(q.map(|q| q.fn_rate)),
                pct(c.map(|c| c.accuracy)),
                pct(c.map(|c| c.dice)),
            ));
        }
    }
    out
}
