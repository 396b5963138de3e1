//! Confidence-gated label correction.

use serde::Serialize;

use crate::data::{ensure_same_shape, ConfidenceMap, LabelMask, Provenance};
use crate::error::{Error, Result};

/// Audit record for one corrected image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectionLog {
    pub id: String,
    /// Pixels where the label and the reference prediction disagree.
    pub candidates_count: usize,
    pub corrected_count: usize,
    /// Mean confidence over corrected pixels (0 when none were corrected).
    pub mean_cs_corrected: f64,
}

/// Replaces `pseudo[x]` by `reference[x]` wherever they differ and
/// `CS(x) >= tau`; every other pixel is kept.
pub fn correct_labels(
    id: &str,
    pseudo: &LabelMask,
    reference: &LabelMask,
    conf: &ConfidenceMap,
    tau: f64,
) -> Result<(LabelMask, CorrectionLog)> {
    ensure_same_shape("pseudo vs reference", pseudo, reference)?;
    ensure_same_shape("pseudo vs confidence", pseudo, conf)?;
    if !matches!(pseudo.provenance(), Provenance::Pseudo | Provenance::Corrected) {
        return Err(Error::InvalidArgument(format!(
            "cannot correct a {:?} mask",
            pseudo.provenance()
        )));
    }
    if pseudo.classes() != reference.classes() {
        return Err(Error::DimensionMismatch(
            "pseudo and reference class counts differ".into(),
        ));
    }
    let mut out = pseudo.clone().with_provenance(Provenance::Corrected);
    let mut candidates = 0;
    let mut corrected = 0;
    let mut cs_sum = 0.0;
    for (i, (label, &pred)) in out.data_mut().iter_mut().zip(reference.data()).enumerate() {
        if *label == pred {
            continue;
        }
        candidates += 1;
        let cs = conf.score(i);
        if cs >= tau {
            *label = pred;
            corrected += 1;
            cs_sum += cs;
        }
    }
    let log = CorrectionLog {
        id: id.to_owned(),
        candidates_count: candidates,
        corrected_count: corrected,
        mean_cs_corrected: if corrected > 0 {
            cs_sum / corrected as f64
        } else {
            0.0
        },
    };
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(data: &[u8], p: Provenance) -> LabelMask {
        LabelMask::new(2, 2, 2, data.to_vec(), p).unwrap()
    }

    #[test]
    fn worked_example() {
        let pseudo = mask(&[0, 1, 1, 1], Provenance::Pseudo);
        let reference = mask(&[1, 1, 1, 1], Provenance::Prediction);
        let conf = ConfidenceMap::from_counts(2, 2, 20, vec![19, 20, 20, 20]).unwrap();
        let (out, log) = correct_labels("a", &pseudo, &reference, &conf, 0.8).unwrap();
        assert_eq!(out.data(), &[1, 1, 1, 1]);
        assert_eq!(out.provenance(), Provenance::Corrected);
        assert_eq!((log.candidates_count, log.corrected_count), (1, 1));
        assert!((log.mean_cs_corrected - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_confidence_and_agreement_are_no_ops() {
        let pseudo = mask(&[0, 1, 0, 1], Provenance::Pseudo);
        let reference = mask(&[1, 0, 1, 0], Provenance::Prediction);
        let zero = ConfidenceMap::from_counts(2, 2, 10, vec![0; 4]).unwrap();
        let (out, log) = correct_labels("a", &pseudo, &reference, &zero, 0.5).unwrap();
        assert_eq!(out.data(), pseudo.data());
        assert_eq!(log.corrected_count, 0);
        let full = ConfidenceMap::from_counts(2, 2, 10, vec![10; 4]).unwrap();
        let (out, _) = correct_labels("a", &pseudo, &pseudo, &full, 0.0).unwrap();
        assert_eq!(out.data(), pseudo.data());
    }

    #[test]
    fn ground_truth_cannot_be_corrected() {
        let gt = mask(&[0; 4], Provenance::GroundTruth);
        let conf = ConfidenceMap::from_counts(2, 2, 1, vec![1; 4]).unwrap();
        assert!(correct_labels("a", &gt, &gt, &conf, 0.5).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let pseudo = mask(&[0; 4], Provenance::Pseudo);
        let conf = ConfidenceMap::from_counts(1, 4, 1, vec![1; 4]).unwrap();
        assert!(correct_labels("a", &pseudo, &pseudo, &conf, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(bits in proptest::collection::vec((0u8..2, 0u8..2, 0u32..=10), 16), tau in 0.0f64..1.1) {
            let pseudo = LabelMask::new(4, 4, 2, bits.iter().map(|b| b.0).collect(), Provenance::Pseudo).unwrap();
            let reference = LabelMask::new(4, 4, 2, bits.iter().map(|b| b.1).collect(), Provenance::Prediction).unwrap();
            let conf = ConfidenceMap::from_counts(4, 4, 10, bits.iter().map(|b| b.2).collect()).unwrap();
            let (once, _) = correct_labels("x", &pseudo, &reference, &conf, tau).unwrap();
            let (twice, log) = correct_labels("x", &once, &reference, &conf, tau).unwrap();
            prop_assert_eq!(once, twice);
            prop_assert_eq!(log.corrected_count, 0);
        }
    }
}
