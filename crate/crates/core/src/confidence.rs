//! Monte-Carlo dropout confidence.
//!
//! The reference prediction comes from the deterministic network; each of
//! `num_passes` dropout passes votes 1 at a pixel when its argmax agrees
//! with the reference. The confidence score is the fraction of agreeing
//! passes.

use rayon::prelude::*;

use crate::data::{ConfidenceMap, Image, LabelMask};
use crate::error::{Error, Result};
use crate::net::{forward, predict, ModelParams};
use crate::scalar::Scalar;

/// Seed of dropout pass `j` (1-based).
pub fn pass_seed(seed: u64, j: u32) -> u64 {
    seed ^ u64::from(j)
}

/// Returns the confidence map and the no-dropout reference prediction.
pub fn confidence_map<T: Scalar>(
    params: &ModelParams<T>,
    image: &Image<T>,
    num_passes: u32,
    p_drop: f64,
    seed: u64,
) -> Result<(ConfidenceMap, LabelMask)> {
    if num_passes == 0 {
        return Err(Error::InvalidArgument("num_passes must be >= 1".into()));
    }
    let reference = predict(params, image)?;
    let votes: Vec<Vec<bool>> = (1..=num_passes)
        .into_par_iter()
        .map(|j| {
            let pass = forward(params, image, true, p_drop, pass_seed(seed, j))?.argmax();
            Ok(pass
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| a == b)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u32; reference.len()];
    for pass in &votes {
        for (c, &agree) in counts.iter_mut().zip(pass) {
            *c += u32::from(agree);
        }
    }
    let map = ConfidenceMap::from_counts(image.height(), image.width(), num_passes, counts)?;
    Ok((map, reference))
}
