//! Independent re-implementations used as test oracles.

use labelmend::data::{Image, LabelMask, Provenance};
use labelmend::net::{forward, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs passes 1..=num one after another with seed `seed ^ j` and tallies
/// agreement with the dropout-free argmax.
pub fn recount_confidence(
    params: &ModelParams<f64>,
    image: &Image<f64>,
    num: u32,
    p_drop: f64,
    seed: u64,
) -> (Vec<u32>, Vec<u8>) {
    let reference = forward(params, image, false, p_drop, 0).unwrap();
    let ref_labels: Vec<u8> = (0..reference.pixels())
        .map(|i| first_max(reference.pixel(i)))
        .collect();
    let mut counts = vec![0u32; ref_labels.len()];
    for j in 1..=num {
        let pass = forward(params, image, true, p_drop, seed ^ u64::from(j)).unwrap();
        for (i, c) in counts.iter_mut().enumerate() {
            if first_max(pass.pixel(i)) == ref_labels[i] {
                *c += 1;
            }
        }
    }
    (counts, ref_labels)
}

fn first_max(v: &[f64]) -> u8 {
    let mut best = 0;
    for (l, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = l;
        }
    }
    best as u8
}

/// Pixel-by-pixel statement of the correction rule.
pub fn expected_correction(pseudo: &[u8], reference: &[u8], cs: &[f64], tau: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(pseudo.len());
    for i in 0..pseudo.len() {
        if pseudo[i] != reference[i] && cs[i] >= tau {
            out.push(reference[i]);
        } else {
            out.push(pseudo[i]);
        }
    }
    out
}

/// Model with He init plus a small uniform perturbation, so biases are
/// non-zero.
pub fn random_model(seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut p = ModelParams::<f64>::init(2, seed).unwrap();
    for v in p.values_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    p
}

pub fn random_image(seed: u64, h: usize, w: usize) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn random_mask(seed: u64, h: usize, w: usize, provenance: Provenance) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMask::new(h, w, 2, (0..h * w).map(|_| rng.random_range(0..2u8)).collect(), provenance)
        .unwrap()
}
