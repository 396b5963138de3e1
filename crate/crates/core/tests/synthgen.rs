//! Corpus-level properties of the synthetic generator, checked by counting
//! pixels directly rather than through the library's own helpers.

use labelmend::data::{LabelMask, Provenance};
use labelmend::synth::{gen_shapes, inject_noise, NoiseSpec};
use proptest::prelude::*;

fn fg_fraction(mask: &LabelMask) -> f64 {
    let fg = mask.data().iter().filter(|&&v| v == 1).count();
    fg as f64 / mask.data().len() as f64
}

fn mismatch(a: &LabelMask, b: &LabelMask) -> f64 {
    let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
    diff as f64 / a.data().len() as f64
}

fn spec(severity: f64) -> NoiseSpec {
    NoiseSpec {
        severity,
        severe_fraction: 0.3,
        ..NoiseSpec::default()
    }
}

#[test]
fn foreground_fraction_over_a_thousand_samples() {
    let samples = gen_shapes::<f64>(1000, 32, 32, 7).unwrap();
    for (i, (_, gt)) in samples.iter().enumerate() {
        let f = fg_fraction(gt);
        assert!((0.05..=0.6).contains(&f), "sample {i}: fraction {f}");
    }
}

#[test]
fn mean_disagreement_at_half_severity_is_in_band() {
    let samples = gen_shapes::<f64>(1000, 32, 32, 11).unwrap();
    let noise = spec(0.5);
    let mean: f64 = samples
        .iter()
        .enumerate()
        .map(|(i, (_, gt))| mismatch(&inject_noise(gt, &noise, 1000 + i as u64).unwrap(), gt))
        .sum::<f64>()
        / samples.len() as f64;
    println!("mean disagreement at severity 0.5: {mean:.4}");
    assert!((0.05..=0.25).contains(&mean), "{mean}");
}

#[test]
fn disagreement_grows_with_severity() {
    let samples = gen_shapes::<f64>(500, 32, 32, 13).unwrap();
    let mean_at = |sev: f64| {
        let noise = spec(sev);
        samples
            .iter()
            .enumerate()
            .map(|(i, (_, gt))| mismatch(&inject_noise(gt, &noise, i as u64).unwrap(), gt))
            .sum::<f64>()
            / samples.len() as f64
    };
    let (low, high) = (mean_at(0.2), mean_at(0.8));
    assert!(high >= low, "0.2 -> {low}, 0.8 -> {high}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_severity_returns_ground_truth(seed in any::<u64>(), n in 1usize..4) {
        for (i, (_, gt)) in gen_shapes::<f64>(n, 16, 16, seed).unwrap().iter().enumerate() {
            let noisy = inject_noise(gt, &spec(0.0), seed ^ i as u64).unwrap();
            prop_assert_eq!(noisy.data(), gt.data());
            prop_assert_eq!(noisy.provenance(), Provenance::Pseudo);
        }
    }

    #[test]
    fn noise_keeps_shape_and_classes(seed in any::<u64>(), sev in 0.0f64..=1.0, frac in 0.0f64..=1.0) {
        let (_, gt) = gen_shapes::<f64>(1, 16, 20, seed).unwrap().remove(0);
        let noise = NoiseSpec { severity: sev, severe_fraction: frac, ..NoiseSpec::default() };
        let noisy = inject_noise(&gt, &noise, seed.rotate_left(7)).unwrap();
        prop_assert_eq!((noisy.height(), noisy.width(), noisy.classes()), (16, 20, 2));
        prop_assert!(noisy.data().iter().all(|&v| v < 2));
        prop_assert_eq!(inject_noise(&gt, &noise, seed.rotate_left(7)).unwrap(), noisy);
    }

    #[test]
    fn generation_is_seed_determined(seed in any::<u64>()) {
        let a = gen_shapes::<f64>(2, 8, 12, seed).unwrap();
        let b = gen_shapes::<f64>(2, 8, 12, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
