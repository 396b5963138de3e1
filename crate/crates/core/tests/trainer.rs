//! Trainer behaviour that spans several modules.

mod common;

use common::oracles::{random_image, random_mask, random_model};
use labelmend::data::{Provenance, RunConfig};
use labelmend::synth::{synthesize, NoiseSpec};
use labelmend::train::{batch_weights, run_pipeline, train};

fn small_config() -> RunConfig {
    RunConfig {
        epochs: 4,
        batch_size: 4,
        num_passes: 5,
        e_start: 2,
        beta: 0.3,
        ..RunConfig::default()
    }
}

#[test]
fn weights_follow_the_current_model() {
    let images: Vec<_> = (0..4).map(|i| random_image(i, 8, 8)).collect();
    let masks: Vec<_> = (0..4).map(|i| random_mask(50 + i, 8, 8, Provenance::Pseudo)).collect();
    let batch: Vec<_> = images.iter().zip(&masks).collect();
    let config = small_config();
    let seeds = [0u64; 4];
    let (alpha_a, lambda_a) = batch_weights(&random_model(1), &batch, &seeds, &config).unwrap();
    let (alpha_b, lambda_b) = batch_weights(&random_model(2), &batch, &seeds, &config).unwrap();
    assert!(alpha_a != alpha_b || lambda_a != lambda_b);
    let (alpha_a2, lambda_a2) = batch_weights(&random_model(1), &batch, &seeds, &config).unwrap();
    assert_eq!((alpha_a, lambda_a), (alpha_a2, lambda_a2));
}

#[test]
fn fully_ablated_trainer_is_plain_supervised_training() {
    let data = synthesize::<f64>(6, 0, 8, 8, &NoiseSpec::default(), 3).unwrap().train;
    let ablated = RunConfig {
        ablate_pixel_weights: true,
        ablate_image_weights: true,
        l2_mu: 0.0,
        e_start: 1,
        ..small_config()
    };
    let plain = RunConfig {
        l2_mu: 0.0,
        e_start: usize::MAX,
        ..small_config()
    };
    let (a, _) = train(&data, &data.pseudo_labels(), &ablated, 5).unwrap();
    let (b, hist) = train(&data, &data.pseudo_labels(), &plain, 5).unwrap();
    assert_eq!(a, b);
    assert!(hist.epochs.iter().all(|e| e.dropped_images == 0 && e.dropped_pixels == 0));
}

#[test]
fn pipeline_rounds_are_sequential_with_fresh_seeds() {
    let data = synthesize::<f64>(6, 0, 8, 8, &NoiseSpec::default(), 4).unwrap().train;
    let config = RunConfig {
        rounds: 2,
        ..small_config()
    };
    let run = run_pipeline(&data, &config).unwrap();
    let seeds: Vec<u64> = run.trainings.iter().map(|t| t.seed).collect();
    assert_eq!(seeds, vec![config.seed, config.seed + 1, config.seed + 2]);
    assert_eq!(run.corrections.len(), 2);
    let rounds: Vec<usize> = run.corrections.iter().map(|c| c.round).collect();
    assert_eq!(rounds, vec![1, 2]);
    // each correction starts from the previous round's labels
    for (c, before) in run.corrections[1].logs.iter().zip(&run.corrections[0].labels) {
        assert!(c.candidates_count <= before.len());
    }
}

#[test]
fn single_precision_training_runs() {
    let data = synthesize::<f32>(4, 0, 8, 8, &NoiseSpec::default(), 6).unwrap().train;
    let (model, hist) = train(&data, &data.pseudo_labels(), &small_config(), 1).unwrap();
    assert_eq!(hist.epochs.len(), 4);
    assert!(model.values().all(f32::is_finite));
}
