//! Adam optimization, the reweighted training loop and the
//! correct-then-retrain pipeline.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::confidence::confidence_map;
use crate::correct::{correct_labels, CorrectionLog};
use crate::data::{
    ensure_same_shape, ConfidenceMap, Dataset, Image, LabelMask, ProbMap, RunConfig,
};
use crate::error::{Error, Result};
use crate::loss::{ce_map, image_weights, pixel_weights, WeightMap};
use crate::net::{
    forward_tape, gradients_from_tapes, BatchItem, Gradients, ModelParams, Tape,
};
use crate::scalar::Scalar;

pub const ADAM_EPS: f64 = 1e-8;
/// Epoch after which the step size decays and beta1 switches.
pub const WARM_EPOCHS: usize = 10;

/// Adam moment accumulators, flat in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let n = params.num_params();
        OptimizerState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

/// One bias-corrected Adam update. Bias correction uses the `beta1` passed
/// to this call.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if !grads.congruent_with(params) || state.m.len() != params.num_params() {
        return Err(Error::DimensionMismatch(
            "gradient or optimizer state does not match the model".into(),
        ));
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let c1 = T::one() - T::lit(beta1.powi(t));
    let c2 = T::one() - T::lit(beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(ADAM_EPS);
    let it = params
        .values_mut()
        .zip(grads.values())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for ((w, g), (m, v)) in it {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Constant `lr0` for the first ten epochs, then linear decay reaching 0 at
/// the last epoch.
pub fn lr_schedule(epoch: usize, lr0: f64, total_epochs: usize) -> f64 {
    if total_epochs <= WARM_EPOCHS || epoch <= WARM_EPOCHS {
        return lr0;
    }
    let left = total_epochs.saturating_sub(epoch) as f64;
    lr0 * left / (total_epochs - WARM_EPOCHS) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub dropped_images: usize,
    pub dropped_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ ((epoch as u64) << 40)
}

/// Seed of the training-time dropout pass for sample `index` in `epoch`.
fn train_pass_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    epoch_seed(seed, epoch) ^ ((index as u64) << 20) ^ 0x7472_6169_6e00
}

/// Keeps a random `h/2 x w/2` window in place and zeroes the rest of the
/// image; the label outside the window becomes class 0.
fn crop_in_place<T: Scalar>(
    image: &Image<T>,
    mask: &LabelMask,
    rng: &mut impl Rng,
) -> Result<(Image<T>, LabelMask)> {
    let (h, w) = (image.height(), image.width());
    let (ch, cw) = (h / 2, w / 2);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let inside = |i: usize| {
        let (r, c) = (i / w, i % w);
        (top..top + ch).contains(&r) && (left..left + cw).contains(&c)
    };
    let pixels = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if inside(i) { v } else { T::zero() })
        .collect();
    let labels = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| if inside(i) { l } else { 0 })
        .collect();
    Ok((
        Image::new(h, w, pixels)?,
        LabelMask::new(h, w, mask.classes(), labels, mask.provenance())?,
    ))
}

/// Pixel and image weights of one mini-batch from its current predictions,
/// honoring the ablation flags.
fn weights_from_probs<T: Scalar>(
    probs: &[&ProbMap<T>],
    masks: &[&LabelMask],
    config: &RunConfig,
) -> Result<(Vec<WeightMap>, Vec<u8>)> {
    let ce: Vec<Vec<T>> = probs
        .iter()
        .zip(masks)
        .map(|(p, m)| ce_map(p, m))
        .collect::<Result<_>>()?;
    let alphas = ce
        .iter()
        .zip(masks)
        .map(|(c, m)| {
            if config.ablate_pixel_weights {
                Ok(WeightMap::ones(m.height(), m.width()))
            } else {
                pixel_weights(c, m.height(), m.width(), config.gamma)
            }
        })
        .collect::<Result<_>>()?;
    let lambdas = if config.ablate_image_weights {
        vec![1u8; masks.len()]
    } else {
        let means: Vec<T> = ce
            .iter()
            .map(|c| c.iter().copied().sum::<T>() / T::from_count(c.len()))
            .collect();
        image_weights(&means, config.beta)?.0
    };
    Ok((alphas, lambdas))
}

/// The weights the trainer would use for this batch under `params`
/// (reweighting active). Dropout follows `config.train_dropout`.
pub fn batch_weights<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[(&Image<T>, &LabelMask)],
    pass_seeds: &[u64],
    config: &RunConfig,
) -> Result<(Vec<WeightMap>, Vec<u8>)> {
    let tapes: Vec<Tape<T>> = batch
        .par_iter()
        .zip(pass_seeds.par_iter())
        .map(|((image, _), &s)| {
            forward_tape(params, image, config.train_dropout.then_some((config.p_drop, s)))
        })
        .collect::<Result<_>>()?;
    let probs: Vec<&ProbMap<T>> = tapes.iter().map(|t| &t.probs).collect();
    let masks: Vec<&LabelMask> = batch.iter().map(|(_, m)| *m).collect();
    weights_from_probs(&probs, &masks, config)
}

/// Trains a freshly initialized network (`init(k, seed)`) on `labels`, which
/// are matched to the dataset samples by position.
pub fn train<T: Scalar>(
    dataset: &Dataset<T>,
    labels: &[LabelMask],
    config: &RunConfig,
    seed: u64,
) -> Result<(ModelParams<T>, TrainHistory)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if labels.len() != dataset.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} label masks for {} samples",
            labels.len(),
            dataset.len()
        )));
    }
    for (s, l) in dataset.samples().iter().zip(labels) {
        ensure_same_shape(&format!("labels for {}", s.id), &s.image, l)?;
        if l.classes() != config.k {
            return Err(Error::DimensionMismatch(format!(
                "labels for {} have {} classes, config k = {}",
                s.id,
                l.classes(),
                config.k
            )));
        }
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }

    let mut params = ModelParams::init(config.k, seed)?;
    let mut state = OptimizerState::new(&params);
    let mut history = TrainHistory::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6372_6f70);
    let (h, w) = (dataset.height(), dataset.width());
    let ones = WeightMap::ones(h, w);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = lr_schedule(epoch, config.lr0, config.epochs);
        let beta1 = if epoch <= WARM_EPOCHS {
            config.beta1_pre
        } else {
            config.beta1_post
        };
        let reweight = epoch >= config.e_start;
        order.shuffle(&mut shuffle_rng);
        let mut record = EpochRecord {
            epoch,
            mean_loss: 0.0,
            lr,
            dropped_images: 0,
            dropped_pixels: 0,
        };
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let inputs: Vec<(Image<T>, LabelMask)> = if config.crop_augment {
                idx.iter()
                    .map(|&i| crop_in_place(&dataset.samples()[i].image, &labels[i], &mut crop_rng))
                    .collect::<Result<_>>()?
            } else {
                idx.iter()
                    .map(|&i| (dataset.samples()[i].image.clone(), labels[i].clone()))
                    .collect()
            };
            let seeds: Vec<u64> = idx
                .iter()
                .map(|&i| train_pass_seed(seed, epoch, i))
                .collect();

            let tapes: Vec<Tape<T>> = inputs
                .par_iter()
                .zip(seeds.par_iter())
                .map(|((image, _), &s)| {
                    let drop = config.train_dropout.then_some((config.p_drop, s));
                    forward_tape(&params, image, drop)
                })
                .collect::<Result<_>>()?;

            let (alphas, lambdas) = if reweight {
                let probs: Vec<&ProbMap<T>> = tapes.iter().map(|t| &t.probs).collect();
                let masks: Vec<&LabelMask> = inputs.iter().map(|(_, m)| m).collect();
                weights_from_probs(&probs, &masks, config)?
            } else {
                (vec![ones.clone(); idx.len()], vec![1u8; idx.len()])
            };
            record.dropped_images += lambdas.iter().filter(|&&l| l == 0).count();
            record.dropped_pixels += alphas.iter().map(WeightMap::dropped).sum::<usize>();

            let items: Vec<BatchItem<'_, T>> = inputs
                .iter()
                .zip(&alphas)
                .zip(&lambdas)
                .zip(&seeds)
                .map(|((((image, mask), alpha), &lambda), &pass_seed)| BatchItem {
                    image,
                    mask,
                    alpha,
                    lambda,
                    pass_seed,
                })
                .collect();
            let tapes: Vec<Option<Tape<T>>> = tapes.into_iter().map(Some).collect();
            let (loss, grads) = gradients_from_tapes(&params, &items, &tapes, config)?;
            adam_step(&mut params, &grads, &mut state, lr, beta1, config.beta2)?;
            record.mean_loss += loss.as_f64();
            batches += 1;
        }
        record.mean_loss /= batches as f64;
        debug!(
            "epoch {epoch}: loss {:.5}, lr {lr:.2e}, dropped images {}, dropped pixels {}",
            record.mean_loss, record.dropped_images, record.dropped_pixels
        );
        history.epochs.push(record);
    }
    Ok((params, history))
}

/// Seed of the Monte-Carlo passes for training image `index` in `round`.
pub fn confidence_seed(seed: u64, round: usize, index: usize) -> u64 {
    (seed << 32) ^ ((round as u64) << 56) ^ ((index as u64) << 20)
}

/// Outputs of one correction step over the whole training set.
#[derive(Clone, Debug)]
pub struct CorrectionRound {
    pub round: usize,
    pub confidence: Vec<ConfidenceMap>,
    pub references: Vec<LabelMask>,
    pub labels: Vec<LabelMask>,
    pub logs: Vec<CorrectionLog>,
}

/// Confidence maps with `model` on every training image followed by
/// correction of `labels`.
pub fn correct_dataset<T: Scalar>(
    dataset: &Dataset<T>,
    labels: &[LabelMask],
    model: &ModelParams<T>,
    config: &RunConfig,
    round: usize,
) -> Result<CorrectionRound> {
    if labels.len() != dataset.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} label masks for {} samples",
            labels.len(),
            dataset.len()
        )));
    }
    let mut out = CorrectionRound {
        round,
        confidence: Vec::with_capacity(labels.len()),
        references: Vec::with_capacity(labels.len()),
        labels: Vec::with_capacity(labels.len()),
        logs: Vec::with_capacity(labels.len()),
    };
    for (i, (sample, label)) in dataset.samples().iter().zip(labels).enumerate() {
        let (conf, reference) = confidence_map(
            model,
            &sample.image,
            config.num_passes,
            config.p_drop,
            confidence_seed(config.seed, round, i),
        )?;
        let (corrected, log) = correct_labels(&sample.id, label, &reference, &conf, config.tau)?;
        out.confidence.push(conf);
        out.references.push(reference);
        out.labels.push(corrected);
        out.logs.push(log);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainedRound<T> {
    pub round: usize,
    pub seed: u64,
    pub model: ModelParams<T>,
    pub history: TrainHistory,
}

/// Everything a pipeline run produced, in execution order.
#[derive(Clone, Debug)]
pub struct PipelineRun<T> {
    /// `trainings[0]` is the model trained on the pseudo labels.
    pub trainings: Vec<TrainedRound<T>>,
    pub corrections: Vec<CorrectionRound>,
    /// Wall-clock seconds per executed stage.
    pub timings: Vec<(String, f64)>,
}

impl<T> PipelineRun<T> {
    pub fn initial_model(&self) -> &ModelParams<T> {
        &self.trainings[0].model
    }

    pub fn final_model(&self) -> &ModelParams<T> {
        &self.trainings.last().expect("at least one training").model
    }

    pub fn final_labels(&self) -> Option<&[LabelMask]> {
        self.corrections.last().map(|c| c.labels.as_slice())
    }
}

/// Round 0 trains on the pseudo labels; each later round corrects the
/// current labels with the previous model and trains a fresh network with
/// seed `config.seed + round`.
pub fn run_pipeline<T: Scalar>(dataset: &Dataset<T>, config: &RunConfig) -> Result<PipelineRun<T>> {
    let mut run = PipelineRun {
        trainings: Vec::new(),
        corrections: Vec::new(),
        timings: Vec::new(),
    };
    let mut labels = dataset.pseudo_labels();
    let clock = Instant::now();
    let (model, history) = train(dataset, &labels, config, config.seed)?;
    run.timings.push(("train_round0".into(), clock.elapsed().as_secs_f64()));
    info!("round 0 trained in {:.1}s", clock.elapsed().as_secs_f64());
    run.trainings.push(TrainedRound {
        round: 0,
        seed: config.seed,
        model,
        history,
    });

    for round in 1..=config.rounds {
        let clock = Instant::now();
        let previous = &run.trainings[round - 1].model;
        let correction = correct_dataset(dataset, &labels, previous, config, round)?;
        run.timings
            .push((format!("correct_round{round}"), clock.elapsed().as_secs_f64()));
        let changed: usize = correction.logs.iter().map(|l| l.corrected_count).sum();
        info!("round {round}: corrected {changed} pixels");
        labels = correction.labels.clone();
        run.corrections.push(correction);
        if config.ablate_retrain {
            break;
        }
        let clock = Instant::now();
        let seed = config.seed.wrapping_add(round as u64);
        let (model, history) = train(dataset, &labels, config, seed)?;
        run.timings
            .push((format!("train_round{round}"), clock.elapsed().as_secs_f64()));
        info!("round {round} trained in {:.1}s", clock.elapsed().as_secs_f64());
        run.trainings.push(TrainedRound {
            round,
            seed,
            model,
            history,
        });
    }
    Ok(run)
}
