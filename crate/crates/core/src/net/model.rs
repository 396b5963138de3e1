use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    concat, conv_backward, conv_forward, dropout, dropout_backward, max_pool2,
    max_pool2_backward, relu, relu_backward, softmax, split, upsample2, upsample2_backward, Fmap,
};
use super::params::{architecture, Gradients, ModelParams, NUM_CONVS};
use crate::data::{ensure_same_shape, Image, LabelMask, ProbMap, RunConfig};
use crate::error::{Error, Result};
use crate::loss::{image_term_logit_grad, CeNormalization, LossTerm, WeightMap};
use crate::scalar::Scalar;

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Tape<T> {
    /// Input of each convolution after dropout.
    conv_in: Vec<Fmap<T>>,
    keep: Vec<Option<Vec<bool>>>,
    /// Pre-activations of the seven ReLU convolutions.
    pre: Vec<Fmap<T>>,
    pool1: Vec<u32>,
    pool2: Vec<u32>,
    p_drop: f64,
    pub probs: ProbMap<T>,
}

impl<T: Scalar> Tape<T> {
    /// ReLU sign bits followed by pool winner indices.
    fn pattern(&self) -> Vec<u32> {
        self.pre
            .iter()
            .flat_map(|f| f.data.iter().map(|z| u32::from(*z > T::zero())))
            .chain(self.pool1.iter().copied())
            .chain(self.pool2.iter().copied())
            .collect()
    }
}

fn check_dims<T: Scalar>(image: &Image<T>) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {h}x{w}: both dimensions must be positive multiples of 4"
        )));
    }
    Ok(())
}

/// Runs the network, keeping the intermediates for [`backward_tape`].
/// `dropout` is `(p_drop, pass_seed)` when stochastic passes are wanted.
pub(crate) fn forward_tape<T: Scalar>(
    params: &ModelParams<T>,
    image: &Image<T>,
    dropout_cfg: Option<(f64, u64)>,
) -> Result<Tape<T>> {
    check_dims(image)?;
    let arch = architecture(params.classes());
    let (p_drop, seed) = dropout_cfg.unwrap_or((0.0, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv_in = Vec::with_capacity(NUM_CONVS);
    let mut keep = Vec::with_capacity(NUM_CONVS);
    let mut pre = Vec::with_capacity(NUM_CONVS - 1);

    let mut conv = |i: usize, x: &Fmap<T>, conv_in: &mut Vec<Fmap<T>>| -> Fmap<T> {
        let (xd, k) = dropout(x, p_drop, &mut rng);
        let z = conv_forward(&xd, params.kernel(i), params.bias(i), arch[i].ksize, arch[i].cout);
        conv_in.push(xd);
        keep.push(k);
        z
    };

    let x0 = Fmap {
        h: image.height(),
        w: image.width(),
        c: 1,
        data: image.data().to_vec(),
    };
    let z = conv(0, &x0, &mut conv_in);
    let a = relu(&z);
    pre.push(z);
    let z = conv(1, &a, &mut conv_in);
    let skip1 = relu(&z);
    pre.push(z);
    let (p1, pool1) = max_pool2(&skip1);

    let z = conv(2, &p1, &mut conv_in);
    let a = relu(&z);
    pre.push(z);
    let z = conv(3, &a, &mut conv_in);
    let skip2 = relu(&z);
    pre.push(z);
    let (p2, pool2) = max_pool2(&skip2);

    let z = conv(4, &p2, &mut conv_in);
    let b = relu(&z);
    pre.push(z);

    let z = conv(5, &concat(&upsample2(&b), &skip2), &mut conv_in);
    let u1 = relu(&z);
    pre.push(z);
    let z = conv(6, &concat(&upsample2(&u1), &skip1), &mut conv_in);
    let u2 = relu(&z);
    pre.push(z);

    let logits = conv(7, &u2, &mut conv_in);
    let probs = ProbMap::from_raw(logits.h, logits.w, logits.c, softmax(&logits));
    Ok(Tape {
        conv_in,
        keep,
        pre,
        pool1,
        pool2,
        p_drop,
        probs,
    })
}

/// Accumulates parameter gradients given d(loss)/d(logits).
pub(crate) fn backward_tape<T: Scalar>(
    params: &ModelParams<T>,
    tape: &Tape<T>,
    dlogits: Vec<T>,
    grads: &mut Gradients<T>,
) {
    let arch = architecture(params.classes());
    // gradient w.r.t. the (pre-dropout) input of conv i
    let mut conv_back = |i: usize, gout: &[T], need_input: bool| -> Option<Fmap<T>> {
        let (gk, gb) = grads.kernel_bias_mut(i);
        let mut gin = conv_backward(
            &tape.conv_in[i],
            params.kernel(i),
            arch[i].ksize,
            arch[i].cout,
            gout,
            gk,
            gb,
            need_input,
        )?;
        dropout_backward(&mut gin.data, tape.keep[i].as_deref(), tape.p_drop);
        Some(gin)
    };
    let relu_back = |i: usize, mut g: Fmap<T>| -> Fmap<T> {
        relu_backward(&tape.pre[i], &mut g.data);
        g
    };

    let g_u2 = conv_back(7, &dlogits, true).unwrap();
    let g = relu_back(6, g_u2);
    let g_cat = conv_back(6, &g.data, true).unwrap();
    let (g_up1, mut g_skip1) = split(&g_cat, arch[5].cout);

    let g = relu_back(5, upsample2_backward(&g_up1));
    let g_cat = conv_back(5, &g.data, true).unwrap();
    let (g_upb, mut g_skip2) = split(&g_cat, arch[4].cout);

    let g = relu_back(4, upsample2_backward(&g_upb));
    let g_p2 = conv_back(4, &g.data, true).unwrap();
    max_pool2_backward(&g_p2.data, &tape.pool2, &mut g_skip2.data);

    let g = relu_back(3, g_skip2);
    let g_a = conv_back(3, &g.data, true).unwrap();
    let g = relu_back(2, g_a);
    let g_p1 = conv_back(2, &g.data, true).unwrap();
    max_pool2_backward(&g_p1.data, &tape.pool1, &mut g_skip1.data);

    let g = relu_back(1, g_skip1);
    let g_a = conv_back(1, &g.data, true).unwrap();
    let g = relu_back(0, g_a);
    conv_back(0, &g.data, false);
}

/// Per-pixel class probabilities. With `dropout_on`, an independent
/// Bernoulli keep-mask (probability `1 - p_drop`, seeded by `pass_seed`) is
/// applied to the input of every convolution with inverted scaling.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    image: &Image<T>,
    dropout_on: bool,
    p_drop: f64,
    pass_seed: u64,
) -> Result<ProbMap<T>> {
    Ok(forward_tape(params, image, dropout_arg(dropout_on, p_drop, pass_seed)?)?.probs)
}

fn dropout_arg(on: bool, p_drop: f64, seed: u64) -> Result<Option<(f64, u64)>> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::InvalidArgument(format!("p_drop {p_drop} outside [0, 1)")));
    }
    Ok(on.then_some((p_drop, seed)))
}

/// Like [`forward`], also returning the ReLU sign / max-pool winner pattern.
/// Two parameter settings with equal patterns lie in the same smooth piece
/// of the network function.
pub fn forward_with_pattern<T: Scalar>(
    params: &ModelParams<T>,
    image: &Image<T>,
    dropout_on: bool,
    p_drop: f64,
    pass_seed: u64,
) -> Result<(ProbMap<T>, Vec<u32>)> {
    let tape = forward_tape(params, image, dropout_arg(dropout_on, p_drop, pass_seed)?)?;
    let pattern = tape.pattern();
    Ok((tape.probs, pattern))
}

pub fn activation_pattern<T: Scalar>(
    params: &ModelParams<T>,
    image: &Image<T>,
    dropout_on: bool,
    p_drop: f64,
    pass_seed: u64,
) -> Result<Vec<u32>> {
    Ok(forward_with_pattern(params, image, dropout_on, p_drop, pass_seed)?.1)
}

/// Argmax of the deterministic forward pass; ties go to the smaller class.
pub fn predict<T: Scalar>(params: &ModelParams<T>, image: &Image<T>) -> Result<LabelMask> {
    Ok(forward(params, image, false, 0.0, 0)?.argmax())
}

/// One training example with its (constant) weights.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a, T> {
    pub image: &'a Image<T>,
    pub mask: &'a LabelMask,
    pub alpha: &'a WeightMap,
    pub lambda: u8,
    /// Dropout seed, used only when training with dropout.
    pub pass_seed: u64,
}

/// Loss and exact gradient of the reweighted objective over `batch`,
/// including the `mu ||W||^2` term. Per-image gradients are summed in batch
/// order.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[BatchItem<'_, T>],
    config: &RunConfig,
) -> Result<(T, Gradients<T>)> {
    for item in batch {
        ensure_same_shape("batch image vs mask", item.image, item.mask)?;
        ensure_same_shape("batch image vs weights", item.image, item.alpha)?;
        if item.mask.classes() != params.classes() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} classes, model {}",
                item.mask.classes(),
                params.classes()
            )));
        }
    }
    if let Some(first) = batch.first() {
        if batch.iter().any(|b| {
            b.image.height() != first.image.height() || b.image.width() != first.image.width()
        }) {
            return Err(Error::DimensionMismatch("batch images differ in size".into()));
        }
    }
    let drop = |item: &BatchItem<'_, T>| {
        config
            .train_dropout
            .then_some((config.p_drop, item.pass_seed))
    };
    let tapes: Vec<Option<Tape<T>>> = batch
        .par_iter()
        .map(|item| {
            if item.lambda == 0 {
                return Ok(None);
            }
            forward_tape(params, item.image, drop(item)).map(Some)
        })
        .collect::<Result<_>>()?;
    gradients_from_tapes(params, batch, &tapes, config)
}

/// Second half of [`backward`]: loss and gradient given one forward tape per
/// item (`None` is allowed only where `lambda == 0`).
pub(crate) fn gradients_from_tapes<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[BatchItem<'_, T>],
    tapes: &[Option<Tape<T>>],
    config: &RunConfig,
) -> Result<(T, Gradients<T>)> {
    let norm = CeNormalization::from_sum_flag(config.ce_sum);
    let per_image: Vec<Result<(T, Option<Gradients<T>>)>> = batch
        .par_iter()
        .zip(tapes.par_iter())
        .map(|(item, tape)| {
            let tape = match (item.lambda, tape) {
                (0, _) => return Ok((T::zero(), None)),
                (_, Some(t)) => t,
                (_, None) => {
                    return Err(Error::InvalidArgument("missing forward tape".into()))
                }
            };
            let term = LossTerm {
                probs: &tape.probs,
                mask: item.mask,
                alpha: item.alpha,
                lambda: item.lambda,
            };
            let (value, dlogits) = image_term_logit_grad(&term, norm)?;
            let mut g = Gradients::zeros_like(params);
            backward_tape(params, tape, dlogits, &mut g);
            Ok((value, Some(g)))
        })
        .collect();
    let mu = T::lit(config.l2_mu);
    let mut grads = Gradients::zeros_like(params);
    let mut loss = T::zero();
    for r in per_image {
        let (v, g) = r?;
        loss = loss + v;
        if let Some(g) = g {
            grads.add_assign(&g);
        }
    }
    loss = loss + mu * params.sq_norm();
    grads.add_scaled_params(params, T::lit(2.0) * mu);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    fn test_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let data = (0..h * w)
            .map(|i| (((i as u64 + 1) * (seed * 2 + 7919)) % 1000) as f64 / 999.0)
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn forward_outputs_simplex() {
        let params = ModelParams::<f64>::init(3, 1).unwrap();
        let p = forward(&params, &test_image(8, 12, 1), false, 0.0, 0).unwrap();
        for i in 0..p.pixels() {
            let s: f64 = p.pixel(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(p.classes(), 3);
    }

    #[test]
    fn rejects_bad_dims() {
        let params = ModelParams::<f64>::init(2, 1).unwrap();
        let img = Image::zeros(6, 8);
        assert!(matches!(forward(&params, &img, false, 0.0, 0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn dropout_determinism_and_degeneracy() {
        let params = ModelParams::<f64>::init(2, 2).unwrap();
        let img = test_image(8, 8, 3);
        let plain = forward(&params, &img, false, 0.0, 0).unwrap();
        assert_eq!(plain, forward(&params, &img, false, 0.3, 9).unwrap());
        assert_eq!(plain, forward(&params, &img, true, 0.0, 5).unwrap());
        let a = forward(&params, &img, true, 0.3, 5).unwrap();
        assert_eq!(a, forward(&params, &img, true, 0.3, 5).unwrap());
        let distinct = (0..10u64)
            .map(|s| forward(&params, &img, true, 0.3, 100 + s).unwrap())
            .any(|p| p != a);
        assert!(distinct);
    }

    #[test]
    fn predict_argmax_ties_low() {
        let p = ProbMap::new(1, 3, 2, vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1]).unwrap();
        assert_eq!(p.argmax().data(), &[1, 0, 0]);
    }

    #[test]
    fn zero_lambda_batch_gives_regularizer_gradient() {
        let params = ModelParams::<f64>::init(2, 4).unwrap();
        let img = test_image(8, 8, 1);
        let mask = LabelMask::filled(8, 8, 2, 1, Provenance::Pseudo);
        let alpha = WeightMap::ones(8, 8);
        let item = BatchItem { image: &img, mask: &mask, alpha: &alpha, lambda: 0, pass_seed: 0 };
        let cfg = RunConfig { l2_mu: 1e-4, ..RunConfig::default() };
        let (loss, g) = backward(&params, &[item, item], &cfg).unwrap();
        assert_eq!(loss, 1e-4 * params.sq_norm());
        for (gv, w) in g.values().zip(params.values()) {
            assert_eq!(gv, 2.0 * 1e-4 * w);
        }
        let cfg2 = RunConfig { l2_mu: 2e-4, ..cfg };
        let (_, g2) = backward(&params, &[item], &cfg2).unwrap();
        for (a, b) in g.values().zip(g2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-18);
        }
    }

    #[test]
    fn backward_loss_matches_total_loss() {
        let params = ModelParams::<f64>::init(2, 5).unwrap();
        let img = test_image(8, 8, 2);
        let mask = LabelMask::new(8, 8, 2, (0..64).map(|i| (i % 3 == 0) as u8).collect(), Provenance::Pseudo).unwrap();
        let alpha = WeightMap::from_bits(8, 8, (0..64).map(|i| (i % 5 != 0) as u8).collect()).unwrap();
        let cfg = RunConfig::default();
        let item = BatchItem { image: &img, mask: &mask, alpha: &alpha, lambda: 1, pass_seed: 0 };
        let (loss, grads) = backward(&params, &[item], &cfg).unwrap();
        let probs = forward(&params, &img, false, 0.0, 0).unwrap();
        let term = LossTerm { probs: &probs, mask: &mask, alpha: &alpha, lambda: 1 };
        let want = crate::loss::total_loss(&[term], &params, cfg.l2_mu).unwrap();
        assert!((loss - want).abs() < 1e-14);
        assert!(grads.congruent_with(&params));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let params = ModelParams::<f64>::init(2, 5).unwrap();
        let img = test_image(8, 8, 2);
        let mask = LabelMask::filled(4, 8, 2, 0, Provenance::Pseudo);
        let alpha = WeightMap::ones(8, 8);
        let item = BatchItem { image: &img, mask: &mask, alpha: &alpha, lambda: 1, pass_seed: 0 };
        assert!(backward(&params, &[item], &RunConfig::default()).is_err());
    }

    #[test]
    fn f32_network_runs() {
        let params = ModelParams::<f32>::init(2, 1).unwrap();
        let img = Image::<f32>::new(8, 8, (0..64).map(|i| i as f32 / 63.0).collect()).unwrap();
        let p = forward(&params, &img, true, 0.2, 3).unwrap();
        assert!((p.pixel(0).iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}
