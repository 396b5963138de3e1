//! Cross-entropy + Dice objective with image- and pixel-level sample
//! selection.
//!
//! Pixel weights drop the highest-loss pixels of an image (everything above
//! the `1 - gamma` quantile); image weights keep only the `1 - beta`
//! fraction of a mini-batch with the smallest mean CE. Both are binary and
//! enter the objective as constants.

use crate::data::{ensure_same_shape, LabelMask, ProbMap};
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::scalar::Scalar;

/// Lower clamp applied to the target-class probability inside the log.
pub const CE_CLAMP: f64 = 1e-12;
/// Added to each Dice denominator.
pub const DICE_EPS: f64 = 1e-12;

/// How per-pixel CE terms are aggregated within an image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CeNormalization {
    /// Divide by the pixel count.
    #[default]
    Mean,
    /// Raw sum over pixels.
    Sum,
}

impl CeNormalization {
    pub fn from_sum_flag(ce_sum: bool) -> Self {
        if ce_sum {
            CeNormalization::Sum
        } else {
            CeNormalization::Mean
        }
    }

    fn factor<T: Scalar>(self, pixels: usize) -> T {
        match self {
            CeNormalization::Mean => T::one() / T::from_count(pixels),
            CeNormalization::Sum => T::one(),
        }
    }
}

/// Binary per-pixel weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl WeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        WeightMap {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument(
                "weight map must hold height*width binary values".into(),
            ));
        }
        Ok(WeightMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn dropped(&self) -> usize {
        self.data.iter().filter(|v| **v == 0).count()
    }
}

impl crate::data::Shaped for WeightMap {
    fn rows(&self) -> usize {
        self.height
    }
    fn cols(&self) -> usize {
        self.width
    }
}

/// Binary per-image weights for one mini-batch, in batch (dataset-id) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageWeights(pub Vec<u8>);

impl ImageWeights {
    pub fn ones(n: usize) -> Self {
        ImageWeights(vec![1; n])
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|v| **v == 1).count()
    }

    pub fn dropped(&self) -> usize {
        self.0.len() - self.kept()
    }
}

/// `ceil(frac * n)`, robust to the representation error of decimal
/// fractions such as 0.8 * 10.
pub fn ceil_fraction(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c.max(0.0) as usize).min(n)
}

pub fn ce_pixel<T: Scalar>(p: &[T], g: usize) -> T {
    let pg = p[g].max(T::lit(CE_CLAMP)).min(T::one());
    -pg.ln()
}

/// Per-pixel CE grid, row-major.
pub fn ce_map<T: Scalar>(probs: &ProbMap<T>, mask: &LabelMask) -> Result<Vec<T>> {
    check_pair(probs, mask)?;
    Ok(mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| ce_pixel(probs.pixel(i), usize::from(g)))
        .collect())
}

/// Mean pixel CE of one image.
pub fn ce_image<T: Scalar>(probs: &ProbMap<T>, mask: &LabelMask) -> Result<T> {
    let map = ce_map(probs, mask)?;
    Ok(map.iter().copied().sum::<T>() / T::from_count(map.len()))
}

struct DiceStats<T> {
    inter: Vec<T>,
    denom: Vec<T>,
}

fn dice_stats<T: Scalar>(probs: &ProbMap<T>, mask: &LabelMask) -> DiceStats<T> {
    let k = probs.classes();
    let mut inter = vec![T::zero(); k];
    let mut psq = vec![T::zero(); k];
    let mut gcount = vec![0usize; k];
    for (i, &g) in mask.data().iter().enumerate() {
        let px = probs.pixel(i);
        for l in 0..k {
            psq[l] = psq[l] + px[l] * px[l];
        }
        let g = usize::from(g);
        inter[g] = inter[g] + px[g];
        gcount[g] += 1;
    }
    let denom = psq
        .iter()
        .zip(&gcount)
        .map(|(&p2, &gc)| p2 + T::from_count(gc) + T::lit(DICE_EPS))
        .collect();
    DiceStats { inter, denom }
}

/// Soft Dice loss with squared denominators, averaged over classes.
pub fn dice_loss<T: Scalar>(probs: &ProbMap<T>, mask: &LabelMask) -> Result<T> {
    check_pair(probs, mask)?;
    let s = dice_stats(probs, mask);
    let k = T::from_count(probs.classes());
    let sum: T = s
        .inter
        .iter()
        .zip(&s.denom)
        .map(|(&i, &d)| T::lit(2.0) * i / d)
        .sum();
    Ok(T::one() - sum / k)
}

/// alpha(x) = 0 iff the pixel loss is strictly above the value at ascending
/// rank `ceil((1 - gamma) n)`.
pub fn pixel_weights<T: Scalar>(
    losses: &[T],
    height: usize,
    width: usize,
    gamma: f64,
) -> Result<WeightMap> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty loss grid".into()));
    }
    if losses.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "loss grid has {} values for {height}x{width}",
            losses.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    let n = losses.len();
    let rank = ceil_fraction(1.0 - gamma, n).max(1);
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
    let q = sorted[rank - 1];
    let data = losses.iter().map(|&l| u8::from(l <= q)).collect();
    Ok(WeightMap {
        height,
        width,
        data,
    })
}

/// lambda = 1 for the `ceil((1 - beta) B)` images with the smallest loss;
/// ties go to the earlier position (dataset-id order).
pub fn image_weights<T: Scalar>(batch_ce: &[T], beta: f64) -> Result<ImageWeights> {
    if batch_ce.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1)")));
    }
    let keep = ceil_fraction(1.0 - beta, batch_ce.len());
    let mut order: Vec<usize> = (0..batch_ce.len()).collect();
    // stable sort keeps earlier ids ahead on ties
    order.sort_by(|&a, &b| batch_ce[a].as_f64().total_cmp(&batch_ce[b].as_f64()));
    let mut w = vec![0u8; batch_ce.len()];
    for &i in &order[..keep] {
        w[i] = 1;
    }
    Ok(ImageWeights(w))
}

/// One image's contribution to the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm<'a, T> {
    pub probs: &'a ProbMap<T>,
    pub mask: &'a LabelMask,
    pub alpha: &'a WeightMap,
    pub lambda: u8,
}

fn check_pair<T>(probs: &ProbMap<T>, mask: &LabelMask) -> Result<()>
where
    T: Scalar,
{
    ensure_same_shape("probabilities vs mask", probs, mask)?;
    if probs.classes() != mask.classes() {
        return Err(Error::DimensionMismatch(format!(
            "probabilities have {} classes, mask has {}",
            probs.classes(),
            mask.classes()
        )));
    }
    Ok(())
}

fn check_term<T: Scalar>(t: &LossTerm<'_, T>) -> Result<()> {
    check_pair(t.probs, t.mask)?;
    ensure_same_shape("probabilities vs weights", t.probs, t.alpha)
}

/// Unscaled image term `(norm) sum alpha(x) CE(x) + Dice`.
pub fn image_term<T: Scalar>(term: &LossTerm<'_, T>, norm: CeNormalization) -> Result<T> {
    check_term(term)?;
    let ce = ce_map(term.probs, term.mask)?;
    let weighted: T = ce
        .iter()
        .zip(term.alpha.data())
        .filter(|(_, a)| **a == 1)
        .map(|(c, _)| *c)
        .sum();
    Ok(weighted * norm.factor(ce.len()) + dice_loss(term.probs, term.mask)?)
}

/// `sum lambda [ (1/n) sum alpha CE + Dice ] + mu ||W||^2`.
pub fn total_loss<T: Scalar>(
    batch: &[LossTerm<'_, T>],
    params: &ModelParams<T>,
    mu: T,
) -> Result<T> {
    total_loss_with(batch, params, mu, CeNormalization::Mean)
}

pub fn total_loss_with<T: Scalar>(
    batch: &[LossTerm<'_, T>],
    params: &ModelParams<T>,
    mu: T,
    norm: CeNormalization,
) -> Result<T> {
    let mut total = T::zero();
    for term in batch {
        check_term(term)?;
        if term.lambda != 0 {
            total = total + image_term(term, norm)?;
        }
    }
    Ok(total + mu * params.sq_norm())
}

/// Value of the (lambda-scaled) image term and its gradient with respect to
/// the pre-softmax logits, pixel-major like the probabilities.
pub(crate) fn image_term_logit_grad<T: Scalar>(
    term: &LossTerm<'_, T>,
    norm: CeNormalization,
) -> Result<(T, Vec<T>)> {
    check_term(term)?;
    let probs = term.probs;
    let k = probs.classes();
    let n = probs.pixels();
    if term.lambda == 0 {
        return Ok((T::zero(), vec![T::zero(); n * k]));
    }
    let value = image_term(term, norm)?;
    let s = dice_stats(probs, term.mask);
    let ce_scale: T = norm.factor(n);
    let two = T::lit(2.0);
    let dice_scale = -two / T::from_count(k);
    let clamp = T::lit(CE_CLAMP);
    let mut grad = vec![T::zero(); n * k];
    let mut u = vec![T::zero(); k];
    for i in 0..n {
        let px = probs.pixel(i);
        let g = usize::from(term.mask.data()[i]);
        // d Dice / d p_l
        for l in 0..k {
            let gl = if l == g { T::one() } else { T::zero() };
            u[l] = dice_scale * (gl / s.denom[l] - two * s.inter[l] * px[l] / (s.denom[l] * s.denom[l]));
        }
        let dot: T = (0..k).map(|l| px[l] * u[l]).sum();
        let out = &mut grad[i * k..(i + 1) * k];
        for l in 0..k {
            out[l] = px[l] * (u[l] - dot);
        }
        if term.alpha.data()[i] == 1 && px[g] > clamp {
            for l in 0..k {
                let gl = if l == g { T::one() } else { T::zero() };
                out[l] = out[l] + ce_scale * (px[l] - gl);
            }
        }
    }
    Ok((value, grad))
}
