//! Finite-difference oracle for the network gradient.
//!
//! The oracle only evaluates the forward pass and the loss module; it never
//! touches the backward code. Where a +-h step crosses a ReLU or max-pool
//! switch (detected through the activation pattern) the step is shrunk
//! until both sides stay in the smooth piece containing the base point.

use labelmend::data::{Image, LabelMask, Provenance, RunConfig};
use labelmend::loss::{total_loss, LossTerm, WeightMap};
use labelmend::net::{backward, forward_with_pattern, BatchItem, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheckCase {
    pub params: ModelParams<f64>,
    pub images: Vec<Image<f64>>,
    pub masks: Vec<LabelMask>,
    pub alphas: Vec<WeightMap>,
    pub lambdas: Vec<u8>,
    pub pass_seeds: Vec<u64>,
    pub config: RunConfig,
}

impl GradCheckCase {
    /// Random net (non-zero biases), `batch` random `size`x`size` images,
    /// random binary alpha and lambda (at least one lambda = 1), mu = 1e-4.
    pub fn random(seed: u64, size: usize, batch: usize, train_dropout: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0xfd00 + seed);
        let mut params = ModelParams::<f64>::init(2, seed).unwrap();
        for i in 0..params.num_params() {
            let v = params.get_flat(i) + rng.random_range(-0.05..0.05);
            params.set_flat(i, v);
        }
        let n = size * size;
        let images = (0..batch)
            .map(|_| Image::new(size, size, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let masks = (0..batch)
            .map(|_| {
                let data = (0..n).map(|_| rng.random_range(0..2u8)).collect();
                LabelMask::new(size, size, 2, data, Provenance::Pseudo).unwrap()
            })
            .collect();
        let alphas = (0..batch)
            .map(|_| {
                let bits = (0..n).map(|_| u8::from(rng.random_bool(0.8))).collect();
                WeightMap::from_bits(size, size, bits).unwrap()
            })
            .collect();
        let mut lambdas: Vec<u8> = (0..batch).map(|_| rng.random_range(0..2u8)).collect();
        if lambdas.iter().all(|l| *l == 0) {
            lambdas[rng.random_range(0..batch)] = 1;
        }
        let pass_seeds = (0..batch).map(|_| rng.random()).collect();
        GradCheckCase {
            params,
            images,
            masks,
            alphas,
            lambdas,
            pass_seeds,
            config: RunConfig {
                l2_mu: 1e-4,
                train_dropout,
                p_drop: 0.2,
                ..RunConfig::default()
            },
        }
    }

    fn items(&self) -> Vec<BatchItem<'_, f64>> {
        (0..self.images.len())
            .map(|i| BatchItem {
                image: &self.images[i],
                mask: &self.masks[i],
                alpha: &self.alphas[i],
                lambda: self.lambdas[i],
                pass_seed: self.pass_seeds[i],
            })
            .collect()
    }

    /// Objective value and concatenated activation pattern at `params`.
    /// Images with lambda = 0 contribute nothing and are not evaluated.
    pub fn evaluate(&self, params: &ModelParams<f64>) -> (f64, Vec<u32>) {
        let active: Vec<usize> = (0..self.images.len()).filter(|&i| self.lambdas[i] == 1).collect();
        let mut probs = Vec::new();
        let mut pattern = Vec::new();
        for &i in &active {
            let (p, pat) = forward_with_pattern(
                params,
                &self.images[i],
                self.config.train_dropout,
                self.config.p_drop,
                self.pass_seeds[i],
            )
            .unwrap();
            probs.push(p);
            pattern.extend(pat);
        }
        let terms: Vec<LossTerm<'_, f64>> = active
            .iter()
            .zip(&probs)
            .map(|(&i, p)| LossTerm {
                probs: p,
                mask: &self.masks[i],
                alpha: &self.alphas[i],
                lambda: 1,
            })
            .collect();
        (total_loss(&terms, params, self.config.l2_mu).unwrap(), pattern)
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    /// Coordinates that needed a smaller step to avoid a kink.
    pub refined: usize,
}

pub fn central_difference(case: &GradCheckCase, coord: usize, h0: f64, base: &[u32]) -> (f64, bool) {
    let mut params = case.params.clone();
    let x = params.get_flat(coord);
    let mut h = h0;
    let mut refined = false;
    loop {
        params.set_flat(coord, x + h);
        let (lp, pp) = case.evaluate(&params);
        params.set_flat(coord, x - h);
        let (lm, pm) = case.evaluate(&params);
        if (pp == base && pm == base) || h < 1e-10 {
            return ((lp - lm) / (2.0 * h), refined);
        }
        refined = true;
        h /= 10.0;
    }
}

pub fn gradient_check(case: &GradCheckCase, h: f64) -> GradCheckReport {
    let (_, grads) = backward(&case.params, &case.items(), &case.config).unwrap();
    let analytic: Vec<f64> = grads.values().collect();
    let (_, base) = case.evaluate(&case.params);
    let mut report = GradCheckReport {
        coords: analytic.len(),
        max_rel_err: 0.0,
        worst_coord: 0,
        refined: 0,
    };
    for (coord, &g) in analytic.iter().enumerate() {
        let (fd, refined) = central_difference(case, coord, h, &base);
        report.refined += usize::from(refined);
        let err = (g - fd).abs() / g.abs().max(1.0);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = coord;
        }
    }
    report
}
