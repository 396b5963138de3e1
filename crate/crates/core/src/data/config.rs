use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// Hyperparameters for a training / correction run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    /// Number of classes.
    pub k: usize,
    /// Forget rate: fraction of each mini-batch dropped at image level.
    pub beta: f64,
    /// Pixel-drop quantile: the top `gamma` fraction of pixel losses per image is ignored.
    pub gamma: f64,
    /// Monte-Carlo dropout passes for confidence estimation.
    pub num_passes: u32,
    /// First epoch (1-based) at which reweighting is active.
    pub e_start: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Adam first-moment decay up to and including epoch 10.
    pub beta1_pre: f64,
    /// Adam first-moment decay after epoch 10.
    pub beta1_post: f64,
    pub beta2: f64,
    /// Coefficient of the squared L2 norm of all parameters.
    pub l2_mu: f64,
    /// Confidence threshold for label correction (`CS >= tau`).
    pub tau: f64,
    pub p_drop: f64,
    /// Keep dropout active during training passes.
    pub train_dropout: bool,
    /// Correction + retraining rounds after the initial training.
    pub rounds: usize,
    pub seed: u64,
    pub ablate_pixel_weights: bool,
    pub ablate_image_weights: bool,
    pub ablate_retrain: bool,
    /// Sum pixel losses per image instead of averaging them.
    pub ce_sum: bool,
    /// Random half-width crop augmentation.
    pub crop_augment: bool,
    /// Also train a reference model on ground truth (`pred_clean` stage).
    pub train_clean: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 2,
            beta: 0.10,
            gamma: 0.05,
            num_passes: 100,
            e_start: 10,
            epochs: 60,
            batch_size: 8,
            lr0: 0.001,
            beta1_pre: 0.9,
            beta1_post: 0.1,
            beta2: 0.999,
            l2_mu: 1e-4,
            tau: 0.8,
            p_drop: 0.1,
            train_dropout: false,
            rounds: 1,
            seed: 42,
            ablate_pixel_weights: false,
            ablate_image_weights: false,
            ablate_retrain: false,
            ce_sum: false,
            crop_augment: false,
            train_clean: false,
        }
    }
}

fn parse_value<V: FromStr>(path: &Path, key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Config {
        path: path.into(),
        key: key.into(),
        reason: format!("cannot parse {raw:?}"),
    })
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. `path` is only
    /// used in error messages.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| Error::Config {
                path: path.into(),
                key: line.into(),
                reason: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), raw.trim(), path)?;
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// Assigns one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, raw: &str, path: &Path) -> Result<()> {
        macro_rules! assign {
            ($($name:ident),* $(,)?) => {
                match key {
                    $(stringify!($name) => self.$name = parse_value(path, key, raw)?,)*
                    _ => {
                        return Err(Error::Config {
                            path: path.into(),
                            key: key.into(),
                            reason: "unknown key".into(),
                        })
                    }
                }
            };
        }
        assign!(
            k,
            beta,
            gamma,
            num_passes,
            e_start,
            epochs,
            batch_size,
            lr0,
            beta1_pre,
            beta1_post,
            beta2,
            l2_mu,
            tau,
            p_drop,
            train_dropout,
            rounds,
            seed,
            ablate_pixel_weights,
            ablate_image_weights,
            ablate_retrain,
            ce_sum,
            crop_augment,
            train_clean,
        );
        Ok(())
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let fail = |key: &str, reason: &str| {
            Err(Error::Config {
                path: path.into(),
                key: key.into(),
                reason: reason.into(),
            })
        };
        let unit = |v: f64| (0.0..1.0).contains(&v);
        for (key, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("p_drop", self.p_drop),
            ("beta1_pre", self.beta1_pre),
            ("beta1_post", self.beta1_post),
            ("beta2", self.beta2),
        ] {
            if !unit(v) {
                return fail(key, "must lie in [0, 1)");
            }
        }
        // tau above 1 is allowed and disables correction
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return fail("tau", "must be a finite value >= 0");
        }
        if !(2..=256).contains(&self.k) {
            return fail("k", "must lie in 2..=256");
        }
        if self.num_passes == 0 {
            return fail("num_passes", "must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return fail("lr0", "must be a finite value >= 0");
        }
        if !(self.l2_mu.is_finite() && self.l2_mu >= 0.0) {
            return fail("l2_mu", "must be a finite value >= 0");
        }
        Ok(())
    }

    /// Serializes every key in the format accepted by [`parse_config`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($($name:ident),* $(,)?) => {
                $(let _ = writeln!(s, "{} = {}", stringify!($name), self.$name);)*
            };
        }
        emit!(
            k,
            beta,
            gamma,
            num_passes,
            e_start,
            epochs,
            batch_size,
            lr0,
            beta1_pre,
            beta1_post,
            beta2,
            l2_mu,
            tau,
            p_drop,
            train_dropout,
            rounds,
            seed,
            ablate_pixel_weights,
            ablate_image_weights,
            ablate_retrain,
            ce_sum,
            crop_augment,
            train_clean,
        );
        s
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse_str(&text, path)
}
