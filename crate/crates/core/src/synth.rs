//! Synthetic shapes data with simulated pseudo-label noise.
//!
//! Ground truth is 1-3 filled ellipses or rectangles; images are the
//! box-blurred mask plus uniform noise. Pseudo labels come from
//! [`inject_noise`]: a morphological boundary shift, holes punched into the
//! foreground and spurious foreground blobs, with a per-image choice between
//! a mild and a severe regime.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, EvalSet, Image, LabelMask, Provenance, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Amplitude of the additive uniform image noise.
pub const IMAGE_NOISE: f64 = 0.15;
pub const MIN_FG_FRACTION: f64 = 0.05;
pub const MAX_FG_FRACTION: f64 = 0.6;

const NOISE_SALT: u64 = 0x6e6f_6973_655f_7365;
const TEST_SALT: u64 = 0x7465_7374_5f73_6574;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSpec {
    /// Global strength in [0, 1]; 0 leaves labels untouched.
    pub severity: f64,
    /// Largest erosion/dilation radius of the severe regime at severity 1.
    pub boundary_radius_max: u32,
    /// Most holes punched into a severe image at severity 1.
    pub hole_count_max: u32,
    /// Most false-positive blobs added at severity 1.
    pub blob_count_max: u32,
    /// Probability that an image falls in the severe regime.
    pub severe_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            severity: 0.5,
            boundary_radius_max: 6,
            hole_count_max: 4,
            blob_count_max: 2,
            severe_fraction: 0.3,
        }
    }
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) || !(0.0..=1.0).contains(&self.severe_fraction) {
            return Err(Error::InvalidArgument(
                "severity and severe_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Clean,
    Mild,
    Severe,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Clean => "clean",
            Regime::Mild => "mild",
            Regime::Severe => "severe",
        })
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "size {h}x{w}: both dimensions must be positive multiples of 4"
        )));
    }
    Ok(())
}

fn draw_mask<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<u8> {
    loop {
        let mut mask = vec![0u8; h * w];
        let shapes = rng.random_range(1..=3);
        for _ in 0..shapes {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(0.08..0.3) * h as f64;
            let rx = rng.random_range(0.08..0.3) * w as f64;
            let ellipse = rng.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let inside = if ellipse {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        mask[y * w + x] = 1;
                    }
                }
            }
        }
        let frac = mask.iter().filter(|v| **v == 1).count() as f64 / (h * w) as f64;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            return mask;
        }
    }
}

/// 3x3 box blur averaging only in-bounds neighbours.
fn box_blur(mask: &[u8], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut cnt) = (0.0, 0.0);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    sum += f64::from(mask[ny * w + nx]);
                    cnt += 1.0;
                }
            }
            out[y * w + x] = sum / cnt;
        }
    }
    out
}

/// Generates `n` (image, ground truth) pairs; sample `i` is seeded with
/// `seed ^ i`.
pub fn gen_shapes<T: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<(Image<T>, LabelMask)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    check_size(h, w)?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let mask = draw_mask(h, w, &mut rng);
            let pixels = box_blur(&mask, h, w)
                .into_iter()
                .map(|v| {
                    let noisy = v + rng.random_range(-IMAGE_NOISE..=IMAGE_NOISE);
                    T::lit(noisy.clamp(0.0, 1.0))
                })
                .collect();
            Ok((
                Image::new(h, w, pixels)?,
                LabelMask::new(h, w, 2, mask, Provenance::GroundTruth)?,
            ))
        })
        .collect()
}

fn disk(radius: i64) -> Vec<(i64, i64)> {
    let mut offs = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx <= radius * radius {
                offs.push((dy, dx));
            }
        }
    }
    offs
}

/// Binary dilation (`grow`) or erosion by a disk; out-of-bounds pixels are
/// ignored.
fn morph(mask: &[u8], h: usize, w: usize, radius: i64, grow: bool) -> Vec<u8> {
    if radius == 0 {
        return mask.to_vec();
    }
    let se = disk(radius);
    let mut out = vec![0u8; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hit_fg = false;
            let mut all_fg = true;
            for &(dy, dx) in &se {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                if mask[(ny as usize) * w + nx as usize] == 1 {
                    hit_fg = true;
                } else {
                    all_fg = false;
                }
            }
            let fg = if grow { hit_fg } else { all_fg && mask[(y as usize) * w + x as usize] == 1 };
            out[(y as usize) * w + x as usize] = u8::from(fg);
        }
    }
    out
}

fn stamp(mask: &mut [u8], h: usize, w: usize, cy: usize, cx: usize, radius: i64, value: u8) {
    for (dy, dx) in disk(radius) {
        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
        if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
            mask[(ny as usize) * w + nx as usize] = value;
        }
    }
}

fn pick_pixel<R: Rng>(mask: &[u8], value: u8, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == value).collect();
    (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
}

/// Scales a maximum by severity, keeping at least 1 when severity > 0.
fn scaled(max: u32, severity: f64) -> i64 {
    if severity <= 0.0 || max == 0 {
        0
    } else {
        ((f64::from(max) * severity).round() as i64).max(1)
    }
}

/// Simulated pseudo label plus the regime that produced it.
pub fn inject_noise_with_regime(
    gt: &LabelMask,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<(LabelMask, Regime)> {
    if gt.provenance() != Provenance::GroundTruth {
        return Err(Error::InvalidArgument(
            "noise must be injected into a ground-truth mask".into(),
        ));
    }
    spec.validate()?;
    let out = gt.clone().with_provenance(Provenance::Pseudo);
    if spec.severity == 0.0 {
        return Ok((out, Regime::Clean));
    }
    let (h, w) = (gt.height(), gt.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sev = spec.severity;
    let severe = rng.random_bool(spec.severe_fraction);
    let mut mask = gt.data().to_vec();

    let radius = if severe {
        let rmax = scaled(spec.boundary_radius_max, sev);
        if rmax > 0 {
            rng.random_range(1..=rmax)
        } else {
            0
        }
    } else {
        i64::from(rng.random_bool(sev))
    };
    let grow = rng.random_bool(0.5);
    mask = morph(&mask, h, w, radius, grow);

    if severe {
        let holes = rng.random_range(0..=scaled(spec.hole_count_max, sev));
        let rmax = scaled(4, sev);
        for _ in 0..holes {
            let r = rng.random_range(1..=rmax);
            if let Some(i) = pick_pixel(&mask, 1, &mut rng) {
                stamp(&mut mask, h, w, i / w, i % w, r, 0);
            }
        }
    }
    let blobs = rng.random_range(0..=scaled(spec.blob_count_max, sev));
    let rmax = scaled(3, sev);
    for _ in 0..blobs {
        let r = rng.random_range(1..=rmax);
        if let Some(i) = pick_pixel(&mask, 0, &mut rng) {
            stamp(&mut mask, h, w, i / w, i % w, r, 1);
        }
    }
    let regime = if severe { Regime::Severe } else { Regime::Mild };
    Ok((
        LabelMask::new(h, w, gt.classes(), mask, Provenance::Pseudo)?,
        regime,
    ))
}

pub fn inject_noise(gt: &LabelMask, spec: &NoiseSpec, seed: u64) -> Result<LabelMask> {
    Ok(inject_noise_with_regime(gt, spec, seed)?.0)
}

/// Fraction of pixels whose labels differ.
pub fn disagreement(a: &LabelMask, b: &LabelMask) -> f64 {
    let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
    diff as f64 / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRecord {
    pub id: String,
    pub regime: Regime,
    pub disagreement_rate: f64,
}

/// Training set with noisy labels (and ground truth) plus an optional
/// held-out set.
pub struct Synthetic<T> {
    pub train: Dataset<T>,
    pub test: Option<EvalSet<T>>,
    pub report: Vec<NoiseRecord>,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:04}")
}

pub fn synthesize<T: Scalar>(
    n: usize,
    n_test: usize,
    h: usize,
    w: usize,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Synthetic<T>> {
    let pairs = gen_shapes::<T>(n, h, w, seed)?;
    let mut samples = Vec::with_capacity(n);
    let mut report = Vec::with_capacity(n);
    for (i, (image, gt)) in pairs.into_iter().enumerate() {
        let (pseudo, regime) = inject_noise_with_regime(&gt, noise, (seed ^ NOISE_SALT) ^ i as u64)?;
        let id = sample_id(i);
        report.push(NoiseRecord {
            id: id.clone(),
            regime,
            disagreement_rate: disagreement(&pseudo, &gt),
        });
        samples.push(Sample {
            id,
            image,
            pseudo,
            ground_truth: Some(gt),
        });
    }
    let test = if n_test > 0 {
        let pairs = gen_shapes::<T>(n_test, h, w, seed ^ TEST_SALT)?;
        let (images, ground_truth) = pairs.into_iter().unzip();
        Some(EvalSet {
            ids: (0..n_test).map(sample_id).collect(),
            images,
            ground_truth,
        })
    } else {
        None
    };
    Ok(Synthetic {
        train: Dataset::new(samples)?,
        test,
        report,
    })
}

impl<T: Scalar> Synthetic<T> {
    /// Writes the standard dataset layout, `test/` for the held-out set and
    /// `noise_report.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.train.write(dir)?;
        if let Some(test) = &self.test {
            test.write(dir.join("test"))?;
        }
        let path = dir.join("noise_report.csv");
        let mut wtr = csv::Writer::from_path(&path)?;
        wtr.write_record(["id", "regime", "disagreement_rate"])?;
        for r in &self.report {
            wtr.write_record([
                r.id.clone(),
                r.regime.to_string(),
                format!("{:.6}", r.disagreement_rate),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic() {
        let a = gen_shapes::<f64>(4, 16, 20, 9).unwrap();
        let b = gen_shapes::<f64>(4, 16, 20, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_shapes::<f64>(4, 16, 20, 10).unwrap());
    }

    #[test]
    fn shape_preconditions() {
        assert!(gen_shapes::<f64>(0, 8, 8, 0).is_err());
        assert!(gen_shapes::<f64>(1, 30, 32, 0).is_err());
    }

    #[test]
    fn images_stay_in_unit_range() {
        for (img, _) in gen_shapes::<f64>(10, 32, 32, 3).unwrap() {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_severity_is_identity() {
        let spec = NoiseSpec { severity: 0.0, severe_fraction: 1.0, ..NoiseSpec::default() };
        for (i, (_, gt)) in gen_shapes::<f64>(20, 32, 32, 1).unwrap().iter().enumerate() {
            let noisy = inject_noise(gt, &spec, i as u64).unwrap();
            assert_eq!(noisy.data(), gt.data());
            assert_eq!(noisy.provenance(), Provenance::Pseudo);
        }
    }

    #[test]
    fn noise_requires_ground_truth() {
        let m = LabelMask::filled(8, 8, 2, 0, Provenance::Pseudo);
        assert!(inject_noise(&m, &NoiseSpec::default(), 0).is_err());
    }

    #[test]
    fn noise_is_seeded_and_preserves_shape() {
        let spec = NoiseSpec { severity: 0.9, severe_fraction: 0.5, ..NoiseSpec::default() };
        for (i, (_, gt)) in gen_shapes::<f64>(30, 32, 32, 2).unwrap().iter().enumerate() {
            let a = inject_noise(gt, &spec, i as u64).unwrap();
            assert_eq!(a, inject_noise(gt, &spec, i as u64).unwrap());
            assert!(a.same_shape(gt));
            assert!(a.data().iter().all(|v| *v < 2));
        }
    }

    #[test]
    fn morphology_on_a_square() {
        let (h, w) = (9, 9);
        let mut m = vec![0u8; h * w];
        for y in 3..6 {
            for x in 3..6 {
                m[y * w + x] = 1;
            }
        }
        let eroded = morph(&m, h, w, 1, false);
        assert_eq!(eroded.iter().filter(|v| **v == 1).count(), 1);
        let dilated = morph(&m, h, w, 1, true);
        assert_eq!(dilated.iter().filter(|v| **v == 1).count(), 21);
    }
}
