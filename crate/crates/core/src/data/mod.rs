//! Domain types shared by every stage of the pipeline, plus raster,
//! dataset and config I/O.

mod config;
mod dataset;
pub mod pgm;

pub use config::{parse_config, RunConfig};
pub use dataset::{load_dataset, load_eval_set, load_masks, save_masks, Dataset, EvalSet, Sample};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Grayscale intensity grid, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    /// Byte quantization used by the PGM writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Role of a label mask within the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    GroundTruth,
    Pseudo,
    Corrected,
    Prediction,
}

/// Per-pixel class indices in `0..classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
    provenance: Provenance,
}

impl LabelMask {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        if !(2..=256).contains(&classes) {
            return Err(Error::InvalidArgument(format!(
                "class count {classes} outside 2..=256"
            )));
        }
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| usize::from(**v) >= classes) {
            return Err(Error::InvalidArgument(format!(
                "class index {v} out of range for k = {classes}"
            )));
        }
        Ok(LabelMask {
            height,
            width,
            classes,
            data,
            provenance,
        })
    }

    pub fn filled(
        height: usize,
        width: usize,
        classes: usize,
        value: u8,
        provenance: Provenance,
    ) -> Self {
        assert!(usize::from(value) < classes);
        LabelMask {
            height,
            width,
            classes,
            data: vec![value; height * width],
            provenance,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn same_shape<A: Shaped + ?Sized>(&self, other: &A) -> bool {
        self.height == other.rows() && self.width == other.cols()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// Anything laid out on an H x W pixel grid.
pub trait Shaped {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
}

impl<T> Shaped for Image<T> {
    fn rows(&self) -> usize {
        self.height
    }
    fn cols(&self) -> usize {
        self.width
    }
}

impl Shaped for LabelMask {
    fn rows(&self) -> usize {
        self.height
    }
    fn cols(&self) -> usize {
        self.width
    }
}

impl<T> Shaped for ProbMap<T> {
    fn rows(&self) -> usize {
        self.height
    }
    fn cols(&self) -> usize {
        self.width
    }
}

impl Shaped for ConfidenceMap {
    fn rows(&self) -> usize {
        self.height
    }
    fn cols(&self) -> usize {
        self.width
    }
}

pub(crate) fn ensure_same_shape<A: Shaped + ?Sized, B: Shaped + ?Sized>(
    what: &str,
    a: &A,
    b: &B,
) -> Result<()> {
    if a.rows() == b.rows() && a.cols() == b.cols() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )))
    }
}

/// Per-pixel class probabilities; each pixel's `classes`-vector is
/// contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    /// Builds a map, checking every pixel lies on the simplex within 1e-9.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(Error::DimensionMismatch(format!(
                "prob map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        let tol = T::lit(1e-9);
        for px in data.chunks_exact(classes) {
            let sum: T = px.iter().copied().sum();
            if (sum - T::one()).abs() > tol || px.iter().any(|p| *p < T::zero() || *p > T::one()) {
                return Err(Error::InvalidArgument(
                    "probability vector off the simplex".into(),
                ));
            }
        }
        Ok(Self::from_raw(height, width, classes, data))
    }

    pub(crate) fn from_raw(height: usize, width: usize, classes: usize, data: Vec<T>) -> Self {
        ProbMap {
            height,
            width,
            classes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Probability vector of pixel `idx` (row-major index).
    pub fn pixel(&self, idx: usize) -> &[T] {
        &self.data[idx * self.classes..(idx + 1) * self.classes]
    }

    /// Per-pixel argmax; ties go to the smaller class index.
    pub fn argmax(&self) -> LabelMask {
        let data = self
            .data
            .chunks_exact(self.classes)
            .map(|px| argmax(px) as u8)
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            classes: self.classes,
            data,
            provenance: Provenance::Prediction,
        }
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax<T: PartialOrd>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// MC-dropout confidence: per-pixel agreement counts out of `num_passes`.
///
/// Stored as integer counts so every value is an exact multiple of
/// `1 / num_passes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    num_passes: u32,
    counts: Vec<u32>,
}

impl ConfidenceMap {
    pub fn from_counts(
        height: usize,
        width: usize,
        num_passes: u32,
        counts: Vec<u32>,
    ) -> Result<Self> {
        if num_passes == 0 {
            return Err(Error::InvalidArgument("num_passes must be >= 1".into()));
        }
        if counts.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "confidence map {height}x{width} needs {} counts, got {}",
                height * width,
                counts.len()
            )));
        }
        if counts.iter().any(|c| *c > num_passes) {
            return Err(Error::InvalidArgument(
                "agreement count exceeds num_passes".into(),
            ));
        }
        Ok(ConfidenceMap {
            height,
            width,
            num_passes,
            counts,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_passes(&self) -> u32 {
        self.num_passes
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// CS at row-major index `idx`.
    pub fn score(&self, idx: usize) -> f64 {
        f64::from(self.counts[idx]) / f64::from(self.num_passes)
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.score(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.counts.len())
            .map(|i| (self.score(i) * 255.0).round() as u8)
            .collect()
    }
}
