use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::{read_image, read_mask, write_pgm};
use super::{Image, LabelMask, Provenance, Shaped};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Image<T>,
    pub pseudo: LabelMask,
    pub ground_truth: Option<LabelMask>,
}

/// Training set. Samples are kept sorted by id; that order is the
/// tie-break order for every ranking in the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Sorts by id and checks uniqueness and shape homogeneity.
    pub fn new(mut samples: Vec<Sample<T>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in samples.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample id {:?}",
                    pair[0].id
                )));
            }
        }
        let (h, w) = (samples[0].image.height(), samples[0].image.width());
        let k = samples[0].pseudo.classes();
        for s in &samples {
            let masks = std::iter::once(&s.pseudo).chain(s.ground_truth.as_ref());
            for m in masks {
                if m.classes() != k || !m.same_shape(&s.image) {
                    return Err(Error::DimensionMismatch(format!(
                        "sample {:?}: mask {}x{} (k={}) vs image {}x{} (k={k})",
                        s.id,
                        m.height(),
                        m.width(),
                        m.classes(),
                        s.image.height(),
                        s.image.width()
                    )));
                }
            }
            if s.image.height() != h || s.image.width() != w {
                return Err(Error::DimensionMismatch(format!(
                    "sample {:?} is {}x{}, dataset is {h}x{w}",
                    s.id,
                    s.image.height(),
                    s.image.width()
                )));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn height(&self) -> usize {
        self.samples[0].image.height()
    }

    pub fn width(&self) -> usize {
        self.samples[0].image.width()
    }

    pub fn classes(&self) -> usize {
        self.samples[0].pseudo.classes()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn pseudo_labels(&self) -> Vec<LabelMask> {
        self.samples.iter().map(|s| s.pseudo.clone()).collect()
    }

    /// Ground truth for every sample, or `None` if any is missing.
    pub fn ground_truth(&self) -> Option<Vec<&LabelMask>> {
        self.samples.iter().map(|s| s.ground_truth.as_ref()).collect()
    }

    /// Writes `images/`, `labels/` and (when present) `ground_truth/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "labels"] {
            create_dir(&dir.join(sub))?;
        }
        if self.samples.iter().any(|s| s.ground_truth.is_some()) {
            create_dir(&dir.join("ground_truth"))?;
        }
        for s in &self.samples {
            let file = format!("{}.pgm", s.id);
            write_pgm(&s.image, dir.join("images").join(&file))?;
            write_pgm(&s.pseudo, dir.join("labels").join(&file))?;
            if let Some(gt) = &s.ground_truth {
                write_pgm(gt, dir.join("ground_truth").join(&file))?;
            }
        }
        Ok(())
    }
}

/// Held-out images with clean ground truth, used only for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet<T> {
    pub ids: Vec<String>,
    pub images: Vec<Image<T>>,
    pub ground_truth: Vec<LabelMask>,
}

impl<T: Scalar> EvalSet<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(&dir.join("images"))?;
        create_dir(&dir.join("ground_truth"))?;
        for ((id, img), gt) in self.ids.iter().zip(&self.images).zip(&self.ground_truth) {
            let file = format!("{id}.pgm");
            write_pgm(img, dir.join("images").join(&file))?;
            write_pgm(gt, dir.join("ground_truth").join(&file))?;
        }
        Ok(())
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `<id> -> path` for every `*.pgm` in `dir`, sorted by id.
fn list_pgm(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Loads `dir/images/<id>.pgm` with matching `dir/labels/<id>.pgm` and
/// optional `dir/ground_truth/<id>.pgm`.
pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>, classes: usize) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let images = list_pgm(&dir.join("images"))?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(dir.join("images")));
    }
    let gt_dir = dir.join("ground_truth");
    let has_gt = gt_dir.is_dir();
    let mut samples = Vec::with_capacity(images.len());
    for (id, img_path) in images {
        let file = format!("{id}.pgm");
        let label_path = dir.join("labels").join(&file);
        if !label_path.is_file() {
            return Err(Error::MissingLabel {
                path: label_path,
                id,
            });
        }
        let image = read_image(&img_path)?;
        let pseudo = read_mask(&label_path, classes, Provenance::Pseudo)?;
        let gt_path = gt_dir.join(&file);
        let ground_truth = if has_gt && gt_path.is_file() {
            Some(read_mask(&gt_path, classes, Provenance::GroundTruth)?)
        } else {
            None
        };
        samples.push(Sample {
            id,
            image,
            pseudo,
            ground_truth,
        });
    }
    Dataset::new(samples)
}

/// Loads a held-out set laid out as `dir/images/` + `dir/ground_truth/`.
pub fn load_eval_set<T: Scalar>(dir: impl AsRef<Path>, classes: usize) -> Result<EvalSet<T>> {
    let dir = dir.as_ref();
    let images = list_pgm(&dir.join("images"))?;
    if images.is_empty() {
        return Err(Error::EmptyDataset(dir.join("images")));
    }
    let mut set = EvalSet {
        ids: Vec::new(),
        images: Vec::new(),
        ground_truth: Vec::new(),
    };
    for (id, img_path) in images {
        let gt_path = dir.join("ground_truth").join(format!("{id}.pgm"));
        if !gt_path.is_file() {
            return Err(Error::MissingLabel { path: gt_path, id });
        }
        let image: Image<T> = read_image(&img_path)?;
        let gt = read_mask(&gt_path, classes, Provenance::GroundTruth)?;
        super::ensure_same_shape(&id, &image, &gt)?;
        if let Some(first) = set.images.first() {
            if first.rows() != image.rows() || first.cols() != image.cols() {
                return Err(Error::DimensionMismatch(format!(
                    "eval image {id:?} differs in size from the rest"
                )));
            }
        }
        set.ids.push(id);
        set.images.push(image);
        set.ground_truth.push(gt);
    }
    Ok(set)
}

/// Writes one mask per id as `<dir>/<id>.pgm`.
pub fn save_masks<'a>(
    dir: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a LabelMask)>,
) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    for (id, mask) in entries {
        write_pgm(mask, dir.join(format!("{id}.pgm")))?;
    }
    Ok(())
}

/// Reads `<dir>/<id>.pgm` for every id, in the given order.
pub fn load_masks<'a>(
    dir: impl AsRef<Path>,
    ids: impl IntoIterator<Item = &'a str>,
    classes: usize,
    provenance: Provenance,
) -> Result<Vec<LabelMask>> {
    let dir = dir.as_ref();
    ids.into_iter()
        .map(|id| {
            let path = dir.join(format!("{id}.pgm"));
            if !path.exists() {
                return Err(Error::MissingLabel {
                    path: dir.into(),
                    id: id.into(),
                });
            }
            read_mask(&path, classes, provenance)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, h: usize, w: usize) -> Sample<f64> {
        Sample {
            id: id.into(),
            image: Image::zeros(h, w),
            pseudo: LabelMask::filled(h, w, 2, 0, Provenance::Pseudo),
            ground_truth: Some(LabelMask::filled(h, w, 2, 1, Provenance::GroundTruth)),
        }
    }

    #[test]
    fn samples_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::new(vec![sample("b", 4, 4), sample("a", 4, 4)])
            .unwrap()
            .write(dir.path())
            .unwrap();
        let ds: Dataset<f64> = load_dataset(dir.path(), 2).unwrap();
        assert_eq!(ds.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert!(ds.ground_truth().is_some());
        assert_eq!(ds.samples()[0].pseudo.provenance(), Provenance::Pseudo);
    }

    #[test]
    fn mismatched_label_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::new(vec![sample("a", 32, 32)]).unwrap().write(dir.path()).unwrap();
        write_pgm(
            &LabelMask::filled(16, 16, 2, 0, Provenance::Pseudo),
            dir.path().join("labels/a.pgm"),
        )
        .unwrap();
        let err = load_dataset::<f64>(dir.path(), 2).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn missing_label_and_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::new(vec![sample("a", 4, 4)]).unwrap().write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels/a.pgm")).unwrap();
        let err = load_dataset::<f64>(dir.path(), 2).unwrap_err();
        assert!(matches!(err, Error::MissingLabel { ref id, .. } if id == "a"));

        let empty = tempfile::tempdir().unwrap();
        fs::create_dir(empty.path().join("images")).unwrap();
        let err = load_dataset::<f64>(empty.path(), 2).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
    }

    #[test]
    fn mask_value_above_k_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample("a", 4, 4);
        s.pseudo = LabelMask::filled(4, 4, 3, 2, Provenance::Pseudo);
        s.ground_truth = None;
        Dataset::new(vec![s]).unwrap().write(dir.path()).unwrap();
        let err = load_dataset::<f64>(dir.path(), 2).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { value: 2, .. }));
    }
}
