//! Binary 8-bit PGM (P5) rasters.
//!
//! Images are stored as `round(v * 255)`, masks as raw class indices and
//! confidence maps as `round(CS * 255)`, always with maxval 255.

use std::fs;
use std::path::Path;

use super::{ConfidenceMap, Image, LabelMask, Provenance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A decoded P5 raster before any role-specific interpretation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub bytes: Vec<u8>,
}

/// Grids that can be written as a P5 raster.
pub trait PgmGrid {
    fn pgm_dims(&self) -> (usize, usize);
    fn pgm_bytes(&self) -> Vec<u8>;
}

impl<T: Scalar> PgmGrid for Image<T> {
    fn pgm_dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    fn pgm_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }
}

impl PgmGrid for LabelMask {
    fn pgm_dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    fn pgm_bytes(&self) -> Vec<u8> {
        self.data().to_vec()
    }
}

impl PgmGrid for ConfidenceMap {
    fn pgm_dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    fn pgm_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }
}

pub fn encode(height: usize, width: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn write_pgm<G: PgmGrid + ?Sized>(grid: &G, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = grid.pgm_dims();
    fs::write(path, encode(h, w, &grid.pgm_bytes())).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Parses a P5 byte stream; `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::UnsupportedMagic {
            path: path.into(),
            magic,
        });
    }
    let mut cursor = 2;
    let mut fields = [0u32; 3];
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        *slot = header_number(bytes, &mut cursor).ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            reason: format!("missing or invalid {name}"),
        })?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        if maxval > 255 {
            return Err(Error::MaxvalTooLarge {
                path: path.into(),
                maxval,
            });
        }
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "maxval must be positive".into(),
        });
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(cursor) {
        Some(b) if b.is_ascii_whitespace() => cursor += 1,
        _ => {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: "no whitespace after maxval".into(),
            })
        }
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width * height;
    let payload = &bytes[cursor..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            got: payload.len(),
        });
    }
    Ok(Raster {
        width,
        height,
        maxval,
        bytes: payload[..expected].to_vec(),
    })
}

fn header_number(bytes: &[u8], cursor: &mut usize) -> Option<u32> {
    loop {
        match bytes.get(*cursor)? {
            b'#' => {
                while *bytes.get(*cursor)? != b'\n' {
                    *cursor += 1;
                }
            }
            b if b.is_ascii_whitespace() => *cursor += 1,
            _ => break,
        }
    }
    let start = *cursor;
    while bytes.get(*cursor).is_some_and(u8::is_ascii_digit) {
        *cursor += 1;
    }
    std::str::from_utf8(&bytes[start..*cursor]).ok()?.parse().ok()
}

pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    let scale = T::from_count(raster.maxval as usize);
    let mut data = Vec::with_capacity(raster.bytes.len());
    for &b in &raster.bytes {
        if u32::from(b) > raster.maxval {
            return Err(Error::SampleAboveMaxval {
                path: path.into(),
                value: b,
                maxval: raster.maxval,
            });
        }
        data.push(T::from_count(b as usize) / scale);
    }
    Image::new(raster.height, raster.width, data)
}

pub fn read_mask(
    path: impl AsRef<Path>,
    classes: usize,
    provenance: Provenance,
) -> Result<LabelMask> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    if let Some(&value) = raster.bytes.iter().find(|b| usize::from(**b) >= classes) {
        return Err(Error::ClassOutOfRange {
            path: path.into(),
            value,
            classes,
        });
    }
    LabelMask::new(raster.height, raster.width, classes, raster.bytes, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p5(w: usize, h: usize, maxval: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn image_bytes_scale_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, p5(2, 2, 255, &[0, 255, 128, 64])).unwrap();
        let img: Image<f64> = read_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn rejects_p6() {
        let err = decode(b"P6\n1 1\n255\n\x00", Path::new("x.pgm")).unwrap_err();
        assert!(err.to_string().contains("unsupported magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_and_wide_maxval() {
        let err = decode(&p5(2, 2, 255, &[1, 2, 3]), Path::new("t.pgm")).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 4, got: 3, .. }));
        let err = decode(&p5(1, 1, 65535, &[0, 0]), Path::new("t.pgm")).unwrap_err();
        assert!(matches!(err, Error::MaxvalTooLarge { maxval: 65535, .. }));
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # made by hand\n3 1 # dims\n255\n\x01\x02\x03";
        let r = decode(bytes, Path::new("c.pgm")).unwrap();
        assert_eq!((r.width, r.height, r.bytes.as_slice()), (3, 1, &[1u8, 2, 3][..]));
    }

    #[test]
    fn mask_value_out_of_range_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, p5(2, 1, 255, &[0, 2])).unwrap();
        let err = read_mask(&path, 2, Provenance::Pseudo).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { value: 2, .. }));
        assert!(err.to_string().contains("m.pgm"));
    }

    #[test]
    fn writer_quantization() {
        let conf = ConfidenceMap::from_counts(1, 1, 4, vec![3]).unwrap();
        assert_eq!(conf.pgm_bytes(), vec![191]);
        let mask = LabelMask::new(1, 1, 2, vec![1], Provenance::GroundTruth).unwrap();
        assert_eq!(mask.pgm_bytes(), vec![1]);
        let img = Image::new(1, 1, vec![1.0f64]).unwrap();
        assert_eq!(img.pgm_bytes(), vec![255]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let mask = LabelMask::filled(4, 4, 2, 0, Provenance::Pseudo);
        let err = write_pgm(&mask, "/nonexistent-dir/x/m.pgm").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mask_round_trip(h in 1usize..12, w in 1usize..12, k in 2usize..6, seed in any::<u64>()) {
                let data: Vec<u8> = (0..h * w)
                    .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 33) % k as u64) as u8)
                    .collect();
                let mask = LabelMask::new(h, w, k, data, Provenance::Corrected).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("m.pgm");
                write_pgm(&mask, &path).unwrap();
                let back = read_mask(&path, k, Provenance::Corrected).unwrap();
                prop_assert_eq!(back, mask);
            }

            #[test]
            fn quantized_image_round_trip(bytes in proptest::collection::vec(any::<u8>(), 16)) {
                let img = Image::new(4, 4, bytes.iter().map(|b| f64::from(*b) / 255.0).collect()).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("i.pgm");
                write_pgm(&img, &path).unwrap();
                let back: Image<f64> = read_image(&path).unwrap();
                prop_assert_eq!(back.to_bytes(), bytes);
                prop_assert_eq!(back, img);
            }
        }
    }
}
