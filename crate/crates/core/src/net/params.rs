use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 5] = b"SEGW1";

/// One convolution of the fixed architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: &'static str,
    pub ksize: usize,
    pub cin: usize,
    pub cout: usize,
}

pub const NUM_CONVS: usize = 8;

/// The network's convolutions in execution order. The head's output width
/// is the class count.
pub fn architecture(classes: usize) -> [ConvSpec; NUM_CONVS] {
    let c = |name, ksize, cin, cout| ConvSpec {
        name,
        ksize,
        cin,
        cout,
    };
    [
        c("enc1a", 3, 1, 8),
        c("enc1b", 3, 8, 8),
        c("enc2a", 3, 8, 16),
        c("enc2b", 3, 16, 16),
        c("bottleneck", 3, 16, 32),
        c("up1", 3, 48, 16),
        c("up2", 3, 24, 8),
        c("head", 1, 8, classes),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Block<T> {
    fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Block {
            dims,
            data: vec![T::zero(); n],
        }
    }
}

fn block_shapes(classes: usize) -> Vec<Vec<usize>> {
    architecture(classes)
        .iter()
        .flat_map(|c| [vec![c.ksize, c.ksize, c.cin, c.cout], vec![c.cout]])
        .collect()
}

/// Network weights: kernel then bias for each convolution, in architecture
/// order. Kernels are `[kh, kw, cin, cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    classes: usize,
    blocks: Vec<Block<T>>,
}

/// Derivative of the training loss with respect to every parameter;
/// block-congruent with [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal kernels (std = sqrt(2 / fan_in)), zero biases.
    pub fn init(classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(2 * NUM_CONVS);
        for (i, dims) in block_shapes(classes).into_iter().enumerate() {
            let mut block = Block::zeros(dims);
            if i % 2 == 0 {
                let fan_in = (block.dims[0] * block.dims[1] * block.dims[2]) as f64;
                let std = (2.0 / fan_in).sqrt();
                for v in &mut block.data {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = T::lit(z * std);
                }
            }
            blocks.push(block);
        }
        Ok(ModelParams { classes, blocks })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn kernel(&self, conv: usize) -> &[T] {
        &self.blocks[2 * conv].data
    }

    pub fn bias(&self, conv: usize) -> &[T] {
        &self.blocks[2 * conv + 1].data
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// Squared L2 norm over every parameter, biases included.
    pub fn sq_norm(&self) -> T {
        self.values().map(|v| v * v).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.blocks.iter().flat_map(|b| b.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.blocks.iter_mut().flat_map(|b| b.data.iter_mut())
    }

    /// Parameter at a flat index over all blocks.
    pub fn get_flat(&self, mut idx: usize) -> T {
        for b in &self.blocks {
            if idx < b.data.len() {
                return b.data[idx];
            }
            idx -= b.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, value: T) {
        for b in &mut self.blocks {
            if idx < b.data.len() {
                b.data[idx] = value;
                return;
            }
            idx -= b.data.len();
        }
        panic!("parameter index out of range")
    }

    /// Convolution index that owns the flat parameter `idx`.
    pub fn conv_of_flat(&self, mut idx: usize) -> usize {
        for (i, b) in self.blocks.iter().enumerate() {
            if idx < b.data.len() {
                return i / 2;
            }
            idx -= b.data.len();
        }
        panic!("parameter index out of range")
    }

    /// Serialized model: magic, then per block its rank, dims (u32 LE)
    /// and values (f64 LE).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MODEL_MAGIC.to_vec();
        for b in &self.blocks {
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for d in &b.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::ModelFormat {
            path: path.into(),
            reason: reason.into(),
        };
        if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut cur = MODEL_MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(cur..cur + n).ok_or_else(|| bad("truncated"))?;
            cur += n;
            Ok(s)
        };
        let mut blocks = Vec::new();
        loop {
            let rank_bytes = match take(4) {
                Ok(b) => b,
                Err(_) => break,
            };
            let rank = u32::from_le_bytes(rank_bytes.try_into().unwrap()) as usize;
            if rank == 0 || rank > 4 {
                return Err(bad("invalid block rank"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let raw = take(8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            blocks.push(Block { dims, data });
        }
        let classes = blocks
            .last()
            .map(|b| b.dims[0])
            .ok_or_else(|| bad("no parameter blocks"))?;
        let expected = block_shapes(classes);
        if blocks.len() != expected.len()
            || blocks.iter().zip(&expected).any(|(b, e)| &b.dims != e)
        {
            return Err(bad("block shapes do not match the architecture"));
        }
        Ok(ModelParams { classes, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Gradients {
            blocks: params
                .blocks
                .iter()
                .map(|b| Block::zeros(b.dims.clone()))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.blocks.iter().flat_map(|b| b.data.iter().copied())
    }

    pub fn congruent_with(&self, params: &ModelParams<T>) -> bool {
        self.blocks.len() == params.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&params.blocks)
                .all(|(g, p)| g.dims == p.dims)
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + *y;
            }
        }
    }

    /// `self += scale * params`.
    pub fn add_scaled_params(&mut self, params: &ModelParams<T>, scale: T) {
        for (a, b) in self.blocks.iter_mut().zip(&params.blocks) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * *y;
            }
        }
    }

    pub(crate) fn kernel_bias_mut(&mut self, conv: usize) -> (&mut [T], &mut [T]) {
        let (k, rest) = self.blocks[2 * conv..].split_at_mut(1);
        (&mut k[0].data, &mut rest[0].data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = ModelParams::<f64>::init(2, 7).unwrap();
        let b = ModelParams::<f64>::init(2, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a, ModelParams::init(2, 8).unwrap());
        for conv in 0..NUM_CONVS {
            assert!(a.bias(conv).iter().all(|v| *v == 0.0));
        }
        assert_eq!(a.blocks()[14].dims, vec![1, 1, 8, 2]);
        assert!(ModelParams::<f64>::init(1, 0).is_err());
    }

    #[test]
    fn he_normal_scale() {
        let p = ModelParams::<f64>::init(2, 3).unwrap();
        // up1 kernel: 3*3*48 fan-in, 6912 samples
        let k = p.kernel(5);
        let var = k.iter().map(|v| v * v).sum::<f64>() / k.len() as f64;
        let want = 2.0 / (9.0 * 48.0);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    }

    #[test]
    fn save_load_save_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f64>::init(3, 11).unwrap();
        let path = dir.path().join("model.bin");
        p.save(&path).unwrap();
        let back = ModelParams::<f64>::load(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), p.to_bytes());
        assert_eq!(&p.to_bytes()[..5], b"SEGW1");
    }

    #[test]
    fn corrupt_model_files_rejected() {
        let p = ModelParams::<f64>::init(2, 1).unwrap();
        let bytes = p.to_bytes();
        let path = Path::new("m.bin");
        assert!(ModelParams::<f64>::from_bytes(&bytes[..bytes.len() - 3], path).is_err());
        assert!(ModelParams::<f64>::from_bytes(b"SEGW2", path).is_err());
    }

    #[test]
    fn flat_indexing_covers_all_blocks() {
        let mut p = ModelParams::<f64>::init(2, 1).unwrap();
        let n = p.num_params();
        p.set_flat(n - 1, 5.0);
        assert_eq!(p.get_flat(n - 1), 5.0);
        assert_eq!(p.conv_of_flat(n - 1), NUM_CONVS - 1);
        assert_eq!(p.conv_of_flat(0), 0);
    }
}
