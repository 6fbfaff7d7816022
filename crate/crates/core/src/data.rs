//! IDX container I/O and the seeded synthetic classification set.
//!
//! IDX layout: two zero bytes, a type code, the number of dimensions, then
//! each dimension as a big-endian `u32`, then the data big-endian.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nfgraph::Shape3;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl IdxData {
    fn type_code(&self) -> u8 {
        match self {
            IdxData::U8(_) => 0x08,
            IdxData::I8(_) => 0x09,
            IdxData::I16(_) => 0x0B,
            IdxData::I32(_) => 0x0C,
            IdxData::F32(_) => 0x0D,
            IdxData::F64(_) => 0x0E,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::I8(v) => v.len(),
            IdxData::I16(v) => v.len(),
            IdxData::I32(v) => v.len(),
            IdxData::F32(v) => v.len(),
            IdxData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as reals. Unsigned bytes are scaled into [0, 1] (image convention).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            IdxData::U8(v) => v.iter().map(|&x| x as f64 / 255.0).collect(),
            IdxData::I8(v) => v.iter().map(|&x| x as f64).collect(),
            IdxData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            IdxData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            IdxData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            IdxData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, self.data.type_code(), self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::U8(v) => out.extend_from_slice(v),
            IdxData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            IdxData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("IDX: {m}"));
        if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
            return Err(bad("bad magic".into()));
        }
        let (code, nd) = (bytes[2], bytes[3] as usize);
        let mut pos = 4;
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            let b = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| bad("truncated header".into()))?;
            dims.push(u32::from_be_bytes(b.try_into().unwrap()) as usize);
            pos += 4;
        }
        let n: usize = dims.iter().product();
        let width = match code {
            0x08 | 0x09 => 1,
            0x0B => 2,
            0x0C | 0x0D => 4,
            0x0E => 8,
            _ => return Err(bad(format!("unknown type code {code:#04x}"))),
        };
        let body = &bytes[pos..];
        if body.len() != n * width {
            return Err(bad(format!(
                "expected {} data bytes for dims {:?}, found {}",
                n * width,
                dims,
                body.len()
            )));
        }
        macro_rules! be {
            ($t:ty) => {
                body.chunks_exact(width)
                    .map(|c| <$t>::from_be_bytes(c.try_into().unwrap()))
                    .collect()
            };
        }
        let data = match code {
            0x08 => IdxData::U8(body.to_vec()),
            0x09 => IdxData::I8(body.iter().map(|&b| b as i8).collect()),
            0x0B => IdxData::I16(be!(i16)),
            0x0C => IdxData::I32(be!(i32)),
            0x0D => IdxData::F32(be!(f32)),
            _ => IdxData::F64(be!(f64)),
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Images (channel-major, stored as `f32`) with byte labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        let n = self.shape.len();
        self.images[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn images_idx(&self) -> IdxArray {
        IdxArray {
            dims: vec![self.len(), self.shape.c, self.shape.h, self.shape.w],
            data: IdxData::F32(self.images.clone()),
        }
    }

    pub fn labels_idx(&self) -> IdxArray {
        IdxArray {
            dims: vec![self.len()],
            data: IdxData::U8(self.labels.clone()),
        }
    }

    /// Build from an image array of rank 3 (`n, h, w`, single channel) or
    /// rank 4 (`n, c, h, w`) and a rank-1 label array.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Self> {
        let shape = match images.dims.as_slice() {
            [_, h, w] => Shape3::new(1, *h, *w),
            [_, c, h, w] => Shape3::new(*c, *h, *w),
            d => return Err(Error::Data(format!("image array must be rank 3 or 4, got {d:?}"))),
        };
        let n = images.dims[0];
        let labels = match (&labels.data, labels.dims.as_slice()) {
            (IdxData::U8(v), [m]) if *m == n => v.clone(),
            _ => {
                return Err(Error::Data(format!(
                    "labels must be {n} unsigned bytes, got dims {:?}",
                    labels.dims
                )))
            }
        };
        let images = images.data.to_f64().into_iter().map(|v| v as f32).collect();
        Ok(Self { shape, images, labels })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        Self::from_idx(&IdxArray::read(images)?, &IdxArray::read(labels)?)
    }
}

/// Train/test pair as found in a data directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

pub const TRAIN_IMAGES: &str = "train-images.idx";
pub const TRAIN_LABELS: &str = "train-labels.idx";
pub const TEST_IMAGES: &str = "test-images.idx";
pub const TEST_LABELS: &str = "test-labels.idx";

fn find(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Data(format!("{} not found in {}", names[0], dir.display())))
}

impl Split {
    /// Load a directory written by [`Split::write_dir`] or holding the
    /// standard MNIST file names.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let train = Dataset::load(
            find(dir, &[TRAIN_IMAGES, "train-images-idx3-ubyte"])?,
            find(dir, &[TRAIN_LABELS, "train-labels-idx1-ubyte"])?,
        )?;
        let test = Dataset::load(
            find(dir, &[TEST_IMAGES, "t10k-images-idx3-ubyte"])?,
            find(dir, &[TEST_LABELS, "t10k-labels-idx1-ubyte"])?,
        )?;
        if train.shape != test.shape {
            return Err(Error::Data(format!(
                "train images are {}, test images {}",
                train.shape, test.shape
            )));
        }
        Ok(Self { train, test })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.images_idx().write(dir.join(TRAIN_IMAGES))?;
        self.train.labels_idx().write(dir.join(TRAIN_LABELS))?;
        self.test.images_idx().write(dir.join(TEST_IMAGES))?;
        self.test.labels_idx().write(dir.join(TEST_LABELS))?;
        Ok(())
    }
}

/// Gaussian-prototype image classification set.
///
/// Each class has a prototype image with i.i.d. standard-normal pixels; a
/// sample is its class prototype plus i.i.d. normal noise of standard
/// deviation `1 / separation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub shape: Shape3,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            shape: Shape3::new(1, 16, 16),
            train: 2000,
            test: 400,
            seed: 2023,
            separation: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn noise_std(&self) -> f64 {
        1.0 / self.separation
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| (0..self.shape.len()).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    pub fn generate(&self) -> Result<Split> {
        if self.classes == 0 || self.classes > 256 {
            return Err(Error::Config(format!("classes must be in 1..=256, got {}", self.classes)));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        let protos = self.prototypes();
        let sample = |count: usize, stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(stream);
            let mut images = Vec::with_capacity(count * self.shape.len());
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let k = rng.random_range(0..self.classes);
                labels.push(k as u8);
                for &p in &protos[k] {
                    let noise: f64 = rng.sample(StandardNormal);
                    images.push((p + noise * self.noise_std()) as f32);
                }
            }
            Dataset {
                shape: self.shape,
                images,
                labels,
            }
        };
        Ok(Split {
            train: sample(self.train, 1),
            test: sample(self.test, 2),
        })
    }
}
