//! Image datasets: CIFAR-10 binary ingestion and a synthetic generator.
//!
//! Pixels are stored as bytes and scaled to `[0, 1]` when a batch is built.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use md5::{Digest, Md5};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_ARCHIVE: &str = "cifar-10-binary.tar.gz";
pub const CIFAR10_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";
pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
pub const CIFAR10_DIMS: [usize; 3] = [3, 32, 32];
pub const CIFAR10_TRAIN: usize = 50_000;
pub const CIFAR10_TEST: usize = 10_000;
pub const VALIDATION_SIZE: usize = 5_000;

const RECORD_PIXELS: usize = 3 * 32 * 32;
const RECORD_BYTES: usize = 1 + RECORD_PIXELS;
const BATCH_RECORDS: usize = 10_000;
const EXTRACTED_DIR: &str = "cifar-10-batches-bin";
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// A set of equally-sized 8-bit images in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    dims: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(dims: [usize; 3], pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per: usize = dims.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::shape(
                format!("{} images of {dims:?}", labels.len()),
                format!("{} bytes", pixels.len()),
            ));
        }
        Ok(Self { dims, pixels, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn per_image(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = self.per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// `[N, C, H, W]` tensor in `[0, 1]` of the given images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| f64::from(b) / 255.0));
        }
        let [c, h, w] = self.dims;
        Tensor::from_vec(&[indices.len(), c, h, w], data)
    }

    /// All images as one tensor.
    pub fn to_tensor(&self) -> Tensor {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Self {
            dims: self.dims,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` images (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// A seeded random subset of `n` images, kept in ascending index order.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Splits off `n_val` seeded-random images: `(train, validation)`.
    pub fn split_validation(&self, n_val: usize, seed: u64) -> Result<(Self, Self)> {
        if n_val >= self.len() {
            return Err(Error::config(
                "validation_size",
                format!("{n_val} validation images leave none of {} for training", self.len()),
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, train) = idx.split_at_mut(n_val);
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.select(train), self.select(val)))
    }

    /// Parses CIFAR-10 binary records (`label byte + 3072 pixel bytes`).
    pub fn from_cifar_records(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(RECORD_BYTES) {
            return Err(Error::shape(
                format!("a multiple of {RECORD_BYTES} bytes"),
                bytes.len(),
            ));
        }
        let n = bytes.len() / RECORD_BYTES;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * RECORD_PIXELS);
        for rec in bytes.chunks_exact(RECORD_BYTES) {
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Self::new(CIFAR10_DIMS, pixels, labels)
    }

    /// Serializes 3×32×32 images as CIFAR-10 binary records.
    pub fn to_cifar_records(&self) -> Result<Vec<u8>> {
        if self.dims != CIFAR10_DIMS {
            return Err(Error::shape(format!("{CIFAR10_DIMS:?}"), format!("{:?}", self.dims)));
        }
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image_bytes(i));
        }
        Ok(out)
    }
}

/// Smooth random colour fields: a few oriented sinusoids and Gaussian blobs
/// per image, quantized to 8 bits. Labels are the dominant blob index.
pub fn synthetic(n: usize, dims: [usize; 3], seed: u64) -> ImageSet {
    let [c, h, w] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..0.8)).collect();
        let waves: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / h.max(w) as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = (0..c).map(|_| rng.random_range(-0.15..0.15)).collect();
                (freq * theta.cos(), freq * theta.sin(), phase, amp)
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..4)
            .map(|_| {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(0.1..0.35) * h.min(w) as f64;
                let amp = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();
                (cy, cx, r, amp)
            })
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let mut v = base[ch];
                    for (ky, kx, phase, amp) in &waves {
                        v += amp[ch] * (ky * yf + kx * xf + phase).sin();
                    }
                    for (cy, cx, r, amp) in &blobs {
                        let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                        v += amp[ch] * (-d2 / (2.0 * r * r)).exp();
                    }
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let dominant = blobs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .3[0].abs().total_cmp(&b.1 .3[0].abs()))
            .map_or(0, |(i, _)| i);
        labels.push(dominant as u8);
    }
    ImageSet { dims, pixels, labels }
}

/// CIFAR-10 train (50,000) and test (10,000) splits.
#[derive(Clone, Debug)]
pub struct Cifar10 {
    pub train: ImageSet,
    pub test: ImageSet,
}

impl Cifar10 {
    /// Training set minus a seeded 5,000-image validation carve-out.
    pub fn train_validation(&self, seed: u64) -> Result<(ImageSet, ImageSet)> {
        self.train.split_validation(VALIDATION_SIZE, seed)
    }
}

pub fn md5_hex(path: &Path) -> Result<String> {
    let mut file = BufReader::new(File::open(path).map_err(|e| dataset_err(path, e))?);
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn dataset_err(path: &Path, reason: impl ToString) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Loads CIFAR-10 from `root`, which holds either the official archive
/// (checksum-verified) or its extracted `cifar-10-batches-bin` directory.
pub fn ingest_cifar10(root: &Path) -> Result<Cifar10> {
    let archive = root.join(CIFAR10_ARCHIVE);
    let set = if archive.is_file() {
        read_archive(&archive, CIFAR10_MD5)?
    } else {
        let dir = [root.join(EXTRACTED_DIR), root.to_path_buf()]
            .into_iter()
            .find(|d| d.join(TEST_FILE).is_file())
            .ok_or_else(|| {
                dataset_err(
                    root,
                    format!("neither {CIFAR10_ARCHIVE} nor {EXTRACTED_DIR}/{TEST_FILE} found"),
                )
            })?;
        read_extracted(&dir)?
    };
    for (split, got, want) in [
        ("train", set.train.len(), CIFAR10_TRAIN),
        ("test", set.test.len(), CIFAR10_TEST),
    ] {
        if got != want {
            return Err(dataset_err(root, format!("{split} split has {got} images, expected {want}")));
        }
    }
    Ok(set)
}

fn read_archive(path: &Path, expected_md5: &str) -> Result<Cifar10> {
    let digest = md5_hex(path)?;
    if digest != expected_md5 {
        return Err(dataset_err(
            path,
            format!("md5 {digest} does not match {expected_md5}"),
        ));
    }
    let mut train = vec![Vec::new(); TRAIN_FILES.len()];
    let mut test = Vec::new();
    let mut ar = tar::Archive::new(GzDecoder::new(BufReader::new(File::open(path)?)));
    for entry in ar.entries()? {
        let mut entry = entry?;
        let name = entry
            .path()?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let slot = if name == TEST_FILE {
            &mut test
        } else if let Some(i) = TRAIN_FILES.iter().position(|f| *f == name) {
            &mut train[i]
        } else {
            continue;
        };
        entry.read_to_end(slot)?;
    }
    assemble(path, train, test)
}

fn read_extracted(dir: &Path) -> Result<Cifar10> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| dataset_err(&p, e))?;
        if bytes.len() != BATCH_RECORDS * RECORD_BYTES {
            return Err(dataset_err(
                &p,
                format!("{} bytes, expected {}", bytes.len(), BATCH_RECORDS * RECORD_BYTES),
            ));
        }
        Ok(bytes)
    };
    let train = TRAIN_FILES.iter().map(|f| read(f)).collect::<Result<Vec<_>>>()?;
    assemble(dir, train, read(TEST_FILE)?)
}

fn assemble(origin: &Path, train: Vec<Vec<u8>>, test: Vec<u8>) -> Result<Cifar10> {
    let bytes: Vec<u8> = train.concat();
    let wrap = |r: Result<ImageSet>| r.map_err(|e| dataset_err(origin, e));
    Ok(Cifar10 {
        train: wrap(ImageSet::from_cifar_records(&bytes))?,
        test: wrap(ImageSet::from_cifar_records(&test))?,
    })
}

/// Where a dataset root was found, for error messages and run snapshots.
pub fn resolve_root(explicit: Option<&Path>, env_var: &str) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(env_var).map(PathBuf::from))
}
