//! MNIST (IDX) and CIFAR-10 (binary batch) loaders.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DatasetKind {
    Mnist,
    /// A seeded random fraction of CIFAR-10.
    Cifar10Subset { fraction: f64 },
}

impl FromStr for DatasetKind {
    type Err = Error;

    /// `mnist`, `cifar10-subset` (10%), or `cifar10-subset:<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "mnist" {
            return Ok(DatasetKind::Mnist);
        }
        let frac = match s.strip_prefix("cifar10-subset") {
            Some("") => 0.1,
            Some(rest) => rest
                .strip_prefix(':')
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidParams(format!("bad dataset `{s}`")))?,
            None => return Err(Error::InvalidParams(format!("unknown dataset `{s}`"))),
        };
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::InvalidParams(format!("subset fraction {frac} not in (0, 1]")));
        }
        Ok(DatasetKind::Cifar10Subset { fraction: frac })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images as normalized `f32` planes plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let item: usize = shape.iter().product();
        if images.len() != labels.len() * item {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {} items of {shape:?}", images.len(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    /// The first `n` items (all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let item: usize = self.shape.iter().product();
        Dataset {
            images: self.images[..n * item].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// Items `indices` stacked into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let item: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&self.images[i * item..(i + 1) * item]);
        }
        let shape = vec![indices.len(), self.shape[0], self.shape[1], self.shape[2]];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("sizes match"), labels)
    }

    /// Index batches; shuffled under `seed`, in order when `None`.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> Normalization {
        let c = self.shape[0];
        let plane = self.shape[1] * self.shape[2];
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for item in self.images.chunks(c * plane) {
            for ch in 0..c {
                for &v in &item[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn normalize(&mut self, stats: &Normalization) {
        let c = self.shape[0];
        let plane = self.shape[1] * self.shape[2];
        for item in self.images.chunks_mut(c * plane) {
            for ch in 0..c {
                for v in &mut item[ch * plane..(ch + 1) * plane] {
                    *v = (*v - stats.mean[ch]) / stats.std[ch];
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Loads a split normalized with statistics of the matching training split.
pub fn load_dataset(kind: DatasetKind, dir: &Path, split: Split, seed: u64) -> Result<Dataset> {
    let raw = |split| match kind {
        DatasetKind::Mnist => load_mnist_raw(dir, split),
        DatasetKind::Cifar10Subset { fraction } => load_cifar_raw(dir, split, fraction, seed),
    };
    let train = raw(Split::Train)?;
    let stats = train.channel_stats();
    let mut out = match split {
        Split::Train => train,
        Split::Test => raw(Split::Test)?,
    };
    out.normalize(&stats);
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        bytes = out;
    }
    Ok(bytes)
}

/// `name` or `name.gz` inside `dir`.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    if plain.exists() {
        Ok(plain)
    } else if gz.exists() {
        Ok(gz)
    } else {
        Err(Error::io(
            &plain,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (also tried .gz)"),
        ))
    }
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses an IDX file of unsigned bytes. Returns the dimensions and payload.
pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, "bad magic number"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(path, 2, format!("unsupported element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len(), "truncated dimension list"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() - header < count {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload ends early: expected {count} bytes after the header"),
        ));
    }
    if bytes.len() - header > count {
        return Err(format_err(path, header + count, "trailing bytes after payload"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_mnist_raw(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let ipath = locate(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lpath = locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (idims, pixels) = parse_idx(&ipath, &read_file(&ipath)?)?;
    let (ldims, labels) = parse_idx(&lpath, &read_file(&lpath)?)?;
    if idims.len() != 3 {
        return Err(format_err(&ipath, 3, format!("expected 3 dimensions, found {}", idims.len())));
    }
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(format_err(&lpath, 4, format!("{:?} labels for {} images", ldims, idims[0])));
    }
    let header = 4 + 4 * ldims.len();
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(format_err(&lpath, header + i, format!("label {} out of range", labels[i])));
    }
    Dataset::new(
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        [1, idims[1], idims[2]],
        10,
    )
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch into `(labels, pixels)`.
pub fn parse_cifar(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let last = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_err(path, last, "incomplete record at end of file"));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(path, i * CIFAR_RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn load_cifar_raw(dir: &Path, split: Split, fraction: f64, seed: u64) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let sub = dir.join("cifar-10-batches-bin");
    let base = if sub.is_dir() { sub.as_path() } else { dir };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in names {
        let path = locate(base, &name)?;
        let (l, p) = parse_cifar(&path, &read_file(&path)?)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    let item = CIFAR_RECORD - 1;
    let mut images = Vec::with_capacity(take * item);
    for &i in &chosen {
        images.extend(pixels[i * item..(i + 1) * item].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(images, chosen.iter().map(|&i| labels[i] as usize).collect(), [3, 32, 32], 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_dims() {
        let mut bytes = vec![0, 0, 8, 3];
        for d in [2u32, 2, 2] {
            bytes.extend(d.to_be_bytes());
        }
        bytes.extend([0u8; 8]);
        let (dims, payload) = parse_idx(Path::new("x"), &bytes).unwrap();
        assert_eq!(dims, vec![2, 2, 2]);
        assert_eq!(payload.len(), 8);
        bytes.pop();
        assert!(matches!(parse_idx(Path::new("x"), &bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_kind_parsing() {
        assert_eq!("mnist".parse::<DatasetKind>().unwrap(), DatasetKind::Mnist);
        assert_eq!(
            "cifar10-subset:0.25".parse::<DatasetKind>().unwrap(),
            DatasetKind::Cifar10Subset { fraction: 0.25 }
        );
        assert!("imagenet".parse::<DatasetKind>().is_err());
    }
}
