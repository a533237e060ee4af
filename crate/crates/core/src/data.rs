//! CIFAR binary ingestion, preprocessing and seed-deterministic batching.
//!
//! CIFAR-10 records are `label, 3072 pixels` (3073 bytes); CIFAR-100
//! records are `coarse, fine, 3072 pixels` (3074 bytes). Pixels are stored
//! channel-major, each channel row-major 32×32.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const PAD: usize = 4;
pub const DATA_ROOT_ENV: &str = "EWIR_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cifar10,
    Cifar100,
    /// Generated data in the CIFAR-10 record layout.
    Synthetic,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::invalid(format!(
                "unknown dataset `{other}` (expected cifar10, cifar100 or synthetic)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Synthetic => "synthetic",
        })
    }
}

impl Variant {
    pub fn record_len(self) -> usize {
        match self {
            Self::Cifar100 => PIXELS + 2,
            _ => PIXELS + 1,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Cifar100 => 100,
            _ => 10,
        }
    }

    /// Expected `(train, test)` populations, if fixed.
    pub fn populations(self) -> Option<(usize, usize)> {
        match self {
            Self::Synthetic => None,
            _ => Some((50_000, 10_000)),
        }
    }

    fn files(self) -> (&'static str, Vec<&'static str>, Vec<&'static str>) {
        match self {
            Self::Cifar10 => (
                "cifar-10-batches-bin",
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                vec!["test_batch.bin"],
            ),
            Self::Cifar100 => ("cifar-100-binary", vec!["train.bin"], vec!["test.bin"]),
            Self::Synthetic => ("synthetic", vec!["synthetic_train.bin"], vec!["synthetic_test.bin"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub pixels: Vec<u8>,
    pub label: usize,
    pub coarse: Option<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Parses a buffer of records; offsets in errors are relative to `base`.
pub fn parse_records(bytes: &[u8], variant: Variant, base: u64) -> Result<Vec<ImageSample>> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        let offset = base + (bytes.len() / rec * rec) as u64;
        return Err(Error::Format {
            offset,
            reason: format!(
                "{} trailing bytes do not form a {rec}-byte {variant} record",
                bytes.len() % rec
            ),
        });
    }
    let classes = variant.num_classes();
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, r)| {
            let (coarse, label, pixels) = match variant {
                Variant::Cifar100 => (Some(r[0]), r[1] as usize, &r[2..]),
                _ => (None, r[0] as usize, &r[1..]),
            };
            let at = base + (i * rec) as u64;
            if label >= classes {
                return Err(Error::Format {
                    offset: at + coarse.is_some() as u64,
                    reason: format!("label {label} outside [0, {classes})"),
                });
            }
            if coarse.is_some_and(|c| c >= 20) {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("coarse label {} outside [0, 20)", r[0]),
                });
            }
            Ok(ImageSample {
                pixels: pixels.to_vec(),
                label,
                coarse,
            })
        })
        .collect()
}

fn resolve_dir(root: &Path, variant: Variant) -> PathBuf {
    let (sub, train, _) = variant.files();
    let nested = root.join(sub);
    if nested.join(train[0]).exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn load_files(dir: &Path, names: &[&str], variant: Variant) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        out.extend(parse_records(&bytes, variant, 0).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?);
    }
    Ok(out)
}

/// Loads the train and test splits from `root` (or its canonical
/// subdirectory) and validates populations.
pub fn load_cifar(root: &Path, variant: Variant) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(root, variant);
    let (_, train_files, test_files) = variant.files();
    let train = load_files(&dir, &train_files, variant)?;
    let test = load_files(&dir, &test_files, variant)?;
    if let Some((n_train, n_test)) = variant.populations() {
        if train.len() != n_train || test.len() != n_test {
            return Err(Error::invalid(format!(
                "{variant}: expected {n_train}/{n_test} train/test samples, found {}/{}",
                train.len(),
                test.len()
            )));
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!("{variant}: empty split in {}", dir.display())));
    }
    let num_classes = variant.num_classes();
    Ok((
        Dataset {
            samples: train,
            num_classes,
        },
        Dataset {
            samples: test,
            num_classes,
        },
    ))
}

/// Whether the files for `variant` are present under `root`.
pub fn available(root: &Path, variant: Variant) -> bool {
    let dir = resolve_dir(root, variant);
    let (_, train, test) = variant.files();
    train.iter().chain(&test).all(|f| dir.join(f).is_file())
}

/// Writes a learnable 10-class dataset in the CIFAR-10 record layout.
///
/// Each class has a smooth colour pattern; samples add a random shift,
/// brightness change and pixel noise.
pub fn write_synthetic(dir: &Path, seed: u64, n_train: usize, n_test: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let classes = Variant::Synthetic.num_classes();
    let mut proto_rng = rng::stream(seed, &[rng::SYNTH, u64::MAX]);
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let freq: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        proto_rng.random_range(0.5..3.0),
                        proto_rng.random_range(0.5..3.0),
                        proto_rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let mut img = vec![0.0; PIXELS];
            for (c, &(fx, fy, ph)) in freq.iter().enumerate() {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let u = x as f64 / SIDE as f64 * std::f64::consts::TAU;
                        let v = y as f64 / SIDE as f64 * std::f64::consts::TAU;
                        img[(c * SIDE + y) * SIDE + x] = (fx * u + ph).sin() * (fy * v).cos();
                    }
                }
            }
            img
        })
        .collect();
    for (split, n) in [(0u64, n_train), (1, n_test)] {
        let mut bytes = Vec::with_capacity(n * Variant::Synthetic.record_len());
        for i in 0..n {
            let mut r = rng::stream(seed, &[rng::SYNTH, split, i as u64]);
            let label = r.random_range(0..classes);
            let (dx, dy) = (r.random_range(0..5usize), r.random_range(0..5usize));
            let gain = r.random_range(0.6..1.0);
            bytes.push(label as u8);
            let p = &protos[label];
            for c in 0..3 {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let v = p[(c * SIDE + (y + dy) % SIDE) * SIDE + (x + dx) % SIDE];
                        let noise: f64 = r.random_range(-0.35..0.35);
                        let px = 127.5 + 110.0 * (gain * v + noise);
                        bytes.push(px.clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        let name = if split == 0 { "synthetic_train.bin" } else { "synthetic_test.bin" };
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Per-channel normalization constants on the `[0, 1]` pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Cifar10 => Self {
                mean: [0.4914, 0.4822, 0.4465],
                std: [0.2470, 0.2435, 0.2616],
            },
            Variant::Cifar100 => Self {
                mean: [0.5071, 0.4865, 0.4409],
                std: [0.2673, 0.2564, 0.2762],
            },
            Variant::Synthetic => Self {
                mean: [0.5, 0.5, 0.5],
                std: [0.25, 0.25, 0.25],
            },
        }
    }

    /// Measures the constants on a dataset.
    pub fn compute(ds: &Dataset) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for s in &ds.samples {
            for c in 0..3 {
                for &p in &s.pixels[c * SIDE * SIDE..(c + 1) * SIDE * SIDE] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * SIDE * SIDE).max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt();
        }
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Horizontal flip of a `3×32×32` image.
pub fn flip(pixels: &[u8]) -> Vec<u8> {
    let mut out = pixels.to_vec();
    for row in out.chunks_mut(SIDE) {
        row.reverse();
    }
    out
}

/// Scales to `[0, 1]` and normalizes per channel. In train mode with
/// `augment`, a random crop of the 4-pixel zero-padded image and a random
/// horizontal flip are applied first.
pub fn preprocess(sample: &ImageSample, split: Split, augment: bool, stats: &NormStats, r: &mut ChaCha8Rng) -> Vec<f32> {
    let mut px = sample.pixels.clone();
    if split == Split::Train && augment {
        let dx = r.random_range(0..=2 * PAD);
        let dy = r.random_range(0..=2 * PAD);
        let mirror = r.random_bool(0.5);
        let mut out = vec![0u8; PIXELS];
        for c in 0..3 {
            for y in 0..SIDE {
                let sy = (y + dy) as isize - PAD as isize;
                if !(0..SIDE as isize).contains(&sy) {
                    continue;
                }
                for x in 0..SIDE {
                    let sx = (x + dx) as isize - PAD as isize;
                    if (0..SIDE as isize).contains(&sx) {
                        out[(c * SIDE + y) * SIDE + x] = px[(c * SIDE + sy as usize) * SIDE + sx as usize];
                    }
                }
            }
        }
        px = if mirror { flip(&out) } else { out };
    }
    px.iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i / (SIDE * SIDE);
            ((p as f64 / 255.0 - stats.mean[c]) / stats.std[c]) as f32
        })
        .collect()
}

/// Sample order for an epoch: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::SHUFFLE, epoch]));
    idx
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub split: Split,
    pub shuffle: bool,
    pub augment: bool,
    pub stats: NormStats,
}

/// Iterates batches in a seed-determined order; the final short batch is
/// kept.
pub fn batch_iter<'a>(ds: &'a Dataset, opts: BatchOptions) -> Result<impl Iterator<Item = Batch> + 'a> {
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let order = if opts.shuffle {
        epoch_order(ds.len(), opts.seed, opts.epoch)
    } else {
        (0..ds.len()).collect()
    };
    let bs = opts.batch_size;
    let chunks: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().enumerate().map(move |(bi, idx)| {
        let mut data = Vec::with_capacity(idx.len() * PIXELS);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut r = rng::stream(opts.seed, &[rng::AUGMENT, opts.epoch, i as u64]);
            data.extend(preprocess(&ds.samples[i], opts.split, opts.augment, &opts.stats, &mut r));
            labels.push(ds.samples[i].label);
        }
        Batch {
            index: bi,
            x: Tensor::new(vec![idx.len(), 3, SIDE, SIDE], data).expect("batch shape"),
            labels,
            indices: idx,
        }
    }))
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Reads a single image: a CIFAR-10 style record (`.bin`) or any PNG/BMP,
/// resized to 32×32.
pub fn load_image(path: &Path) -> Result<ImageSample> {
    if path.extension().is_some_and(|e| e == "bin") {
        let bytes = fs::read(path)?;
        let rec = Variant::Cifar10.record_len();
        let take = &bytes[..bytes.len().min(rec)];
        return parse_records(take, Variant::Cifar10, 0)?
            .pop()
            .ok_or_else(|| Error::invalid(format!("{}: empty image record", path.display())));
    }
    if !path.is_file() {
        return Err(Error::invalid(format!("image `{}` does not exist", path.display())));
    }
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = image::imageops::resize(&img, SIDE as u32, SIDE as u32, image::imageops::FilterType::Triangle);
    let mut pixels = vec![0u8; PIXELS];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * SIDE + y as usize) * SIDE + x as usize] = p[c];
        }
    }
    Ok(ImageSample {
        pixels,
        label: 0,
        coarse: None,
    })
}
