//! Dataset loading, synthesis and augmentation.
//!
//! CIFAR-10 binary batches are 3073-byte records: one label byte followed
//! by 3072 pixel bytes in channel-major R, G, B planes of 1024 bytes each.
//! Images normalize with per-channel statistics computed from the training
//! split. The synthetic generator produces one Gaussian blob position and
//! color signature per class, separable enough that a nearest-centroid
//! classifier clears 80%.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;

pub const IMAGE_DIM: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const PIXELS_PER_IMAGE: usize = IMAGE_CHANNELS * IMAGE_DIM * IMAGE_DIM;
pub const RECORD_BYTES: usize = 1 + PIXELS_PER_IMAGE;
/// Padding used by the random-crop augmentation.
pub const CROP_PAD: usize = 4;

pub const TRAIN_BATCH_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// n * 3 * 32 * 32 normalized values, NCHW.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub num_classes: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the given sample indices into a batch tensor plus labels.
    pub fn gather<S: Scalar>(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * PIXELS_PER_IMAGE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let src = &self.images[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE];
            data.extend(src.iter().map(|&v| S::from_f64(v as f64)));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(
            [indices.len(), IMAGE_CHANNELS, IMAGE_DIM, IMAGE_DIM],
            data,
        )
        .expect("batch shape");
        (t, labels)
    }

    /// Keep a seeded random fraction of the samples (desk-scale knob).
    pub fn subset(&self, fraction: f64, seed: u64) -> Dataset {
        assert!(fraction > 0.0 && fraction <= 1.0, "fraction in (0, 1]");
        let keep = ((self.len() as f64 * fraction).round() as usize)
            .clamp(1, self.len());
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f5f_5f5f);
        // Fisher-Yates, then take the prefix.
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        indices.truncate(keep);
        let mut images = Vec::with_capacity(keep * PIXELS_PER_IMAGE);
        let mut labels = Vec::with_capacity(keep);
        for &i in &indices {
            images.extend_from_slice(&self.images[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            split: self.split,
            num_classes: self.num_classes,
            mean: self.mean,
            std: self.std,
        }
    }
}

fn read_batch_file(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.is_empty() || buf.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            what: path.display().to_string(),
            expected: format!("multiple of {RECORD_BYTES} bytes"),
            got: format!("{} bytes", buf.len()),
        });
    }
    let n = buf.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS_PER_IMAGE);
    for rec in buf.chunks_exact(RECORD_BYTES) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Write raw u8 images and labels in the standard batch layout.
pub fn write_batch_file(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * PIXELS_PER_IMAGE {
        return Err(Error::DimensionMismatch {
            axis: "pixels",
            expected: labels.len() * PIXELS_PER_IMAGE,
            got: pixels.len(),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, &label) in labels.iter().enumerate() {
        f.write_all(&[label])?;
        f.write_all(&pixels[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE])?;
    }
    Ok(())
}

/// Load the standard binary batches from a directory. Normalization
/// statistics come from the training split and apply to both splits.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_labels = Vec::new();
    let mut train_pixels = Vec::new();
    for name in TRAIN_BATCH_FILES {
        let (labels, pixels) = read_batch_file(&dir.join(name))?;
        train_labels.extend(labels);
        train_pixels.extend(pixels);
    }
    let (test_labels, test_pixels) = read_batch_file(&dir.join(TEST_BATCH_FILE))?;
    for (name, labels) in [("train", &train_labels), ("test", &test_labels)] {
        if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::Format {
                what: format!("{name} labels"),
                expected: "0..10".into(),
                got: bad.to_string(),
            });
        }
    }

    // Per-channel mean/std over the raw training pixels (0..1 scale).
    let n_train = train_labels.len();
    let plane = IMAGE_DIM * IMAGE_DIM;
    let mut mean = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for i in 0..n_train {
        for c in 0..3 {
            for p in 0..plane {
                let v = train_pixels[i * PIXELS_PER_IMAGE + c * plane + p] as f64 / 255.0;
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (n_train * plane) as f64;
    let mut std = [0.0f32; 3];
    let mut mean32 = [0.0f32; 3];
    for c in 0..3 {
        mean[c] /= count;
        let var = (sq[c] / count - mean[c] * mean[c]).max(1e-8);
        std[c] = var.sqrt() as f32;
        mean32[c] = mean[c] as f32;
    }

    let normalize = |labels: Vec<u8>, pixels: Vec<u8>, split: Split| -> Dataset {
        let n = labels.len();
        let mut images = Vec::with_capacity(n * PIXELS_PER_IMAGE);
        for i in 0..n {
            for c in 0..3 {
                for p in 0..plane {
                    let v = pixels[i * PIXELS_PER_IMAGE + c * plane + p] as f32 / 255.0;
                    images.push((v - mean32[c]) / std[c]);
                }
            }
        }
        Dataset {
            images,
            labels,
            split,
            num_classes: 10,
            mean: mean32,
            std,
        }
    };
    Ok((
        normalize(train_labels, train_pixels, Split::Train),
        normalize(test_labels, test_pixels, Split::Test),
    ))
}

/// Raw u8 image generator behind the synthetic datasets: one blob position
/// and channel signature per class, amplitude jitter, optional distractor
/// blob, Gaussian pixel noise.
pub fn synthetic_images_u8(
    n: usize,
    classes: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> (Vec<u8>, Vec<u8>) {
    assert!(classes >= 2 && classes <= 10, "2..=10 classes supported");
    let plane = IMAGE_DIM * IMAGE_DIM;
    // Blob centers on a 2 x 5 grid, cell centers.
    let centers: Vec<(f64, f64)> = (0..10)
        .map(|c| {
            let row = c / 5;
            let col = c % 5;
            (8.0 + 16.0 * row as f64, 3.2 + 6.4 * col as f64)
        })
        .collect();
    // Channel signature per class.
    let signature = |class: usize, channel: usize| -> f64 {
        0.35 + 0.65 * (((class + channel * 3) % 5) as f64) / 4.0
    };
    let sigma = 3.0;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS_PER_IMAGE);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        let (cy, cx) = centers[class];
        let amp = 1.0 + 0.4 * rng.gen::<f64>();
        // Distractor blob at a random spot, low amplitude.
        let dy = rng.gen::<f64>() * IMAGE_DIM as f64;
        let dx = rng.gen::<f64>() * IMAGE_DIM as f64;
        let damp = 0.15 * rng.gen::<f64>();
        for c in 0..3 {
            let sig = signature(class, c);
            for p in 0..plane {
                let y = (p / IMAGE_DIM) as f64;
                let x = (p % IMAGE_DIM) as f64;
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                let blob = amp * sig * (-d2 / (2.0 * sigma * sigma)).exp();
                let dd2 = (y - dy).powi(2) + (x - dx).powi(2);
                let distract = damp * (-dd2 / (2.0 * sigma * sigma)).exp();
                let eps: f64 = rng.sample(StandardNormal);
                let v = 0.15 + blob + distract + noise * eps;
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    (labels, pixels)
}

/// In-memory synthetic dataset with its own normalization statistics.
pub fn synthetic_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    synthetic_dataset_with_noise(n, classes, seed, 0.15, Split::Train)
}

pub fn synthetic_dataset_with_noise(
    n: usize,
    classes: usize,
    seed: u64,
    noise: f64,
    split: Split,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, pixels) = synthetic_images_u8(n, classes, noise, &mut rng);
    let plane = IMAGE_DIM * IMAGE_DIM;
    let mut mean = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for i in 0..n {
        for c in 0..3 {
            for p in 0..plane {
                let v = pixels[i * PIXELS_PER_IMAGE + c * plane + p] as f64 / 255.0;
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (n * plane) as f64;
    let mut images = Vec::with_capacity(n * PIXELS_PER_IMAGE);
    let mut mean32 = [0.0f32; 3];
    let mut std32 = [0.0f32; 3];
    for c in 0..3 {
        mean[c] /= count;
        let var = (sq[c] / count - mean[c] * mean[c]).max(1e-8);
        mean32[c] = mean[c] as f32;
        std32[c] = var.sqrt() as f32;
    }
    for i in 0..n {
        for c in 0..3 {
            for p in 0..plane {
                let v = pixels[i * PIXELS_PER_IMAGE + c * plane + p] as f32 / 255.0;
                images.push((v - mean32[c]) / std32[c]);
            }
        }
    }
    Dataset {
        images,
        labels,
        split,
        num_classes: classes,
        mean: mean32,
        std: std32,
    }
}

/// Materialize a synthetic dataset as standard CIFAR-format batch files
/// (five train batches plus one test batch), so the binary loader and the
/// CLI run against real files.
pub fn write_synthetic_cifar_dir(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, pixels) = synthetic_images_u8(n_train, classes, noise, &mut rng);
    let per = n_train.div_ceil(TRAIN_BATCH_FILES.len());
    for (bi, name) in TRAIN_BATCH_FILES.iter().enumerate() {
        let lo = (bi * per).min(n_train);
        let hi = ((bi + 1) * per).min(n_train);
        write_batch_file(
            &dir.join(name),
            &labels[lo..hi],
            &pixels[lo * PIXELS_PER_IMAGE..hi * PIXELS_PER_IMAGE],
        )?;
    }
    let (tl, tp) = synthetic_images_u8(n_test, classes, noise, &mut rng);
    write_batch_file(&dir.join(TEST_BATCH_FILE), &tl, &tp)?;
    Ok(())
}

// ── augmentation ─────────────────────────────────────────────────────

/// Mirror one (C, 32, 32) image in place along the width axis.
pub fn flip_horizontal<S: Scalar>(image: &mut [S]) {
    debug_assert_eq!(image.len(), PIXELS_PER_IMAGE);
    let plane = IMAGE_DIM * IMAGE_DIM;
    for c in 0..IMAGE_CHANNELS {
        for y in 0..IMAGE_DIM {
            let row = &mut image[c * plane + y * IMAGE_DIM..c * plane + (y + 1) * IMAGE_DIM];
            row.reverse();
        }
    }
}

/// Crop a 32 x 32 window from the pad-4 extension of the image, displaced
/// by (dy, dx) from center; offsets are in [-4, 4] and (0, 0) returns the
/// original image. Out-of-border reads are zero.
pub fn crop_with_offset<S: Scalar>(image: &[S], dy: isize, dx: isize) -> Vec<S> {
    debug_assert_eq!(image.len(), PIXELS_PER_IMAGE);
    debug_assert!(dy.unsigned_abs() <= CROP_PAD && dx.unsigned_abs() <= CROP_PAD);
    let plane = IMAGE_DIM * IMAGE_DIM;
    let dim = IMAGE_DIM as isize;
    let mut out = vec![S::ZERO; PIXELS_PER_IMAGE];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..dim {
            for x in 0..dim {
                let sy = y + dy;
                let sx = x + dx;
                if sy >= 0 && sy < dim && sx >= 0 && sx < dim {
                    out[c * plane + (y * dim + x) as usize] =
                        image[c * plane + (sy * dim + sx) as usize];
                }
            }
        }
    }
    out
}

/// Standard recipe: pad-4 random crop plus horizontal flip with p = 1/2,
/// applied per image in batch order.
pub fn augment<S: Scalar>(batch: &mut Tensor<S>, rng: &mut impl Rng) {
    let [n, c, h, w] = batch.shape();
    debug_assert_eq!((c, h, w), (IMAGE_CHANNELS, IMAGE_DIM, IMAGE_DIM));
    let pad = CROP_PAD as isize;
    for i in 0..n {
        let img = &mut batch.data_mut()[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE];
        let dy = rng.gen_range(-pad..=pad);
        let dx = rng.gen_range(-pad..=pad);
        if (dy, dx) != (0, 0) {
            let cropped = crop_with_offset(img, dy, dx);
            img.copy_from_slice(&cropped);
        }
        if rng.gen::<bool>() {
            flip_horizontal(img);
        }
    }
}

/// Nearest-centroid classification accuracy, the separability oracle for
/// synthetic data.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let k = ds.num_classes;
    let dim = PIXELS_PER_IMAGE;
    let mut centroids = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for i in 0..ds.len() {
        let class = ds.labels[i] as usize;
        counts[class] += 1;
        for p in 0..dim {
            centroids[class * dim + p] += ds.images[i * dim + p] as f64;
        }
    }
    for class in 0..k {
        if counts[class] > 0 {
            for p in 0..dim {
                centroids[class * dim + p] /= counts[class] as f64;
            }
        }
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for class in 0..k {
            let mut d = 0.0;
            for p in 0..dim {
                let diff = ds.images[i * dim + p] as f64 - centroids[class * dim + p];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        if best == ds.labels[i] as usize {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}
