//! Datasets: bit-exact IDX image/label files and a synthetic handwritten
//! digit corpus for environments where the real archives are unavailable.
//!
//! The synthetic generator rasterizes segment-stroke digits with random
//! rotation, scale, translation, stroke thickness and pixel noise, then
//! round-trips them through the same IDX encoding the loaders parse.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw IDX image block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>, // count * rows * cols
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols)
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadDataset(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = read_u32_be(&mut f)? as usize;
    let rows = read_u32_be(&mut f)? as usize;
    let cols = read_u32_be(&mut f)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    f.read_exact(&mut pixels).map_err(|_| {
        Error::BadDataset(format!(
            "{}: truncated image payload (want {} bytes)",
            path.display(),
            count * rows * cols
        ))
    })?;
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadDataset(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = read_u32_be(&mut f)? as usize;
    let mut labels = vec![0u8; count];
    f.read_exact(&mut labels).map_err(|_| {
        Error::BadDataset(format!(
            "{}: truncated label payload (want {count} bytes)",
            path.display()
        ))
    })?;
    Ok(labels)
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(images.count() as u32).to_be_bytes())?;
    f.write_all(&(images.rows as u32).to_be_bytes())?;
    f.write_all(&(images.cols as u32).to_be_bytes())?;
    f.write_all(&images.pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// A labeled set ready for training: rows flattened to `[0, 1]` floats.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
        let imgs = read_idx_images(images_path)?;
        let labels = read_idx_labels(labels_path)?;
        if imgs.count() != labels.len() {
            return Err(Error::BadDataset(format!(
                "{} images but {} labels",
                imgs.count(),
                labels.len()
            )));
        }
        let per = imgs.rows * imgs.cols;
        let images = imgs
            .pixels
            .chunks_exact(per)
            .map(|c| c.iter().map(|&p| p as f64 / 255.0).collect())
            .collect();
        Ok(Dataset { images, labels })
    }

    /// Split off the first `counts` chunks as disjoint per-domain subsets.
    pub fn split_domains(&self, n: usize, per_domain: usize) -> Result<Vec<Dataset>> {
        if n * per_domain > self.len() {
            return Err(Error::Config(format!(
                "dataset has {} samples, need {} for {n} domains",
                self.len(),
                n * per_domain
            )));
        }
        Ok((0..n)
            .map(|d| {
                let lo = d * per_domain;
                let hi = lo + per_domain;
                Dataset {
                    images: self.images[lo..hi].to_vec(),
                    labels: self.labels[lo..hi].to_vec(),
                }
            })
            .collect())
    }
}

// Seven-segment-style strokes in a unit box (y grows downward), with a
// center bar for 1 and a diagonal for 7.
const SEG_A: [f64; 4] = [0.22, 0.16, 0.78, 0.16];
const SEG_B: [f64; 4] = [0.78, 0.16, 0.78, 0.50];
const SEG_C: [f64; 4] = [0.78, 0.50, 0.78, 0.84];
const SEG_D: [f64; 4] = [0.22, 0.84, 0.78, 0.84];
const SEG_E: [f64; 4] = [0.22, 0.50, 0.22, 0.84];
const SEG_F: [f64; 4] = [0.22, 0.16, 0.22, 0.50];
const SEG_G: [f64; 4] = [0.22, 0.50, 0.78, 0.50];
const SEG_1: [f64; 4] = [0.52, 0.16, 0.48, 0.84];
const SEG_7D: [f64; 4] = [0.78, 0.16, 0.42, 0.84];

fn digit_segments(d: u8) -> Vec<[f64; 4]> {
    match d {
        0 => vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F],
        1 => vec![SEG_1],
        2 => vec![SEG_A, SEG_B, SEG_G, SEG_E, SEG_D],
        3 => vec![SEG_A, SEG_B, SEG_G, SEG_C, SEG_D],
        4 => vec![SEG_F, SEG_G, SEG_B, SEG_C],
        5 => vec![SEG_A, SEG_F, SEG_G, SEG_C, SEG_D],
        6 => vec![SEG_A, SEG_F, SEG_E, SEG_D, SEG_C, SEG_G],
        7 => vec![SEG_A, SEG_7D],
        8 => vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, SEG_G],
        9 => vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_F, SEG_G],
        _ => unreachable!(),
    }
}

fn dist_to_segment(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (x1, y1, x2, y2) = (s[0], s[1], s[2], s[3]);
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Rasterize one augmented digit into `side`×`side` grayscale bytes.
fn render_digit(d: u8, side: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let angle = rng.random_range(-0.40..0.40f64);
    let scale = rng.random_range(0.68..1.14f64);
    let tx = rng.random_range(-0.15..0.15f64);
    let ty = rng.random_range(-0.15..0.15f64);
    let shear = rng.random_range(-0.20..0.20f64);
    let thickness = rng.random_range(0.040..0.080f64);
    let intensity = rng.random_range(0.58..1.0f64);
    let noise_sd = 0.14f64;

    let (sin, cos) = angle.sin_cos();
    let transform = |x: f64, y: f64| -> (f64, f64) {
        let (x, y) = (x - 0.5, y - 0.5);
        let x = x + shear * y;
        let (x, y) = (x * scale, y * scale);
        let (x, y) = (x * cos - y * sin, x * sin + y * cos);
        (x + 0.5 + tx, y + 0.5 + ty)
    };
    let segments: Vec<[f64; 4]> = digit_segments(d)
        .into_iter()
        .map(|s| {
            let (x1, y1) = transform(s[0], s[1]);
            let (x2, y2) = transform(s[2], s[3]);
            [x1, y1, x2, y2]
        })
        .collect();

    let soft = 0.02;
    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let u = (px as f64 + 0.5) / side as f64;
            let v = (py as f64 + 0.5) / side as f64;
            let mut val: f64 = 0.0;
            for s in &segments {
                let dist = dist_to_segment(u, v, s);
                let a = ((thickness - dist) / soft + 0.5).clamp(0.0, 1.0);
                val = val.max(a);
            }
            val *= intensity;
            // Box-Muller pixel noise.
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let noise = (-2.0 * u1.ln()).sqrt() * u2.cos() * noise_sd;
            let p = ((val + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(p);
        }
    }
    out
}

/// Synthetic 28×28 digit corpus with balanced shuffled labels.
pub fn synthetic_digits(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let d = (i % 10) as u8;
        let pixels = render_digit(d, 28, &mut rng);
        images.push(pixels.iter().map(|&p| p as f64 / 255.0).collect());
        labels.push(d);
    }
    // Shuffle so domain splits are label-balanced but unordered.
    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Dataset {
        images: order.iter().map(|&i| images[i].clone()).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
    }
}

/// Write a synthetic train/test pair in IDX format under `dir`, returning the
/// four file paths (train images, train labels, test images, test labels).
pub fn synthetic_idx_files(
    dir: &Path,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<[std::path::PathBuf; 4]> {
    std::fs::create_dir_all(dir)?;
    let sets = [("train", train_count, seed), ("t10k", test_count, seed ^ 0x7e57)];
    let mut paths = Vec::new();
    for (prefix, count, seed) in sets {
        let ds = synthetic_digits(count, seed);
        let pixels: Vec<u8> = ds
            .images
            .iter()
            .flat_map(|img| img.iter().map(|&v| (v * 255.0).round() as u8))
            .collect();
        let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        write_idx_images(
            &images_path,
            &IdxImages {
                rows: 28,
                cols: 28,
                pixels,
            },
        )?;
        write_idx_labels(&labels_path, &ds.labels)?;
        paths.push(images_path);
        paths.push(labels_path);
    }
    Ok([
        paths[0].clone(),
        paths[1].clone(),
        paths[2].clone(),
        paths[3].clone(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_is_big_endian_and_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(
            &path,
            &IdxImages {
                rows: 2,
                cols: 3,
                pixels: vec![9; 12],
            },
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 2]); // count
        assert_eq!(&bytes[8..12], &[0, 0, 0, 2]); // rows
        assert_eq!(&bytes[12..16], &[0, 0, 0, 3]); // cols
        assert_eq!(bytes.len(), 16 + 12);

        let labels_path = dir.path().join("labels");
        write_idx_labels(&labels_path, &[7, 3]).unwrap();
        let bytes = std::fs::read(&labels_path).unwrap();
        assert_eq!(&bytes[0..4], &[0, 0, 8, 1]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 2]);
        assert_eq!(&bytes[8..], &[7, 3]);
    }

    #[test]
    fn idx_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = IdxImages {
            rows: 28,
            cols: 28,
            pixels: (0..28 * 28 * 3).map(|i| (i % 251) as u8).collect(),
        };
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        write_idx_images(&ip, &imgs).unwrap();
        write_idx_labels(&lp, &[1, 2, 3]).unwrap();
        assert_eq!(read_idx_images(&ip).unwrap(), imgs);
        assert_eq!(read_idx_labels(&lp).unwrap(), vec![1, 2, 3]);

        // Image magic on a label file and vice versa.
        assert!(matches!(read_idx_images(&lp), Err(Error::BadDataset(_))));
        assert!(matches!(read_idx_labels(&ip), Err(Error::BadDataset(_))));

        // Truncation.
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_idx_images(&ip).is_err());

        let ds = Dataset::from_idx(&dir.path().join("nope"), &lp);
        assert!(ds.is_err());
    }

    #[test]
    fn dataset_from_idx_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        write_idx_images(
            &ip,
            &IdxImages {
                rows: 1,
                cols: 2,
                pixels: vec![0, 255, 51, 102],
            },
        )
        .unwrap();
        write_idx_labels(&lp, &[4, 9]).unwrap();
        let ds = Dataset::from_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0], vec![0.0, 1.0]);
        assert_eq!(ds.labels, vec![4, 9]);
        assert!((ds.images[1][0] - 0.2).abs() < 1e-12);

        write_idx_labels(&lp, &[1]).unwrap();
        assert!(Dataset::from_idx(&ip, &lp).is_err());
    }

    #[test]
    fn synthetic_corpus_is_balanced_and_deterministic() {
        let a = synthetic_digits(200, 7);
        let b = synthetic_digits(200, 7);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
        // Different seeds give different pixels.
        let c = synthetic_digits(200, 8);
        assert_ne!(a.images, c.images);
        // Pixels span a meaningful dynamic range.
        let max = a.images[0].iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.5);
    }

    #[test]
    fn synthetic_idx_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let [ti, tl, ei, el] = synthetic_idx_files(dir.path(), 50, 20, 3).unwrap();
        let train = Dataset::from_idx(&ti, &tl).unwrap();
        let test = Dataset::from_idx(&ei, &el).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 20);
        let domains = train.split_domains(2, 25).unwrap();
        assert_eq!(domains.len(), 2);
        assert_eq!(domains[0].len(), 25);
        assert!(train.split_domains(3, 20).is_err());
    }
}
