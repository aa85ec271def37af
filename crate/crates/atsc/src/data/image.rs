//! Image-folder ingestion and preprocessing.
//!
//! Layout: `<root>/train/<class>/*.png` and `<root>/test/<class>/*.png`, one
//! subdirectory per class, class order alphabetical. Per-channel statistics
//! are computed over the train split and cached next to the data.
//!
//! Preprocessing: per-channel normalization everywhere; training batches
//! additionally get a 4-pixel zero pad, a random crop back to the original
//! size, and (optionally) a random horizontal flip.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};

pub const STATS_CACHE_FILE: &str = "dataset_stats.json";
pub const PAD_PIXELS: usize = 4;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    /// 4-pixel zero pad followed by a random crop back to the original size.
    #[serde(default = "default_true")]
    pub pad_crop: bool,
    /// Random horizontal flip. Off reproduces the pad-and-crop pipeline
    /// exactly as published.
    #[serde(default = "default_true")]
    pub hflip: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            pad_crop: true,
            hflip: true,
        }
    }
}

/// Per-channel mean and standard deviation of the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Applies normalization and train-time augmentation to raw `[0, 1]` images.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub stats: ChannelStats,
    pub flags: AugmentFlags,
}

impl Preprocessor {
    fn normalize(&self, img: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = img.dim();
        let mut out = Array3::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out[(i, j, k)] = (img[(i, j, k)] - self.stats.mean[k]) / self.stats.std[k];
                }
            }
        }
        out
    }

    /// Evaluation path: normalization only.
    pub fn eval(&self, img: &Array3<f64>) -> Array3<f64> {
        self.normalize(img)
    }

    /// Training path: normalization, then pad/crop and flip with offsets
    /// drawn from `rng`.
    pub fn train(&self, img: &Array3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let offset = if self.flags.pad_crop {
            (
                rng.random_range(0..=2 * PAD_PIXELS),
                rng.random_range(0..=2 * PAD_PIXELS),
            )
        } else {
            (PAD_PIXELS, PAD_PIXELS)
        };
        let flip = self.flags.hflip && rng.random_range(0..2) == 1;
        self.train_with(img, offset, flip)
    }

    /// Deterministic core of the training path: crop the zero-padded image at
    /// `offset` (so `(PAD_PIXELS, PAD_PIXELS)` recovers the original), then
    /// flip horizontally when requested. The flip applies to the source image
    /// before padding.
    pub fn train_with(&self, img: &Array3<f64>, offset: (usize, usize), flip: bool) -> Array3<f64> {
        let norm = self.normalize(img);
        let (h, w, c) = norm.dim();
        let mut out = Array3::zeros((h, w, c));
        let (oy, ox) = offset;
        debug_assert!(oy <= 2 * PAD_PIXELS && ox <= 2 * PAD_PIXELS);
        for i in 0..h {
            for j in 0..w {
                // Position in the padded image, then back into the original;
                // positions falling inside the pad stay zero.
                let pi = i + oy;
                let pj = j + ox;
                if pi < PAD_PIXELS || pi - PAD_PIXELS >= h || pj < PAD_PIXELS || pj - PAD_PIXELS >= w
                {
                    continue;
                }
                let src_i = pi - PAD_PIXELS;
                let mut src_j = pj - PAD_PIXELS;
                if flip {
                    src_j = w - 1 - src_j;
                }
                for k in 0..c {
                    out[(i, j, k)] = norm[(src_i, src_j, k)];
                }
            }
        }
        out
    }
}

fn load_png(path: &Path, expect_hw: (usize, usize)) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != expect_hw {
        return Err(Error::Data(format!(
            "{} is {h}x{w}, expected {}x{}",
            path.display(),
            expect_hw.0,
            expect_hw.1
        )));
    }
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            for k in 0..3 {
                out[(i, j, k)] = p.0[k] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn class_dirs(split_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(split_dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", split_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no class subdirectories",
            split_dir.display()
        )));
    }
    Ok(dirs)
}

fn load_split_images(
    split_dir: &Path,
    expect_hw: (usize, usize),
) -> Result<(Vec<Array3<f64>>, Vec<usize>, usize)> {
    let dirs = class_dirs(split_dir)?;
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for (class_idx, (_, dir)) in dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
            .collect();
        files.sort();
        for f in files {
            imgs.push(load_png(&f, expect_hw)?);
            labels.push(class_idx);
        }
    }
    if imgs.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no png files",
            split_dir.display()
        )));
    }
    Ok((imgs, labels, dirs.len()))
}

fn compute_stats(imgs: &[Array3<f64>]) -> ChannelStats {
    let c = imgs[0].dim().2;
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    let mut n = 0usize;
    for img in imgs {
        let (h, w, _) = img.dim();
        n += h * w;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    sum[k] += img[(i, j, k)];
                    sumsq[k] += img[(i, j, k)] * img[(i, j, k)];
                }
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(ss, m)| {
            let var = ss / n as f64 - m * m;
            var.max(1e-12).sqrt()
        })
        .collect();
    ChannelStats { mean, std }
}

/// Loads an image-folder dataset. Channel statistics come from the cache file
/// when present, else are computed over the train split and cached (a cache
/// write failure only logs a warning).
pub fn load_image_folder(
    root: &Path,
    image_hw: (usize, usize),
    augment: AugmentFlags,
) -> Result<(Split, Split)> {
    let (train_imgs, train_labels, k_train) = load_split_images(&root.join("train"), image_hw)?;
    let (test_imgs, test_labels, k_test) = load_split_images(&root.join("test"), image_hw)?;
    if k_train != k_test {
        return Err(Error::Data(format!(
            "train split has {k_train} classes but test split has {k_test}"
        )));
    }

    let cache_path = root.join(STATS_CACHE_FILE);
    let stats = match fs::read_to_string(&cache_path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => {
            let stats = compute_stats(&train_imgs);
            if let Err(e) = fs::write(&cache_path, serde_json::to_string_pretty(&stats)?) {
                log::warn!("cannot cache dataset stats at {}: {e}", cache_path.display());
            }
            stats
        }
    };

    let pp = Preprocessor {
        stats,
        flags: augment,
    };
    let eval_pp = Preprocessor {
        stats: pp.stats.clone(),
        flags: augment,
    };
    Ok((
        Split::from_images(train_imgs, train_labels, k_train, pp),
        Split::from_images(test_imgs, test_labels, k_test, eval_pp),
    ))
}
