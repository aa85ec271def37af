//! Deterministic desk-scale datasets: Gaussian-cluster synthetic data and an
//! image-folder ingestion path with pad-and-crop preprocessing.

pub mod image;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::rng::{self, tag};

pub use image::{load_image_folder, AugmentFlags, ChannelStats, Preprocessor};

fn default_separation() -> f64 {
    2.0
}

fn default_modes() -> usize {
    1
}

/// Declarative dataset description. Train and test splits are disjoint by
/// construction: synthetic splits draw from independent streams, image
/// splits come from separate directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        dims: usize,
        train_size: usize,
        test_size: usize,
        /// Distance of each cluster centroid from the origin, in units of
        /// the within-cluster standard deviation.
        #[serde(default = "default_separation")]
        separation: f64,
        /// Gaussian modes per class. One mode keeps classes linearly
        /// separable; more modes make encoder capacity matter.
        #[serde(default = "default_modes")]
        modes_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    ImageFolder {
        /// Directory holding `train/<class>/*.png` and `test/<class>/*.png`.
        /// Relative paths resolve under `ATSC_DATA_DIR` when set.
        path: String,
        image_hw: (usize, usize),
        #[serde(default)]
        augment: AugmentFlags,
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic {
                num_classes,
                dims,
                train_size,
                test_size,
                separation,
                modes_per_class,
                ..
            } => {
                if *modes_per_class == 0 {
                    return Err(Error::Config(
                        "dataset.modes_per_class must be positive".into(),
                    ));
                }
                if *num_classes < 2 {
                    return Err(Error::Config("dataset.num_classes must be at least 2".into()));
                }
                if *dims == 0 {
                    return Err(Error::Config("dataset.dims must be positive".into()));
                }
                if *train_size == 0 || *test_size == 0 {
                    return Err(Error::Config("dataset split sizes must be positive".into()));
                }
                if !(*separation >= 0.0) {
                    return Err(Error::Config("dataset.separation must be nonnegative".into()));
                }
                Ok(())
            }
            DatasetSpec::ImageFolder { path, image_hw, .. } => {
                if path.is_empty() {
                    return Err(Error::Config("dataset.path must not be empty".into()));
                }
                if image_hw.0 == 0 || image_hw.1 == 0 {
                    return Err(Error::Config("dataset.image_hw must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Input shape `(H, W, Ch)` a matching encoder must accept.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetSpec::Synthetic { dims, .. } => (1, 1, *dims),
            DatasetSpec::ImageFolder { image_hw, .. } => (image_hw.0, image_hw.1, 3),
        }
    }

    pub fn num_classes_hint(&self) -> Option<usize> {
        match self {
            DatasetSpec::Synthetic { num_classes, .. } => Some(*num_classes),
            DatasetSpec::ImageFolder { .. } => None,
        }
    }
}

/// One minibatch: inputs stacked as a feature-map-shaped tensor and integer
/// class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: FeatureMap,
    pub y: Vec<usize>,
}

enum SplitData {
    /// Synthetic vectors, one row per sample.
    Vectors(Array2<f64>),
    /// Raw images in `[0, 1]`, preprocessed at batch assembly.
    Images(Vec<Array3<f64>>),
}

/// An immutable dataset split. Batch assembly applies preprocessing and
/// (for training batches from image data) augmentation.
pub struct Split {
    data: SplitData,
    labels: Vec<usize>,
    num_classes: usize,
    preprocessor: Option<Preprocessor>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Assembles the samples at `indices` into a batch. `train` batches from
    /// image data are augmented using draws from `aug_rng`; vector data and
    /// eval batches ignore it.
    pub fn batch(&self, indices: &[usize], train: bool, aug_rng: &mut ChaCha8Rng) -> Batch {
        let y: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let x = match &self.data {
            SplitData::Vectors(rows) => {
                let dims = rows.ncols();
                let mut x = Array4::zeros((indices.len(), 1, 1, dims));
                for (bi, &i) in indices.iter().enumerate() {
                    for d in 0..dims {
                        x[(bi, 0, 0, d)] = rows[(i, d)];
                    }
                }
                x
            }
            SplitData::Images(imgs) => {
                let pp = self
                    .preprocessor
                    .as_ref()
                    .expect("image split carries a preprocessor");
                let (h, w, c) = imgs[0].dim();
                let mut x = Array4::zeros((indices.len(), h, w, c));
                for (bi, &i) in indices.iter().enumerate() {
                    let img = if train {
                        pp.train(&imgs[i], aug_rng)
                    } else {
                        pp.eval(&imgs[i])
                    };
                    x.index_axis_mut(ndarray::Axis(0), bi).assign(&img);
                }
                x
            }
        };
        Batch { x, y }
    }

    pub(crate) fn from_vectors(rows: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Self {
        Split {
            data: SplitData::Vectors(rows),
            labels,
            num_classes,
            preprocessor: None,
        }
    }

    pub(crate) fn from_images(
        imgs: Vec<Array3<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        preprocessor: Preprocessor,
    ) -> Self {
        Split {
            data: SplitData::Images(imgs),
            labels,
            num_classes,
            preprocessor: Some(preprocessor),
        }
    }
}

/// Generates the Gaussian-cluster task: each class owns `modes_per_class`
/// cluster centroids sitting `separation` noise-sigmas from the origin in
/// random directions, samples add unit Gaussian noise, labels are balanced
/// round-robin (within one sample).
pub fn make_synthetic(spec: &DatasetSpec) -> Result<(Split, Split)> {
    spec.validate()?;
    let DatasetSpec::Synthetic {
        num_classes,
        dims,
        train_size,
        test_size,
        separation,
        modes_per_class,
        seed,
    } = spec
    else {
        return Err(Error::Config("make_synthetic requires a synthetic spec".into()));
    };
    let (k, d, m) = (*num_classes, *dims, *modes_per_class);

    let mut centers = Array2::zeros((k * m, d));
    let mut crng = rng::stream(*seed, &[tag::DATA_TRAIN, 0]);
    for c in 0..k * m {
        let mut norm2 = 0.0;
        let mut dir = vec![0.0f64; d];
        for v in dir.iter_mut() {
            let z: f64 = crng.sample(StandardNormal);
            *v = z;
            norm2 += z * z;
        }
        let scale = if norm2 > 0.0 {
            separation / norm2.sqrt()
        } else {
            0.0
        };
        for (j, v) in dir.iter().enumerate() {
            centers[(c, j)] = v * scale;
        }
    }

    let draw = |n: usize, stream_tag: u64| {
        let mut r = rng::stream(*seed, &[stream_tag, 1]);
        let mut rows = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % k;
            labels.push(class);
            let mode = if m > 1 { r.random_range(0..m) } else { 0 };
            let center = class * m + mode;
            for j in 0..d {
                let z: f64 = r.sample(StandardNormal);
                rows[(i, j)] = centers[(center, j)] + z;
            }
        }
        Split::from_vectors(rows, labels, k)
    };

    Ok((
        draw(*train_size, tag::DATA_TRAIN),
        draw(*test_size, tag::DATA_TEST),
    ))
}

/// Environment variable naming the root under which relative image-folder
/// paths resolve.
pub const DATA_DIR_ENV: &str = "ATSC_DATA_DIR";

/// Materializes the splits described by a dataset spec. Relative
/// image-folder paths resolve under [`DATA_DIR_ENV`] when it is set.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Split, Split)> {
    spec.validate()?;
    match spec {
        DatasetSpec::Synthetic { .. } => make_synthetic(spec),
        DatasetSpec::ImageFolder {
            path,
            image_hw,
            augment,
        } => {
            let mut root = std::path::PathBuf::from(path);
            if root.is_relative() {
                if let Ok(base) = std::env::var(DATA_DIR_ENV) {
                    root = std::path::Path::new(&base).join(&root);
                }
            }
            load_image_folder(&root, *image_hw, *augment)
        }
    }
}

/// Deterministic epoch batching: a Fisher-Yates shuffle keyed by
/// `(seed, epoch)`, cut into `batch_size` groups with the short final batch
/// retained. Returns sample indices per batch.
pub fn iterate_batches(
    split_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..split_len).collect();
    let mut r = rng::stream(seed, &[tag::SHUFFLE, epoch as u64]);
    for i in (1..split_len).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}
