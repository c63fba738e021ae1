//! Ready-made train/test pairs for the two-circles and blurred-MNIST setups.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_idx, stratified_sample, synthetic_regression, two_circles, Dataset, Split};
use crate::error::Result;
use crate::trainer::{derive_seed, DataProvider};

pub const CIRCLE_RADII: (f64, f64) = (0.5, 1.0);
pub const CIRCLE_TEST_SIZE: usize = 1000;
pub const BLUR_LENGTH: usize = 5;
pub const BLUR_ANGLE: f64 = 45.0;

const STREAM_TRAIN: u64 = 101;
const STREAM_TEST: u64 = 102;
const STREAM_FLIP: u64 = 103;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    TwoCircles {
        noise_std: f64,
    },
    /// IDX files under `dir` with the usual names (`train-images-idx3-ubyte`,
    /// `t10k-…` or `test-…`), optionally gzipped.
    Mnist {
        dir: PathBuf,
        blur_length: usize,
        blur_angle: f64,
    },
    Regression {
        inputs: usize,
        outputs: usize,
        noise_scale: f64,
    },
}

impl DataSource {
    pub fn two_circles() -> Self {
        DataSource::TwoCircles { noise_std: 0.08 }
    }

    pub fn mnist(dir: impl Into<PathBuf>) -> Self {
        DataSource::Mnist {
            dir: dir.into(),
            blur_length: BLUR_LENGTH,
            blur_angle: BLUR_ANGLE,
        }
    }

    /// Training set of `train_size` points with a `noise_fraction` of
    /// flipped labels, and the matching clean test set.
    pub fn load(&self, train_size: usize, noise_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::TwoCircles { noise_std } => {
                let (ri, ro) = CIRCLE_RADII;
                let train = two_circles(train_size, ri, ro, *noise_std, derive_seed(seed, STREAM_TRAIN))?
                    .flip_labels(noise_fraction, derive_seed(seed, STREAM_FLIP))?;
                let mut test = two_circles(CIRCLE_TEST_SIZE, ri, ro, *noise_std, derive_seed(seed, STREAM_TEST))?;
                test.split = Split::Test;
                Ok((train, test))
            }
            DataSource::Mnist {
                dir,
                blur_length,
                blur_angle,
            } => {
                let full = load_idx(
                    &idx_path(dir, &["train-images-idx3-ubyte"])?,
                    &idx_path(dir, &["train-labels-idx1-ubyte"])?,
                    Split::Train,
                )?;
                let train = stratified_sample(&full, train_size, derive_seed(seed, STREAM_TRAIN))?
                    .motion_blur(*blur_length, *blur_angle)?
                    .flip_labels(noise_fraction, derive_seed(seed, STREAM_FLIP))?;
                let test = load_idx(
                    &idx_path(dir, &["t10k-images-idx3-ubyte", "test-images-idx3-ubyte"])?,
                    &idx_path(dir, &["t10k-labels-idx1-ubyte", "test-labels-idx1-ubyte"])?,
                    Split::Test,
                )?
                .motion_blur(*blur_length, *blur_angle)?;
                Ok((train, test))
            }
            DataSource::Regression {
                inputs,
                outputs,
                noise_scale,
            } => {
                // noise_fraction scales the target noise for regression
                let scale = noise_scale * (1.0 + noise_fraction);
                let train =
                    synthetic_regression(train_size, *inputs, *outputs, scale, derive_seed(seed, STREAM_TRAIN))?;
                let mut test = synthetic_regression(1000, *inputs, *outputs, 0.0, derive_seed(seed, STREAM_TEST))?;
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }
}

impl DataProvider for DataSource {
    fn datasets(&self, train_size: usize, noise_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        self.load(train_size, noise_fraction, seed)
    }
}

fn idx_path(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for name in [format!("{stem}.gz"), stem.to_string()] {
            let p = dir.join(name);
            if p.exists() {
                return Ok(p);
            }
        }
    }
    let msg = format!("no {} file in {}", stems.join(" or "), dir.display());
    Err(std::io::Error::new(std::io::ErrorKind::NotFound, msg).into())
}
