//! Feature files, synthetic datasets, and run configuration.

mod config;
mod io;
mod synthetic;

pub use config::{parse_config, read_config, TrainConfig};
pub use io::{
    load_features, read_cgf, read_csv, save_features, write_cgf, write_csv, FeatureFormat, CGF_MAGIC,
};
pub use synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    #[default]
    All,
}

/// `n×D` feature rows with optional ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    features: Mat,
    labels: Option<Vec<usize>>,
    pub split: Split,
}

impl FeatureMatrix {
    pub fn new(features: Mat, labels: Option<Vec<usize>>) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::dim(format!(
                    "{} labels for {} points",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(FeatureMatrix {
            features,
            labels,
            split: Split::All,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_points(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of distinct label values (max + 1), if labeled.
    pub fn label_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }
}
