//! Datasets, pixel normalization, synthetic easy/hard data and evaluation.

mod cluster;
mod eval;
mod idx;
mod synthetic;

pub(crate) use eval::map_chunks;

pub use cluster::{
    cluster_centroid_report, hardness_from_scores, ClassCentroids, ClusterReport, DEFAULT_HARD_THRESHOLD,
};
pub use eval::{
    evaluate_classification, evaluate_hard_accuracy, evaluate_verification, fold_assignment, parse_pairs,
    verification_accuracy, PairList, DEFAULT_FOLDS,
};
pub use idx::{load_idx, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{make_synthetic, SyntheticParams, SyntheticSet};

use thiserror::Error;

use crate::models::ModelError;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated IDX file, expected {expected} bytes, found {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("pairs line {line}: {msg}")]
    Pairs { line: usize, msg: String },
    #[error("sample {index} has a zero-norm embedding")]
    ZeroNormEmbedding { index: usize },
    #[error("class {class} has no {partition} samples")]
    MissingPartition { class: usize, partition: &'static str },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Raw 8-bit images `[N × C × H × W]` with integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<u8>,
    /// `[C, H, W]`
    pub image_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.len()];
        s.extend(&self.image_shape);
        s
    }

    /// Normalized real-valued copy for training and evaluation.
    pub fn to_labeled<T: Scalar>(&self) -> Result<LabeledData<T>> {
        let inputs =
            Tensor::from_vec(&self.shape(), normalize(&self.images)).map_err(|e| DataError::Invalid(e.to_string()))?;
        LabeledData::new(inputs, self.labels.clone(), self.num_classes)
    }
}

/// `(p - 127.5) / 128` per pixel.
pub fn normalize<T: Scalar>(pixels: &[u8]) -> Vec<T> {
    let (shift, scale) = (T::lit(127.5), T::lit(128.0));
    pixels.iter().map(|&p| (T::lit(f64::from(p)) - shift) / scale).collect()
}

/// Real-valued samples `[N × ...]` with labels, the input to training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData<T> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> LabeledData<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    /// Per-sample shape (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gathers the given rows into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.sample_shape().iter().product();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&shape, data).expect("gathered rows"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (inputs, labels) = self.batch(indices);
        Self {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }
}
