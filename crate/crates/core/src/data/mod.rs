//! Datasets, IDX ingestion, non-IID partitioning and input encoding.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx_split, parse_idx, serialize_idx_images, serialize_idx_labels, IdxData, Split};
pub use partition::{dirichlet_partition, PartitionMode, PartitionPlan};
pub use synth::{synth_dataset, synth_split, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]` with shape `(n, channels, h, w)` plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Shape(format!(
                "images must be (n, c, h, w), got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Argument(format!("label {bad} >= class count {class_count}")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n: usize = self.image_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// The first `n` samples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Argument("truncation leaves an empty dataset".into()));
        }
        let per: usize = self.image_shape().iter().product();
        let [c, h, w] = self.image_shape();
        Self::new(
            Tensor::new(vec![n, c, h, w], self.images.data()[..n * per].to_vec())?,
            self.labels[..n].to_vec(),
            self.class_count,
        )
    }
}

/// Direct encoding: the image is replayed as input current at each of `T`
/// steps. Output shape `(T, c, h, w)`.
pub fn encode_input(image: &Tensor, time_steps: usize) -> Result<Tensor> {
    if time_steps == 0 {
        return Err(Error::Argument("time window must be at least one step".into()));
    }
    let mut shape = vec![time_steps];
    shape.extend_from_slice(image.shape());
    Tensor::new(shape, image.data().repeat(time_steps))
}
