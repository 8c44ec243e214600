//! In-memory token datasets: the uniform currency between dataset loaders
//! (std side) and training/evaluation (this crate).

use alloc::vec::Vec;

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Labelled samples of per-token features, sample-major:
/// `features[s · tokens · feat_dim ..]` holds sample `s` as `tokens`
/// consecutive rows of `feat_dim` values. `tokens` counts content tokens
/// only — the class token is added by the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset<T> {
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub tokens: usize,
    pub feat_dim: usize,
}

impl<T: Scalar> TokenDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_width(&self) -> usize {
        self.tokens * self.feat_dim
    }

    /// Feature block of one sample.
    pub fn sample(&self, idx: usize) -> &[T] {
        let w = self.sample_width();
        &self.features[idx * w..(idx + 1) * w]
    }

    /// Gather a batch in the given index order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let w = self.sample_width();
        let mut x = Vec::with_capacity(indices.len() * w);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.sample(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    /// Contiguous range view, cheap path for fixed evaluation batches.
    pub fn range(&self, start: usize, len: usize) -> (&[T], &[usize]) {
        let w = self.sample_width();
        (
            &self.features[start * w..(start + len) * w],
            &self.labels[start..start + len],
        )
    }

    /// Check internal consistency and compatibility with a backbone.
    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Input("dataset: no samples".into()));
        }
        if self.features.len() != self.len() * self.sample_width() {
            return Err(Error::Input(alloc::format!(
                "dataset: {} feature values for {} samples of {}×{}",
                self.features.len(),
                self.len(),
                self.tokens,
                self.feat_dim
            )));
        }
        if self.tokens + 1 != spec.tokens {
            return Err(Error::Input(alloc::format!(
                "dataset: {} content tokens, backbone expects {}",
                self.tokens,
                spec.tokens - 1
            )));
        }
        if self.feat_dim != spec.input_dim {
            return Err(Error::Input(alloc::format!(
                "dataset: feature width {}, backbone expects {}",
                self.feat_dim,
                spec.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= spec.classes) {
            return Err(Error::Input(alloc::format!(
                "dataset: label {bad} out of range for {} classes",
                spec.classes
            )));
        }
        Ok(())
    }
}
