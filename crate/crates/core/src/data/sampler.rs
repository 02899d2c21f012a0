use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// With-replacement sampler weighting every sample by the inverse frequency
/// of its class, so classes are drawn equally often regardless of size.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    indices: Vec<usize>,
    dist: WeightedIndex<f64>,
    batch_size: usize,
}

impl BalancedSampler {
    pub fn new(dataset: &Dataset, classes: &[u32], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let indices = dataset.indices_of_classes(classes);
        if indices.is_empty() {
            return Err(Error::InsufficientData("no samples to draw batches from".into()));
        }
        let weights: Vec<f64> = indices
            .iter()
            .map(|&i| 1.0 / dataset.class_count(dataset.samples()[i].class_id) as f64)
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self {
            indices,
            dist,
            batch_size,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.indices[self.dist.sample(rng)]
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    /// One epoch: `ceil(n / batch_size)` batches totalling `n` draws.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let n = self.indices.len();
        (0..self.batches_per_epoch())
            .map(|b| {
                let size = self.batch_size.min(n - b * self.batch_size);
                (0..size).map(|_| self.draw(rng)).collect()
            })
            .collect()
    }
}

pub fn balanced_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    classes: &[u32],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    Ok(BalancedSampler::new(dataset, classes, batch_size)?.epoch(rng))
}
