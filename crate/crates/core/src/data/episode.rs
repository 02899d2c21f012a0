use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::math::Tensor2;

/// N-way K-shot Q-query task shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl TaskSpec {
    pub const FIVE_WAY_FIVE_SHOT: TaskSpec = TaskSpec { ways: 5, shots: 5, queries: 15 };
    pub const FIVE_WAY_ONE_SHOT: TaskSpec = TaskSpec { ways: 5, shots: 1, queries: 15 };

    pub fn new(ways: usize, shots: usize, queries: usize) -> Result<Self> {
        let spec = Self { ways, shots, queries };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries < 1 {
            return Err(Error::InvalidArgument(format!(
                "task spec needs ways >= 2, shots >= 1, queries >= 1; got {self}"
            )));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.shots + self.queries
    }
}

impl std::fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-way {}-shot {}-query", self.ways, self.shots, self.queries)
    }
}

/// A sampled task. Support and query hold dataset sample indices grouped by
/// local class: local class `c` owns `support[c*K..(c+1)*K]` and
/// `query[c*Q..(c+1)*Q]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub spec: TaskSpec,
    /// Local label → global class id.
    pub classes: Vec<u32>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.spec.ways).flat_map(|c| std::iter::repeat_n(c, self.spec.shots)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.spec.ways).flat_map(|c| std::iter::repeat_n(c, self.spec.queries)).collect()
    }

    pub fn local_label(&self, class_id: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }
}

/// Episode contents gathered as matrices, either raw inputs or
/// representations.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeData {
    pub spec: TaskSpec,
    pub support: Tensor2,
    pub support_labels: Vec<usize>,
    pub query: Tensor2,
    pub query_labels: Vec<usize>,
}

impl EpisodeData {
    /// Gathers rows of `table`, whose row `r` holds sample `row_of[idx]`.
    pub fn gather(episode: &Episode, table: &Tensor2, row_of: impl Fn(usize) -> usize) -> Self {
        let s: Vec<usize> = episode.support.iter().map(|&i| row_of(i)).collect();
        let q: Vec<usize> = episode.query.iter().map(|&i| row_of(i)).collect();
        Self {
            spec: episode.spec,
            support: table.select_rows(&s),
            support_labels: episode.support_labels(),
            query: table.select_rows(&q),
            query_labels: episode.query_labels(),
        }
    }

    pub fn from_dataset(episode: &Episode, dataset: &Dataset) -> Self {
        Self {
            spec: episode.spec,
            support: dataset.features(&episode.support),
            support_labels: episode.support_labels(),
            query: dataset.features(&episode.query),
            query_labels: episode.query_labels(),
        }
    }

    pub fn accuracy(&self, predictions: &[usize]) -> f64 {
        accuracy(predictions, &self.query_labels)
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Draws `ways` classes from `classes` without replacement, then `shots +
/// queries` distinct samples per class; the first `shots` are support.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    classes: &[u32],
    spec: TaskSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    if classes.len() < spec.ways {
        return Err(Error::InsufficientData(format!(
            "{} classes available for a {}-way task",
            classes.len(),
            spec.ways
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| dataset.class_count(c) < spec.per_class()) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {} samples, {} needed per class",
            dataset.class_count(c),
            spec.per_class()
        )));
    }
    let chosen: Vec<u32> = sample(rng, classes.len(), spec.ways)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries);
    for &c in &chosen {
        let pool = dataset.indices_of(c);
        let picked = sample(rng, pool.len(), spec.per_class());
        for (k, i) in picked.into_iter().enumerate() {
            if k < spec.shots {
                support.push(pool[i]);
            } else {
                query.push(pool[i]);
            }
        }
    }
    Ok(Episode {
        spec,
        classes: chosen,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassInfo, Sample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(counts: &[usize]) -> Dataset {
        let classes = (0..counts.len() as u32).map(|id| ClassInfo { id, name: format!("c{id}") }).collect();
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for k in 0..n {
                samples.push(Sample {
                    sample_id: format!("{c}-{k}"),
                    class_id: c as u32,
                    subject_id: String::new(),
                    features: vec![c as f64],
                });
            }
        }
        Dataset::new(1, classes, samples).unwrap()
    }

    #[test]
    fn episode_sizes() {
        let ds = dataset(&[33; 21]);
        let classes = ds.class_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&ds, &classes, TaskSpec::FIVE_WAY_FIVE_SHOT, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (25, 75));
        let e = sample_episode(&ds, &classes, TaskSpec::FIVE_WAY_ONE_SHOT, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
        for (pos, &i) in e.query.iter().enumerate() {
            assert_eq!(ds.samples()[i].class_id, e.classes[e.query_labels()[pos]]);
        }
    }

    #[test]
    fn deficient_class_is_named() {
        let ds = dataset(&[30, 30, 7, 30, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&ds, &ds.class_ids(), TaskSpec::FIVE_WAY_FIVE_SHOT, &mut rng).unwrap_err();
        assert!(err.to_string().contains("class 2"), "{err}");
        let err = sample_episode(&ds, &[0, 1, 3], TaskSpec::FIVE_WAY_FIVE_SHOT, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn same_stream_same_episode() {
        let ds = dataset(&[25; 10]);
        let a = sample_episode(&ds, &ds.class_ids(), TaskSpec::FIVE_WAY_ONE_SHOT, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_episode(&ds, &ds.class_ids(), TaskSpec::FIVE_WAY_ONE_SHOT, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(TaskSpec::new(1, 1, 1).is_err());
        assert!(TaskSpec::new(5, 0, 15).is_err());
        assert!(TaskSpec::new(5, 1, 0).is_err());
    }
}
