//! Dataset ingestion, class splits, episode sampling, class-balanced batch
//! sampling and the synthetic generator.

mod dataset;
mod episode;
mod sampler;
mod split;
mod synth;

pub use dataset::{ClassInfo, Dataset, Manifest, Sample, GRAPH_FILE, MANIFEST_FILE, SAMPLES_FILE};
pub use episode::{accuracy, sample_episode, Episode, EpisodeData, TaskSpec};
pub use sampler::{balanced_batches, BalancedSampler};
pub use split::{split_classes, ClassSplit, SplitPart, BENCHMARK_SPLIT, SPLIT_FILE};
pub use synth::{gen_synthetic, GroundTruth, SynthConfig, GROUND_TRUTH_FILE};
