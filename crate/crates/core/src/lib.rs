//! Few-shot decoding of brain activation maps: dense backbones with a
//! hand-written differentiation tape, graph diffusion over ROIs, episodic
//! data handling, training regimes, inference methods and evaluation.

pub mod backbones;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod math;
pub mod paradigms;
pub mod seed;

pub use backbones::{Arch, Backbone, BackboneConfig, Checkpoint, CheckpointHeader, Regime};
pub use data::{ClassSplit, Dataset, Episode, EpisodeData, SplitPart, SynthConfig, TaskSpec};
pub use error::{Error, Result};
pub use graph::{DiffusionOperator, WeightedGraph};
pub use math::{GradOrder, ParamSet, Tape, Tensor2};
