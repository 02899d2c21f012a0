//! Training regimes (base-class classification, episodic meta-training) and
//! the few-shot inference methods.

mod base;
mod maml;
mod ncm;
mod ptmap;

pub use base::{base_label_map, classification_accuracy, train_base, EpochValidator, TrainConfig, TrainLog};
pub use maml::{
    adapt_params, cosine_meta_lr, maml_adapt, maml_meta_train, meta_gradient, meta_loss, multi_step_weights,
    support_loss, unrolled_inner_loop, InnerRates, MamlConfig, MamlModel, MetaGradient, MetaTrainConfig,
    MetaTrainLog,
};
pub use ncm::{
    argmax_rows, class_means, l2_normalize_rows, ncm_classify, ncm_episode, nearest_center, representation_mean, simpleshot,
    squared_distance, transform_features, FeatureTransform, NcmConfig,
};
pub use ptmap::{
    power_transform, ptmap_classify, ptmap_on_features, sinkhorn, PtMapConfig, PtMapOutcome, PtMapPrediction,
    TransportPlan,
};

use crate::data::accuracy;

/// Predicted local labels for an episode's queries and the resulting
/// accuracy (fraction in `[0, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutcome {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

impl MethodOutcome {
    pub fn new(predictions: Vec<usize>, labels: &[usize]) -> Self {
        let accuracy = accuracy(&predictions, labels);
        Self { predictions, accuracy }
    }
}
