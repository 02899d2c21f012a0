use serde::{Deserialize, Serialize};

use crate::backbones::{logits_on_tape, Backbone};
use crate::data::{BalancedSampler, Dataset};
use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::math::{Adam, GradOrder, ParamSet, Tape};
use crate::seed;

use super::ncm::argmax_rows;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Accuracy on the balanced batches seen during each epoch.
    pub epoch_accuracy: Vec<f64>,
    /// Validation score per epoch when a selector was supplied.
    pub validation: Vec<f64>,
    pub selected_epoch: Option<usize>,
}

/// Scores a candidate backbone after an epoch; higher is better.
pub type EpochValidator<'a> = &'a mut dyn FnMut(&Backbone) -> Result<f64>;

/// Maps sorted base class ids to head outputs `0..C`.
pub fn base_label_map(classes: &[u32]) -> impl Fn(u32) -> usize + '_ {
    move |c| classes.binary_search(&c).expect("sample of a base class")
}

/// Trains backbone + head with softmax cross-entropy over class-balanced
/// batches of the base classes. When `validate` is given it is scored after
/// every epoch and the best-scoring parameters are returned.
pub fn train_base(
    mut backbone: Backbone,
    dataset: &Dataset,
    base_classes: &[u32],
    diffusion: Option<&DiffusionOperator>,
    config: &TrainConfig,
    mut validate: Option<EpochValidator<'_>>,
) -> Result<(Backbone, TrainLog)> {
    let mut classes = base_classes.to_vec();
    classes.sort_unstable();
    if backbone.config().n_classes != classes.len() {
        return Err(Error::Config(format!(
            "head has {} outputs but there are {} base classes",
            backbone.config().n_classes,
            classes.len()
        )));
    }
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok((backbone, log));
    }
    if !(config.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
    }
    let label_of = base_label_map(&classes);
    let sampler = BalancedSampler::new(dataset, &classes, config.batch_size)?;
    let bconfig = *backbone.config();
    let mut adam = Adam::new(backbone.params().param_count());
    let mut best: Option<(f64, usize, ParamSet)> = None;

    for epoch in 0..config.epochs {
        let mut rng = seed::stream(config.seed, seed::domain::TRAIN, epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in sampler.epoch(&mut rng).into_iter().enumerate() {
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| label_of(dataset.samples()[i].class_id))
                .collect();
            let mut tape = Tape::new();
            let vars = backbone.params().register(&mut tape, true);
            let x = tape.constant(dataset.features(&batch));
            let logits = logits_on_tape(&bconfig, &mut tape, &vars, x, diffusion)?;
            let loss = tape.softmax_xent(logits, &labels)?;
            let loss_value = tape.value(loss).as_slice()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b} (lr {}, batch size {})",
                    config.lr, config.batch_size
                )));
            }
            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += labels.len();
            loss_sum += loss_value * labels.len() as f64;

            let flat = ParamSet::flat_vars(&vars);
            let grads = tape.backward(loss, &flat, GradOrder::First)?;
            let grads = backbone.params().read_from(&tape, &ParamSet::from_flat_vars(&grads))?;
            adam.step(backbone.params_mut(), &grads, config.lr)?;
        }
        log.epoch_loss.push(loss_sum / seen as f64);
        log.epoch_accuracy.push(correct as f64 / seen as f64);
        log::debug!(
            "epoch {epoch}: loss {:.4}, batch accuracy {:.3}",
            log.epoch_loss[epoch],
            log.epoch_accuracy[epoch]
        );

        if let Some(v) = validate.as_mut() {
            let score = v(&backbone)?;
            log.validation.push(score);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, backbone.params().clone()));
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        log.selected_epoch = Some(epoch);
        *backbone.params_mut() = params;
    }
    Ok((backbone, log))
}

/// Head accuracy over every sample of `classes`.
pub fn classification_accuracy(
    backbone: &Backbone,
    dataset: &Dataset,
    classes: &[u32],
    diffusion: Option<&DiffusionOperator>,
) -> Result<f64> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let label_of = base_label_map(&sorted);
    let indices = dataset.indices_of_classes(&sorted);
    let logits = backbone.logits(&dataset.features(&indices), diffusion)?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(&indices)
        .filter(|(p, &i)| **p == label_of(dataset.samples()[i].class_id))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}
