//! Episodic meta-training of an initialization plus per-layer, per-step
//! inner learning rates, with multi-step query loss and first-to-second
//! order annealing of the meta-gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{logits_on_tape, Backbone, BackboneConfig};
use crate::data::{sample_episode, Dataset, EpisodeData, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::math::{Adam, GradOrder, Layer, ParamSet, Tape, Tensor2, Var};
use crate::seed;

use super::ncm::argmax_rows;
use super::MethodOutcome;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct MamlConfig {
    pub inner_steps: usize,
    pub init_inner_lr: f64,
    pub meta_lr: f64,
    /// Floor of the cosine-annealed meta learning rate.
    pub min_meta_lr: f64,
    pub meta_batch_size: usize,
    pub multi_step_anneal_epochs: usize,
    pub second_order_from_epoch: usize,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            init_inner_lr: 0.01,
            meta_lr: 1e-3,
            min_meta_lr: 1e-5,
            meta_batch_size: 4,
            multi_step_anneal_epochs: 10,
            second_order_from_epoch: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            tasks_per_epoch: 400,
            seed: 0,
        }
    }
}

/// Learned inner-loop step sizes, `values[step * groups + group]`. One group
/// per backbone layer (weight and bias share a rate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerRates {
    pub steps: usize,
    pub groups: usize,
    pub values: Vec<f64>,
}

impl InnerRates {
    pub fn uniform(steps: usize, groups: usize, rate: f64) -> Self {
        Self {
            steps,
            groups,
            values: vec![rate; steps * groups],
        }
    }

    pub fn get(&self, step: usize, group: usize) -> f64 {
        self.values[step * self.groups + group]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MamlModel {
    pub backbone: Backbone,
    pub rates: InnerRates,
}

impl MamlModel {
    pub fn new(backbone: Backbone, config: &MamlConfig) -> Self {
        let groups = backbone.params().layers().len();
        Self {
            rates: InnerRates::uniform(config.inner_steps, groups, config.init_inner_lr),
            backbone,
        }
    }

    pub fn from_parts(backbone: Backbone, rates: InnerRates) -> Result<Self> {
        if rates.groups != backbone.params().layers().len() || rates.values.len() != rates.steps * rates.groups {
            return Err(Error::Config(format!(
                "inner rates shaped {}x{} do not fit {} layers",
                rates.steps,
                rates.groups,
                backbone.params().layers().len()
            )));
        }
        Ok(Self { backbone, rates })
    }

    pub fn inner_steps(&self) -> usize {
        self.rates.steps
    }
}

/// Weights of the per-step query losses. Starts uniform and moves linearly
/// to all weight on the final step once `epoch >= anneal_epochs`.
pub fn multi_step_weights(steps: usize, epoch: usize, anneal_epochs: usize) -> Vec<f64> {
    if steps == 0 {
        return vec![1.0];
    }
    let t = if anneal_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / anneal_epochs as f64).min(1.0)
    };
    let base = (1.0 - t) / steps as f64;
    let mut w = vec![base; steps];
    w[steps - 1] = base + t;
    w
}

pub fn cosine_meta_lr(config: &MamlConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return config.meta_lr;
    }
    let progress = epoch as f64 / epochs as f64;
    config.min_meta_lr
        + 0.5 * (config.meta_lr - config.min_meta_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Unrolls `rates.len() / groups` gradient steps of `loss` from `params`:
/// `p <- p - rate[step][group_of[p]] * dloss/dp`. Returns the parameters
/// after each step. With [`GradOrder::Second`] the returned nodes are
/// differentiable through the inner gradients themselves.
pub fn unrolled_inner_loop<F>(
    tape: &mut Tape,
    params: &[Var],
    group_of: &[usize],
    rates: &[Var],
    groups: usize,
    order: GradOrder,
    mut loss: F,
) -> Result<Vec<Vec<Var>>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    assert_eq!(params.len(), group_of.len());
    let steps = if groups == 0 { 0 } else { rates.len() / groups };
    let mut trajectory = Vec::with_capacity(steps);
    let mut fast = params.to_vec();
    for step in 0..steps {
        let l = loss(tape, &fast)?;
        let grads = tape.backward(l, &fast, order)?;
        fast = fast
            .iter()
            .zip(&grads)
            .zip(group_of)
            .map(|((&p, &g), &group)| {
                let scaled = tape.scale_by(g, rates[step * groups + group])?;
                tape.sub(p, scaled)
            })
            .collect::<Result<Vec<_>>>()?;
        trajectory.push(fast.clone());
    }
    Ok(trajectory)
}

fn episode_loss(
    config: &BackboneConfig,
    tape: &mut Tape,
    flat: &[Var],
    x: Var,
    labels: &[usize],
    diffusion: Option<&DiffusionOperator>,
) -> Result<Var> {
    let layers = ParamSet::from_flat_vars(flat);
    let logits = logits_on_tape(config, tape, &layers, x, diffusion)?;
    tape.softmax_xent(logits, labels)
}

struct TaskGraph {
    tape: Tape,
    loss: Var,
    params: Vec<Var>,
    rates: Vec<Var>,
}

fn build_task_graph(
    model: &MamlModel,
    data: &EpisodeData,
    diffusion: Option<&DiffusionOperator>,
    step_weights: &[f64],
    order: GradOrder,
) -> Result<TaskGraph> {
    let config = *model.backbone.config();
    let mut tape = Tape::new();
    let layer_vars = model.backbone.params().register(&mut tape, true);
    let params = ParamSet::flat_vars(&layer_vars);
    let group_of: Vec<usize> = (0..params.len()).map(|k| k / 2).collect();
    let rates: Vec<Var> = model
        .rates
        .values
        .iter()
        .map(|&r| tape.variable(Tensor2::scalar(r)))
        .collect();
    let sx = tape.constant(data.support.clone());
    let qx = tape.constant(data.query.clone());

    let trajectory = unrolled_inner_loop(&mut tape, &params, &group_of, &rates, model.rates.groups, order, |t, p| {
        episode_loss(&config, t, p, sx, &data.support_labels, diffusion)
    })?;

    let loss = if trajectory.is_empty() {
        episode_loss(&config, &mut tape, &params, qx, &data.query_labels, diffusion)?
    } else {
        if step_weights.len() != trajectory.len() {
            return Err(Error::InvalidArgument(format!(
                "{} step weights for {} inner steps",
                step_weights.len(),
                trajectory.len()
            )));
        }
        let mut total: Option<Var> = None;
        for (fast, &w) in trajectory.iter().zip(step_weights) {
            if w == 0.0 {
                continue;
            }
            let l = episode_loss(&config, &mut tape, fast, qx, &data.query_labels, diffusion)?;
            let l = tape.scale(l, w);
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("all step weights are zero".into()))?
    };
    Ok(TaskGraph {
        tape,
        loss,
        params,
        rates,
    })
}

/// Multi-step query loss of one task after inner adaptation.
pub fn meta_loss(
    model: &MamlModel,
    data: &EpisodeData,
    diffusion: Option<&DiffusionOperator>,
    step_weights: &[f64],
) -> Result<f64> {
    let g = build_task_graph(model, data, diffusion, step_weights, GradOrder::First)?;
    Ok(g.tape.value(g.loss).as_slice()[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub loss: f64,
    pub params: ParamSet,
    pub rates: Vec<f64>,
    /// Smallest |ReLU input| anywhere in the unrolled graph.
    pub relu_margin: Option<f64>,
}

pub fn meta_gradient(
    model: &MamlModel,
    data: &EpisodeData,
    diffusion: Option<&DiffusionOperator>,
    step_weights: &[f64],
    order: GradOrder,
) -> Result<MetaGradient> {
    let TaskGraph {
        mut tape,
        loss,
        params,
        rates,
    } = build_task_graph(model, data, diffusion, step_weights, order)?;
    let wrt: Vec<Var> = params.iter().chain(&rates).copied().collect();
    let grads = tape.backward(loss, &wrt, GradOrder::First)?;
    let (pg, rg) = grads.split_at(params.len());
    Ok(MetaGradient {
        loss: tape.value(loss).as_slice()[0],
        params: model.backbone.params().read_from(&tape, &ParamSet::from_flat_vars(pg))?,
        rates: rg.iter().map(|&v| tape.value(v).as_slice()[0]).collect(),
        relu_margin: tape.relu_margin(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MetaTrainLog {
    pub epoch_meta_loss: Vec<f64>,
    pub epoch_meta_lr: Vec<f64>,
    pub epoch_second_order: Vec<bool>,
}

fn rates_as_params(rates: &InnerRates) -> Result<ParamSet> {
    Ok(ParamSet::new(vec![Layer::new(
        "inner-rates",
        Tensor2::row_vector(rates.values.clone()),
        vec![],
    )?]))
}

/// Meta-trains `model` on episodes drawn from `classes`. Tasks of a
/// meta-batch are processed in parallel; their gradients are reduced in
/// task order so the result does not depend on scheduling.
pub fn maml_meta_train(
    mut model: MamlModel,
    dataset: &Dataset,
    classes: &[u32],
    spec: TaskSpec,
    config: &MamlConfig,
    train: &MetaTrainConfig,
    diffusion: Option<&DiffusionOperator>,
) -> Result<(MamlModel, MetaTrainLog)> {
    spec.validate()?;
    if model.backbone.config().n_classes != spec.ways {
        return Err(Error::Config(format!(
            "meta-training head has {} outputs for {}-way tasks",
            model.backbone.config().n_classes,
            spec.ways
        )));
    }
    if model.rates.steps != config.inner_steps {
        return Err(Error::Config(format!(
            "model carries rates for {} inner steps, config asks for {}",
            model.rates.steps, config.inner_steps
        )));
    }
    if config.meta_batch_size == 0 {
        return Err(Error::Config("meta batch size must be at least 1".into()));
    }
    let mut log = MetaTrainLog::default();
    let mut adam = Adam::new(model.backbone.params().param_count());
    let mut rate_adam = Adam::new(model.rates.values.len());
    let batches = train.tasks_per_epoch.div_ceil(config.meta_batch_size);

    for epoch in 0..train.epochs {
        let weights = multi_step_weights(config.inner_steps, epoch, config.multi_step_anneal_epochs);
        let order = if epoch >= config.second_order_from_epoch {
            GradOrder::Second
        } else {
            GradOrder::First
        };
        let lr = cosine_meta_lr(config, epoch, train.epochs);
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let mut rng = seed::stream(train.seed, seed::domain::META, (epoch * batches + b) as u64);
            let episodes = (0..config.meta_batch_size)
                .map(|_| sample_episode(dataset, classes, spec, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let grads: Vec<MetaGradient> = episodes
                .par_iter()
                .map(|e| {
                    let data = EpisodeData::from_dataset(e, dataset);
                    meta_gradient(&model, &data, diffusion, &weights, order)
                })
                .collect::<Result<Vec<_>>>()?;

            let n = grads.len() as f64;
            let mut pg = model.backbone.params().zeros_like();
            let mut rg = vec![0.0; model.rates.values.len()];
            let mut batch_loss = 0.0;
            for (g, e) in grads.iter().zip(&episodes) {
                if !g.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "meta-loss at epoch {epoch}, batch {b}; episode classes {:?}, support {:?}, query {:?}",
                        e.classes,
                        e.support.iter().map(|&i| &dataset.samples()[i].sample_id).collect::<Vec<_>>(),
                        e.query.iter().map(|&i| &dataset.samples()[i].sample_id).collect::<Vec<_>>()
                    )));
                }
                batch_loss += g.loss;
                pg.axpy(1.0 / n, &g.params)?;
                for (a, v) in rg.iter_mut().zip(&g.rates) {
                    *a += v / n;
                }
            }
            loss_sum += batch_loss / n;
            adam.step(model.backbone.params_mut(), &pg, lr)?;
            let mut rate_params = rates_as_params(&model.rates)?;
            let rate_grads = rates_as_params(&InnerRates {
                values: rg,
                ..model.rates.clone()
            })?;
            rate_adam.step(&mut rate_params, &rate_grads, lr)?;
            model.rates.values = rate_params.flatten();
        }
        let mean = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        log::debug!("meta epoch {epoch}: loss {mean:.4}, lr {lr:.2e}, order {order:?}");
        log.epoch_meta_loss.push(mean);
        log.epoch_meta_lr.push(lr);
        log.epoch_second_order.push(order == GradOrder::Second);
    }
    Ok((model, log))
}

/// Support-set cross-entropy of the given parameters.
pub fn support_loss(
    config: &BackboneConfig,
    params: &ParamSet,
    data: &EpisodeData,
    diffusion: Option<&DiffusionOperator>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(data.support.clone());
    let l = episode_loss(config, &mut tape, &ParamSet::flat_vars(&vars), x, &data.support_labels, diffusion)?;
    Ok(tape.value(l).as_slice()[0])
}

/// Runs the inner loop on the support set and returns adapted parameters.
pub fn adapt_params(model: &MamlModel, data: &EpisodeData, diffusion: Option<&DiffusionOperator>) -> Result<ParamSet> {
    let config = *model.backbone.config();
    let mut params = model.backbone.params().clone();
    for step in 0..model.rates.steps {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let flat = ParamSet::flat_vars(&vars);
        let x = tape.constant(data.support.clone());
        let loss = episode_loss(&config, &mut tape, &flat, x, &data.support_labels, diffusion)?;
        let grads = tape.backward(loss, &flat, GradOrder::First)?;
        let grads = params.read_from(&tape, &ParamSet::from_flat_vars(&grads))?;
        for (k, (layer, g)) in params.layers_mut().iter_mut().zip(grads.layers()).enumerate() {
            let rate = model.rates.get(step, k);
            for (p, d) in layer.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *p -= rate * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= rate * d;
            }
        }
    }
    Ok(params)
}

/// Adapts a copy of the meta-learned initialization on the support set,
/// then predicts queries with the adapted head.
pub fn maml_adapt(model: &MamlModel, data: &EpisodeData, diffusion: Option<&DiffusionOperator>) -> Result<MethodOutcome> {
    if model.backbone.config().n_classes != data.spec.ways {
        return Err(Error::Config(format!(
            "head has {} outputs for a {}-way episode",
            model.backbone.config().n_classes,
            data.spec.ways
        )));
    }
    let params = adapt_params(model, data, diffusion)?;
    let adapted = Backbone::from_params(*model.backbone.config(), params)?;
    let logits = adapted.logits(&data.query, diffusion)?;
    Ok(MethodOutcome::new(argmax_rows(&logits), &data.query_labels))
}
