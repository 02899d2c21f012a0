use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalConfig, EvalContext, Method};
use crate::backbones::{Arch, Backbone, BackboneConfig};
use crate::data::{ClassSplit, Dataset, SplitPart, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::paradigms::{
    maml_meta_train, representation_mean, train_base, FeatureTransform, MamlConfig, MamlModel, MetaTrainConfig,
    NcmConfig, PtMapConfig, TrainConfig,
};
use crate::seed;

/// Method and its hyperparameters for one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodChoice {
    Baseline,
    SimpleShot { transform: FeatureTransform },
    PtMap(PtMapConfig),
    Maml(MamlConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepPoint {
    pub arch: Arch,
    pub hidden_layers: usize,
    pub width: usize,
    pub init_seed: u64,
    #[serde(flatten)]
    pub method: MethodChoice,
}

impl SweepPoint {
    fn sort_key(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepSpace {
    pub archs: Vec<Arch>,
    pub hidden_layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub methods: Vec<MethodChoice>,
    pub init_seeds: Vec<u64>,
}

impl SweepSpace {
    /// Cartesian product of the grid. The baseline has no backbone, so it
    /// appears once, attached to the first grid values.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        let mut baseline_done = false;
        for &arch in &self.archs {
            for &hidden_layers in &self.hidden_layers {
                for &width in &self.widths {
                    for &init_seed in &self.init_seeds {
                        for method in &self.methods {
                            if *method == MethodChoice::Baseline {
                                if baseline_done {
                                    continue;
                                }
                                baseline_done = true;
                            }
                            out.push(SweepPoint {
                                arch,
                                hidden_layers,
                                width,
                                init_seed,
                                method: method.clone(),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SweepConfig {
    /// Validation-task protocol; every point sees the same tasks.
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub meta_train: MetaTrainConfig,
    /// Task shape for meta-training.
    pub meta_spec: TaskSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig {
                n_tasks: 500,
                ..EvalConfig::default()
            },
            train: TrainConfig::default(),
            meta_train: MetaTrainConfig::default(),
            meta_spec: TaskSpec::FIVE_WAY_FIVE_SHOT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepRow {
    pub point: SweepPoint,
    pub param_count: usize,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepOutcome {
    /// Ranked: best first, failed points last.
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.first().filter(|r| r.mean.is_some())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>4}  {:<4} {:>6} {:>6} {:>6}  {:<15} {:>10} {:>8} {:>6}\n",
            "rank", "arch", "layers", "width", "seed", "method", "params", "mean", "ci95"
        );
        for (k, r) in self.rows.iter().enumerate() {
            let p = &r.point;
            let method = match &p.method {
                MethodChoice::Baseline => "baseline".to_string(),
                MethodChoice::SimpleShot { transform } => {
                    format!("simpleshot/{}", serde_json::to_value(transform).unwrap_or_default().as_str().unwrap_or(""))
                }
                MethodChoice::PtMap(_) => "ptmap".to_string(),
                MethodChoice::Maml(_) => "maml".to_string(),
            };
            let (mean, ci) = match (r.mean, r.ci95) {
                (Some(m), Some(c)) => (format!("{m:.2}"), format!("{c:.2}")),
                _ => ("failed".to_string(), String::new()),
            };
            out.push_str(&format!(
                "{:>4}  {:<4} {:>6} {:>6} {:>6}  {:<15} {:>10} {:>8} {:>6}\n",
                k + 1,
                p.arch.to_string(),
                p.hidden_layers,
                p.width,
                p.init_seed,
                method,
                r.param_count,
                mean,
                ci
            ));
        }
        out
    }
}

fn rank(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| match (a.mean, b.mean) {
        (Some(x), Some(y)) => y
            .total_cmp(&x)
            .then(a.param_count.cmp(&b.param_count))
            .then_with(|| a.point.sort_key().cmp(&b.point.sort_key())),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.point.sort_key().cmp(&b.point.sort_key()),
    });
}

type BaseKey = (Arch, usize, usize, u64);

struct Runner<'a> {
    dataset: &'a Dataset,
    split: &'a ClassSplit,
    diffusion: Option<&'a DiffusionOperator>,
    config: &'a SweepConfig,
    trained: HashMap<BaseKey, Backbone>,
}

impl Runner<'_> {
    fn backbone_config(&self, p: &SweepPoint, n_classes: usize) -> Result<BackboneConfig> {
        BackboneConfig::new(p.arch, p.hidden_layers, p.width, self.dataset.roi_count(), n_classes)
    }

    fn base_trained(&mut self, p: &SweepPoint) -> Result<Backbone> {
        let key = (p.arch, p.hidden_layers, p.width, p.init_seed);
        if let Some(b) = self.trained.get(&key) {
            return Ok(b.clone());
        }
        let bc = self.backbone_config(p, self.split.base.len())?;
        let init = Backbone::init(bc, &mut seed::stream(p.init_seed, seed::domain::INIT, 0))?;
        let train = TrainConfig {
            seed: p.init_seed,
            ..self.config.train
        };
        let (trained, _) = train_base(init, self.dataset, &self.split.base, self.diffusion, &train, None)?;
        self.trained.insert(key, trained.clone());
        Ok(trained)
    }

    fn score(&mut self, p: &SweepPoint) -> Result<(usize, f64, f64)> {
        let ctx = EvalContext {
            dataset: self.dataset,
            split: self.split,
            part: SplitPart::Validation,
            diffusion: self.diffusion,
        };
        let eval = &self.config.eval;
        let report = match &p.method {
            MethodChoice::Baseline => evaluate(Method::Baseline, ctx, eval)?,
            MethodChoice::SimpleShot { transform } => {
                let backbone = self.base_trained(p)?;
                let base_mean = match transform {
                    FeatureTransform::Cl2n => Some(representation_mean(
                        &backbone,
                        self.dataset,
                        &self.dataset.indices_of_classes(&self.split.base),
                        self.diffusion,
                    )?),
                    _ => None,
                };
                let config = NcmConfig {
                    transform: *transform,
                    base_mean,
                };
                evaluate(Method::SimpleShot { backbone: &backbone, config: &config }, ctx, eval)?
            }
            MethodChoice::PtMap(config) => {
                let backbone = self.base_trained(p)?;
                evaluate(Method::PtMap { backbone: &backbone, config }, ctx, eval)?
            }
            MethodChoice::Maml(mc) => {
                if self.config.meta_spec.ways != eval.spec.ways {
                    return Err(Error::Config(format!(
                        "meta-training uses {}-way tasks but validation uses {}-way",
                        self.config.meta_spec.ways, eval.spec.ways
                    )));
                }
                let bc = self.backbone_config(p, self.config.meta_spec.ways)?;
                let init = Backbone::init(bc, &mut seed::stream(p.init_seed, seed::domain::INIT, 0))?;
                let meta = MetaTrainConfig {
                    seed: p.init_seed,
                    ..self.config.meta_train
                };
                let (model, _) = maml_meta_train(
                    MamlModel::new(init, mc),
                    self.dataset,
                    &self.split.base,
                    self.config.meta_spec,
                    mc,
                    &meta,
                    self.diffusion,
                )?;
                evaluate(Method::Maml { model: &model }, ctx, eval)?
            }
        };
        Ok((report.param_count, report.mean, report.ci95))
    }
}

/// Trains and scores every point of `space` on the validation classes with
/// a shared task set, then ranks by mean accuracy, fewer parameters, and
/// finally config order. A failing point is recorded and skipped.
pub fn sweep(
    space: &SweepSpace,
    dataset: &Dataset,
    split: &ClassSplit,
    diffusion: Option<&DiffusionOperator>,
    config: &SweepConfig,
) -> Result<SweepOutcome> {
    let points = space.points();
    if points.is_empty() {
        return Err(Error::Config("sweep search space is empty".into()));
    }
    let mut runner = Runner {
        dataset,
        split,
        diffusion,
        config,
        trained: HashMap::new(),
    };
    let mut rows = Vec::with_capacity(points.len());
    for p in points {
        let param_count = expected_params_or_zero(&runner, &p);
        let row = match runner.score(&p) {
            Ok((param_count, mean, ci95)) => SweepRow {
                point: p,
                param_count,
                mean: Some(mean),
                ci95: Some(ci95),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep point failed: {e}");
                SweepRow {
                    point: p,
                    param_count,
                    mean: None,
                    ci95: None,
                    error: Some(e.to_string()),
                }
            }
        };
        log::info!(
            "sweep {} {}/{} seed {}: {:?}",
            row.point.arch,
            row.point.hidden_layers,
            row.point.width,
            row.point.init_seed,
            row.mean
        );
        rows.push(row);
    }
    rank(&mut rows);
    Ok(SweepOutcome { rows })
}

fn expected_params_or_zero(runner: &Runner<'_>, p: &SweepPoint) -> usize {
    let classes = match p.method {
        MethodChoice::Baseline => return 0,
        MethodChoice::Maml(_) => runner.config.meta_spec.ways,
        _ => runner.split.base.len(),
    };
    runner.backbone_config(p, classes).map_or(0, |c| c.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(width: usize, seed: u64) -> SweepPoint {
        SweepPoint {
            arch: Arch::Mlp,
            hidden_layers: 1,
            width,
            init_seed: seed,
            method: MethodChoice::SimpleShot {
                transform: FeatureTransform::L2n,
            },
        }
    }

    fn row(p: SweepPoint, params: usize, mean: Option<f64>) -> SweepRow {
        SweepRow {
            point: p,
            param_count: params,
            mean,
            ci95: mean.map(|_| 1.0),
            error: mean.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn ranking_breaks_ties_by_size_then_config() {
        let mut rows = vec![
            row(point(128, 0), 200, Some(80.0)),
            row(point(64, 1), 100, Some(80.0)),
            row(point(64, 0), 100, Some(80.0)),
            row(point(256, 0), 300, None),
            row(point(512, 0), 400, Some(90.0)),
        ];
        rank(&mut rows);
        let order: Vec<(usize, u64)> = rows.iter().map(|r| (r.point.width, r.point.init_seed)).collect();
        assert_eq!(order, vec![(512, 0), (64, 0), (64, 1), (128, 0), (256, 0)]);
    }

    #[test]
    fn grid_size_and_single_baseline() {
        let space = SweepSpace {
            archs: vec![Arch::Mlp, Arch::Cnn],
            hidden_layers: vec![1, 2],
            widths: vec![64, 128, 256],
            methods: vec![MethodChoice::Baseline, MethodChoice::PtMap(PtMapConfig::default())],
            init_seeds: vec![0],
        };
        let points = space.points();
        assert_eq!(points.len(), 12 + 1);
        assert_eq!(points.iter().filter(|p| p.method == MethodChoice::Baseline).count(), 1);
    }

    #[test]
    fn point_json_roundtrip() {
        let p = SweepPoint {
            method: MethodChoice::Maml(MamlConfig::default()),
            ..point(64, 3)
        };
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<SweepPoint>(&text).unwrap(), p);
    }
}
