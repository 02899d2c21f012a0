use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::Backbone;
use crate::data::{sample_episode, ClassSplit, Dataset, EpisodeData, SplitPart, TaskSpec};
use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::math::Tensor2;
use crate::paradigms::{maml_adapt, ncm_episode, ptmap_on_features, MamlModel, NcmConfig, PtMapConfig};
use crate::seed;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub spec: TaskSpec,
    pub master_seed: u64,
    pub confidence_level: f64,
    /// Worker threads; `None` uses the global rayon pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 10_000,
            spec: TaskSpec::FIVE_WAY_FIVE_SHOT,
            master_seed: 0,
            confidence_level: 0.95,
            threads: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::Config("evaluation needs at least one task".into()));
        }
        if self.confidence_level != 0.95 {
            return Err(Error::Config(format!(
                "only 95% confidence intervals are supported, got {}",
                self.confidence_level
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        self.spec.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Baseline,
    SimpleShot,
    PtMap,
    Maml,
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MethodKind::Baseline => "baseline",
            MethodKind::SimpleShot => "simpleshot",
            MethodKind::PtMap => "ptmap",
            MethodKind::Maml => "maml",
        })
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::Baseline),
            "simpleshot" => Ok(Self::SimpleShot),
            "ptmap" | "pt+map" => Ok(Self::PtMap),
            "maml" | "maml++" => Ok(Self::Maml),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// A few-shot method together with whatever model it runs on.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    /// NCM on raw inputs, no training.
    Baseline,
    SimpleShot {
        backbone: &'a Backbone,
        config: &'a NcmConfig,
    },
    PtMap {
        backbone: &'a Backbone,
        config: &'a PtMapConfig,
    },
    Maml {
        model: &'a MamlModel,
    },
}

impl Method<'_> {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Baseline => MethodKind::Baseline,
            Method::SimpleShot { .. } => MethodKind::SimpleShot,
            Method::PtMap { .. } => MethodKind::PtMap,
            Method::Maml { .. } => MethodKind::Maml,
        }
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match self {
            Method::Baseline => None,
            Method::SimpleShot { backbone, .. } | Method::PtMap { backbone, .. } => Some(backbone),
            Method::Maml { model } => Some(&model.backbone),
        }
    }

    fn config_json(&self) -> serde_json::Value {
        match self {
            Method::Baseline => serde_json::json!({ "transform": "none" }),
            Method::SimpleShot { config, .. } => serde_json::to_value(config).unwrap_or_default(),
            Method::PtMap { config, .. } => serde_json::to_value(config).unwrap_or_default(),
            Method::Maml { model } => serde_json::to_value(&model.rates).unwrap_or_default(),
        }
    }
}

/// Data an evaluation draws tasks from.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a ClassSplit,
    pub part: SplitPart,
    pub diffusion: Option<&'a DiffusionOperator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalReport {
    pub method: MethodKind,
    pub method_config: serde_json::Value,
    /// e.g. `MLP 2/360`; absent for the baseline.
    pub backbone: Option<String>,
    pub param_count: usize,
    pub split_part: SplitPart,
    pub spec: TaskSpec,
    pub n_tasks: usize,
    pub master_seed: u64,
    /// Mean accuracy in percent.
    pub mean: f64,
    /// Half-width of the 95% interval, in percent.
    pub ci95: f64,
    pub fingerprint: String,
    pub wall_time_secs: f64,
    /// Per-task accuracy as a fraction.
    pub per_task: Vec<f64>,
}

impl EvalReport {
    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(REPORT_JSON);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(REPORT_CSV);
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let rows: [[String; 10]; 2] = [
            [
                "method", "backbone", "split", "ways", "shots", "queries", "tasks", "mean", "ci95", "fingerprint",
            ]
            .map(String::from),
            [
                self.method.to_string(),
                self.backbone.clone().unwrap_or_else(|| "raw".into()),
                self.split_part.to_string(),
                self.spec.ways.to_string(),
                self.spec.shots.to_string(),
                self.spec.queries.to_string(),
                self.n_tasks.to_string(),
                format!("{:.2}", self.mean),
                format!("{:.2}", self.ci95),
                self.fingerprint.clone(),
            ],
        ];
        for r in rows {
            w.write_record(&r).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean accuracy and 95% half-width, both in percent. A single task has no
/// spread estimate and gets a half-width of 0.
pub fn mean_and_ci95(per_task: &[f64]) -> (f64, f64) {
    let n = per_task.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = per_task.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (100.0 * mean, 0.0);
    }
    let var = per_task.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (100.0 * mean, 100.0 * 1.96 * var.sqrt() / (n as f64).sqrt())
}

fn fingerprint(method: &Method<'_>, ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<String> {
    let mut h = Sha256::new();
    let header = serde_json::json!({
        "method": method.kind(),
        "method-config": method.config_json(),
        "backbone": method.backbone().map(|b| b.config()),
        "split": ctx.split.part(ctx.part),
        "spec": cfg.spec,
        "tasks": cfg.n_tasks,
        "seed": cfg.master_seed,
        "graph": ctx.diffusion.is_some(),
    });
    h.update(serde_json::to_vec(&header)?);
    if let Some(b) = method.backbone() {
        for v in b.params().flatten() {
            h.update(v.to_le_bytes());
        }
    }
    if let Some(d) = ctx.diffusion {
        for v in d.matrix().as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Rows of `table` indexed by dataset sample index.
struct FeatureTable {
    table: Tensor2,
    row_of: Vec<usize>,
}

impl FeatureTable {
    fn build(
        dataset: &Dataset,
        classes: &[u32],
        backbone: Option<&Backbone>,
        diffusion: Option<&DiffusionOperator>,
    ) -> Result<Self> {
        let indices = dataset.indices_of_classes(classes);
        let mut row_of = vec![usize::MAX; dataset.len()];
        for (r, &i) in indices.iter().enumerate() {
            row_of[i] = r;
        }
        let raw = dataset.features(&indices);
        let table = match backbone {
            Some(b) => b.features(&raw, diffusion)?,
            None => raw,
        };
        Ok(Self { table, row_of })
    }

    fn episode(&self, episode: &crate::data::Episode) -> EpisodeData {
        EpisodeData::gather(episode, &self.table, |i| self.row_of[i])
    }
}

/// Runs `cfg.n_tasks` episodes drawn from one split part. Task `i` is
/// seeded from `(master_seed, i)` alone, so the per-task list does not
/// depend on the thread count.
pub fn evaluate(method: Method<'_>, ctx: EvalContext<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let started = Instant::now();
    let classes = ctx.split.part(ctx.part);
    let domain = match ctx.part {
        SplitPart::Validation => seed::domain::VALIDATION,
        _ => seed::domain::EVAL,
    };
    let feature_backbone = match method {
        Method::SimpleShot { backbone, .. } | Method::PtMap { backbone, .. } => Some(backbone),
        _ => None,
    };
    let table = FeatureTable::build(ctx.dataset, classes, feature_backbone, ctx.diffusion)?;

    let run_task = |i: usize| -> Result<f64> {
        let mut rng = seed::stream(cfg.master_seed, domain, i as u64);
        let episode = sample_episode(ctx.dataset, classes, cfg.spec, &mut rng)?;
        let data = table.episode(&episode);
        let outcome = match method {
            Method::Baseline => ncm_episode(&data, &NcmConfig::raw())?,
            Method::SimpleShot { config, .. } => ncm_episode(&data, config)?,
            Method::PtMap { config, .. } => ptmap_on_features(&data, config)?.outcome,
            Method::Maml { model } => maml_adapt(model, &data, ctx.diffusion)?,
        };
        Ok(outcome.accuracy)
    };
    let per_task: Vec<f64> = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?
            .install(|| (0..cfg.n_tasks).into_par_iter().map(run_task).collect::<Result<_>>())?,
        None => (0..cfg.n_tasks).into_par_iter().map(run_task).collect::<Result<_>>()?,
    };

    if cfg.n_tasks == 1 {
        log::warn!("single evaluation task: confidence interval reported as 0");
    }
    let (mean, ci95) = mean_and_ci95(&per_task);
    Ok(EvalReport {
        method: method.kind(),
        method_config: method.config_json(),
        backbone: method
            .backbone()
            .map(|b| format!("{} {}/{}", b.config().arch, b.config().hidden_layers, b.config().width)),
        param_count: method.backbone().map_or(0, |b| b.config().param_count()),
        split_part: ctx.part,
        spec: cfg.spec,
        n_tasks: cfg.n_tasks,
        master_seed: cfg.master_seed,
        mean,
        ci95,
        fingerprint: fingerprint(&method, &ctx, cfg)?,
        wall_time_secs: started.elapsed().as_secs_f64(),
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_interval() {
        let (mean, ci) = mean_and_ci95(&[1.0, 0.0]);
        assert_eq!(mean, 50.0);
        let expected = 100.0 * 1.96 * 0.5f64.sqrt() / 2f64.sqrt();
        assert!((ci - expected).abs() < 1e-12);
        assert!((ci - 98.0).abs() < 1e-9);
    }

    #[test]
    fn single_task_has_zero_interval() {
        assert_eq!(mean_and_ci95(&[0.6]), (60.0, 0.0));
    }

    #[test]
    fn constant_accuracy_has_zero_interval() {
        let (mean, ci) = mean_and_ci95(&[1.0; 50]);
        assert_eq!((mean, ci), (100.0, 0.0));
    }

    #[test]
    fn method_names_parse() {
        for k in [MethodKind::Baseline, MethodKind::SimpleShot, MethodKind::PtMap, MethodKind::Maml] {
            assert_eq!(k.to_string().parse::<MethodKind>().unwrap(), k);
        }
        assert!("knn".parse::<MethodKind>().is_err());
    }
}
