//! Serializable run configurations. Each command loads an optional JSON
//! file, applies flag overrides, and writes the result next to its outputs
//! as `resolved-config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use brainshot_core::data::SynthConfig;
use brainshot_core::eval::{MethodKind, SweepConfig, SweepSpace};
use brainshot_core::paradigms::{FeatureTransform, MamlConfig, MetaTrainConfig, PtMapConfig, TrainConfig};
use brainshot_core::{Arch, DiffusionOperator, SplitPart, TaskSpec, WeightedGraph};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

pub fn write_resolved<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// How the structural graph becomes the GNN diffusion operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct GraphConfig {
    pub keep_fraction: f64,
    pub weighted_adjacency: bool,
    pub steps: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.01,
            weighted_adjacency: false,
            steps: 1,
        }
    }
}

impl GraphConfig {
    pub fn operator(&self, graph: &WeightedGraph) -> Result<DiffusionOperator> {
        let kept = graph.threshold(self.keep_fraction)?;
        Ok(DiffusionOperator::build(&kept, self.weighted_adjacency).with_steps(self.steps)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct GenSynthRun {
    pub out: PathBuf,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SplitRun {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub sizes: (usize, usize, usize),
    pub seed: u64,
}

impl Default for SplitRun {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            out: PathBuf::new(),
            sizes: brainshot_core::data::BENCHMARK_SPLIT,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    #[default]
    Base,
    Maml,
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(Self::Base),
            "maml" => Ok(Self::Maml),
            other => Err(format!("unknown paradigm `{other}` (expected base or maml)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct BackboneChoice {
    pub arch: Arch,
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for BackboneChoice {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            hidden_layers: 2,
            width: 360,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainRun {
    pub manifest: PathBuf,
    pub split: PathBuf,
    pub out: PathBuf,
    pub paradigm: Paradigm,
    pub backbone: BackboneChoice,
    pub seed: u64,
    pub graph: GraphConfig,
    pub base: TrainConfig,
    /// Validation tasks scored after every base-training epoch to pick the
    /// returned parameters; 0 keeps the last epoch.
    pub selection_tasks: usize,
    pub selection_spec: TaskSpec,
    pub maml: MamlConfig,
    pub meta: MetaTrainConfig,
    pub meta_spec: TaskSpec,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            split: PathBuf::new(),
            out: PathBuf::new(),
            paradigm: Paradigm::Base,
            backbone: BackboneChoice::default(),
            seed: 0,
            graph: GraphConfig::default(),
            base: TrainConfig::default(),
            selection_tasks: 0,
            selection_spec: TaskSpec::FIVE_WAY_FIVE_SHOT,
            maml: MamlConfig::default(),
            meta: MetaTrainConfig::default(),
            meta_spec: TaskSpec::FIVE_WAY_FIVE_SHOT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalRun {
    pub manifest: PathBuf,
    pub split: PathBuf,
    pub part: SplitPart,
    pub out: PathBuf,
    pub method: MethodKind,
    /// Required for every method except the baseline.
    pub checkpoint: Option<PathBuf>,
    pub spec: TaskSpec,
    pub tasks: usize,
    pub seed: u64,
    pub transform: FeatureTransform,
    pub ptmap: PtMapConfig,
    /// Graph handling for GNN checkpoints; defaults to what training used.
    pub graph: Option<GraphConfig>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            split: PathBuf::new(),
            part: SplitPart::Novel,
            out: PathBuf::new(),
            method: MethodKind::Baseline,
            checkpoint: None,
            spec: TaskSpec::FIVE_WAY_FIVE_SHOT,
            tasks: 10_000,
            seed: 0,
            transform: FeatureTransform::default(),
            ptmap: PtMapConfig::default(),
            graph: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SweepRun {
    pub manifest: PathBuf,
    pub split: PathBuf,
    pub out: PathBuf,
    pub space: SweepSpace,
    pub sweep: SweepConfig,
    pub graph: GraphConfig,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            split: PathBuf::new(),
            out: PathBuf::new(),
            space: SweepSpace {
                archs: vec![Arch::Mlp],
                hidden_layers: vec![1, 2],
                widths: vec![64, 128, 256, 360, 512, 1024],
                methods: vec![brainshot_core::eval::MethodChoice::SimpleShot {
                    transform: FeatureTransform::Cl2n,
                }],
                init_seeds: vec![0],
            },
            sweep: SweepConfig::default(),
            graph: GraphConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct CompareRun {
    pub reports: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}
