//! Feature extractors and the linear classification head.
//!
//! * MLP: `[FC(width) + ReLU] x layers`
//! * GNN: one application of the graph diffusion operator, then the MLP stack
//! * CNN: 1x1 convolutions over ROIs (`1 -> width [-> width]` channels, ReLU
//!   after each), then the mean over channels per ROI
//!
//! Parameter counts, with `D` inputs, `W` width and `C` head outputs:
//!
//! | arch    | 1 layer                  | 2 layers                         |
//! |---------|--------------------------|----------------------------------|
//! | MLP/GNN | `D*W + W + W*C + C`      | `D*W + W + W*W + W + W*C + C`    |
//! | CNN     | `2W + D*C + C`           | `2W + W*W + W + D*C + C`         |

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::math::{Layer, LayerVars, ParamSet, Tape, Tensor2, Var};

pub const MIN_WIDTH: usize = 64;
pub const MAX_WIDTH: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Gnn,
    Cnn,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "MLP",
            Arch::Gnn => "GNN",
            Arch::Cnn => "CNN",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Arch::Mlp),
            "gnn" => Ok(Arch::Gnn),
            "cnn" | "cnn1x1" | "conv1d" => Ok(Arch::Cnn),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BackboneConfig {
    pub arch: Arch,
    pub hidden_layers: usize,
    pub width: usize,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl BackboneConfig {
    pub fn new(arch: Arch, hidden_layers: usize, width: usize, input_dim: usize, n_classes: usize) -> Result<Self> {
        let c = Self {
            arch,
            hidden_layers,
            width,
            input_dim,
            n_classes,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.hidden_layers) {
            return Err(Error::Config(format!(
                "hidden layers must be 1 or 2, got {}",
                self.hidden_layers
            )));
        }
        if !(MIN_WIDTH..=MAX_WIDTH).contains(&self.width) {
            return Err(Error::Config(format!(
                "width must be in [{MIN_WIDTH}, {MAX_WIDTH}], got {}",
                self.width
            )));
        }
        if self.input_dim == 0 || self.n_classes == 0 {
            return Err(Error::Config("input dim and class count must be positive".into()));
        }
        Ok(())
    }

    pub fn representation_dim(&self) -> usize {
        match self.arch {
            Arch::Mlp | Arch::Gnn => self.width,
            Arch::Cnn => self.input_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, w, c) = (self.input_dim, self.width, self.n_classes);
        let extra = if self.hidden_layers == 2 { w * w + w } else { 0 };
        let head = self.representation_dim() * c + c;
        match self.arch {
            Arch::Mlp | Arch::Gnn => d * w + w + extra + head,
            Arch::Cnn => 2 * w + extra + head,
        }
    }

    /// `(fan_in, fan_out)` of each layer, head last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let first_in = match self.arch {
            Arch::Mlp | Arch::Gnn => self.input_dim,
            Arch::Cnn => 1,
        };
        let mut shapes = vec![(first_in, self.width)];
        if self.hidden_layers == 2 {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.representation_dim(), self.n_classes));
        shapes
    }

    pub fn with_classes(mut self, n_classes: usize) -> Self {
        self.n_classes = n_classes;
        self
    }
}

impl fmt::Display for BackboneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}/{}", self.arch, self.hidden_layers, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamSet,
}

impl Backbone {
    /// He-uniform weights (`U(±sqrt(6 / fan_in))`), zero biases.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(k, (fan_in, fan_out))| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let id = if k == last { "head".to_string() } else { format!("hidden{k}") };
                Layer::new(id, Tensor2::new(fan_in, fan_out, w)?, vec![0.0; fan_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: ParamSet::new(layers),
        })
    }

    pub fn from_params(config: BackboneConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let actual: Vec<_> = params.layers().iter().map(|l| l.weight.shape()).collect();
        if actual != shapes {
            return Err(Error::Config(format!(
                "parameter layout {actual:?} does not match {config} (expected {shapes:?})"
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn representation_dim(&self) -> usize {
        self.config.representation_dim()
    }

    /// Replaces the head with a freshly initialized one of `n_classes` outputs.
    pub fn with_new_head<R: Rng + ?Sized>(&self, n_classes: usize, rng: &mut R) -> Result<Self> {
        let config = self.config.with_classes(n_classes);
        let mut fresh = Self::init(config, rng)?;
        let n = fresh.params.layers().len();
        for (dst, src) in fresh.params.layers_mut()[..n - 1].iter_mut().zip(self.params.layers()) {
            *dst = src.clone();
        }
        Ok(fresh)
    }

    pub fn features(&self, x: &Tensor2, diffusion: Option<&DiffusionOperator>) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = features_on_tape(&self.config, &mut tape, &vars, xv, diffusion)?;
        Ok(tape.value(out).clone())
    }

    pub fn logits(&self, x: &Tensor2, diffusion: Option<&DiffusionOperator>) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = logits_on_tape(&self.config, &mut tape, &vars, xv, diffusion)?;
        Ok(tape.value(out).clone())
    }
}

/// Representation of `x` (B × input_dim) under parameters `vars`.
pub fn features_on_tape(
    config: &BackboneConfig,
    tape: &mut Tape,
    vars: &[LayerVars],
    x: Var,
    diffusion: Option<&DiffusionOperator>,
) -> Result<Var> {
    let (batch, dim) = tape.shape(x);
    if dim != config.input_dim {
        return Err(Error::Shape {
            op: "backbone input",
            left: (batch, dim),
            right: (batch, config.input_dim),
        });
    }
    if vars.len() != config.hidden_layers + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} layers supplied for {config}",
            vars.len()
        )));
    }
    let hidden = &vars[..config.hidden_layers];
    match config.arch {
        Arch::Mlp => mlp_stack(tape, hidden, x),
        Arch::Gnn => {
            let s = diffusion.ok_or_else(|| Error::InvalidArgument("GNN backbone requires a diffusion operator".into()))?;
            if s.node_count() != dim {
                return Err(Error::Shape {
                    op: "diffuse",
                    left: (batch, dim),
                    right: s.matrix().shape(),
                });
            }
            let st = tape.constant(s.matrix().transpose());
            let diffused = tape.matmul(x, st)?;
            mlp_stack(tape, hidden, diffused)
        }
        Arch::Cnn => {
            // every ROI value becomes its own row; 1x1 convs are then affine maps
            let mut h = tape.reshape(x, batch * dim, 1)?;
            for l in hidden {
                let a = tape.affine(h, l.weight, l.bias)?;
                h = tape.relu(a);
            }
            let pooled = tape.mean_over_cols(h);
            tape.reshape(pooled, batch, dim)
        }
    }
}

fn mlp_stack(tape: &mut Tape, hidden: &[LayerVars], x: Var) -> Result<Var> {
    let mut h = x;
    for l in hidden {
        let a = tape.affine(h, l.weight, l.bias)?;
        h = tape.relu(a);
    }
    Ok(h)
}

pub fn logits_on_tape(
    config: &BackboneConfig,
    tape: &mut Tape,
    vars: &[LayerVars],
    x: Var,
    diffusion: Option<&DiffusionOperator>,
) -> Result<Var> {
    let feats = features_on_tape(config, tape, vars, x, diffusion)?;
    let head = vars.last().expect("validated layer count");
    tape.affine(feats, head.weight, head.bias)
}

/// Which training regime produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Base,
    Maml,
}

pub const CHECKPOINT_FORMAT: &str = "brainshot-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CheckpointHeader {
    pub format: String,
    pub regime: Regime,
    pub config: BackboneConfig,
    pub seed: u64,
    pub param_count: usize,
    /// Learned inner-loop rates stored after the backbone parameters, laid
    /// out step-major as `[steps][groups]`.
    #[serde(default)]
    pub inner_rate_shape: Option<(usize, usize)>,
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub backbone: Backbone,
    pub inner_rates: Vec<f64>,
}

impl Checkpoint {
    pub fn new(regime: Regime, backbone: Backbone, seed: u64, training: serde_json::Value) -> Self {
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                regime,
                config: backbone.config,
                seed,
                param_count: backbone.params.param_count(),
                inner_rate_shape: None,
                training,
            },
            backbone,
            inner_rates: Vec::new(),
        }
    }

    pub fn with_inner_rates(mut self, steps: usize, groups: usize, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != steps * groups {
            return Err(Error::InvalidArgument(format!(
                "{} inner rates for {steps} steps x {groups} groups",
                rates.len()
            )));
        }
        self.header.inner_rate_shape = Some((steps, groups));
        self.inner_rates = rates;
        Ok(self)
    }

    /// JSON header line, `\n`, then little-endian f64 parameters followed by
    /// any inner rates.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for v in self.backbone.params.flatten().iter().chain(&self.inner_rates) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(origin, "missing checkpoint header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::format(origin, e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(origin, format!("unsupported checkpoint format `{}`", header.format)));
        }
        let body = &bytes[split + 1..];
        if !body.len().is_multiple_of(8) {
            return Err(Error::format(origin, "parameter block is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let expected = header.config.param_count();
        let rate_count = header.inner_rate_shape.map_or(0, |(s, g)| s * g);
        if header.param_count != expected || values.len() != expected + rate_count {
            return Err(Error::format(
                origin,
                format!(
                    "checkpoint holds {} values; {} expects {expected} parameters plus {rate_count} inner rates",
                    values.len(),
                    header.config
                ),
            ));
        }
        let mut template = Backbone::init(header.config, &mut crate::seed::stream(0, "template", 0))?;
        template.params.assign_flat(&values[..expected])?;
        Ok(Self {
            backbone: template,
            inner_rates: values[expected..].to_vec(),
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
