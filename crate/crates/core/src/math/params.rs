use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// One affine layer: `weight` is fan-in × fan-out, `bias` has fan-out
/// entries or is empty for a bias-free parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(id: impl Into<String>, weight: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if !bias.is_empty() && bias.len() != weight.cols() {
            return Err(Error::Shape {
                op: "layer bias",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self {
            id: id.into(),
            weight,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Tape handles for one registered [`Layer`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Ordered collection of layers with a flattened (weight then bias, layer by
/// layer) view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layers: Vec<Layer>,
}

impl ParamSet {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites all values from a flat vector laid out like [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + m]);
            off += m;
        }
        Ok(())
    }

    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.assign_flat(flat)?;
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    weight: Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Layer id owning flat coordinate `index`.
    pub fn layer_of(&self, mut index: usize) -> Option<&str> {
        for l in &self.layers {
            if index < l.param_count() {
                return Some(&l.id);
            }
            index -= l.param_count();
        }
        None
    }

    /// Pushes every layer onto the tape, as variables or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| {
                let w = l.weight.clone();
                let b = Tensor2::row_vector(l.bias.clone());
                if trainable {
                    LayerVars {
                        weight: tape.variable(w),
                        bias: tape.variable(b),
                    }
                } else {
                    LayerVars {
                        weight: tape.constant(w),
                        bias: tape.constant(b),
                    }
                }
            })
            .collect()
    }

    /// Reads values of tape nodes laid out like `self` (e.g. gradients).
    pub fn read_from(&self, tape: &Tape, vars: &[LayerVars]) -> Result<Self> {
        if vars.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layer handles for {} layers",
                vars.len(),
                self.layers.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(vars)
            .map(|(l, v)| {
                let w = tape.value(v.weight);
                l.weight.expect_same_shape(w, "read_from weight")?;
                let b = tape.value(v.bias);
                if b.len() != l.bias.len() {
                    return Err(Error::Shape {
                        op: "read_from bias",
                        left: (1, l.bias.len()),
                        right: b.shape(),
                    });
                }
                Ok(Layer {
                    id: l.id.clone(),
                    weight: w.clone(),
                    bias: b.as_slice().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Flat handles in the same order as [`flatten`](Self::flatten) groups them.
    pub fn flat_vars(vars: &[LayerVars]) -> Vec<Var> {
        vars.iter().flat_map(|v| [v.weight, v.bias]).collect()
    }

    pub fn from_flat_vars(vars: &[Var]) -> Vec<LayerVars> {
        vars.chunks_exact(2)
            .map(|c| LayerVars {
                weight: c[0],
                bias: c[1],
            })
            .collect()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        let flat: Vec<f64> = self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| a + alpha * b)
            .collect();
        if other.param_count() != self.param_count() {
            return Err(Error::InvalidArgument("axpy over mismatched parameter sets".into()));
        }
        self.assign_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set(shapes: &[(usize, usize)], seed: f64) -> ParamSet {
        let mut k = seed;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let w = (0..r * c)
                    .map(|_| {
                        k += 0.37;
                        k.sin()
                    })
                    .collect();
                Layer::new(format!("l{i}"), Tensor2::new(r, c, w).unwrap(), vec![k; c]).unwrap()
            })
            .collect();
        ParamSet::new(layers)
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(
            shapes in proptest::collection::vec((1usize..5, 1usize..5), 1..4),
            seed in -10.0f64..10.0,
        ) {
            let p = sample_set(&shapes, seed);
            let flat = p.flatten();
            prop_assert_eq!(flat.len(), p.param_count());
            let q = p.zeros_like().unflatten_like(&flat).unwrap();
            prop_assert_eq!(q, p);
        }
    }

    #[test]
    fn layer_of_maps_flat_indices() {
        let p = sample_set(&[(2, 3), (3, 1)], 0.0);
        assert_eq!(p.layer_of(0), Some("l0"));
        assert_eq!(p.layer_of(8), Some("l0"));
        assert_eq!(p.layer_of(9), Some("l1"));
        assert_eq!(p.layer_of(13), None);
    }

    #[test]
    fn assign_rejects_wrong_length() {
        let mut p = sample_set(&[(2, 2)], 0.0);
        assert!(p.assign_flat(&[0.0; 5]).is_err());
    }
}
