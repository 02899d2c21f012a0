use serde::{Deserialize, Serialize};

use crate::backbones::Backbone;
use crate::data::{Dataset, EpisodeData};
use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::math::Tensor2;

use super::MethodOutcome;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTransform {
    None,
    /// Row-wise L2 normalization.
    L2n,
    /// Subtract the base-class mean representation, then L2-normalize.
    #[default]
    Cl2n,
}

impl std::str::FromStr for FeatureTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "l2n" => Ok(Self::L2n),
            "cl2n" => Ok(Self::Cl2n),
            other => Err(Error::InvalidArgument(format!("unknown feature transform `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct NcmConfig {
    pub transform: FeatureTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mean: Option<Vec<f64>>,
}

impl NcmConfig {
    pub fn raw() -> Self {
        Self {
            transform: FeatureTransform::None,
            base_mean: None,
        }
    }
}

/// L2-normalizes every row; all-zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

pub fn transform_features(x: &Tensor2, config: &NcmConfig) -> Result<Tensor2> {
    match config.transform {
        FeatureTransform::None => Ok(x.clone()),
        FeatureTransform::L2n => Ok(l2_normalize_rows(x)),
        FeatureTransform::Cl2n => {
            let mean = config
                .base_mean
                .as_ref()
                .ok_or_else(|| Error::Config("cl2n transform requires a base-class mean".into()))?;
            if mean.len() != x.cols() {
                return Err(Error::Shape {
                    op: "cl2n base mean",
                    left: x.shape(),
                    right: (1, mean.len()),
                });
            }
            let mut centered = x.clone();
            for i in 0..centered.rows() {
                for (v, m) in centered.row_mut(i).iter_mut().zip(mean) {
                    *v -= m;
                }
            }
            Ok(l2_normalize_rows(&centered))
        }
    }
}

/// Mean row per label (`n_classes` × cols).
pub fn class_means(x: &Tensor2, labels: &[usize], n_classes: usize) -> Result<Tensor2> {
    if labels.len() != x.rows() {
        return Err(Error::Shape {
            op: "class_means labels",
            left: x.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut sums = Tensor2::zeros(n_classes, x.cols());
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in x.iter_rows().zip(labels) {
        if l >= n_classes {
            return Err(Error::LabelOutOfRange { label: l, classes: n_classes });
        }
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::InsufficientData(format!("no support samples for local class {c}")));
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest center per row; ties go to the smaller index.
pub fn nearest_center(x: &Tensor2, centers: &Tensor2) -> Vec<usize> {
    x.iter_rows()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter_rows().enumerate() {
                let d = squared_distance(row, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Index of the largest entry per row; ties go to the smaller index.
pub fn argmax_rows(x: &Tensor2) -> Vec<usize> {
    x.iter_rows()
        .map(|row| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, &v) in row.iter().enumerate() {
                if v > best.1 {
                    best = (j, v);
                }
            }
            best.0
        })
        .collect()
}

pub fn ncm_classify(
    support: &Tensor2,
    support_labels: &[usize],
    query: &Tensor2,
    n_classes: usize,
    config: &NcmConfig,
) -> Result<Vec<usize>> {
    if support.cols() != query.cols() {
        return Err(Error::Shape {
            op: "ncm",
            left: support.shape(),
            right: query.shape(),
        });
    }
    let s = transform_features(support, config)?;
    let q = transform_features(query, config)?;
    let centers = class_means(&s, support_labels, n_classes)?;
    Ok(nearest_center(&q, &centers))
}

/// NCM on already-extracted episode representations.
pub fn ncm_episode(data: &EpisodeData, config: &NcmConfig) -> Result<MethodOutcome> {
    let predictions = ncm_classify(&data.support, &data.support_labels, &data.query, data.spec.ways, config)?;
    Ok(MethodOutcome::new(predictions, &data.query_labels))
}

/// Nearest-class-mean on backbone representations of raw episode inputs.
pub fn simpleshot(
    backbone: &Backbone,
    inputs: &EpisodeData,
    diffusion: Option<&DiffusionOperator>,
    config: &NcmConfig,
) -> Result<MethodOutcome> {
    let feats = EpisodeData {
        support: backbone.features(&inputs.support, diffusion)?,
        query: backbone.features(&inputs.query, diffusion)?,
        ..inputs.clone()
    };
    ncm_episode(&feats, config)
}

/// Mean representation over the given dataset rows; the centering vector
/// for the cl2n transform.
pub fn representation_mean(
    backbone: &Backbone,
    dataset: &Dataset,
    indices: &[usize],
    diffusion: Option<&DiffusionOperator>,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::InsufficientData("no samples to average representations over".into()));
    }
    let feats = backbone.features(&dataset.features(indices), diffusion)?;
    Ok(feats.sum_rows().scale(1.0 / indices.len() as f64).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn query_equal_to_support_sample() {
        let s = t(&[&[0.0, 1.0], &[5.0, 5.0], &[-3.0, 2.0]]);
        let q = t(&[&[5.0, 5.0]]);
        assert_eq!(ncm_classify(&s, &[0, 1, 2], &q, 3, &NcmConfig::raw()).unwrap(), vec![1]);
    }

    #[test]
    fn one_dimensional_distances() {
        let s = t(&[&[0.0], &[4.0]]);
        let q = t(&[&[1.0]]);
        assert_eq!(ncm_classify(&s, &[0, 1], &q, 2, &NcmConfig::raw()).unwrap(), vec![0]);
    }

    #[test]
    fn ties_go_to_smaller_class() {
        let s = t(&[&[0.0], &[2.0]]);
        let q = t(&[&[1.0]]);
        assert_eq!(ncm_classify(&s, &[1, 0], &q, 2, &NcmConfig::raw()).unwrap(), vec![0]);
    }

    #[test]
    fn cl2n_normalizes() {
        let cfg = NcmConfig {
            transform: FeatureTransform::Cl2n,
            base_mean: Some(vec![0.0, 0.0]),
        };
        let out = transform_features(&t(&[&[3.0, 4.0]]), &cfg).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15 && (out.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cl2n_without_mean_is_config_error() {
        let cfg = NcmConfig { transform: FeatureTransform::Cl2n, base_mean: None };
        assert!(transform_features(&t(&[&[1.0]]), &cfg).is_err());
    }

    #[test]
    fn zero_rows_stay_zero() {
        let cfg = NcmConfig { transform: FeatureTransform::L2n, base_mean: None };
        let out = transform_features(&t(&[&[0.0, 0.0], &[1.0, 0.0]]), &cfg).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);
        let s = t(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let q = t(&[&[0.1, 0.0]]);
        assert_eq!(ncm_classify(&s, &[0, 1], &q, 2, &cfg).unwrap(), vec![1]);
    }

    proptest! {
        #[test]
        fn l2n_invariant_to_positive_scaling(
            vals in proptest::collection::vec(-5.0f64..5.0, 4 * 6 + 3 * 6),
            scale in 0.01f64..100.0,
        ) {
            let support = Tensor2::new(4, 6, vals[..24].to_vec()).unwrap();
            let query = Tensor2::new(3, 6, vals[24..].to_vec()).unwrap();
            let labels = [0, 1, 0, 1];
            let cfg = NcmConfig { transform: FeatureTransform::L2n, base_mean: None };
            let a = ncm_classify(&support, &labels, &query, 2, &cfg).unwrap();
            let b = ncm_classify(&support.scale(scale), &labels, &query.scale(scale), 2, &cfg).unwrap();
            // distances between unit vectors are unchanged up to rounding; only
            // near-exact ties may flip
            let s = transform_features(&support, &cfg).unwrap();
            let q = transform_features(&query, &cfg).unwrap();
            let centers = class_means(&s, &labels, 2).unwrap();
            for (i, row) in q.iter_rows().enumerate() {
                let d0 = squared_distance(row, centers.row(0));
                let d1 = squared_distance(row, centers.row(1));
                if (d0 - d1).abs() > 1e-9 {
                    prop_assert_eq!(a[i], b[i]);
                }
            }
        }
    }
}
