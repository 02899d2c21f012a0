//! Transductive inference: power transform, then iterative class-center
//! estimation with Sinkhorn-balanced soft assignments of the queries.

use serde::{Deserialize, Serialize};

use crate::backbones::Backbone;
use crate::data::EpisodeData;
use crate::error::{Error, Result};
use crate::graph::DiffusionOperator;
use crate::math::Tensor2;

use super::ncm::{argmax_rows, class_means, l2_normalize_rows, nearest_center, squared_distance};
use super::MethodOutcome;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PtMapPrediction {
    /// Argmax of the final transport plan row.
    #[default]
    Plan,
    /// Nearest final class center.
    NearestCenter,
}

impl std::str::FromStr for PtMapPrediction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plan" => Ok(Self::Plan),
            "nearest-center" | "ncm" => Ok(Self::NearestCenter),
            other => Err(Error::InvalidArgument(format!("unknown PT+MAP prediction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct PtMapConfig {
    pub beta: f64,
    pub eps: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub map_iterations: usize,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_tol: f64,
    pub prediction: PtMapPrediction,
}

impl Default for PtMapConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            eps: 1e-6,
            lambda: 10.0,
            alpha: 0.2,
            map_iterations: 20,
            sinkhorn_iterations: 50,
            sinkhorn_tol: 1e-6,
            prediction: PtMapPrediction::Plan,
        }
    }
}

impl PtMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("power-transform beta must be in (0, 1], got {}", self.beta)));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(Error::Config("sinkhorn iterations must be at least 1".into()));
        }
        if !(self.eps >= 0.0 && self.lambda > 0.0) {
            return Err(Error::Config("eps must be >= 0 and lambda > 0".into()));
        }
        Ok(())
    }
}

/// Elementwise `(v + eps)^beta`, then row-wise L2 normalization.
pub fn power_transform(x: &Tensor2, beta: f64, eps: f64) -> Result<Tensor2> {
    if let Some(v) = x.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "power transform needs nonnegative features, found {v}"
        )));
    }
    Ok(l2_normalize_rows(&x.map(|v| (v + eps).powf(beta))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor2,
    pub iterations: usize,
    /// Largest row-marginal violation of the scaled plan before the final
    /// rounding onto the marginals.
    pub max_violation: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Projects a nonnegative plan onto the transport polytope: rows and then
/// columns above their target are scaled down, and the remaining deficit is
/// added back as a rank-one term (Altschuler, Weed and Rigollet's rounding).
/// A plan that already satisfies the marginals changes only by rounding.
fn round_to_marginals(plan: &mut Tensor2, rows: &[f64], cols: &[f64]) {
    for (i, &r) in rows.iter().enumerate() {
        let s: f64 = plan.row(i).iter().sum();
        if s > r {
            plan.row_mut(i).iter_mut().for_each(|v| *v *= r / s);
        }
    }
    let col_sums = plan.sum_rows();
    for (j, (&c, &s)) in cols.iter().zip(col_sums.as_slice()).enumerate() {
        if s > c {
            for i in 0..plan.rows() {
                plan.set(i, j, plan.get(i, j) * c / s);
            }
        }
    }
    let row_err: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, &r)| (r - plan.row(i).iter().sum::<f64>()).max(0.0))
        .collect();
    let col_err: Vec<f64> = cols
        .iter()
        .zip(plan.sum_rows().as_slice())
        .map(|(&c, &s)| (c - s).max(0.0))
        .collect();
    let total: f64 = col_err.iter().sum();
    if total > 0.0 {
        for (i, &re) in row_err.iter().enumerate() {
            for (v, &ce) in plan.row_mut(i).iter_mut().zip(&col_err) {
                *v += re * ce / total;
            }
        }
    }
}

/// Entropic transport `P = diag(u) exp(-lambda C) diag(v)` matching the given
/// marginals. Scalings are kept in the log domain so large `lambda * C`
/// cannot underflow. Scaling stops at `tol` or `max_iterations`; the plan is
/// then rounded onto the exact marginals, so a truncated run still returns a
/// feasible plan.
pub fn sinkhorn(
    cost: &Tensor2,
    row_marginals: &[f64],
    col_marginals: &[f64],
    lambda: f64,
    max_iterations: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    if row_marginals.len() != n || col_marginals.len() != m {
        return Err(Error::Shape {
            op: "sinkhorn marginals",
            left: cost.shape(),
            right: (row_marginals.len(), col_marginals.len()),
        });
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("sinkhorn cost matrix".into()));
    }
    let (rs, cs): (f64, f64) = (row_marginals.iter().sum(), col_marginals.iter().sum());
    if (rs - cs).abs() > 1e-9 * rs.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!("marginal totals differ: rows {rs}, cols {cs}")));
    }
    let log_k = cost.scale(-lambda);
    let log_r: Vec<f64> = row_marginals.iter().map(|v| v.ln()).collect();
    let log_c: Vec<f64> = col_marginals.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < max_iterations {
        iterations += 1;
        for i in 0..n {
            let row = log_k.row(i);
            f[i] = log_r[i] - log_sum_exp(row.iter().zip(&g).map(|(k, gj)| k + gj));
        }
        for j in 0..m {
            g[j] = log_c[j] - log_sum_exp((0..n).map(|i| log_k.get(i, j) + f[i]));
        }
        violation = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| (log_k.get(i, j) + f[i] + g[j]).exp()).sum();
                (s - row_marginals[i]).abs()
            })
            .fold(0.0, f64::max);
        if violation < tol {
            break;
        }
    }
    let mut plan = Tensor2::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            plan.set(i, j, (log_k.get(i, j) + f[i] + g[j]).exp());
        }
    }
    round_to_marginals(&mut plan, row_marginals, col_marginals);
    Ok(TransportPlan {
        plan,
        iterations,
        max_violation: violation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtMapOutcome {
    pub outcome: MethodOutcome,
    pub centers: Tensor2,
    pub plan: Option<Tensor2>,
}

fn query_plan(query: &Tensor2, centers: &Tensor2, queries_per_class: usize, config: &PtMapConfig) -> Result<Tensor2> {
    let mut cost = Tensor2::zeros(query.rows(), centers.rows());
    for (i, q) in query.iter_rows().enumerate() {
        for (j, c) in centers.iter_rows().enumerate() {
            cost.set(i, j, squared_distance(q, c));
        }
    }
    let rows = vec![1.0; query.rows()];
    let cols = vec![queries_per_class as f64; centers.rows()];
    Ok(sinkhorn(&cost, &rows, &cols, config.lambda, config.sinkhorn_iterations, config.sinkhorn_tol)?.plan)
}

/// PT+MAP on already-extracted (nonnegative) episode representations.
pub fn ptmap_on_features(data: &EpisodeData, config: &PtMapConfig) -> Result<PtMapOutcome> {
    config.validate()?;
    let spec = data.spec;
    let support = power_transform(&data.support, config.beta, config.eps)?;
    let query = power_transform(&data.query, config.beta, config.eps)?;
    let mut centers = class_means(&support, &data.support_labels, spec.ways)?;
    let support_sums = {
        let mut s = Tensor2::zeros(spec.ways, support.cols());
        for (row, &l) in support.iter_rows().zip(&data.support_labels) {
            for (a, v) in s.row_mut(l).iter_mut().zip(row) {
                *a += v;
            }
        }
        s
    };
    let support_counts: Vec<f64> = (0..spec.ways)
        .map(|c| data.support_labels.iter().filter(|&&l| l == c).count() as f64)
        .collect();

    for _ in 0..config.map_iterations {
        let plan = query_plan(&query, &centers, spec.queries, config)?;
        for j in 0..spec.ways {
            let mass: f64 = (0..query.rows()).map(|i| plan.get(i, j)).sum::<f64>() + support_counts[j];
            let mut target = support_sums.row(j).to_vec();
            for (i, q) in query.iter_rows().enumerate() {
                let p = plan.get(i, j);
                for (t, v) in target.iter_mut().zip(q) {
                    *t += p * v;
                }
            }
            for (c, t) in centers.row_mut(j).iter_mut().zip(&target) {
                *c += config.alpha * (t / mass - *c);
            }
        }
    }

    let (predictions, plan) = match config.prediction {
        PtMapPrediction::NearestCenter => (nearest_center(&query, &centers), None),
        PtMapPrediction::Plan => {
            let plan = query_plan(&query, &centers, spec.queries, config)?;
            (argmax_rows(&plan), Some(plan))
        }
    };
    Ok(PtMapOutcome {
        outcome: MethodOutcome::new(predictions, &data.query_labels),
        centers,
        plan,
    })
}

pub fn ptmap_classify(
    backbone: &Backbone,
    inputs: &EpisodeData,
    diffusion: Option<&DiffusionOperator>,
    config: &PtMapConfig,
) -> Result<PtMapOutcome> {
    let feats = EpisodeData {
        support: backbone.features(&inputs.support, diffusion)?,
        query: backbone.features(&inputs.query, diffusion)?,
        ..inputs.clone()
    };
    ptmap_on_features(&feats, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_transform_closed_form() {
        let x = Tensor2::from_rows(&[[4.0, 9.0]]).unwrap();
        let y = power_transform(&x, 0.5, 0.0).unwrap();
        let n = 13f64.sqrt();
        assert!((y.get(0, 0) - 2.0 / n).abs() < 1e-15);
        assert!((y.get(0, 1) - 3.0 / n).abs() < 1e-15);
        assert!((y.get(0, 0) - 0.5547).abs() < 1e-4 && (y.get(0, 1) - 0.8321).abs() < 1e-4);
    }

    #[test]
    fn power_transform_beta_one_is_l2() {
        let x = Tensor2::from_rows(&[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(power_transform(&x, 1.0, 0.0).unwrap(), l2_normalize_rows(&x));
    }

    #[test]
    fn power_transform_zero_row_uniform() {
        let y = power_transform(&Tensor2::zeros(1, 4), 0.5, 1e-6).unwrap();
        for &v in y.as_slice() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn power_transform_rejects_negative() {
        let x = Tensor2::from_rows(&[[1.0, -0.1]]).unwrap();
        assert!(power_transform(&x, 0.5, 1e-6).is_err());
    }

    #[test]
    fn sinkhorn_constant_cost_uniform() {
        let cost = Tensor2::filled(15, 5, 0.7);
        let p = sinkhorn(&cost, &[1.0; 15], &[3.0; 5], 10.0, 50, 1e-6).unwrap();
        for &v in p.plan.as_slice() {
            assert!((v - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn sinkhorn_marginals_and_row_shift() {
        let mut cost = Tensor2::zeros(6, 3);
        for i in 0..6 {
            for j in 0..3 {
                cost.set(i, j, ((i * 7 + j * 3) % 5) as f64 / 5.0);
            }
        }
        let p = sinkhorn(&cost, &[1.0; 6], &[2.0; 3], 10.0, 1000, 1e-9).unwrap();
        assert!(p.max_violation < 1e-6);
        for j in 0..3 {
            let s: f64 = (0..6).map(|i| p.plan.get(i, j)).sum();
            assert!((s - 2.0).abs() < 1e-6);
        }
        assert!(p.plan.as_slice().iter().all(|&v| v >= 0.0));

        let mut shifted = cost.clone();
        shifted.row_mut(2).iter_mut().for_each(|v| *v += 3.5);
        let q = sinkhorn(&shifted, &[1.0; 6], &[2.0; 3], 10.0, 1000, 1e-9).unwrap();
        assert!(p.plan.max_abs_diff(&q.plan).unwrap() < 1e-8);
    }

    #[test]
    fn sinkhorn_survives_huge_lambda() {
        let cost = Tensor2::from_rows(&[[0.0, 50.0], [50.0, 0.0]]).unwrap();
        let p = sinkhorn(&cost, &[1.0; 2], &[1.0; 2], 1000.0, 100, 1e-12).unwrap();
        assert!(p.plan.is_finite());
        assert!((p.plan.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_rejects_unbalanced_marginals() {
        let cost = Tensor2::zeros(2, 2);
        assert!(sinkhorn(&cost, &[1.0, 1.0], &[1.0, 2.0], 1.0, 10, 1e-6).is_err());
    }
}
