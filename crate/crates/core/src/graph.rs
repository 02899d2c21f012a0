//! Structural brain graph: ingestion, top-weight thresholding and the
//! normalized one-step diffusion operator `D^-1/2 (A + I) D^-1/2`.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted graph without self-loops. Edges are stored with
/// `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    node_count: usize,
    edges: Vec<Edge>,
    // fraction this graph was produced by; thresholding again at the same
    // fraction is a no-op
    thresholded_at: Option<f64>,
}

impl WeightedGraph {
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edges.len());
        let mut normalized = Vec::with_capacity(edges.len());
        for e in edges {
            if e.i == e.j {
                return Err(Error::InvalidArgument(format!("self-loop on node {}", e.i)));
            }
            if e.i >= node_count || e.j >= node_count {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) out of range for {node_count} nodes",
                    e.i, e.j
                )));
            }
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.i, e.j, e.weight
                )));
            }
            let (i, j) = if e.i < e.j { (e.i, e.j) } else { (e.j, e.i) };
            if !seen.insert((i, j)) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({i}, {j})")));
            }
            normalized.push(Edge { i, j, weight: e.weight });
        }
        Ok(Self {
            node_count,
            edges: normalized,
            thresholded_at: None,
        })
    }

    pub fn edgeless(node_count: usize) -> Self {
        Self {
            node_count,
            edges: Vec::new(),
            thresholded_at: None,
        }
    }

    /// Complete graph with uniform random weights in `[0, 1)`.
    pub fn random_complete<R: Rng>(node_count: usize, rng: &mut R) -> Self {
        let mut edges = Vec::with_capacity(node_count * node_count.saturating_sub(1) / 2);
        for i in 0..node_count {
            for j in i + 1..node_count {
                edges.push(Edge {
                    i,
                    j,
                    weight: rng.random::<f64>(),
                });
            }
        }
        Self {
            node_count,
            edges,
            thresholded_at: None,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Keeps the `ceil(keep_fraction * |E|)` heaviest edges. Ties at the
    /// cutoff go to the smaller `(i, j)`; kept edges come out in that order.
    pub fn threshold(&self, keep_fraction: f64) -> Result<Self> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep fraction must be in (0, 1], got {keep_fraction}"
            )));
        }
        if self.thresholded_at == Some(keep_fraction) {
            return Ok(self.clone());
        }
        let keep = (keep_fraction * self.edges.len() as f64).ceil() as usize;
        let mut sorted = self.edges.clone();
        sorted.sort_by(|a, b| {
            b.weight
                .total_cmp(&a.weight)
                .then(a.i.cmp(&b.i))
                .then(a.j.cmp(&b.j))
        });
        sorted.truncate(keep);
        Ok(Self {
            node_count: self.node_count,
            edges: sorted,
            thresholded_at: Some(keep_fraction),
        })
    }

    pub fn read_csv(path: &Path, node_count: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["i", "j", "weight"] {
            return Err(Error::format(path, "expected header `i,j,weight`"));
        }
        let mut edges = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, &e))?;
            let line = record.position().map_or(0, |p| p.line());
            let parse_err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: m,
            };
            if record.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", record.len())));
            }
            let i = record[0].trim().parse().map_err(|e| parse_err(format!("node i: {e}")))?;
            let j = record[1].trim().parse().map_err(|e| parse_err(format!("node j: {e}")))?;
            let weight = record[2].trim().parse().map_err(|e| parse_err(format!("weight: {e}")))?;
            edges.push(Edge { i, j, weight });
        }
        Self::new(node_count, edges).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let io = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["i", "j", "weight"]).map_err(io)?;
        for e in &self.edges {
            w.write_record([e.i.to_string(), e.j.to_string(), e.weight.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: &csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            path: path.to_path_buf(),
            line: p.line(),
            message: e.to_string(),
        },
        None => Error::format(path, e.to_string()),
    }
}

/// Symmetric normalized graph operator applied once to each input sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionOperator {
    matrix: Tensor2,
}

impl DiffusionOperator {
    /// `S = D^-1/2 (A + I) D^-1/2` with `A` binarized, or carrying the edge
    /// weights when `weighted` is set.
    pub fn build(graph: &WeightedGraph, weighted: bool) -> Self {
        let n = graph.node_count();
        let mut a = Tensor2::identity(n);
        for e in graph.edges() {
            let w = if weighted { e.weight } else { 1.0 };
            a.set(e.i, e.j, w);
            a.set(e.j, e.i, w);
        }
        let degree: Vec<f64> = a.iter_rows().map(|r| r.iter().sum()).collect();
        let mut s = Tensor2::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = a.get(i, j);
                if v != 0.0 {
                    // sqrt(d_i d_j) is symmetric in (i, j) bit-for-bit
                    s.set(i, j, v / (degree[i] * degree[j]).sqrt());
                }
            }
        }
        Self { matrix: s }
    }

    /// `S^steps`, for diffusing more than once; zero steps give the identity.
    pub fn with_steps(self, steps: usize) -> Result<Self> {
        let n = self.node_count();
        let mut m = Tensor2::identity(n);
        for _ in 0..steps {
            m = m.matmul(&self.matrix)?;
        }
        // keep exact symmetry despite rounding in the products
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (m.get(i, j) + m.get(j, i));
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        Ok(Self { matrix: m })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Tensor2::identity(n),
        }
    }

    pub fn node_count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.matrix
    }

    /// `x · Sᵀ`, i.e. the operator applied to every row of `x`.
    pub fn diffuse(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.node_count() {
            return Err(Error::Shape {
                op: "diffuse",
                left: x.shape(),
                right: self.matrix.shape(),
            });
        }
        x.matmul(&self.matrix.transpose())
    }

    /// Power-iteration estimate of the spectral norm.
    pub fn spectral_norm_estimate(&self, iterations: usize) -> f64 {
        let n = self.node_count();
        if n == 0 {
            return 0.0;
        }
        // deterministic start vector with no special symmetry
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 97) as f64 / 97.0).collect();
        let mut norm = 0.0;
        for _ in 0..iterations {
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
            let w: Vec<f64> = self
                .matrix
                .iter_rows()
                .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w;
        }
        norm
    }
}
