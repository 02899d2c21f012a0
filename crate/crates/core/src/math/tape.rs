//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Backward passes emit their vector-Jacobian products as ordinary tape
//! operations. With [`GradOrder::Second`] those operations stay
//! differentiable, so the gradients returned by one backward pass can feed a
//! second one (gradient-of-gradient, as needed by meta-learning through an
//! unrolled inner loop). With [`GradOrder::First`] they are recorded as
//! constants.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOrder {
    First,
    Second,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Matrix times a 1×1 node.
    ScaleBy(Var, Var),
    /// 1×C → R×C.
    BroadcastRows(Var),
    /// R×C → 1×C.
    SumRows(Var),
    /// R×1 → R×C.
    BroadcastCols(Var),
    /// R×C → R×1.
    RowSum(Var),
    /// 1×1 → R×C.
    BroadcastScalar(Var),
    /// R×C → 1×1.
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var),
}

struct Node {
    op: Op,
    value: Tensor2,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    // false while emitting a first-order backward pass
    differentiable: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            differentiable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter).
    pub fn variable(&mut self, value: Tensor2) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest |input| over every ReLU on the tape. Finite-difference checks
    /// use it to reject points lying too close to a kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.as_slice().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    fn push_raw(&mut self, op: Op, value: Tensor2, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor2, parents: &[Var]) -> Var {
        let rg = self.differentiable && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        let c = self.value(s).as_slice()[0];
        let v = self.value(a).scale(c);
        Ok(self.push(Op::ScaleBy(a, s), v, &[a, s]))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                left: (r, c),
                right: (rows, c),
            });
        }
        let src = self.value(a).as_slice();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let v = Tensor2::new(rows, c, data)?;
        Ok(self.push(Op::BroadcastRows(a), v, &[a]))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push(Op::SumRows(a), v, &[a])
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::Shape {
                op: "broadcast_cols",
                left: (r, c),
                right: (r, cols),
            });
        }
        let mut data = Vec::with_capacity(r * cols);
        for &x in self.value(a).as_slice() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let v = Tensor2::new(r, cols, data)?;
        Ok(self.push(Op::BroadcastCols(a), v, &[a]))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        self.push(Op::RowSum(a), v, &[a])
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(a) != (1, 1) {
            return Err(Error::Shape {
                op: "broadcast_scalar",
                left: self.shape(a),
                right: (rows, cols),
            });
        }
        let v = Tensor2::filled(rows, cols, self.value(a).as_slice()[0]);
        Ok(self.push(Op::BroadcastScalar(a), v, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor2::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = super::tensor::relu(self.value(a));
        self.push(Op::Relu(a), v, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Op::LogSoftmax(a), out, &[a])
    }

    /// `x·w + b` with `b` a 1×H row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw).0;
        if self.shape(b) != (1, self.shape(xw).1) {
            return Err(Error::Shape {
                op: "affine bias",
                left: self.shape(w),
                right: self.shape(b),
            });
        }
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Mean over the columns of each row (R×C → R×1).
    pub fn mean_over_cols(&mut self, a: Var) -> Var {
        let c = self.shape(a).1;
        let s = self.row_sum(a);
        self.scale(s, 1.0 / c as f64)
    }

    /// Batch-mean softmax cross-entropy; returns a 1×1 node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_xent labels",
                left: (b, c),
                right: (labels.len(), 1),
            });
        }
        let mut pick = Tensor2::zeros(b, c);
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::LabelOutOfRange { label: l, classes: c });
            }
            pick.set(i, l, -1.0 / b as f64);
        }
        let lsm = self.log_softmax(logits);
        let pick = self.constant(pick);
        let prod = self.mul(lsm, pick)?;
        Ok(self.sum_all(prod))
    }

    /// Gradients of a scalar `root` with respect to `wrt`.
    pub fn backward(&mut self, root: Var, wrt: &[Var], order: GradOrder) -> Result<Vec<Var>> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        self.vjp(root, Tensor2::scalar(1.0), wrt, order)
    }

    /// Vector-Jacobian product of `root` with an explicit seed of the same
    /// shape.
    pub fn vjp(&mut self, root: Var, seed: Tensor2, wrt: &[Var], order: GradOrder) -> Result<Vec<Var>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape {
                op: "vjp seed",
                left: self.shape(root),
                right: seed.shape(),
            });
        }
        let saved = self.differentiable;
        self.differentiable = order == GradOrder::Second;
        let result = self.run_backward(root, seed, wrt);
        self.differentiable = saved;
        result
    }

    fn run_backward(&mut self, root: Var, seed: Tensor2, wrt: &[Var]) -> Result<Vec<Var>> {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[root.0] = Some(self.constant(seed));

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op;
            let mut contribs: Vec<(Var, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.requires_grad(a) {
                        let bt = self.transpose(b);
                        contribs.push((a, self.matmul(g, bt)?));
                    }
                    if self.requires_grad(b) {
                        let at = self.transpose(a);
                        contribs.push((b, self.matmul(at, g)?));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((a, g));
                    contribs.push((b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((a, g));
                    if self.requires_grad(b) {
                        contribs.push((b, self.scale(g, -1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        contribs.push((a, self.mul(g, b)?));
                    }
                    if self.requires_grad(b) {
                        contribs.push((b, self.mul(g, a)?));
                    }
                }
                Op::Scale(a, c) => contribs.push((a, self.scale(g, c))),
                Op::ScaleBy(a, s) => {
                    if self.requires_grad(a) {
                        contribs.push((a, self.scale_by(g, s)?));
                    }
                    if self.requires_grad(s) {
                        let ga = self.mul(g, a)?;
                        contribs.push((s, self.sum_all(ga)));
                    }
                }
                Op::BroadcastRows(a) => contribs.push((a, self.sum_rows(g))),
                Op::SumRows(a) => {
                    let rows = self.shape(a).0;
                    contribs.push((a, self.broadcast_rows(g, rows)?));
                }
                Op::BroadcastCols(a) => contribs.push((a, self.row_sum(g))),
                Op::RowSum(a) => {
                    let cols = self.shape(a).1;
                    contribs.push((a, self.broadcast_cols(g, cols)?));
                }
                Op::BroadcastScalar(a) => contribs.push((a, self.sum_all(g))),
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    contribs.push((a, self.broadcast_scalar(g, r, c)?));
                }
                Op::Transpose(a) => contribs.push((a, self.transpose(g))),
                Op::Reshape(a) => {
                    let (r, c) = self.shape(a);
                    contribs.push((a, self.reshape(g, r, c)?));
                }
                Op::Relu(a) => {
                    // subgradient 0 at exactly 0
                    let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    contribs.push((a, self.mul(g, mask)?));
                }
                Op::Exp(a) => contribs.push((a, self.mul(g, Var(i))?)),
                Op::LogSoftmax(a) => {
                    let cols = self.shape(a).1;
                    let p = self.exp(Var(i));
                    let gs = self.row_sum(g);
                    let gs = self.broadcast_cols(gs, cols)?;
                    let pg = self.mul(p, gs)?;
                    contribs.push((a, self.sub(g, pg)?));
                }
            }
            for (parent, contrib) in contribs {
                if !self.requires_grad(parent) {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(w);
                    Ok(self.constant(Tensor2::zeros(r, c)))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let w = t.variable(Tensor2::scalar(3.0));
        let f = t.mul(w, w).unwrap();
        let g = t.backward(f, &[w], GradOrder::First).unwrap();
        assert_eq!(t.value(g[0]).as_slice(), &[6.0]);
    }

    #[test]
    fn relu_backward_subgradient() {
        let mut t = Tape::new();
        let x = t.variable(Tensor2::from_rows(&[[-1.0, 2.0]]).unwrap());
        let y = t.relu(x);
        let g = t.vjp(y, Tensor2::filled(1, 2, 1.0), &[x], GradOrder::First).unwrap();
        assert_eq!(t.value(g[0]).as_slice(), &[0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(Tensor2::scalar(0.0));
        let y = t.relu(x);
        let g = t.backward(y, &[x], GradOrder::First).unwrap();
        assert_eq!(t.value(g[0]).as_slice(), &[0.0]);
    }

    #[test]
    fn xent_uniform_logits() {
        let mut t = Tape::new();
        let z = t.variable(Tensor2::zeros(3, 5));
        let loss = t.softmax_xent(z, &[0, 3, 4]).unwrap();
        assert!((t.value(loss).as_slice()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_two_class_gradient() {
        let mut t = Tape::new();
        let z = t.variable(Tensor2::zeros(1, 2));
        let loss = t.softmax_xent(z, &[0]).unwrap();
        assert!((t.value(loss).as_slice()[0] - 2f64.ln()).abs() < 1e-12);
        let g = t.backward(loss, &[z], GradOrder::First).unwrap();
        let g = t.value(g[0]).as_slice();
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn xent_rejects_bad_label() {
        let mut t = Tape::new();
        let z = t.variable(Tensor2::zeros(1, 2));
        assert!(matches!(
            t.softmax_xent(z, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.variable(Tensor2::zeros(2, 2));
        let y = t.relu(x);
        assert!(matches!(
            t.backward(y, &[x], GradOrder::First),
            Err(Error::NotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.variable(Tensor2::scalar(2.0));
        let b = t.variable(Tensor2::zeros(2, 3));
        let f = t.mul(a, a).unwrap();
        let g = t.backward(f, &[b], GradOrder::First).unwrap();
        assert_eq!(t.value(g[0]), &Tensor2::zeros(2, 3));
    }

    #[test]
    fn first_order_gradients_are_constants() {
        let mut t = Tape::new();
        let w = t.variable(Tensor2::scalar(3.0));
        let f = t.mul(w, w).unwrap();
        let g1 = t.backward(f, &[w], GradOrder::First).unwrap()[0];
        assert!(!t.requires_grad(g1));
        let g2 = t.backward(f, &[w], GradOrder::Second).unwrap()[0];
        assert!(t.requires_grad(g2));
        let h = t.backward(g2, &[w], GradOrder::First).unwrap()[0];
        assert_eq!(t.value(h).as_slice(), &[2.0]);
    }

    // f(w) = (w-1)^2/2, w' = w - a f'(w), g(w') = (w'-2)^2/2.
    fn quadratic_meta_gradient(w0: f64, alpha: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let w = t.variable(Tensor2::scalar(w0));
        let one = t.constant(Tensor2::scalar(1.0));
        let two = t.constant(Tensor2::scalar(2.0));
        let d = t.sub(w, one).unwrap();
        let sq = t.mul(d, d).unwrap();
        let f = t.scale(sq, 0.5);
        let gw = t.backward(f, &[w], GradOrder::Second).unwrap()[0];
        let step = t.scale(gw, alpha);
        let w1 = t.sub(w, step).unwrap();
        let d2 = t.sub(w1, two).unwrap();
        let sq2 = t.mul(d2, d2).unwrap();
        let g = t.scale(sq2, 0.5);
        let meta = t.backward(g, &[w], GradOrder::First).unwrap()[0];
        (t.value(w1).as_slice()[0], t.value(meta).as_slice()[0])
    }

    #[test]
    fn second_order_quadratic_chain() {
        let (w1, meta) = quadratic_meta_gradient(0.0, 0.5);
        assert_eq!(w1, 0.5);
        assert!((meta + 0.75).abs() < 1e-12);
        for alpha in [0.1, 0.5, 1.0] {
            let (w1, meta) = quadratic_meta_gradient(0.0, alpha);
            assert!((meta - (w1 - 2.0) * (1.0 - alpha)).abs() < 1e-10);
        }
    }
}
