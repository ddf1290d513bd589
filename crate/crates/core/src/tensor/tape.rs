//! Matrix-valued reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, so each node's adjoint is
//! complete before it is propagated to its inputs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Identifier of a learnable parameter registered on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    ConcatCols(usize, usize),
    MeanRows(usize),
    MulConst(usize, Matrix),
    OuterAdd(usize, usize),
    MaskedSoftmaxRows(usize),
    SumSquares(usize),
    QuadTrace(usize, Matrix),
    BceWithLogits {
        input: usize,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    WeightedSquaredError {
        input: usize,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ConcatCols(..) => "concat_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::MulConst(..) => "mul_const",
            Op::OuterAdd(..) => "outer_add",
            Op::MaskedSoftmaxRows(..) => "masked_softmax_rows",
            Op::SumSquares(..) => "sum_squares",
            Op::QuadTrace(..) => "quad_trace",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::WeightedSquaredError { .. } => "weighted_squared_error",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`GradTape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Matrix>,
    visit_order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Result<&Matrix> {
        self.grads.get(&id).ok_or_else(|| {
            Error::Lookup(format!("parameter {} was not recorded on the tape", id.0))
        })
    }

    pub fn take(&mut self, id: ParamId) -> Result<Matrix> {
        self.grads.remove(&id).ok_or_else(|| {
            Error::Lookup(format!("parameter {} was not recorded on the tape", id.0))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter()
    }

    /// Node indices in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, usize>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in forward order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Registers a learnable parameter. Registering the same id twice
    /// returns the original node.
    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var(idx);
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(id, v.0);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    /// ReLU; the subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(a.0);
        self.push(value, Op::LeakyRelu(a.0, slope), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::ConcatCols(a.0, b.0), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let value = self.value(a).mean_rows();
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::MeanRows(a.0), rg))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Result<Var> {
        let value = self.value(a).hadamard(&m)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::MulConst(a.0, m), rg))
    }

    /// `out[i][j] = u[i] + v[j]` for column vectors `u` (n×1), `v` (m×1).
    pub fn outer_add(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uu, vv) = (self.value(u), self.value(v));
        if uu.cols() != 1 || vv.cols() != 1 {
            return Err(Error::Shape("outer_add expects column vectors".into()));
        }
        let value = Matrix::from_fn(uu.rows(), vv.rows(), |i, j| uu.get(i, 0) + vv.get(j, 0));
        let rg = self.rg(u.0) || self.rg(v.0);
        Ok(self.push(value, Op::OuterAdd(u.0, v.0), rg))
    }

    /// Row-wise softmax restricted to entries where `mask` is non-zero.
    /// Masked-out entries are exactly 0; a fully masked row stays 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != mask.shape() {
            return Err(Error::Shape("softmax mask shape mismatch".into()));
        }
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let mut max = f64::NEG_INFINITY;
            for c in 0..x.cols() {
                if mask.get(r, c) != 0.0 {
                    max = max.max(x.get(r, c));
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for c in 0..x.cols() {
                if mask.get(r, c) != 0.0 {
                    let e = (x.get(r, c) - max).exp();
                    value.set(r, c, e);
                    denom += e;
                }
            }
            for c in 0..x.cols() {
                value.set(r, c, value.get(r, c) / denom);
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::MaskedSoftmaxRows(a.0), rg))
    }

    /// `Σ x²` as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).frobenius_sq());
        let rg = self.rg(a.0);
        self.push(value, Op::SumSquares(a.0), rg)
    }

    /// `Tr(X · A · Xᵀ)` for constant square `A`.
    pub fn quad_trace(&mut self, x: Var, a: Matrix) -> Result<Var> {
        let xv = self.value(x);
        if !a.is_square() || a.rows() != xv.cols() {
            return Err(Error::Shape(format!(
                "quad_trace: X is {}x{}, A is {}x{}",
                xv.rows(),
                xv.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let xa = xv.matmul(&a)?;
        let t = xa.hadamard(xv)?.sum();
        let rg = self.rg(x.0);
        Ok(self.push(Matrix::filled(1, 1, t), Op::QuadTrace(x.0, a), rg))
    }

    /// `Σ_j w_j · (softplus(z_j) − y_j z_j)` over a 1×S logit row.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || z.cols() != target.len() || target.len() != weight.len() {
            return Err(Error::Shape("bce_with_logits length mismatch".into()));
        }
        let mut total = 0.0;
        for j in 0..target.len() {
            if weight[j] != 0.0 {
                let zj = z.get(0, j);
                total += weight[j] * (softplus(zj) - target[j] * zj);
            }
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::BceWithLogits {
                input: logits.0,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_j w_j · (z_j − y_j)²` over a 1×S prediction row.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: &[f64],
        weight: &[f64],
    ) -> Result<Var> {
        let z = self.value(pred);
        if z.rows() != 1 || z.cols() != target.len() || target.len() != weight.len() {
            return Err(Error::Shape(
                "weighted_squared_error length mismatch".into(),
            ));
        }
        let mut total = 0.0;
        for j in 0..target.len() {
            if weight[j] != 0.0 {
                let d = z.get(0, j) - target[j];
                total += weight[j] * d * d;
            }
        }
        let rg = self.rg(pred.0);
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::WeightedSquaredError {
                input: pred.0,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            rg,
        ))
    }

    /// Adds a list of 1×1 nodes left to right.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = match iter.next() {
            Some(v) => *v,
            None => return Ok(self.constant(Matrix::zeros(1, 1))),
        };
        let mut acc = first;
        for t in iter {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar output. Every registered parameter gets
    /// an entry, zero if the output does not depend on it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            let (r, c) = self.value(output).shape();
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {r}x{c}"
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut visit_order = Vec::new();

        fn accumulate(adj: &mut [Option<Matrix>], idx: usize, g: Matrix) {
            match &mut adj[idx] {
                Some(existing) => existing.axpy(1.0, &g).expect("adjoint shape"),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            visit_order.push(idx);
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul(&self.nodes[*b].value.transpose())?;
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.nodes[*a].value.transpose().matmul(&g)?;
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = g.zip_with(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[*a].value;
                    let ga = g.zip_with(
                        x,
                        "leaky_relu",
                        |gv, xv| if xv > 0.0 { gv } else { slope * gv },
                    )?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    if self.rg(*a) {
                        let ga = Matrix::from_fn(g.rows(), ca, |r, c| g.get(r, c));
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = Matrix::from_fn(g.rows(), cb, |r, c| g.get(r, ca + c));
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[*a].value.rows();
                    let inv = 1.0 / rows as f64;
                    let ga = Matrix::from_fn(rows, g.cols(), |_, c| g.get(0, c) * inv);
                    accumulate(&mut adj, *a, ga);
                }
                Op::MulConst(a, m) => accumulate(&mut adj, *a, g.hadamard(m)?),
                Op::OuterAdd(u, v) => {
                    if self.rg(*u) {
                        let gu = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                        accumulate(&mut adj, *u, gu);
                    }
                    if self.rg(*v) {
                        let mut gv = Matrix::zeros(g.cols(), 1);
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                gv.add_at(j, 0, g.get(i, j));
                            }
                        }
                        accumulate(&mut adj, *v, gv);
                    }
                }
                Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SumSquares(a) => {
                    let s = g.get(0, 0);
                    accumulate(&mut adj, *a, self.nodes[*a].value.scale(2.0 * s));
                }
                Op::QuadTrace(x, a) => {
                    let s = g.get(0, 0);
                    let sym = a.add(&a.transpose())?;
                    let gx = self.nodes[*x].value.matmul(&sym)?.scale(s);
                    accumulate(&mut adj, *x, gx);
                }
                Op::BceWithLogits {
                    input,
                    target,
                    weight,
                } => {
                    let s = g.get(0, 0);
                    let z = &self.nodes[*input].value;
                    let gz = Matrix::from_fn(1, z.cols(), |_, j| {
                        s * weight[j] * (sigmoid(z.get(0, j)) - target[j])
                    });
                    accumulate(&mut adj, *input, gz);
                }
                Op::WeightedSquaredError {
                    input,
                    target,
                    weight,
                } => {
                    let s = g.get(0, 0);
                    let z = &self.nodes[*input].value;
                    let gz = Matrix::from_fn(1, z.cols(), |_, j| {
                        s * 2.0 * weight[j] * (z.get(0, j) - target[j])
                    });
                    accumulate(&mut adj, *input, gz);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (id, &idx) in &self.params {
            let g = if idx <= output.0 {
                adj[idx].take()
            } else {
                None
            };
            let (r, c) = self.nodes[idx].value.shape();
            grads.insert(*id, g.unwrap_or_else(|| Matrix::zeros(r, c)));
        }
        Ok(Gradients { grads, visit_order })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::central_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param(ParamId(0), Matrix::row_vector(&[1.0, 2.0]));
        let y = tape.sum_squares(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = GradTape::new();
        let _x = tape.param(ParamId(3), Matrix::row_vector(&[1.0, -2.0]));
        let c = tape.constant(Matrix::filled(1, 1, 5.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_param_is_lookup_error() {
        let mut tape = GradTape::new();
        let x = tape.param(ParamId(0), Matrix::row_vector(&[1.0]));
        let y = tape.sum_squares(x);
        let g = tape.backward(y).unwrap();
        assert!(matches!(g.get(ParamId(9)), Err(Error::Lookup(_))));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param(ParamId(0), Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = GradTape::new();
        let x = tape.param(ParamId(0), Matrix::row_vector(&[1.0, -2.0, 3.0]));
        let a = tape.scale(x, 2.0);
        let b = tape.relu(a);
        let c = tape.sum_squares(b);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.visit_order(), &[c.0, b.0, a.0, x.0]);
        assert_eq!(
            tape.op_names(),
            vec!["leaf", "scale", "relu", "sum_squares"]
        );
    }

    fn relu_sum(w: &Matrix, x: &Matrix) -> f64 {
        w.matmul(x).unwrap().map(|v| v.max(0.0)).sum()
    }

    #[test]
    fn relu_linear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let x = Matrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));

        let mut tape = GradTape::new();
        let wv = tape.param(ParamId(0), w.clone());
        let xv = tape.constant(x.clone());
        let h = tape.matmul(wv, xv).unwrap();
        let r = tape.relu(h);
        // sum via quad_trace-free path: mean_rows then scale
        let m = tape.mean_rows(r).unwrap();
        let s = tape.scale(m, 4.0);
        let g = tape.backward(s).unwrap();
        let analytic = g.get(ParamId(0)).unwrap();

        for i in 0..4 {
            for j in 0..3 {
                let fd = central_difference(
                    |d| {
                        let mut wp = w.clone();
                        wp.add_at(i, j, d);
                        relu_sum(&wp, &x)
                    },
                    1e-5,
                );
                let a = analytic.get(i, j);
                let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
                assert!(rel < 1e-5 || (a - fd).abs() < 1e-9, "({i},{j}) {a} vs {fd}");
            }
        }
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // exercises concat, outer_add, leaky relu, masked softmax, quad trace, bce
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let a_src = Matrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
        let omega_inv = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.5]]).unwrap();
        let mask = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ])
        .unwrap();
        let target = [1.0, 0.0];
        let weight = [0.5, 0.5];

        let eval = |h: &Matrix, tape: &mut GradTape| -> Var {
            let hv = tape.param(ParamId(0), h.clone());
            let av = tape.param(ParamId(1), a_src.clone());
            let s = tape.matmul(hv, av).unwrap();
            let e = tape.outer_add(s, s).unwrap();
            let e = tape.leaky_relu(e, 0.2);
            let alpha = tape.masked_softmax_rows(e, mask.clone()).unwrap();
            let mixed = tape.matmul(alpha, hv).unwrap();
            let cat = tape.concat_cols(mixed, hv).unwrap();
            let proj = tape.constant(Matrix::from_fn(6, 2, |r, c| {
                ((r + 2 * c) as f64 * 0.37).sin()
            }));
            let p = tape.matmul(cat, proj).unwrap();
            let pooled = tape.mean_rows(p).unwrap();
            let loss = tape.bce_with_logits(pooled, &target, &weight).unwrap();
            let pt = tape.param(
                ParamId(2),
                Matrix::from_fn(3, 2, |r, c| 0.1 * (r as f64) - 0.2 * c as f64),
            );
            let reg = tape.quad_trace(pt, omega_inv.clone()).unwrap();
            tape.add(loss, reg).unwrap()
        };

        let mut tape = GradTape::new();
        let out = eval(&h, &mut tape);
        let g = tape.backward(out).unwrap();
        let analytic = g.get(ParamId(0)).unwrap().clone();
        for i in 0..4 {
            for j in 0..3 {
                let fd = central_difference(
                    |d| {
                        let mut hp = h.clone();
                        hp.add_at(i, j, d);
                        let mut t = GradTape::new();
                        let o = eval(&hp, &mut t);
                        t.scalar(o)
                    },
                    1e-5,
                );
                let a = analytic.get(i, j);
                let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
                assert!(rel < 1e-5 || (a - fd).abs() < 1e-9, "({i},{j}) {a} vs {fd}");
            }
        }
        // Tr(P Ω⁻¹ Pᵀ) gradient is P(Ω⁻¹ + Ω⁻ᵀ)
        let p = Matrix::from_fn(3, 2, |r, c| 0.1 * (r as f64) - 0.2 * c as f64);
        let expect = p.matmul(&omega_inv.scale(2.0)).unwrap();
        assert!(g.get(ParamId(2)).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut tape = GradTape::new();
        let z = tape.param(ParamId(0), Matrix::row_vector(&[0.0]));
        let l = tape.bce_with_logits(z, &[1.0], &[1.0]).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
