//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape and returns a [`Var`] handle.
//! Nodes only reference earlier nodes, so the tape is a topological order and
//! [`Tape::backward`] is a single reverse sweep. Leaf gradients accumulate
//! across `backward` calls until [`Tape::zero_grad`].

use std::sync::Arc;

use super::tensor::{sigmoid, softplus, SparseMatrix, Tensor, NORM_EPS};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RowL2Normalize(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    SparseMatMul(Arc<SparseMatrix>, Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    BceWithLogits {
        logits: Var,
        targets: Tensor,
        pos_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> Result<f64, NumericsError> {
        self.value(var).item()
    }

    /// Accumulated gradient of a leaf; `None` before the first backward pass
    /// or for non-leaf nodes.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.leaf_grads.get(var.0).and_then(Option::as_ref)
    }

    /// Accumulated gradient of a leaf, zeros if nothing reached it.
    pub fn grad_or_zeros(&self, var: Var) -> Tensor {
        self.grad(var).cloned().unwrap_or_else(|| {
            let (r, c) = self.value(var).shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        let value = value.ensure_finite(name)?;
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::GatherRows(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::RowL2Normalize(a)
            | Op::ReduceSum(a)
            | Op::ReduceMean(a)
            | Op::SparseMatMul(_, a)
            | Op::SoftmaxCrossEntropy(a, _) => vec![a],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(v, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Adds the 1xC row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).add_row(self.value(bias))?;
        self.push(v, Op::AddRow(a, bias), "add_row")
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Mul(a, b), "elementwise_mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var, NumericsError> {
        let v = self.value(a).map(|x| x + offset);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).concat_cols(self.value(b))?;
        self.push(v, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(a).gather_rows(indices)?;
        self.push(v, Op::GatherRows(a, indices.to_vec()), "gather_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), "clamp")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).row_l2_normalize();
        self.push(v, Op::RowL2Normalize(a), "row_l2_normalize")
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::ReduceSum(a), "reduce_sum")
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(NumericsError::Shape("reduce_mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(v, Op::ReduceMean(a), "reduce_mean")
    }

    /// `sparse · a` for a constant sparse operator.
    pub fn sparse_matmul(&mut self, sparse: Arc<SparseMatrix>, a: Var) -> Result<Var, NumericsError> {
        let v = sparse.matmul(self.value(a))?;
        self.push(v, Op::SparseMatMul(sparse, a), "sparse_matmul")
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`, computed with
    /// row-max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(logits);
        if x.rows() == 0 {
            return Err(NumericsError::Shape("cross entropy over an empty batch".into()));
        }
        if targets.len() != x.rows() {
            return Err(NumericsError::Shape(format!(
                "cross entropy: {} targets for {} rows",
                targets.len(),
                x.rows()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= x.cols() {
                return Err(NumericsError::Index {
                    index: t,
                    len: x.cols(),
                });
            }
            total += log_sum_exp(x.row(r)) - x.get(r, t);
        }
        let v = Tensor::scalar(total / x.rows() as f64);
        self.push(
            v,
            Op::SoftmaxCrossEntropy(logits, targets.to_vec()),
            "softmax_cross_entropy",
        )
    }

    /// Mean over all entries of the weighted binary cross entropy
    /// `-(w·a·log σ(x) + (1-a)·log(1-σ(x)))`, evaluated through softplus.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, pos_weight: f64) -> Result<Var, NumericsError> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(NumericsError::Shape(format!(
                "bce: logits {:?} vs targets {:?}",
                x.shape(),
                targets.shape()
            )));
        }
        if x.is_empty() {
            return Err(NumericsError::Shape("bce over an empty block".into()));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &a)| pos_weight * a * softplus(-l) + (1.0 - a) * softplus(l))
            .sum();
        let v = Tensor::scalar(total / x.len() as f64);
        self.push(
            v,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
                pos_weight,
            },
            "bce_with_logits",
        )
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(NumericsError::NotScalar(r, c));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let mut push = |v: Var, grad: Tensor| -> Result<(), NumericsError> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut adjoints[v.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => {
                        *slot = Some(grad);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    push(*a, g.matmul_nt(val(*b))?)?;
                    push(*b, val(*a).matmul_tn(&g)?)?;
                }
                Op::MatMulNt(a, b) => {
                    push(*a, g.matmul(val(*b))?)?;
                    push(*b, g.matmul_tn(val(*a))?)?;
                }
                Op::Add(a, b) => {
                    push(*a, g.clone())?;
                    push(*b, g)?;
                }
                Op::Sub(a, b) => {
                    push(*b, g.scale(-1.0))?;
                    push(*a, g)?;
                }
                Op::AddRow(a, bias) => {
                    push(*bias, g.sum_rows())?;
                    push(*a, g)?;
                }
                Op::Mul(a, b) => {
                    push(*a, g.hadamard(val(*b))?)?;
                    push(*b, g.hadamard(val(*a))?)?;
                }
                Op::Scale(a, factor) => push(*a, g.scale(*factor))?,
                Op::AddScalar(a) => push(*a, g)?,
                Op::ConcatCols(a, b) => {
                    let left = val(*a).cols();
                    let right = val(*b).cols();
                    let mut ga = Tensor::zeros(g.rows(), left);
                    let mut gb = Tensor::zeros(g.rows(), right);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        ga.row_mut(r).copy_from_slice(&row[..left]);
                        gb.row_mut(r).copy_from_slice(&row[left..]);
                    }
                    push(*a, ga)?;
                    push(*b, gb)?;
                }
                Op::GatherRows(a, indices) => {
                    let src = val(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (acc, v) in ga.row_mut(idx).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    push(*a, ga)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    push(*a, ga)?;
                }
                Op::Sigmoid(a) => push(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))?)?,
                Op::Exp(a) => push(*a, g.hadamard(y)?)?,
                Op::Log(a) => push(*a, g.zip_map(val(*a), |gv, x| gv / x)?)?,
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 })?;
                    push(*a, ga)?;
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(s, gv)| s * gv).sum();
                        for ((out, s), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *out = s * (gv - inner);
                        }
                    }
                    push(*a, ga)?;
                }
                Op::RowL2Normalize(a) => {
                    let x = val(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let norm = (xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let cube = norm * norm * norm;
                        for ((out, xv), gv) in ga.row_mut(r).iter_mut().zip(xr).zip(gr) {
                            *out = gv / norm - xv * xg / cube;
                        }
                    }
                    push(*a, ga)?;
                }
                Op::ReduceSum(a) => {
                    let (r, c) = val(*a).shape();
                    push(*a, Tensor::filled(r, c, g.item()?))?;
                }
                Op::ReduceMean(a) => {
                    let (r, c) = val(*a).shape();
                    push(*a, Tensor::filled(r, c, g.item()? / (r * c) as f64))?;
                }
                Op::SparseMatMul(sparse, a) => push(*a, sparse.matmul_transposed(&g)?)?,
                Op::SoftmaxCrossEntropy(logits, targets) => {
                    let upstream = g.item()? / targets.len() as f64;
                    let mut ga = val(*logits).softmax_rows();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = ga.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= upstream;
                        }
                    }
                    push(*logits, ga)?;
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    pos_weight,
                } => {
                    let x = val(*logits);
                    let upstream = g.item()? / x.len() as f64;
                    let ga = x.zip_map(targets, |l, a| {
                        upstream * (-pos_weight * a * sigmoid(-l) + (1.0 - a) * sigmoid(l))
                    })?;
                    push(*logits, ga)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_check;
    use crate::rng::{stream_rng, Stream};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::random_normal(rows, cols, 1.0, &mut stream_rng(seed, Stream::Init))
    }

    const WEIGHTS: [f64; 6] = [0.3, -1.2, 2.0, 1.1, 0.4, -0.7];

    /// Runs `build` on a fresh tape with `inputs` as leaves and checks the
    /// leaf gradients of a fixed weighted sum of its output against central
    /// differences. The weights keep the check from degenerating on ops whose
    /// plain sum is constant (softmax, row normalisation).
    fn check_op(
        inputs: Vec<Tensor>,
        tol: f64,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    ) {
        let f = |params: &[Tensor]| -> Result<(f64, Vec<Tensor>), NumericsError> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let out = build(&mut tape, &vars)?;
            let (r, c) = tape.value(out).shape();
            let w = tape.constant(Tensor::new(r, c, (0..r * c).map(|i| WEIGHTS[i % 6]).collect())?);
            let weighted = tape.elementwise_mul(out, w)?;
            let loss = tape.reduce_sum(weighted)?;
            tape.backward(loss)?;
            let grads = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            Ok((tape.scalar_value(loss)?, grads))
        };
        let report = finite_difference_check(f, &inputs, 1e-5, tol).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 0.5);
    }

    #[test]
    fn one_by_one_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.7));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 1.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn sum_gives_all_ones_and_half_norm_gives_identity() {
        let w = random(3, 4, 1);
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let s = tape.reduce_sum(v).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let sq = tape.elementwise_mul(v, v).unwrap();
        let s = tape.reduce_sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &w);
    }

    #[test]
    fn repeated_backward_accumulates_until_zero_grad() {
        let mut tape = Tape::new();
        let v = tape.leaf(random(2, 2, 3));
        let s = tape.reduce_sum(v).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 2.0));
        tape.zero_grad();
        assert!(tape.grad(v).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(v), Err(NumericsError::NotScalar(2, 1))));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::Shape(_))));
        let z = tape.leaf(Tensor::zeros(1, 1));
        assert!(matches!(tape.log(z), Err(NumericsError::NonFinite("log"))));
        let big = tape.leaf(Tensor::scalar(1e3));
        assert!(matches!(tape.exp(big), Err(NumericsError::NonFinite("exp"))));
    }

    #[test]
    fn constant_inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(random(2, 2, 4));
        let w = tape.leaf(random(2, 2, 5));
        let y = tape.matmul(c, w).unwrap();
        let s = tape.reduce_sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        check_op(vec![random(3, 4, 10), random(4, 2, 11)], 1e-6, |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        let inputs = vec![random(5, 4, 20), random(4, 6, 21), random(6, 3, 22), random(3, 2, 23)];
        check_op(inputs, 1e-4, |t, v| {
            let h1 = t.matmul(v[0], v[1])?;
            let h1 = t.sigmoid(h1)?;
            let h2 = t.matmul(h1, v[2])?;
            let h2 = t.relu(h2)?;
            let h3 = t.matmul(h2, v[3])?;
            t.softmax_rows(h3)
        });
    }

    /// Every registered op against central differences over many seeds.
    #[test]
    fn every_op_passes_randomized_gradient_checks() {
        type Builder = fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;
        let positive = |t: Tensor| t.map(|v| v.abs() + 0.5);
        let away_from_kinks = |t: Tensor| t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let cases: Vec<(&str, Vec<(usize, usize)>, Builder)> = vec![
            ("matmul", vec![(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1])),
            ("matmul_nt", vec![(3, 4), (2, 4)], |t, v| t.matmul_nt(v[0], v[1])),
            ("add", vec![(2, 3), (2, 3)], |t, v| t.add(v[0], v[1])),
            ("sub", vec![(2, 3), (2, 3)], |t, v| t.sub(v[0], v[1])),
            ("add_row", vec![(3, 2), (1, 2)], |t, v| t.add_row(v[0], v[1])),
            ("mul", vec![(2, 3), (2, 3)], |t, v| t.elementwise_mul(v[0], v[1])),
            ("scale", vec![(2, 3)], |t, v| t.scale(v[0], -1.7)),
            ("add_scalar", vec![(2, 3)], |t, v| t.add_scalar(v[0], 0.3)),
            ("concat", vec![(2, 3), (2, 1)], |t, v| t.concat_cols(v[0], v[1])),
            ("gather", vec![(3, 2)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
            ("relu", vec![(3, 3)], |t, v| t.relu(v[0])),
            ("sigmoid", vec![(3, 3)], |t, v| t.sigmoid(v[0])),
            ("exp", vec![(3, 3)], |t, v| t.exp(v[0])),
            ("log", vec![(3, 3)], |t, v| t.log(v[0])),
            ("clamp", vec![(3, 3)], |t, v| t.clamp(v[0], -0.8, 0.8)),
            ("softmax", vec![(3, 4)], |t, v| t.softmax_rows(v[0])),
            ("l2norm", vec![(3, 4)], |t, v| t.row_l2_normalize(v[0])),
            ("mean", vec![(3, 4)], |t, v| t.reduce_mean(v[0])),
            ("sparse", vec![(4, 2)], |t, v| {
                let agg = SparseMatrix::mean_aggregator(&[vec![1, 3], vec![0], vec![], vec![0, 1, 2]]);
                t.sparse_matmul(Arc::new(agg), v[0])
            }),
            ("xent", vec![(3, 5)], |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2])),
            ("bce", vec![(2, 3)], |t, v| {
                let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
                t.bce_with_logits(v[0], &a, 2.5)
            }),
        ];
        for (name, shapes, build) in cases {
            for seed in 0..20u64 {
                let mut inputs: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(k, &(r, c))| random(r, c, 1000 * seed + k as u64))
                    .collect();
                if name == "log" {
                    inputs = inputs.into_iter().map(positive).collect();
                }
                if name == "relu" || name == "clamp" {
                    inputs = inputs.into_iter().map(away_from_kinks).collect();
                }
                if name == "clamp" {
                    inputs[0] = inputs[0].map(|v| if (v.abs() - 0.8).abs() < 0.05 { v * 0.5 } else { v });
                }
                check_op(inputs, 1e-6, build);
            }
        }
    }
}
