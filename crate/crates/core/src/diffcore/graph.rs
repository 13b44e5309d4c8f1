use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{matmul, Tensor};
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sparsity pattern of a `rows × cols` matrix whose nonzero values live in a
/// separate `[nnz, 1]` tensor, so they can be constants or trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
}

impl SparsePattern {
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize)>) -> Result<Self, DiffError> {
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(DiffError::Shape(format!(
                "sparse entry ({r}, {c}) outside a {rows}x{cols} pattern"
            )));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Arc<[usize]>),
    Reshape(Var),
    SparseMatMul {
        weights: Var,
        input: Var,
        pattern: Arc<SparsePattern>,
    },
    Softplus(Var, f64),
    SoftplusDerivative(Var, f64),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    L2NormRows(Var),
    ScalarMul(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise_mul",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::SparseMatMul { .. } => "sparse_matmul",
            Op::Softplus(..) => "softplus",
            Op::SoftplusDerivative(..) => "softplus_derivative",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L2NormRows(_) => "l2_norm_rows",
            Op::ScalarMul(..) => "scalar_mul",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Append-only expression graph. Nodes are stored in creation order, so
/// parents always precede children and a single reverse sweep suffices.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

pub fn softplus(t: f64, beta: f64) -> f64 {
    let z = beta * t;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn broadcast_dims(op: &str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), DiffError> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(DiffError::Shape(format!(
            "{op}: cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i };
        let bi = if br == 1 { 0 } else { i };
        let arow = &a.data()[ai * ac..(ai + 1) * ac];
        let brow = &b.data()[bi * bc..(bi + 1) * bc];
        for j in 0..c {
            let x = if ac == 1 { arow[0] } else { arow[j] };
            let y = if bc == 1 { brow[0] } else { brow[j] };
            out.push(f(x, y));
        }
    }
    Tensor::matrix(r, c, out).expect("broadcast output size")
}

/// Sums `g` down to a `rows × cols` operand shape.
fn reduce_to(g: Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g;
    }
    let (gr, gc) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..gr {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if cols == 1 { 0 } else { j };
            out.data_mut()[oi * cols + oj] += g.data()[i * gc + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Names must be unique within a graph.
    pub fn parameter(&mut self, name: &str, value: Tensor) -> Result<Var, DiffError> {
        if self.params.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn parameters(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(DiffError::Shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = matmul(av, false, bv, false);
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims("add", av, bv)?;
        let out = broadcast_zip(av, bv, r, c, |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims("sub", av, bv)?;
        let out = broadcast_zip(av, bv, r, c, |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims("elementwise_mul", av, bv)?;
        let out = broadcast_zip(av, bv, r, c, |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| DiffError::Shape("concat_cols: no inputs".into()))?;
        if let Some(&p) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(DiffError::Shape(format!(
                "concat_cols: row count {} vs {:?}",
                rows,
                self.value(p).shape()
            )));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| DiffError::Shape("concat_rows: no inputs".into()))?;
        if let Some(&p) = parts.iter().find(|&&p| self.value(p).cols() != cols) {
            return Err(DiffError::Shape(format!(
                "concat_rows: column count {} vs {:?}",
                cols,
                self.value(p).shape()
            )));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(DiffError::Shape(format!(
                "slice_rows: [{start}, {end}) of {:?}",
                av.shape()
            )));
        }
        let c = av.cols();
        let out = Tensor::matrix(end - start, c, av.data()[start * c..end * c].to_vec())?;
        self.push(Op::SliceRows(a, start), out, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(DiffError::Shape(format!(
                "slice_cols: [{start}, {end}) of {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(i)[start..end]);
        }
        let out = Tensor::matrix(av.rows(), end - start, data)?;
        self.push(Op::SliceCols(a, start, end), out, &[a])
    }

    /// Row `k` of the result is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, DiffError> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.rows()) {
            return Err(DiffError::Shape(format!(
                "gather_rows: index {bad} out of range for {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * av.cols());
        for &i in index.iter() {
            data.extend_from_slice(av.row_slice(i));
        }
        let out = Tensor::matrix(index.len(), av.cols(), data)?;
        self.push(Op::GatherRows(a, index), out, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let out = self
            .value(a)
            .clone()
            .reshaped(rows, cols)
            .map_err(|_| {
                DiffError::Shape(format!(
                    "reshape: {:?} -> [{rows}, {cols}]",
                    self.value(a).shape()
                ))
            })?;
        self.push(Op::Reshape(a), out, &[a])
    }

    /// `S · x` where `S` has the given pattern and values `weights[e]`.
    pub fn sparse_matmul(
        &mut self,
        weights: Var,
        input: Var,
        pattern: Arc<SparsePattern>,
    ) -> Result<Var, DiffError> {
        let (wv, xv) = (self.value(weights), self.value(input));
        if wv.len() != pattern.nnz() || xv.rows() != pattern.cols() {
            return Err(DiffError::Shape(format!(
                "sparse_matmul: {} weights for {} entries, input {:?} for {} columns",
                wv.len(),
                pattern.nnz(),
                xv.shape(),
                pattern.cols()
            )));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(pattern.rows(), c);
        for (e, &(r, col)) in pattern.entries().iter().enumerate() {
            let w = wv.data()[e];
            let src = xv.row_slice(col);
            let dst = &mut out.data_mut()[r * c..(r + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        self.push(
            Op::SparseMatMul {
                weights,
                input,
                pattern,
            },
            out,
            &[weights, input],
        )
    }

    /// `(1/β)·ln(1 + exp(β t))`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|t| softplus(t, beta));
        self.push(Op::Softplus(a, beta), out, &[a])
    }

    /// Derivative of [`Graph::softplus`], `sigmoid(β t)`; differentiable itself.
    pub fn softplus_derivative(&mut self, a: Var, beta: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|t| sigmoid(beta * t));
        self.push(Op::SoftplusDerivative(a, beta), out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|t| t.max(0.0));
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), out, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|t| t * t);
        self.push(Op::Square(a), out, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(DiffError::Shape("mean: empty input".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Euclidean norm of every row, as an `[rows, 1]` column.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|i| av.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::matrix(av.rows(), 1, data)?;
        self.push(Op::L2NormRows(a), out, &[a])
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|t| c * t);
        self.push(Op::ScalarMul(a, c), out, &[a])
    }

    /// Reverse sweep from a scalar node. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.rows(), lv.cols(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, contribution) in self.local_gradients(node, g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }

        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            let g = if v.0 <= loss.0 {
                grads[v.0].take()
            } else {
                None
            };
            let value = self.value(v);
            out.insert(
                name.clone(),
                g.unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols())),
            );
        }
        Ok(out)
    }

    fn local_gradients(&self, node: &Node, g: Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.value(v);
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if want(*a) {
                    out.push((*a, matmul(&g, false, val(*b), true)));
                }
                if want(*b) {
                    out.push((*b, matmul(val(*a), true, &g, false)));
                }
                out
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (av, bv) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if want(*b) {
                    let gb = reduce_to(g.map(|x| sign * x), bv.rows(), bv.cols());
                    out.push((*b, gb));
                }
                if want(*a) {
                    out.push((*a, reduce_to(g, av.rows(), av.cols())));
                }
                out
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, c) = (g.rows(), g.cols());
                let mut out = Vec::with_capacity(2);
                if want(*a) {
                    let ga = broadcast_zip(&g, bv, r, c, |x, y| x * y);
                    out.push((*a, reduce_to(ga, av.rows(), av.cols())));
                }
                if want(*b) {
                    let gb = broadcast_zip(&g, av, r, c, |x, y| x * y);
                    out.push((*b, reduce_to(gb, bv.rows(), bv.cols())));
                }
                out
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let pc = val(p).cols();
                    if want(p) {
                        let mut data = Vec::with_capacity(g.rows() * pc);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                        }
                        out.push((p, Tensor::matrix(g.rows(), pc, data).unwrap()));
                    }
                    offset += pc;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let pr = val(p).rows();
                    if want(p) {
                        let data = g.data()[offset * c..(offset + pr) * c].to_vec();
                        out.push((p, Tensor::matrix(pr, c, data).unwrap()));
                    }
                    offset += pr;
                }
                out
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, ga)]
            }
            Op::SliceCols(a, start, end) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                for i in 0..av.rows() {
                    ga.data_mut()[i * c + start..i * c + end].copy_from_slice(g.row_slice(i));
                }
                vec![(*a, ga)]
            }
            Op::GatherRows(a, index) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.rows(), c);
                for (k, &i) in index.iter().enumerate() {
                    let dst = &mut ga.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g.row_slice(k)) {
                        *d += s;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => {
                let av = val(*a);
                vec![(*a, g.reshaped(av.rows(), av.cols()).unwrap())]
            }
            Op::SparseMatMul {
                weights,
                input,
                pattern,
            } => {
                let (wv, xv) = (val(*weights), val(*input));
                let c = xv.cols();
                let mut out = Vec::with_capacity(2);
                if want(*input) {
                    let mut gx = Tensor::zeros(xv.rows(), c);
                    for (e, &(r, col)) in pattern.entries().iter().enumerate() {
                        let w = wv.data()[e];
                        let dst = &mut gx.data_mut()[col * c..(col + 1) * c];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += w * s;
                        }
                    }
                    out.push((*input, gx));
                }
                if want(*weights) {
                    let data = pattern
                        .entries()
                        .iter()
                        .map(|&(r, col)| {
                            g.row_slice(r)
                                .iter()
                                .zip(xv.row_slice(col))
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    let gw = Tensor::new(wv.shape().to_vec(), data).unwrap();
                    out.push((*weights, gw));
                }
                out
            }
            Op::Softplus(a, beta) => {
                let ga = val(*a).zip_map(&g, |t, gi| gi * sigmoid(beta * t));
                vec![(*a, ga)]
            }
            Op::SoftplusDerivative(a, beta) => {
                let ga = val(*a).zip_map(&g, |t, gi| {
                    let s = sigmoid(beta * t);
                    gi * beta * s * (1.0 - s)
                });
                vec![(*a, ga)]
            }
            Op::Relu(a) => {
                let ga = val(*a).zip_map(&g, |t, gi| if t > 0.0 { gi } else { 0.0 });
                vec![(*a, ga)]
            }
            Op::Abs(a) => {
                let ga = val(*a).zip_map(&g, |t, gi| {
                    if t > 0.0 {
                        gi
                    } else if t < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                vec![(*a, ga)]
            }
            Op::Square(a) => {
                let ga = val(*a).zip_map(&g, |t, gi| 2.0 * t * gi);
                vec![(*a, ga)]
            }
            Op::Sqrt(a) => {
                // subgradient 0 at the origin
                let ga = node
                    .value
                    .zip_map(&g, |y, gi| if y > 0.0 { gi / (2.0 * y) } else { 0.0 });
                vec![(*a, ga)]
            }
            Op::Sum(a) => {
                let av = val(*a);
                vec![(*a, Tensor::filled(av.rows(), av.cols(), g.item()))]
            }
            Op::Mean(a) => {
                let av = val(*a);
                let scale = g.item() / av.len() as f64;
                vec![(*a, Tensor::filled(av.rows(), av.cols(), scale))]
            }
            Op::L2NormRows(a) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.rows(), c);
                for i in 0..av.rows() {
                    let n = node.value.data()[i];
                    if n > 0.0 {
                        let scale = g.data()[i] / n;
                        for j in 0..c {
                            ga.data_mut()[i * c + j] = scale * av.data()[i * c + j];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::ScalarMul(a, c) => vec![(*a, g.map(|x| c * x))],
        }
    }
}
