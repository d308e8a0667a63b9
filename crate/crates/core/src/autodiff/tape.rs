use nalgebra::DMatrix;

use super::spectral::{vjp_spectral_raw, SpectralFn, SpectralFunction};
use crate::error::{MattError, Result};
use crate::spd::{eigh, EigenPair};

/// Below this a probability is clamped before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryFn {
    Ln1p,
    Reciprocal,
    Exp,
    Square,
}

impl UnaryFn {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryFn::Ln1p => x.ln_1p(),
            UnaryFn::Reciprocal => 1.0 / x,
            UnaryFn::Exp => x.exp(),
            UnaryFn::Square => x * x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryFn::Ln1p => 1.0 / (1.0 + x),
            UnaryFn::Reciprocal => -1.0 / (x * x),
            UnaryFn::Exp => x.exp(),
            UnaryFn::Square => 2.0 * x,
        }
    }
}

/// Operation that produced a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    /// Matrix times a 1×1 node.
    MulScalar(NodeId, NodeId),
    /// Matrix divided by a 1×1 node.
    DivScalar(NodeId, NodeId),
    AddIdentity(NodeId, f64),
    Trace(NodeId),
    FrobeniusNorm(NodeId),
    Unary(NodeId, UnaryFn),
    Spectral(NodeId, SpectralFn),
    Element(NodeId, usize, usize),
    /// Row-major assembly of 1×1 nodes.
    Assemble {
        parts: Vec<NodeId>,
        rows: usize,
        cols: usize,
    },
    HConcat(Vec<NodeId>),
    VConcat(Vec<NodeId>),
    Columns {
        input: NodeId,
        start: usize,
        len: usize,
    },
    CenterRows(NodeId),
    /// Lagged copies for a 1-D convolution along columns.
    Unfold {
        input: NodeId,
        kernel: usize,
        stride: usize,
    },
    SoftmaxRows(NodeId),
    /// Softmax across all entries.
    Softmax(NodeId),
    /// Row-major upper triangle with √2-scaled off-diagonal entries.
    FlattenTriu(NodeId),
    /// `−ln(max(p[index], PROB_FLOOR))` for a vector of probabilities.
    NegLogPick(NodeId, usize),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: DMatrix<f64>,
    pub op: Op,
    /// Factorization of the (symmetrized) input of a spectral node.
    pub cached: Option<EigenPair>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of matrix operations, in topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&DMatrix<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> DMatrix<f64> {
        self.get(id).cloned().unwrap_or_else(|| {
            let v = tape.value(id);
            DMatrix::zeros(v.nrows(), v.ncols())
        })
    }
}

fn shape_err(what: &str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> MattError {
    MattError::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.nrows(),
        a.ncols(),
        b.nrows(),
        b.ncols()
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push_raw(value, Op::Leaf, None, true)
    }

    /// An input whose adjoint is never needed.
    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push_raw(value, Op::Leaf, None, false)
    }

    fn push_raw(&mut self, value: DMatrix<f64>, op: Op, cached: Option<EigenPair>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            cached,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, parents: &[NodeId], cached: Option<EigenPair>) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, cached, requires_grad)
    }

    fn check_scalar(&self, id: NodeId, what: &str) -> Result<f64> {
        let v = self.value(id);
        if v.nrows() == 1 && v.ncols() == 1 {
            Ok(v[(0, 0)])
        } else {
            Err(MattError::Shape(format!("{what} expects a 1x1 operand, got {}x{}", v.nrows(), v.ncols())))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let v = va * vb;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b], None))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let v = va + vb;
        Ok(self.push(v, Op::Add(a, b), &[a, b], None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let v = va - vb;
        Ok(self.push(v, Op::Sub(a, b), &[a, b], None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a], None)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::Shift(a, c), &[a], None)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.check_scalar(s, "mul_scalar")?;
        let v = self.value(a) * sv;
        Ok(self.push(v, Op::MulScalar(a, s), &[a, s], None))
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.check_scalar(s, "div_scalar")?;
        if sv == 0.0 {
            return Err(MattError::Domain("division by zero scalar".into()));
        }
        let v = self.value(a) / sv;
        Ok(self.push(v, Op::DivScalar(a, s), &[a, s], None))
    }

    pub fn add_identity(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        if va.nrows() != va.ncols() {
            return Err(MattError::Shape(format!("add_identity on {}x{}", va.nrows(), va.ncols())));
        }
        let mut v = va.clone();
        for i in 0..v.nrows() {
            v[(i, i)] += c;
        }
        Ok(self.push(v, Op::AddIdentity(a, c), &[a], None))
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.nrows() != va.ncols() {
            return Err(MattError::Shape(format!("trace of {}x{}", va.nrows(), va.ncols())));
        }
        let v = DMatrix::from_element(1, 1, va.trace());
        Ok(self.push(v, Op::Trace(a), &[a], None))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.value(a).norm());
        self.push(v, Op::FrobeniusNorm(a), &[a], None)
    }

    pub fn unary(&mut self, a: NodeId, f: UnaryFn) -> NodeId {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Unary(a, f), &[a], None)
    }

    /// `U f(Σ) Uᵀ` of the symmetric part of `a`.
    pub fn spectral(&mut self, a: NodeId, f: SpectralFn) -> Result<NodeId> {
        let eig = eigh(self.value(a))?;
        let mut mapped = eig.values.clone();
        for x in mapped.iter_mut() {
            *x = f.value(*x)?;
        }
        let v = eig.congruence(&mapped);
        Ok(self.push(v, Op::Spectral(a, f), &[a], Some(eig)))
    }

    pub fn element(&mut self, a: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let va = self.value(a);
        if i >= va.nrows() || j >= va.ncols() {
            return Err(MattError::Index {
                index: i.max(j),
                bound: va.nrows().min(va.ncols()),
            });
        }
        let v = DMatrix::from_element(1, 1, va[(i, j)]);
        Ok(self.push(v, Op::Element(a, i, j), &[a], None))
    }

    pub fn assemble(&mut self, parts: Vec<NodeId>, rows: usize, cols: usize) -> Result<NodeId> {
        if parts.len() != rows * cols {
            return Err(MattError::Shape(format!(
                "assemble {} parts into {rows}x{cols}",
                parts.len()
            )));
        }
        let mut v = DMatrix::zeros(rows, cols);
        for (k, p) in parts.iter().enumerate() {
            v[(k / cols, k % cols)] = self.check_scalar(*p, "assemble")?;
        }
        Ok(self.push(v, Op::Assemble { parts: parts.clone(), rows, cols }, &parts, None))
    }

    pub fn hconcat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| MattError::EmptyInput("hconcat".into()))?;
        let rows = self.value(*first).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut offset = 0;
        for p in &parts {
            let pv = self.value(*p);
            if pv.nrows() != rows {
                return Err(shape_err("hconcat", self.value(*first), pv));
            }
            v.columns_mut(offset, pv.ncols()).copy_from(pv);
            offset += pv.ncols();
        }
        Ok(self.push(v, Op::HConcat(parts.clone()), &parts, None))
    }

    pub fn vconcat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| MattError::EmptyInput("vconcat".into()))?;
        let cols = self.value(*first).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut offset = 0;
        for p in &parts {
            let pv = self.value(*p);
            if pv.ncols() != cols {
                return Err(shape_err("vconcat", self.value(*first), pv));
            }
            v.rows_mut(offset, pv.nrows()).copy_from(pv);
            offset += pv.nrows();
        }
        Ok(self.push(v, Op::VConcat(parts.clone()), &parts, None))
    }

    pub fn columns(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.ncols() || len == 0 {
            return Err(MattError::Shape(format!(
                "columns {start}..{} of a {}-column matrix",
                start + len,
                va.ncols()
            )));
        }
        let v = va.columns(start, len).clone_owned();
        Ok(self.push(v, Op::Columns { input: a, start, len }, &[a], None))
    }

    pub fn center_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for mut row in v.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        self.push(v, Op::CenterRows(a), &[a], None)
    }

    pub fn unfold(&mut self, a: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, t) = va.shape();
        if kernel == 0 || stride == 0 || kernel > t {
            return Err(MattError::Shape(format!(
                "kernel {kernel} (stride {stride}) over {t} samples"
            )));
        }
        let out_t = (t - kernel) / stride + 1;
        let mut v = DMatrix::zeros(rows * kernel, out_t);
        for c in 0..rows {
            for tau in 0..kernel {
                for s in 0..out_t {
                    v[(c * kernel + tau, s)] = va[(c, s * stride + tau)];
                }
            }
        }
        Ok(self.push(v, Op::Unfold { input: a, kernel, stride }, &[a], None))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            let max = row.max();
            row.apply(|x| *x = (*x - max).exp());
            let sum = row.sum();
            row.unscale_mut(sum);
        }
        self.push(v, Op::SoftmaxRows(a), &[a], None)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_all(self.value(a));
        self.push(v, Op::Softmax(a), &[a], None)
    }

    pub fn flatten_triu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.nrows() != va.ncols() {
            return Err(MattError::Shape(format!("flatten of {}x{}", va.nrows(), va.ncols())));
        }
        let v = flatten_upper(va);
        Ok(self.push(v, Op::FlattenTriu(a), &[a], None))
    }

    pub fn neg_log_pick(&mut self, probs: NodeId, index: usize) -> Result<NodeId> {
        let vp = self.value(probs);
        if index >= vp.len() {
            return Err(MattError::Index {
                index,
                bound: vp.len(),
            });
        }
        let p = vp[index].max(PROB_FLOOR);
        let v = DMatrix::from_element(1, 1, -p.ln());
        Ok(self.push(v, Op::NegLogPick(probs, index), &[probs], None))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.nrows() != 1 || lv.ncols() != 1 {
            return Err(MattError::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.nrows(),
                lv.ncols()
            )));
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) -> Result<()> {
        let mut acc = |id: NodeId, delta: DMatrix<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g * vb.transpose());
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, va.transpose() * g);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Shift(a, _) => acc(*a, g.clone()),
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                let ds = g.dot(self.value(*a));
                acc(*a, g * sv);
                acc(*s, DMatrix::from_element(1, 1, ds));
            }
            Op::DivScalar(a, s) => {
                let sv = self.scalar(*s);
                let ds = -g.dot(self.value(*a)) / (sv * sv);
                acc(*a, g / sv);
                acc(*s, DMatrix::from_element(1, 1, ds));
            }
            Op::AddIdentity(a, _) => acc(*a, g.clone()),
            Op::Trace(a) => {
                let n = self.value(*a).nrows();
                acc(*a, DMatrix::identity(n, n) * g[(0, 0)]);
            }
            Op::FrobeniusNorm(a) => {
                let norm = node.value[(0, 0)];
                let va = self.value(*a);
                if norm > 0.0 {
                    acc(*a, va * (g[(0, 0)] / norm));
                } else {
                    acc(*a, DMatrix::zeros(va.nrows(), va.ncols()));
                }
            }
            Op::Unary(a, f) => {
                let va = self.value(*a);
                acc(*a, va.map(|x| f.derivative(x)).component_mul(g));
            }
            Op::Spectral(a, f) => {
                let eig = node
                    .cached
                    .as_ref()
                    .expect("spectral nodes cache their factorization");
                acc(*a, vjp_spectral_raw(eig, f, g)?);
            }
            Op::Element(a, i, j) => {
                let va = self.value(*a);
                let mut d = DMatrix::zeros(va.nrows(), va.ncols());
                d[(*i, *j)] = g[(0, 0)];
                acc(*a, d);
            }
            Op::Assemble { parts, cols, .. } => {
                for (k, p) in parts.iter().enumerate() {
                    acc(*p, DMatrix::from_element(1, 1, g[(k / cols, k % cols)]));
                }
            }
            Op::HConcat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, g.columns(offset, w).clone_owned());
                    offset += w;
                }
            }
            Op::VConcat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    acc(*p, g.rows(offset, h).clone_owned());
                    offset += h;
                }
            }
            Op::Columns { input, start, len } => {
                let va = self.value(*input);
                let mut d = DMatrix::zeros(va.nrows(), va.ncols());
                d.columns_mut(*start, *len).copy_from(g);
                acc(*input, d);
            }
            Op::CenterRows(a) => {
                let mut d = g.clone();
                for mut row in d.row_iter_mut() {
                    let mean = row.mean();
                    row.add_scalar_mut(-mean);
                }
                acc(*a, d);
            }
            Op::Unfold { input, kernel, stride } => {
                let va = self.value(*input);
                let mut d = DMatrix::zeros(va.nrows(), va.ncols());
                let out_t = g.ncols();
                for c in 0..va.nrows() {
                    for tau in 0..*kernel {
                        for s in 0..out_t {
                            d[(c, s * stride + tau)] += g[(c * kernel + tau, s)];
                        }
                    }
                }
                acc(*input, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = DMatrix::zeros(y.nrows(), y.ncols());
                for r in 0..y.nrows() {
                    let inner = g.row(r).dot(&y.row(r));
                    for c in 0..y.ncols() {
                        d[(r, c)] = y[(r, c)] * (g[(r, c)] - inner);
                    }
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let inner = g.dot(y);
                acc(*a, y.zip_map(g, |yi, gi| yi * (gi - inner)));
            }
            Op::FlattenTriu(a) => {
                let n = self.value(*a).nrows();
                let mut d = DMatrix::zeros(n, n);
                let mut k = 0;
                for i in 0..n {
                    for j in i..n {
                        let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                        d[(i, j)] = g[k] * scale;
                        k += 1;
                    }
                }
                acc(*a, d);
            }
            Op::NegLogPick(p, index) => {
                let vp = self.value(*p);
                let mut d = DMatrix::zeros(vp.nrows(), vp.ncols());
                let pi = vp[*index];
                if pi >= PROB_FLOOR {
                    d[*index] = -g[(0, 0)] / pi;
                }
                acc(*p, d);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape, loss: NodeId) -> Result<Gradients> {
    tape.backward(loss)
}

pub(crate) fn softmax_all(m: &DMatrix<f64>) -> DMatrix<f64> {
    let max = m.max();
    let e = m.map(|x| (x - max).exp());
    let sum = e.sum();
    e / sum
}

/// Row-major upper triangle as a column vector, off-diagonal entries × √2.
pub(crate) fn flatten_upper(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n * (n + 1) / 2, 1);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            out[k] = m[(i, j)] * scale;
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_matrix, random_symmetric_with_spectrum, seeded_rng};
    use crate::spd::sym_part;

    /// Central finite differences of a scalar function of one matrix.
    fn fd_grad(x: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let h = 1e-6 * (1.0 + x[(i, j)].abs());
                let mut p = x.clone();
                let mut m = x.clone();
                p[(i, j)] += h;
                m[(i, j)] -= h;
                out[(i, j)] = (f(&p) - f(&m)) / (2.0 * h);
            }
        }
        out
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-8)
    }

    #[test]
    fn trace_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64));
        let t = tape.trace(x).unwrap();
        let g = tape.backward(t).unwrap();
        assert_eq!(g.get(x).unwrap(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn squared_log_norm_on_diagonal() {
        let sigma = [0.5, 2.0, 3.0];
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&sigma));
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let l = tape.spectral(x, SpectralFn::Log).unwrap();
        let n = tape.frobenius_norm(l);
        let loss = tape.unary(n, UnaryFn::Square);
        let g = tape.backward(loss).unwrap();
        let expected =
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(3, sigma.iter().map(|s| 2.0 * s.ln() / s)));
        assert!((g.get(x).unwrap() - expected).norm() < 1e-14);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(DMatrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(MattError::Contract(_))));
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // Exercises matmul, transpose, centering, unfold, slicing, concat,
        // trace normalization, spectral ops, flatten and softmax.
        let mut rng = seeded_rng(42);
        let x0 = gaussian_matrix(3, 20, 1.0, &mut rng);
        let w = gaussian_matrix(4, 6, 0.5, &mut rng);
        let fc = gaussian_matrix(2, 20, 0.5, &mut rng);

        let build = |x: &DMatrix<f64>, tape: &mut Tape| -> (NodeId, NodeId) {
            let xi = tape.leaf(x.clone());
            let wi = tape.constant(w.clone());
            let fci = tape.constant(fc.clone());
            let u = tape.unfold(xi, 2, 1).unwrap();
            let a = tape.columns(u, 0, 9).unwrap();
            let b = tape.columns(u, 9, 9).unwrap();
            let mut feats = Vec::new();
            for seg in [a, b] {
                let z = tape.center_rows(seg);
                let zt = tape.transpose(z);
                let c = tape.matmul(z, zt).unwrap();
                let tr = tape.trace(c).unwrap();
                let c = tape.div_scalar(c, tr).unwrap();
                let c = tape.add_identity(c, 1e-5).unwrap();
                let wc = tape.matmul(wi, c).unwrap();
                let wt = tape.transpose(wi);
                let q = tape.matmul(wc, wt).unwrap();
                let l = tape.spectral(q, SpectralFn::Log).unwrap();
                let e = tape.spectral(l, SpectralFn::Exp).unwrap();
                let r = tape.spectral(e, SpectralFn::Clamp(1e-4)).unwrap();
                let l2 = tape.spectral(r, SpectralFn::Log).unwrap();
                feats.push(tape.flatten_triu(l2).unwrap());
            }
            let f = tape.vconcat(feats).unwrap();
            let logits = tape.matmul(fci, f).unwrap();
            let p = tape.softmax(logits);
            (xi, tape.neg_log_pick(p, 1).unwrap())
        };

        let mut tape = Tape::new();
        let (xi, loss) = build(&x0, &mut tape);
        let analytic = tape.backward(loss).unwrap().get_or_zeros(&tape, xi);
        let numeric = fd_grad(&x0, |x| {
            let mut t = Tape::new();
            let (_, l) = build(x, &mut t);
            t.scalar(l)
        });
        assert!(rel_err(&analytic, &numeric) < 1e-6, "rel {}", rel_err(&analytic, &numeric));
    }

    #[test]
    fn scalar_ops_match_finite_differences() {
        let mut rng = seeded_rng(9);
        let p0 = random_symmetric_with_spectrum(&[0.5, 1.5, 2.5], &mut rng);
        let q0 = random_symmetric_with_spectrum(&[0.7, 1.2, 4.0], &mut rng);
        let build = |p: &DMatrix<f64>, tape: &mut Tape| -> (NodeId, NodeId) {
            let pi = tape.leaf(p.clone());
            let qi = tape.constant(q0.clone());
            let lp = tape.spectral(pi, SpectralFn::Log).unwrap();
            let lq = tape.spectral(qi, SpectralFn::Log).unwrap();
            let d = tape.sub(lp, lq).unwrap();
            let d = tape.frobenius_norm(d);
            let s = tape.unary(d, UnaryFn::Ln1p);
            let s = tape.shift(s, 1.0);
            let s = tape.unary(s, UnaryFn::Reciprocal);
            let e = tape.unary(s, UnaryFn::Exp);
            let parts = vec![s, e, d, s];
            let a = tape.assemble(parts, 2, 2).unwrap();
            let a = tape.softmax_rows(a);
            let w = tape.element(a, 0, 1).unwrap();
            let m = tape.mul_scalar(lq, w).unwrap();
            let m = tape.add(m, lp).unwrap();
            let m = tape.scale(m, 0.5);
            let h = tape.hconcat(vec![m, lp]).unwrap();
            let hn = tape.frobenius_norm(h);
            (pi, tape.unary(hn, UnaryFn::Square))
        };
        let mut tape = Tape::new();
        let (pi, loss) = build(&p0, &mut tape);
        let analytic = tape.backward(loss).unwrap().get_or_zeros(&tape, pi);
        // The spectral input is symmetrized, so compare along symmetric directions.
        let numeric = fd_grad(&p0, |p| {
            let mut t = Tape::new();
            let (_, l) = build(p, &mut t);
            t.scalar(l)
        });
        assert!(rel_err(&sym_part(&analytic), &sym_part(&numeric)) < 1e-6);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = seeded_rng(5);
        let p0 = random_symmetric_with_spectrum(&[0.5, 1.5, 2.5, 3.0], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let p = tape.leaf(p0.clone());
            let l = tape.spectral(p, SpectralFn::Log).unwrap();
            let n = tape.frobenius_norm(l);
            let g = tape.backward(n).unwrap();
            g.get(p).unwrap().clone()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(DMatrix::identity(2, 2));
        let x = tape.leaf(DMatrix::identity(2, 2));
        let y = tape.matmul(c, x).unwrap();
        let t = tape.trace(y).unwrap();
        let g = tape.backward(t).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn neg_log_pick_clamps() {
        let mut tape = Tape::new();
        let p = tape.leaf(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        let l = tape.neg_log_pick(p, 1).unwrap();
        assert!((tape.scalar(l) - 27.631021115928547).abs() < 1e-9);
        assert!(matches!(tape.neg_log_pick(p, 2), Err(MattError::Index { .. })));
    }
}
