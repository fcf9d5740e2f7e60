//! Expression graph with reverse-mode gradients.
//!
//! A graph is built once per forward pass, evaluated against a set of named
//! bindings, and differentiated from a scalar loss node. Shapes are checked
//! at construction; bound inputs are checked again at evaluation.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{DenseMatrix, NumericError, SparseAdjacency};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Named value supplied at evaluation time. Trainable inputs receive
    /// gradients.
    Input { name: String, trainable: bool },
    Constant(Arc<DenseMatrix>),
    MatMul(NodeId, NodeId),
    SparseMatMul { adj: Arc<SparseAdjacency>, x: NodeId },
    Add(NodeId, NodeId),
    /// Adds a `1×C` row to every row of an `R×C` matrix.
    AddRow { x: NodeId, row: NodeId },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Multiplies a matrix by a `1×1` node.
    ScaleBy { x: NodeId, s: NodeId },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    RowSoftmax(NodeId),
    Sigmoid(NodeId),
    /// `R×C → R×1`.
    RowSum(NodeId),
    /// `R×C → 1×C`.
    ColSum(NodeId),
    Mean(NodeId),
    /// Masked row selection: output row `t` is input row `indices[t]`.
    GatherRows { x: NodeId, indices: Arc<Vec<usize>> },
    Element { x: NodeId, row: usize, col: usize },
    /// Per-edge score `row_scores[r] + col_scores[c] + bias` for every
    /// edge `(r, c)` of the pattern, as an `nnz×1` column.
    EdgeScores {
        pattern: Arc<SparseAdjacency>,
        row_scores: NodeId,
        col_scores: NodeId,
        bias: NodeId,
    },
    /// Softmax of an `nnz×1` edge column within each pattern row.
    EdgeSoftmax { pattern: Arc<SparseAdjacency>, scores: NodeId },
    /// `out[r] = Σ_e w_e · x[c_e]` over the edges of row `r`.
    EdgeAggregate {
        pattern: Arc<SparseAdjacency>,
        weights: NodeId,
        x: NodeId,
    },
    /// Mean binary cross-entropy of an `n×1` probability column, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    BinaryCrossEntropy { probs: NodeId, labels: Arc<Vec<f64>> },
}

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
    label: Option<String>,
}

/// Named values bound to graph inputs at evaluation time.
pub trait Binder {
    fn lookup(&self, name: &str) -> Option<&DenseMatrix>;
}

impl Binder for HashMap<String, DenseMatrix> {
    fn lookup(&self, name: &str) -> Option<&DenseMatrix> {
        self.get(name)
    }
}

impl Binder for BTreeMap<String, DenseMatrix> {
    fn lookup(&self, name: &str) -> Option<&DenseMatrix> {
        self.get(name)
    }
}

impl<A: Binder + ?Sized, B: Binder + ?Sized> Binder for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<&DenseMatrix> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExpressionGraph {
    nodes: Vec<Node>,
    loss: Option<NodeId>,
}

/// Node values produced by [`ExpressionGraph::evaluate`].
pub struct Values<'a> {
    values: Vec<Cow<'a, DenseMatrix>>,
}

impl<'a> Values<'a> {
    pub fn get(&self, id: NodeId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> DenseMatrix {
        std::mem::replace(&mut self.values[id.0], Cow::Owned(DenseMatrix::zeros(0, 0)))
            .into_owned()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl ExpressionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn set_loss(&mut self, id: NodeId) -> Result<(), NumericError> {
        if self.shape(id) != (1, 1) {
            return Err(NumericError::Contract(format!(
                "loss node {} has shape {:?}, expected 1x1",
                self.describe(id),
                self.shape(id)
            )));
        }
        self.loss = Some(id);
        Ok(())
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => format!("#{} ({l})", id.0),
            None => match &self.nodes[id.0].op {
                Op::Input { name, .. } => format!("#{} (input {name})", id.0),
                _ => format!("#{}", id.0),
            },
        }
    }

    /// Names of trainable inputs, in insertion order, deduplicated.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for node in &self.nodes {
            if let Op::Input { name, trainable: true } = &node.op {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, what: &str, detail: String) -> NumericError {
        NumericError::Shape(format!("{what} at node #{}: {detail}", self.nodes.len()))
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                trainable: false,
            },
            (rows, cols),
        )
    }

    pub fn parameter(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                trainable: true,
            },
            (rows, cols),
        )
    }

    pub fn constant(&mut self, value: impl Into<Arc<DenseMatrix>>) -> NodeId {
        let value = value.into();
        let shape = value.shape();
        self.push(Op::Constant(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), (sa.0, sb.1)))
    }

    pub fn sparse_matmul(
        &mut self,
        adj: Arc<SparseAdjacency>,
        x: NodeId,
    ) -> Result<NodeId, NumericError> {
        let sx = self.shape(x);
        if adj.cols() != sx.0 {
            return Err(self.mismatch(
                "sparse matmul",
                format!("{}x{} x {sx:?}", adj.rows(), adj.cols()),
            ));
        }
        let shape = (adj.rows(), sx.1);
        Ok(self.push(Op::SparseMatMul { adj, x }, shape))
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<(usize, usize), NumericError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(what, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId, NumericError> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| NumericError::Contract("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, NumericError> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(self.mismatch("add_row", format!("{sx:?} + {sr:?}")));
        }
        Ok(self.push(Op::AddRow { x, row }, sx))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Scale(x, factor), s)
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumericError> {
        if self.shape(s) != (1, 1) {
            return Err(self.mismatch("scale_by", format!("scalar {:?}", self.shape(s))));
        }
        let shape = self.shape(x);
        Ok(self.push(Op::ScaleBy { x, s }, shape))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericError> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| NumericError::Contract("concat of no parts".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(self.mismatch("concat_cols", "row counts differ".into()));
        }
        let cols = parts.iter().map(|&p| self.shape(p).1).sum();
        Ok(self.push(Op::ConcatCols(parts.to_vec()), (rows, cols)))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericError> {
        let sx = self.shape(x);
        if start + len > sx.0 {
            return Err(self.mismatch("slice_rows", format!("{start}+{len} of {sx:?}")));
        }
        Ok(self.push(Op::SliceRows { x, start, len }, (len, sx.1)))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::RowSoftmax(x), s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Sigmoid(x), s)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::RowSum(x), (s.0, 1))
    }

    pub fn col_sum(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::ColSum(x), (1, s.1))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        let s = self.shape(x);
        if s.0 * s.1 == 0 {
            return Err(self.mismatch("mean", "empty operand".into()));
        }
        Ok(self.push(Op::Mean(x), (1, 1)))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId, NumericError> {
        let s = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.0) {
            return Err(self.mismatch("gather_rows", format!("row {bad} of {s:?}")));
        }
        let shape = (indices.len(), s.1);
        Ok(self.push(Op::GatherRows { x, indices }, shape))
    }

    pub fn element(&mut self, x: NodeId, row: usize, col: usize) -> Result<NodeId, NumericError> {
        let s = self.shape(x);
        if row >= s.0 || col >= s.1 {
            return Err(self.mismatch("element", format!("({row}, {col}) of {s:?}")));
        }
        Ok(self.push(Op::Element { x, row, col }, (1, 1)))
    }

    pub fn edge_scores(
        &mut self,
        pattern: Arc<SparseAdjacency>,
        row_scores: NodeId,
        col_scores: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumericError> {
        if self.shape(row_scores) != (pattern.rows(), 1)
            || self.shape(col_scores) != (pattern.cols(), 1)
            || self.shape(bias) != (1, 1)
        {
            return Err(self.mismatch(
                "edge_scores",
                format!(
                    "pattern {}x{}, scores {:?}/{:?}, bias {:?}",
                    pattern.rows(),
                    pattern.cols(),
                    self.shape(row_scores),
                    self.shape(col_scores),
                    self.shape(bias)
                ),
            ));
        }
        let shape = (pattern.nnz(), 1);
        Ok(self.push(
            Op::EdgeScores {
                pattern,
                row_scores,
                col_scores,
                bias,
            },
            shape,
        ))
    }

    pub fn edge_softmax(
        &mut self,
        pattern: Arc<SparseAdjacency>,
        scores: NodeId,
    ) -> Result<NodeId, NumericError> {
        if self.shape(scores) != (pattern.nnz(), 1) {
            return Err(self.mismatch("edge_softmax", format!("{:?}", self.shape(scores))));
        }
        let shape = (pattern.nnz(), 1);
        Ok(self.push(Op::EdgeSoftmax { pattern, scores }, shape))
    }

    pub fn edge_aggregate(
        &mut self,
        pattern: Arc<SparseAdjacency>,
        weights: NodeId,
        x: NodeId,
    ) -> Result<NodeId, NumericError> {
        let sx = self.shape(x);
        if self.shape(weights) != (pattern.nnz(), 1) || sx.0 != pattern.cols() {
            return Err(self.mismatch(
                "edge_aggregate",
                format!("weights {:?}, x {sx:?}", self.shape(weights)),
            ));
        }
        let shape = (pattern.rows(), sx.1);
        Ok(self.push(
            Op::EdgeAggregate {
                pattern,
                weights,
                x,
            },
            shape,
        ))
    }

    pub fn binary_cross_entropy(
        &mut self,
        probs: NodeId,
        labels: Arc<Vec<f64>>,
    ) -> Result<NodeId, NumericError> {
        let s = self.shape(probs);
        if s != (labels.len(), 1) || labels.is_empty() {
            return Err(self.mismatch("bce", format!("{s:?} vs {} labels", labels.len())));
        }
        Ok(self.push(Op::BinaryCrossEntropy { probs, labels }, (1, 1)))
    }

    /// Evaluates every node in insertion order (which is topological).
    pub fn evaluate<'a, B: Binder + ?Sized>(
        &self,
        bindings: &'a B,
    ) -> Result<Values<'a>, NumericError> {
        let mut values: Vec<Cow<'a, DenseMatrix>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = |id: NodeId| -> &DenseMatrix { &values[id.0] };
            let out: Cow<'a, DenseMatrix> = match &node.op {
                Op::Input { name, .. } => {
                    let bound = bindings
                        .lookup(name)
                        .ok_or_else(|| NumericError::Unbound(name.clone()))?;
                    if bound.shape() != node.shape {
                        return Err(NumericError::Shape(format!(
                            "input {} bound to {:?}, declared {:?}",
                            self.describe(NodeId(idx)),
                            bound.shape(),
                            node.shape
                        )));
                    }
                    Cow::Borrowed(bound)
                }
                Op::Constant(m) => Cow::Owned((**m).clone()),
                Op::MatMul(a, b) => Cow::Owned(v(*a).matmul(v(*b))),
                Op::SparseMatMul { adj, x } => Cow::Owned(adj.matmul_dense(v(*x))),
                Op::Add(a, b) => Cow::Owned(v(*a).zip_map(v(*b), |x, y| x + y)),
                Op::AddRow { x, row } => {
                    let mut out = v(*x).clone();
                    let r = v(*row).values().to_vec();
                    for i in 0..out.rows() {
                        for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                            *o += b;
                        }
                    }
                    Cow::Owned(out)
                }
                Op::Mul(a, b) => Cow::Owned(v(*a).zip_map(v(*b), |x, y| x * y)),
                Op::Scale(x, f) => Cow::Owned(v(*x).scale(*f)),
                Op::ScaleBy { x, s } => Cow::Owned(v(*x).scale(v(*s).get(0, 0))),
                Op::ConcatCols(parts) => {
                    let (rows, cols) = node.shape;
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for p in parts {
                            out.extend_from_slice(v(*p).row(r));
                        }
                    }
                    Cow::Owned(DenseMatrix::from_raw(rows, cols, out))
                }
                Op::SliceRows { x, start, len } => {
                    let x = v(*x);
                    let c = x.cols();
                    Cow::Owned(DenseMatrix::from_raw(
                        *len,
                        c,
                        x.values()[start * c..(start + len) * c].to_vec(),
                    ))
                }
                Op::RowSoftmax(x) => Cow::Owned(row_softmax(v(*x))),
                Op::Sigmoid(x) => Cow::Owned(v(*x).map(sigmoid)),
                Op::RowSum(x) => {
                    let x = v(*x);
                    Cow::Owned(DenseMatrix::from_raw(
                        x.rows(),
                        1,
                        (0..x.rows()).map(|r| x.row(r).iter().sum()).collect(),
                    ))
                }
                Op::ColSum(x) => {
                    let x = v(*x);
                    let mut out = vec![0.0; x.cols()];
                    for r in 0..x.rows() {
                        for (o, a) in out.iter_mut().zip(x.row(r)) {
                            *o += a;
                        }
                    }
                    Cow::Owned(DenseMatrix::from_raw(1, x.cols(), out))
                }
                Op::Mean(x) => {
                    let x = v(*x);
                    Cow::Owned(DenseMatrix::scalar(x.sum() / x.len() as f64))
                }
                Op::GatherRows { x, indices } => Cow::Owned(v(*x).gather_rows(indices)),
                Op::Element { x, row, col } => Cow::Owned(DenseMatrix::scalar(v(*x).get(*row, *col))),
                Op::EdgeScores {
                    pattern,
                    row_scores,
                    col_scores,
                    bias,
                } => {
                    let (rs, cs, b) = (v(*row_scores), v(*col_scores), v(*bias).get(0, 0));
                    let mut out = Vec::with_capacity(pattern.nnz());
                    for r in 0..pattern.rows() {
                        for &c in pattern.row_cols(r) {
                            out.push(rs.values()[r] + cs.values()[c] + b);
                        }
                    }
                    Cow::Owned(DenseMatrix::from_raw(pattern.nnz(), 1, out))
                }
                Op::EdgeSoftmax { pattern, scores } => {
                    Cow::Owned(edge_softmax(pattern, v(*scores).values()))
                }
                Op::EdgeAggregate {
                    pattern,
                    weights,
                    x,
                } => {
                    let (w, x) = (v(*weights).values(), v(*x));
                    let d = x.cols();
                    let mut out = vec![0.0; pattern.rows() * d];
                    for r in 0..pattern.rows() {
                        let o = &mut out[r * d..(r + 1) * d];
                        for e in pattern.row_range(r) {
                            let we = w[e];
                            for (oo, xv) in o.iter_mut().zip(x.row(pattern.col_indices()[e])) {
                                *oo += we * xv;
                            }
                        }
                    }
                    Cow::Owned(DenseMatrix::from_raw(pattern.rows(), d, out))
                }
                Op::BinaryCrossEntropy { probs, labels } => {
                    let p = v(*probs).values();
                    let total: f64 = p
                        .iter()
                        .zip(labels.iter())
                        .map(|(&p, &r)| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
                        })
                        .sum();
                    Cow::Owned(DenseMatrix::scalar(total / labels.len() as f64))
                }
            };
            if !out.is_finite() {
                return Err(NumericError::Overflow(self.describe(NodeId(idx))));
            }
            values.push(out);
        }
        Ok(Values { values })
    }

    /// Reverse-mode gradients of the loss with respect to every trainable
    /// input. Parameters that do not reach the loss get zero gradients.
    pub fn gradients(&self, values: &Values<'_>) -> Result<BTreeMap<String, DenseMatrix>, NumericError> {
        let loss = self
            .loss
            .ok_or_else(|| NumericError::Contract("no loss node set".into()))?;
        if self.shape(loss) != (1, 1) {
            return Err(NumericError::Contract("loss is not scalar".into()));
        }
        if values.len() != self.nodes.len() {
            return Err(NumericError::Contract("values do not belong to this graph".into()));
        }

        let needs = self.requires_grad();
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |id: NodeId| values.get(id);
            let mut acc = |id: NodeId, contrib: DenseMatrix| {
                if !needs[id.0] {
                    return;
                }
                match &mut adj[id.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Input { .. } => {
                    adj[idx] = Some(g);
                }
                Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        acc(*a, matmul_nt(&g, val(*b)));
                    }
                    if needs[b.0] {
                        acc(*b, matmul_tn(val(*a), &g));
                    }
                }
                Op::SparseMatMul { adj: m, x } => acc(*x, m.transpose_matmul_dense(&g)),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow { x, row } => {
                    if needs[row.0] {
                        acc(*row, col_sum(&g));
                    }
                    acc(*x, g);
                }
                Op::Mul(a, b) => {
                    if needs[a.0] {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if needs[b.0] {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(x, f) => acc(*x, g.scale(*f)),
                Op::ScaleBy { x, s } => {
                    if needs[s.0] {
                        let dot: f64 = g.values().iter().zip(val(*x).values()).map(|(a, b)| a * b).sum();
                        acc(*s, DenseMatrix::scalar(dot));
                    }
                    if needs[x.0] {
                        acc(*x, g.scale(val(*s).get(0, 0)));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        if needs[p.0] {
                            let mut part = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                part.extend_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            acc(*p, DenseMatrix::from_raw(rows, cols, part));
                        }
                        offset += cols;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let (rows, cols) = self.shape(*x);
                    let mut full = DenseMatrix::zeros(rows, cols);
                    full.values_mut()[start * cols..(start + len) * cols].copy_from_slice(g.values());
                    acc(*x, full);
                }
                Op::RowSoftmax(x) => {
                    let y = values.get(NodeId(idx));
                    let mut out = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gy), yy) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - dot);
                        }
                    }
                    acc(*x, out);
                }
                Op::Sigmoid(x) => {
                    let y = values.get(NodeId(idx));
                    acc(*x, g.zip_map(y, |gy, yy| gy * yy * (1.0 - yy)));
                }
                Op::RowSum(x) => {
                    let (rows, cols) = self.shape(*x);
                    let mut out = DenseMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        out.row_mut(r).fill(g.get(r, 0));
                    }
                    acc(*x, out);
                }
                Op::ColSum(x) => {
                    let (rows, cols) = self.shape(*x);
                    let mut out = DenseMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        out.row_mut(r).copy_from_slice(g.values());
                    }
                    acc(*x, out);
                }
                Op::Mean(x) => {
                    let (rows, cols) = self.shape(*x);
                    acc(*x, DenseMatrix::filled(rows, cols, g.get(0, 0) / (rows * cols) as f64));
                }
                Op::GatherRows { x, indices } => {
                    let (rows, cols) = self.shape(*x);
                    let mut out = DenseMatrix::zeros(rows, cols);
                    for (t, &i) in indices.iter().enumerate() {
                        for (o, gv) in out.row_mut(i).iter_mut().zip(g.row(t)) {
                            *o += gv;
                        }
                    }
                    acc(*x, out);
                }
                Op::Element { x, row, col } => {
                    let (rows, cols) = self.shape(*x);
                    let mut out = DenseMatrix::zeros(rows, cols);
                    out.set(*row, *col, g.get(0, 0));
                    acc(*x, out);
                }
                Op::EdgeScores {
                    pattern,
                    row_scores,
                    col_scores,
                    bias,
                } => {
                    let mut grs = vec![0.0; pattern.rows()];
                    let mut gcs = vec![0.0; pattern.cols()];
                    let gv = g.values();
                    for r in 0..pattern.rows() {
                        for e in pattern.row_range(r) {
                            grs[r] += gv[e];
                            gcs[pattern.col_indices()[e]] += gv[e];
                        }
                    }
                    acc(*bias, DenseMatrix::scalar(gv.iter().sum()));
                    acc(*row_scores, DenseMatrix::from_raw(pattern.rows(), 1, grs));
                    acc(*col_scores, DenseMatrix::from_raw(pattern.cols(), 1, gcs));
                }
                Op::EdgeSoftmax { pattern, scores } => {
                    let y = values.get(NodeId(idx)).values();
                    let gv = g.values();
                    let mut out = vec![0.0; y.len()];
                    for r in 0..pattern.rows() {
                        let range = pattern.row_range(r);
                        let dot: f64 = range.clone().map(|e| gv[e] * y[e]).sum();
                        for e in range {
                            out[e] = y[e] * (gv[e] - dot);
                        }
                    }
                    acc(*scores, DenseMatrix::from_raw(y.len(), 1, out));
                }
                Op::EdgeAggregate {
                    pattern,
                    weights,
                    x,
                } => {
                    let (w, xv) = (val(*weights).values(), val(*x));
                    if needs[weights.0] {
                        let mut gw = vec![0.0; pattern.nnz()];
                        for r in 0..pattern.rows() {
                            for e in pattern.row_range(r) {
                                gw[e] = g
                                    .row(r)
                                    .iter()
                                    .zip(xv.row(pattern.col_indices()[e]))
                                    .map(|(a, b)| a * b)
                                    .sum();
                            }
                        }
                        acc(*weights, DenseMatrix::from_raw(pattern.nnz(), 1, gw));
                    }
                    if needs[x.0] {
                        let mut gx = DenseMatrix::zeros(xv.rows(), xv.cols());
                        for r in 0..pattern.rows() {
                            for e in pattern.row_range(r) {
                                let we = w[e];
                                for (o, gv) in gx.row_mut(pattern.col_indices()[e]).iter_mut().zip(g.row(r)) {
                                    *o += we * gv;
                                }
                            }
                        }
                        acc(*x, gx);
                    }
                }
                Op::BinaryCrossEntropy { probs, labels } => {
                    let p = val(*probs).values();
                    let n = labels.len() as f64;
                    let scale = g.get(0, 0) / n;
                    let out = p
                        .iter()
                        .zip(labels.iter())
                        .map(|(&p, &r)| {
                            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                                0.0
                            } else {
                                scale * (-r / p + (1.0 - r) / (1.0 - p))
                            }
                        })
                        .collect();
                    acc(*probs, DenseMatrix::from_raw(p.len(), 1, out));
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name, trainable: true } = &node.op {
                let g = adj[idx]
                    .take()
                    .unwrap_or_else(|| DenseMatrix::zeros(node.shape.0, node.shape.1));
                match grads.get_mut(name) {
                    None => {
                        grads.insert(name.clone(), g);
                    }
                    Some(existing) => {
                        let existing: &mut DenseMatrix = existing;
                        existing.add_assign(&g);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            needs[idx] = match &node.op {
                Op::Input { trainable, .. } => *trainable,
                Op::Constant(_) => false,
                Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => needs[a.0] || needs[b.0],
                Op::AddRow { x, row } => needs[x.0] || needs[row.0],
                Op::ScaleBy { x, s } => needs[x.0] || needs[s.0],
                Op::ConcatCols(parts) => parts.iter().any(|p| needs[p.0]),
                Op::EdgeScores {
                    row_scores,
                    col_scores,
                    bias,
                    ..
                } => needs[row_scores.0] || needs[col_scores.0] || needs[bias.0],
                Op::EdgeAggregate { weights, x, .. } => needs[weights.0] || needs[x.0],
                Op::SparseMatMul { x, .. }
                | Op::Scale(x, _)
                | Op::SliceRows { x, .. }
                | Op::RowSoftmax(x)
                | Op::Sigmoid(x)
                | Op::RowSum(x)
                | Op::ColSum(x)
                | Op::Mean(x)
                | Op::GatherRows { x, .. }
                | Op::Element { x, .. }
                | Op::EdgeSoftmax { scores: x, .. }
                | Op::BinaryCrossEntropy { probs: x, .. } => needs[x.0],
            };
        }
        needs
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn row_softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        out.extend(softmax(x.row(r)));
    }
    DenseMatrix::from_raw(x.rows(), x.cols(), out)
}

fn edge_softmax(pattern: &SparseAdjacency, scores: &[f64]) -> DenseMatrix {
    let mut out = vec![0.0; scores.len()];
    for r in 0..pattern.rows() {
        let range = pattern.row_range(r);
        if range.is_empty() {
            continue;
        }
        let s = softmax(&scores[range.clone()]);
        out[range].copy_from_slice(&s);
    }
    DenseMatrix::from_raw(scores.len(), 1, out)
}

fn col_sum(g: &DenseMatrix) -> DenseMatrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    DenseMatrix::from_raw(1, g.cols(), out)
}

/// `g × bᵀ`.
fn matmul_nt(g: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (n, k) = (g.rows(), b.rows());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gi = g.row(i);
        for j in 0..k {
            out[i * k + j] = gi.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    DenseMatrix::from_raw(n, k, out)
}

/// `aᵀ × g`.
fn matmul_tn(a: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let (k, c) = (a.cols(), g.cols());
    let mut out = vec![0.0; k * c];
    for r in 0..a.rows() {
        let gr = g.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[i * c..(i + 1) * c].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    DenseMatrix::from_raw(k, c, out)
}
