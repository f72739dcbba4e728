//! A small reverse-mode differentiation graph over 2-D f64 tensors.
//!
//! Nodes are appended to an arena, so ids created later are always
//! downstream of their parents and one reverse sweep in creation order
//! is a valid backpropagation schedule. Every op validates shapes and
//! rejects non-finite outputs.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    /// Matrix plus a single row broadcast over every row.
    AddRow,
    Scale(f64),
    Mul,
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxRows,
    /// sqrt(max(x, floor)); gradient is zero wherever the floor engages.
    SqrtFloored(f64),
    MeanRows,
    Sum,
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        start: usize,
    },
    SliceCols {
        start: usize,
    },
    /// Concatenation of time-shifted copies: row r of the output is the
    /// input rows r + (offset - min_offset) side by side, one block per
    /// offset. The backward pass scatter-adds into the shifted rows.
    ContextGather {
        offsets: Vec<i64>,
    },
    /// Mean cross entropy of row-wise logits against integer labels.
    CrossEntropy {
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxRows => "softmax_rows",
            Op::SqrtFloored(_) => "sqrt_floored",
            Op::MeanRows => "mean_rows",
            Op::Sum => "sum",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ContextGather { .. } => "context_gather",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    parents: Vec<NodeId>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id].value.view()
    }

    pub fn grad(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id].grad.view()
    }

    /// The value of a 1x1 node as a plain number.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.nodes[id].value;
        if v.dim() != (1, 1) {
            return Err(Error::shape("scalar", format!("node is {:?}", v.dim())));
        }
        Ok(v[[0, 0]])
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<NodeId>, op: Op) -> Result<NodeId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("graph", format!("{} produced a non-finite value", op.name())));
        }
        let grad = Array2::zeros(value.dim());
        self.nodes.push(Node { value, grad, parents, op });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.push(value, vec![], Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<NodeId> {
        self.leaf(Array2::zeros((rows, cols)))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::shape(
            "graph",
            format!(
                "{op}: {:?} vs {:?}",
                self.nodes[a].value.dim(),
                self.nodes[b].value.dim()
            ),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.ncols() != self.nodes[b].value.nrows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, vec![a, b], Op::MatMul)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, vec![a], Op::Transpose)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.dim() != self.nodes[b].value.dim() {
            return Err(self.shape_err("add", a, b));
        }
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, vec![a, b], Op::Add)
    }

    /// `m` plus row vector `row` added to every row of `m`.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let r = &self.nodes[row].value;
        if r.nrows() != 1 || r.ncols() != self.nodes[m].value.ncols() {
            return Err(self.shape_err("add_row", m, row));
        }
        let v = &self.nodes[m].value + &r.row(0);
        self.push(v, vec![m, row], Op::AddRow)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.nodes[a].value.mapv(|x| x * factor);
        self.push(v, vec![a], Op::Scale(factor))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.dim() != self.nodes[b].value.dim() {
            return Err(self.shape_err("mul", a, b));
        }
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, vec![a, b], Op::Mul)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, vec![a], Op::Relu)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, vec![a], Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.mapv(sigmoid);
        self.push(v, vec![a], Op::Sigmoid)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(v, vec![a], Op::SoftmaxRows)
    }

    pub fn sqrt_floored(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        if !(floor > 0.0) {
            return Err(Error::invalid("graph", "sqrt_floored needs a positive floor"));
        }
        let v = self.nodes[a].value.mapv(|x| x.max(floor).sqrt());
        self.push(v, vec![a], Op::SqrtFloored(floor))
    }

    /// Column-wise mean over rows: (T x D) -> (1 x D).
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if x.nrows() == 0 {
            return Err(Error::shape("graph", "mean_rows of an empty matrix"));
        }
        let v = x
            .mean_axis(Axis(0))
            .expect("nonempty")
            .insert_axis(Axis(0));
        self.push(v, vec![a], Op::MeanRows)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.sum();
        self.push(Array2::from_elem((1, 1), s), vec![a], Op::Sum)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("graph", "concat_rows of nothing"));
        }
        let cols = self.nodes[parts[0]].value.ncols();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for &p in parts {
            if self.nodes[p].value.ncols() != cols {
                return Err(Error::shape(
                    "graph",
                    format!("concat_rows: {} cols vs {}", self.nodes[p].value.ncols(), cols),
                ));
            }
            sizes.push(self.nodes[p].value.nrows());
            rows += self.nodes[p].value.nrows();
        }
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let n = self.nodes[p].value.nrows();
            v.slice_mut(ndarray::s![at..at + n, ..])
                .assign(&self.nodes[p].value);
            at += n;
        }
        self.push(v, parts.to_vec(), Op::ConcatRows(sizes))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("graph", "concat_cols of nothing"));
        }
        let rows = self.nodes[parts[0]].value.nrows();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            if self.nodes[p].value.nrows() != rows {
                return Err(Error::shape(
                    "graph",
                    format!("concat_cols: {} rows vs {}", self.nodes[p].value.nrows(), rows),
                ));
            }
            sizes.push(self.nodes[p].value.ncols());
            cols += self.nodes[p].value.ncols();
        }
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let n = self.nodes[p].value.ncols();
            v.slice_mut(ndarray::s![.., at..at + n])
                .assign(&self.nodes[p].value);
            at += n;
        }
        self.push(v, parts.to_vec(), Op::ConcatCols(sizes))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if len == 0 || start + len > x.nrows() {
            return Err(Error::shape(
                "graph",
                format!("slice_rows {start}..{} of {} rows", start + len, x.nrows()),
            ));
        }
        let v = x.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(v, vec![a], Op::SliceRows { start })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = &self.nodes[a].value;
        if len == 0 || start + len > x.ncols() {
            return Err(Error::shape(
                "graph",
                format!("slice_cols {start}..{} of {} cols", start + len, x.ncols()),
            ));
        }
        let v = x.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v, vec![a], Op::SliceCols { start })
    }

    /// Gathers time context: output row r holds the input rows
    /// r + (offset - min_offset) for each offset, concatenated. Output
    /// length is T - span + 1 with span = max - min + 1, so the input
    /// must be at least span rows long.
    pub fn context_gather(&mut self, a: NodeId, offsets: &[i64]) -> Result<NodeId> {
        if offsets.is_empty() || offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "graph",
                "context offsets must be nonempty and strictly increasing",
            ));
        }
        let min = offsets[0];
        let max = *offsets.last().unwrap();
        let span = (max - min) as usize + 1;
        let x = &self.nodes[a].value;
        let (t, d) = x.dim();
        if t < span {
            return Err(Error::shape(
                "graph",
                format!("context_gather span {span} exceeds {t} input rows"),
            ));
        }
        let out_rows = t - span + 1;
        let mut v = Array2::zeros((out_rows, d * offsets.len()));
        for r in 0..out_rows {
            for (k, &off) in offsets.iter().enumerate() {
                let src = r + (off - min) as usize;
                v.slice_mut(ndarray::s![r, k * d..(k + 1) * d])
                    .assign(&x.row(src));
            }
        }
        self.push(v, vec![a], Op::ContextGather { offsets: offsets.to_vec() })
    }

    /// Mean cross entropy over rows of logits; the 1x1 result is the loss.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[logits].value;
        let (b, l) = x.dim();
        if labels.len() != b {
            return Err(Error::shape(
                "graph",
                format!("cross_entropy: {} logit rows, {} labels", b, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&lab| lab >= l) {
            return Err(Error::invalid(
                "graph",
                format!("cross_entropy label {bad} out of range for {l} classes"),
            ));
        }
        let mut probs = Array2::zeros((b, l));
        let mut loss = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &e in row.iter() {
                z += (e - m).exp();
            }
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..l {
                probs[[i, j]] = (row[j] - lse).exp();
            }
        }
        loss /= b as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            vec![logits],
            Op::CrossEntropy { labels: labels.to_vec(), probs },
        )
    }

    /// Backpropagates from a 1x1 loss node: zeroes all gradients, seeds
    /// the loss with 1, then sweeps the arena in reverse creation order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.dim() != (1, 1) {
            return Err(Error::shape(
                "graph",
                format!("backward from non-scalar {:?}", self.nodes[loss].value.dim()),
            ));
        }
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[loss].grad[[0, 0]] = 1.0;
        let mut reached = vec![false; self.nodes.len()];
        reached[loss] = true;

        for id in (0..=loss).rev() {
            if !reached[id] {
                continue;
            }
            for &p in &self.nodes[id].parents {
                reached[p] = true;
            }
            // Split borrows: take the node's grad, push into parents.
            let grad = self.nodes[id].grad.clone();
            let op = self.nodes[id].op.clone();
            let parents = self.nodes[id].parents.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul => {
                    let (a, b) = (parents[0], parents[1]);
                    let da = grad.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&grad);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::Transpose => {
                    self.nodes[parents[0]].grad += &grad.t();
                }
                Op::Add => {
                    self.nodes[parents[0]].grad += &grad;
                    self.nodes[parents[1]].grad += &grad;
                }
                Op::AddRow => {
                    self.nodes[parents[0]].grad += &grad;
                    let col_sum = grad.sum_axis(Axis(0));
                    self.nodes[parents[1]].grad += &col_sum.insert_axis(Axis(0));
                }
                Op::Scale(f) => {
                    self.nodes[parents[0]].grad.scaled_add(f, &grad);
                }
                Op::Mul => {
                    let (a, b) = (parents[0], parents[1]);
                    let da = &grad * &self.nodes[b].value;
                    let db = &grad * &self.nodes[a].value;
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::Relu => {
                    let p = parents[0];
                    let masked =
                        ndarray::Zip::from(&grad).and(&self.nodes[p].value).map_collect(
                            |&g, &x| if x > 0.0 { g } else { 0.0 },
                        );
                    self.nodes[p].grad += &masked;
                }
                Op::Tanh => {
                    let y = self.nodes[id].value.clone();
                    self.nodes[parents[0]].grad += &(&grad * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid => {
                    let y = self.nodes[id].value.clone();
                    self.nodes[parents[0]].grad += &(&grad * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::SoftmaxRows => {
                    let y = self.nodes[id].value.clone();
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 =
                            (0..y.ncols()).map(|j| grad[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (grad[[i, j]] - dot);
                        }
                    }
                    self.nodes[parents[0]].grad += &dx;
                }
                Op::SqrtFloored(floor) => {
                    let p = parents[0];
                    let dx = ndarray::Zip::from(&grad)
                        .and(&self.nodes[p].value)
                        .and(&self.nodes[id].value)
                        .map_collect(|&g, &x, &y| if x > floor { g / (2.0 * y) } else { 0.0 });
                    self.nodes[p].grad += &dx;
                }
                Op::MeanRows => {
                    let p = parents[0];
                    let t = self.nodes[p].value.nrows() as f64;
                    let row = grad.row(0).to_owned();
                    for mut r in self.nodes[p].grad.rows_mut() {
                        r.scaled_add(1.0 / t, &row);
                    }
                }
                Op::Sum => {
                    let g = grad[[0, 0]];
                    self.nodes[parents[0]].grad.mapv_inplace(|v| v + g);
                }
                Op::ConcatRows(sizes) => {
                    let mut at = 0;
                    for (k, &p) in parents.iter().enumerate() {
                        let n = sizes[k];
                        let part = grad.slice(ndarray::s![at..at + n, ..]).to_owned();
                        self.nodes[p].grad += &part;
                        at += n;
                    }
                }
                Op::ConcatCols(sizes) => {
                    let mut at = 0;
                    for (k, &p) in parents.iter().enumerate() {
                        let n = sizes[k];
                        let part = grad.slice(ndarray::s![.., at..at + n]).to_owned();
                        self.nodes[p].grad += &part;
                        at += n;
                    }
                }
                Op::SliceRows { start } => {
                    let p = parents[0];
                    let n = grad.nrows();
                    let mut dst =
                        self.nodes[p].grad.slice_mut(ndarray::s![start..start + n, ..]);
                    dst += &grad;
                }
                Op::SliceCols { start } => {
                    let p = parents[0];
                    let n = grad.ncols();
                    let mut dst =
                        self.nodes[p].grad.slice_mut(ndarray::s![.., start..start + n]);
                    dst += &grad;
                }
                Op::ContextGather { offsets } => {
                    let p = parents[0];
                    let d = self.nodes[p].value.ncols();
                    let min = offsets[0];
                    for r in 0..grad.nrows() {
                        for (k, &off) in offsets.iter().enumerate() {
                            let src = r + (off - min) as usize;
                            let mut dst = self.nodes[p].grad.row_mut(src);
                            dst += &grad.slice(ndarray::s![r, k * d..(k + 1) * d]);
                        }
                    }
                }
                Op::CrossEntropy { labels, probs } => {
                    let p = parents[0];
                    let g = grad[[0, 0]];
                    let b = probs.nrows() as f64;
                    let mut dx = probs;
                    for (i, &lab) in labels.iter().enumerate() {
                        dx[[i, lab]] -= 1.0;
                    }
                    dx.mapv_inplace(|v| v * g / b);
                    self.nodes[p].grad += &dx;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_values_match_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = g.leaf(array![[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).to_owned(), array![[1.0, 4.0], [3.0, 8.0]]);
        let s = g.sum(c).unwrap();
        assert_eq!(g.scalar(s).unwrap(), 16.0);
    }

    #[test]
    fn matmul_gradients_are_transposed_products() {
        // loss = sum(A B): dA = 1 B', dB = A' 1, with 1 the all-ones
        // matrix. For A = [[1,2],[3,4]], B = [[5],[6]]: dA = [[5,6],[5,6]],
        // dB = [[4],[6]].
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = g.leaf(array![[5.0], [6.0]]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).to_owned(), array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(g.grad(b).to_owned(), array![[4.0], [6.0]]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn uniform_logits_give_exact_ln_l_loss() {
        for l in 2..8 {
            let mut g = Graph::new();
            let logits = g.leaf(Array2::from_elem((3, l), 0.7)).unwrap();
            let loss = g.cross_entropy(logits, &[0, 1, l - 1]).unwrap();
            let got = g.scalar(loss).unwrap();
            assert!(
                (got - (l as f64).ln()).abs() < 1e-12,
                "L={l}: loss {got}"
            );
        }
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot_over_batch() {
        let mut g = Graph::new();
        let logits = g.leaf(array![[0.0, 0.0], [2.0, -1.0]]).unwrap();
        let loss = g.cross_entropy(logits, &[0, 1]).unwrap();
        g.backward(loss).unwrap();
        let p0 = 0.5;
        let p1 = (2.0f64).exp() / ((2.0f64).exp() + (-1.0f64).exp());
        let expect = array![[(p0 - 1.0) / 2.0, p0 / 2.0], [p1 / 2.0, (1.0 - p1 - 1.0) / 2.0]];
        let got = g.grad(logits);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_gather_shapes_and_scatter() {
        let mut g = Graph::new();
        // 4 frames, 1 dim: rows 0..4 valued 0,1,2,3.
        let x = g.leaf(array![[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let y = g.context_gather(x, &[-1, 0, 1]).unwrap();
        assert_eq!(g.value(y).to_owned(), array![[0.0, 1.0, 2.0], [1.0, 2.0, 3.0]]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        // Row usage counts: row0 once, row1 twice, row2 twice, row3 once.
        assert_eq!(g.grad(x).to_owned(), array![[1.0], [2.0], [2.0], [1.0]]);
        // Offsets {0} over T=10 keep the length.
        let mut g = Graph::new();
        let x = g.leaf(Array2::zeros((10, 3))).unwrap();
        let y = g.context_gather(x, &[0]).unwrap();
        assert_eq!(g.value(y).dim(), (10, 3));
        // Offsets -2..2 over T=10 shrink to 6 rows.
        let y = g.context_gather(x, &[-2, -1, 0, 1, 2]).unwrap();
        assert_eq!(g.value(y).dim(), (6, 15));
        assert!(g.context_gather(x, &[-6, 6]).is_err(), "span 13 > 10 rows");
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let top = g.slice_rows(x, 0, 1).unwrap();
        let rest = g.slice_rows(x, 1, 2).unwrap();
        let back = g.concat_rows(&[top, rest]).unwrap();
        assert_eq!(g.value(back).to_owned(), g.value(x).to_owned());
        let left = g.slice_cols(back, 0, 1).unwrap();
        let double = g.scale(left, 2.0).unwrap();
        let loss = g.sum(double).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).to_owned(), array![[2.0, 0.0], [2.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn sqrt_floor_zeroes_gradient_below_floor() {
        let mut g = Graph::new();
        let x = g.leaf(array![[4.0, 1e-14]]).unwrap();
        let y = g.sqrt_floored(x, 1e-10).unwrap();
        assert_eq!(g.value(y)[[0, 0]], 2.0);
        assert_eq!(g.value(y)[[0, 1]], 1e-5);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        // d sqrt(x) = 1/(2 sqrt x) = 0.25 at x=4; floored entry gets 0.
        assert_eq!(g.grad(x).to_owned(), array![[0.25, 0.0]]);
    }

    #[test]
    fn backward_skips_unreachable_branches() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0]]).unwrap();
        let used = g.scale(x, 3.0).unwrap();
        let _unused = g.tanh(x).unwrap();
        let loss = g.sum(used).unwrap();
        g.backward(loss).unwrap();
        // Only the scale path contributes.
        assert_eq!(g.grad(x)[[0, 0]], 3.0);
    }

    #[test]
    fn forward_is_bit_identical_across_builds() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(array![[0.3, -1.2], [2.0, 0.0]]).unwrap();
            let w = g.leaf(array![[0.5, -0.25], [1.5, 0.75]]).unwrap();
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.softmax_rows(t).unwrap();
            g.value(s).to_owned()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Array2::zeros((2, 3))).unwrap();
        let b = g.leaf(Array2::zeros((2, 3))).unwrap();
        assert!(g.matmul(a, b).is_err());
        let row = g.leaf(Array2::zeros((1, 4))).unwrap();
        assert!(g.add_row(a, row).is_err());
        assert!(g.cross_entropy(a, &[0, 1, 2]).is_err(), "label count");
        assert!(g.cross_entropy(a, &[0, 3]).is_err(), "label range");
        assert!(g.slice_rows(a, 1, 3).is_err());
    }
}
