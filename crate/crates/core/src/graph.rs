//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: recording an op computes its value immediately and
//! appends a node, so node indices are already a topological order. Backward
//! replays the tape in reverse, accumulating gradients only along paths that
//! can reach a parameter. One graph instance is single-threaded; independent
//! graphs may run on different threads.
//!
//! Axis conventions for reductions: `mean_rows` averages each row over its
//! columns (`n x m -> n x 1`), `mean_cols` averages each column over the rows
//! (`n x m -> 1 x m`), `mean_all`/`sum_all` collapse to a `1 x 1` scalar.

use crate::error::{Error, Result};
use crate::tensor::{column_sums, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Const,
    /// x @ w + b, with b broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// mul * x + add elementwise; only `mul` matters for the backward pass.
    AffineScalar { a: NodeId, mul: f64 },
    Square { a: NodeId },
    Sqrt { a: NodeId },
    Abs { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Recip { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Elu { a: NodeId },
    Sigmoid { a: NodeId },
    /// Column-wise concatenation of same-height blocks.
    ConcatCols { parts: Vec<NodeId> },
    /// Row subset in a fixed order; backward scatters.
    GatherRows { a: NodeId, rows: Vec<usize> },
    /// a_ij + v_j for a row vector v (1 x m).
    AddRowVec { a: NodeId, v: NodeId },
    /// a_ij + v_i for a column vector v (n x 1).
    AddColVec { a: NodeId, v: NodeId },
    /// a_ij * v_j for a row vector v (1 x m).
    MulRowVec { a: NodeId, v: NodeId },
    /// log sum exp over each row: n x m -> n x 1.
    LogSumExpRows { a: NodeId },
    /// log sum exp over each column: n x m -> 1 x m.
    LogSumExpCols { a: NodeId },
    /// Squared Euclidean distances between rows: (n x d, m x d) -> n x m.
    PairwiseSqDist { a: NodeId, b: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    MeanRows { a: NodeId },
    MeanCols { a: NodeId },
    /// Sum of the elementwise product; shapes must match.
    Dot { a: NodeId, b: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "parameter",
            Op::Const => "const",
            Op::Affine { .. } => "affine",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "elementwise-product",
            Op::AffineScalar { .. } => "scale",
            Op::Square { .. } => "square",
            Op::Sqrt { .. } => "sqrt",
            Op::Abs { .. } => "abs",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Recip { .. } => "recip",
            Op::Clamp { .. } => "clamp",
            Op::Elu { .. } => "elu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::ConcatCols { .. } => "concat",
            Op::GatherRows { .. } => "gather-rows",
            Op::AddRowVec { .. } => "add-row-vec",
            Op::AddColVec { .. } => "add-col-vec",
            Op::MulRowVec { .. } => "mul-row-vec",
            Op::LogSumExpRows { .. } => "logsumexp-rows",
            Op::LogSumExpCols { .. } => "logsumexp-cols",
            Op::PairwiseSqDist { .. } => "pairwise-sqdist",
            Op::SumAll { .. } => "reduce-sum",
            Op::MeanAll { .. } => "reduce-mean",
            Op::MeanRows { .. } => "mean-rows",
            Op::MeanCols { .. } => "mean-cols",
            Op::Dot { .. } => "dot",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar activations shared with the plain (non-tape) network forward.
pub mod scalar {
    pub fn elu(x: f64) -> f64 {
        super::elu(x)
    }
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for a node during the forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Forward result at the given root. Values are computed eagerly while
    /// recording, so this is a cached read; it exists to make call sites
    /// explicit about where the forward pass is consumed.
    pub fn forward(&self, root: NodeId) -> &Tensor {
        self.value(root)
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.is_scalar());
        v.get(0, 0)
    }

    /// Gradient accumulated at a node by the last backward pass, if any
    /// contribution reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient at a node, densified: unreached nodes report zeros.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => {
                let v = &self.nodes[id.0].value;
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, details: String) -> Error {
        Error::ShapeMismatch {
            op,
            node: self.nodes.len(),
            details,
        }
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        Ok(())
    }

    // ---- leaves ----

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Param, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Const, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    // ---- ops ----

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.cols() != vw.rows() || vb.rows() != 1 || vb.cols() != vw.cols() {
            return Err(self.shape_err(
                "affine",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            ));
        }
        let mut out = matmul(vx, vw);
        for i in 0..out.rows() {
            let bias = self.value(b).row(0);
            for (o, &bv) in out.row_mut(i).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(Op::Affine { x, w, b }, out, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(self.shape_err(
                "matmul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul(va, vb);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Matmul { a, b }, out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Add { a, b }, out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Sub { a, b }, out, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("elementwise-product", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Mul { a, b }, out, rg)
    }

    pub fn affine_scalar(&mut self, a: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| mul * x + add);
        let rg = self.requires(a);
        self.push(Op::AffineScalar { a, mul }, out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.affine_scalar(a, c, 0.0)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.affine_scalar(a, -1.0, 0.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.affine_scalar(a, 1.0, c)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.requires(a);
        self.push(Op::Square { a }, out, rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.requires(a);
        self.push(Op::Sqrt { a }, out, rg)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::abs);
        let rg = self.requires(a);
        self.push(Op::Abs { a }, out, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::exp);
        let rg = self.requires(a);
        self.push(Op::Exp { a }, out, rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::ln);
        let rg = self.requires(a);
        self.push(Op::Log { a }, out, rg)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| 1.0 / x);
        let rg = self.requires(a);
        self.push(Op::Recip { a }, out, rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.requires(a);
        self.push(Op::Clamp { a, lo, hi }, out, rg)
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(elu);
        let rg = self.requires(a);
        self.push(Op::Elu { a }, out, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(sigmoid);
        let rg = self.requires(a);
        self.push(Op::Sigmoid { a }, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no parts".to_string()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(self.shape_err(
                    "concat",
                    format!("row mismatch: {} vs {}", v.rows(), rows),
                ));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
                offset += v.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            rg,
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= va.rows()) {
            return Err(self.shape_err(
                "gather-rows",
                format!("row index {} out of {} rows", bad, va.rows()),
            ));
        }
        let out = va.select_rows(rows);
        let rg = self.requires(a);
        self.push(
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            out,
            rg,
        )
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.rows() != 1 || vv.cols() != va.cols() {
            return Err(self.shape_err(
                "add-row-vec",
                format!("a {:?}, v {:?}", va.shape(), vv.shape()),
            ));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            let vrow = self.value(v).row(0);
            for (o, &x) in out.row_mut(i).iter_mut().zip(vrow) {
                *o += x;
            }
        }
        let rg = self.requires(a) || self.requires(v);
        self.push(Op::AddRowVec { a, v }, out, rg)
    }

    pub fn add_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.cols() != 1 || vv.rows() != va.rows() {
            return Err(self.shape_err(
                "add-col-vec",
                format!("a {:?}, v {:?}", va.shape(), vv.shape()),
            ));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            let shift = self.value(v).get(i, 0);
            for o in out.row_mut(i) {
                *o += shift;
            }
        }
        let rg = self.requires(a) || self.requires(v);
        self.push(Op::AddColVec { a, v }, out, rg)
    }

    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if vv.rows() != 1 || vv.cols() != va.cols() {
            return Err(self.shape_err(
                "mul-row-vec",
                format!("a {:?}, v {:?}", va.shape(), vv.shape()),
            ));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            let vrow = self.value(v).row(0);
            for (o, &x) in out.row_mut(i).iter_mut().zip(vrow) {
                *o *= x;
            }
        }
        let rg = self.requires(a) || self.requires(v);
        self.push(Op::MulRowVec { a, v }, out, rg)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), 1);
        for i in 0..va.rows() {
            out.set(i, 0, logsumexp(va.row(i)));
        }
        let rg = self.requires(a);
        self.push(Op::LogSumExpRows { a }, out, rg)
    }

    pub fn logsumexp_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mut out = Tensor::zeros(1, va.cols());
        for j in 0..va.cols() {
            let col: Vec<f64> = (0..va.rows()).map(|i| va.get(i, j)).collect();
            out.set(0, j, logsumexp(&col));
        }
        let rg = self.requires(a);
        self.push(Op::LogSumExpCols { a }, out, rg)
    }

    pub fn pairwise_sqdist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(self.shape_err(
                "pairwise-sqdist",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        for i in 0..va.rows() {
            let ra = va.row(i);
            for j in 0..vb.rows() {
                let rb = vb.row(j);
                let mut acc = 0.0;
                for (&x, &y) in ra.iter().zip(rb) {
                    let d = x - y;
                    acc += d * d;
                }
                out.set(i, j, acc);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::PairwiseSqDist { a, b }, out, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.requires(a);
        self.push(Op::SumAll { a }, out, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(self.shape_err("reduce-mean", "empty tensor".to_string()));
        }
        let out = Tensor::scalar(va.sum() / va.len() as f64);
        let rg = self.requires(a);
        self.push(Op::MeanAll { a }, out, rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let m = va.cols() as f64;
        let mut out = Tensor::zeros(va.rows(), 1);
        for i in 0..va.rows() {
            out.set(i, 0, va.row(i).iter().sum::<f64>() / m);
        }
        let rg = self.requires(a);
        self.push(Op::MeanRows { a }, out, rg)
    }

    pub fn mean_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let n = va.rows() as f64;
        let mut out = column_sums(va);
        for v in out.data_mut() {
            *v /= n;
        }
        let rg = self.requires(a);
        self.push(Op::MeanCols { a }, out, rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        let out = Tensor::scalar(s);
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Dot { a, b }, out, rg)
    }

    // ---- backward ----

    /// Accumulate dLoss/dNode for every node that can reach `root` from a
    /// parameter. Gradients are reset at the start of each call; nodes the
    /// loss does not depend on keep `grad = None` (reported as zeros).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        {
            let v = self.value(root);
            if !v.is_scalar() {
                return Err(Error::NonScalarRoot {
                    rows: v.rows(),
                    cols: v.cols(),
                });
            }
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let gout = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(&op, idx, &gout);
            self.nodes[idx].grad = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, contribution: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_scaled(&contribution, 1.0),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, op: &Op, idx: usize, gout: &Tensor) {
        match *op {
            Op::Input | Op::Param | Op::Const => {}
            Op::Affine { x, w, b } => {
                if self.requires(x) {
                    let g = matmul_nt(gout, self.value(w));
                    self.add_grad(x, g);
                }
                if self.requires(w) {
                    let g = matmul_tn(self.value(x), gout);
                    self.add_grad(w, g);
                }
                if self.requires(b) {
                    self.add_grad(b, column_sums(gout));
                }
            }
            Op::Matmul { a, b } => {
                if self.requires(a) {
                    let g = matmul_nt(gout, self.value(b));
                    self.add_grad(a, g);
                }
                if self.requires(b) {
                    let g = matmul_tn(self.value(a), gout);
                    self.add_grad(b, g);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(a, gout.clone());
                self.add_grad(b, gout.clone());
            }
            Op::Sub { a, b } => {
                self.add_grad(a, gout.clone());
                self.add_grad(b, gout.map(|g| -g));
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let g = gout.zip_map(self.value(b), |g, y| g * y);
                    self.add_grad(a, g);
                }
                if self.requires(b) {
                    let g = gout.zip_map(self.value(a), |g, x| g * x);
                    self.add_grad(b, g);
                }
            }
            Op::AffineScalar { a, mul } => {
                self.add_grad(a, gout.map(|g| mul * g));
            }
            Op::Square { a } => {
                let g = gout.zip_map(self.value(a), |g, x| 2.0 * x * g);
                self.add_grad(a, g);
            }
            Op::Sqrt { a } => {
                let g = gout.zip_map(&self.nodes[idx].value, |g, y| 0.5 * g / y);
                self.add_grad(a, g);
            }
            Op::Abs { a } => {
                let g = gout.zip_map(self.value(a), |g, x| g * sign(x));
                self.add_grad(a, g);
            }
            Op::Exp { a } => {
                let g = gout.zip_map(&self.nodes[idx].value, |g, y| g * y);
                self.add_grad(a, g);
            }
            Op::Log { a } => {
                let g = gout.zip_map(self.value(a), |g, x| g / x);
                self.add_grad(a, g);
            }
            Op::Recip { a } => {
                let g = gout.zip_map(&self.nodes[idx].value, |g, y| -g * y * y);
                self.add_grad(a, g);
            }
            Op::Clamp { a, lo, hi } => {
                let g = gout.zip_map(self.value(a), |g, x| {
                    if x > lo && x < hi {
                        g
                    } else {
                        0.0
                    }
                });
                self.add_grad(a, g);
            }
            Op::Elu { a } => {
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let mut g = gout.clone();
                for (i, gv) in g.data_mut().iter_mut().enumerate() {
                    let d = if x.data()[i] > 0.0 {
                        1.0
                    } else {
                        y.data()[i] + 1.0
                    };
                    *gv *= d;
                }
                self.add_grad(a, g);
            }
            Op::Sigmoid { a } => {
                let g = gout.zip_map(&self.nodes[idx].value, |g, y| g * y * (1.0 - y));
                self.add_grad(a, g);
            }
            Op::ConcatCols { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut g = Tensor::zeros(gout.rows(), cols);
                    for i in 0..gout.rows() {
                        g.row_mut(i)
                            .copy_from_slice(&gout.row(i)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.add_grad(p, g);
                }
            }
            Op::GatherRows { a, ref rows } => {
                let va = self.value(a);
                let mut g = Tensor::zeros(va.rows(), va.cols());
                for (oi, &ri) in rows.iter().enumerate() {
                    let src = gout.row(oi);
                    for (gv, &s) in g.row_mut(ri).iter_mut().zip(src) {
                        *gv += s;
                    }
                }
                self.add_grad(a, g);
            }
            Op::AddRowVec { a, v } => {
                self.add_grad(a, gout.clone());
                if self.requires(v) {
                    self.add_grad(v, column_sums(gout));
                }
            }
            Op::AddColVec { a, v } => {
                self.add_grad(a, gout.clone());
                if self.requires(v) {
                    let mut g = Tensor::zeros(gout.rows(), 1);
                    for i in 0..gout.rows() {
                        g.set(i, 0, gout.row(i).iter().sum());
                    }
                    self.add_grad(v, g);
                }
            }
            Op::MulRowVec { a, v } => {
                if self.requires(a) {
                    let vv = self.value(v);
                    let mut g = gout.clone();
                    for i in 0..g.rows() {
                        let vrow = vv.row(0).to_vec();
                        for (gv, x) in g.row_mut(i).iter_mut().zip(vrow) {
                            *gv *= x;
                        }
                    }
                    self.add_grad(a, g);
                }
                if self.requires(v) {
                    let va = self.value(a);
                    let mut g = Tensor::zeros(1, gout.cols());
                    for i in 0..gout.rows() {
                        for j in 0..gout.cols() {
                            let cur = g.get(0, j);
                            g.set(0, j, cur + gout.get(i, j) * va.get(i, j));
                        }
                    }
                    self.add_grad(v, g);
                }
            }
            Op::LogSumExpRows { a } => {
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let gi = gout.get(i, 0);
                    let yi = y.get(i, 0);
                    let xrow = x.row(i).to_vec();
                    for (gv, xv) in g.row_mut(i).iter_mut().zip(xrow) {
                        *gv = gi * (xv - yi).exp();
                    }
                }
                self.add_grad(a, g);
            }
            Op::LogSumExpCols { a } => {
                let x = self.value(a);
                let y = &self.nodes[idx].value;
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        g.set(i, j, gout.get(0, j) * (x.get(i, j) - y.get(0, j)).exp());
                    }
                }
                self.add_grad(a, g);
            }
            Op::PairwiseSqDist { a, b } => {
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                if self.requires(a) {
                    // dA_i = 2 * (rowsum_i(dC) * A_i - (dC @ B)_i)
                    let cross = matmul(gout, &vb);
                    let mut g = Tensor::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        let s: f64 = gout.row(i).iter().sum();
                        let arow = va.row(i);
                        let crow = cross.row(i);
                        for ((gv, &av), &cv) in g.row_mut(i).iter_mut().zip(arow).zip(crow) {
                            *gv = 2.0 * (s * av - cv);
                        }
                    }
                    self.add_grad(a, g);
                }
                if self.requires(b) {
                    let cross = matmul_tn(gout, &va); // (dC^T @ A), m x d
                    let csum = column_sums(gout); // 1 x m
                    let mut g = Tensor::zeros(vb.rows(), vb.cols());
                    for j in 0..vb.rows() {
                        let s = csum.get(0, j);
                        let brow = vb.row(j);
                        let crow = cross.row(j);
                        for ((gv, &bv), &cv) in g.row_mut(j).iter_mut().zip(brow).zip(crow) {
                            *gv = 2.0 * (s * bv - cv);
                        }
                    }
                    self.add_grad(b, g);
                }
            }
            Op::SumAll { a } => {
                let d = gout.get(0, 0);
                let v = self.value(a);
                self.add_grad(a, Tensor::from_fn(v.rows(), v.cols(), |_, _| d));
            }
            Op::MeanAll { a } => {
                let v = self.value(a);
                let d = gout.get(0, 0) / v.len() as f64;
                self.add_grad(a, Tensor::from_fn(v.rows(), v.cols(), |_, _| d));
            }
            Op::MeanRows { a } => {
                let v = self.value(a);
                let m = v.cols() as f64;
                let mut g = Tensor::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    let d = gout.get(i, 0) / m;
                    for gv in g.row_mut(i) {
                        *gv = d;
                    }
                }
                self.add_grad(a, g);
            }
            Op::MeanCols { a } => {
                let v = self.value(a);
                let n = v.rows() as f64;
                let mut g = Tensor::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    for j in 0..v.cols() {
                        g.set(i, j, gout.get(0, j) / n);
                    }
                }
                self.add_grad(a, g);
            }
            Op::Dot { a, b } => {
                let d = gout.get(0, 0);
                if self.requires(a) {
                    self.add_grad(a, self.value(b).map(|y| d * y));
                }
                if self.requires(b) {
                    self.add_grad(b, self.value(a).map(|x| d * x));
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must deterministically construct the scalar loss from the given
/// parameter nodes. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`. The numeric
/// side re-evaluates the loss at `theta +- step`, so it is independent of
/// the backward pass it checks.
pub fn grad_check<F>(mut build: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(step > 0.0, "grad_check step must be positive");

    let eval = |params: &[Tensor], build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<_>>()?;
        let root = build(&mut g, &ids)?;
        Ok(g.scalar_value(root))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<_>>()?;
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut flat_index = 0usize;
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = eval(&work, &mut build);
            work[pi].data_mut()[e] = orig - step;
            let down = eval(&work, &mut build);
            work[pi].data_mut()[e] = orig;

            let (up, down) = match (up, down) {
                (Ok(u), Ok(d)) if u.is_finite() && d.is_finite() => (u, d),
                _ => {
                    return Err(Error::NonFiniteProbe {
                        param_index: flat_index,
                    })
                }
            };
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            max_rel = max_rel.max(rel);
            flat_index += 1;
        }
    }
    Ok(max_rel)
}
