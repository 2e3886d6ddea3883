//! Tape-style computation graph for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Node indices are
//! a topological order, so [`Graph::backward`] is a single reverse sweep.
//! Operations take `&self` so calls nest naturally:
//!
//! ```
//! use invjoint_core::tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
//! let loss = g.sum(g.mul(x, x).unwrap()).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expand {
    Full,
    Row,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Expand, Expand),
    Sub(Var, Var, Expand, Expand),
    Mul(Var, Var, Expand, Expand),
    Div(Var, Var, Expand, Expand),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    NormLast(Var),
    NormalizeLast(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    GatherLast(Var, Vec<usize>),
    Max(Var, usize),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation graph.
///
/// In strict mode (the default) every operation fails with
/// [`Error::Numeric`] instead of producing a NaN or infinity.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    strict: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar root with respect to every node that feeds it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn expand_index(kind: Expand, k: usize, cols: usize) -> usize {
    match kind {
        Expand::Full => k,
        Expand::Row => k % cols,
        Expand::Scalar => 0,
    }
}

/// Reduces a full-shaped gradient back onto an operand that was expanded.
fn reduce_to(kind: Expand, full: &[f64], operand: &Tensor, cols: usize) -> Tensor {
    match kind {
        Expand::Full => Tensor {
            shape: operand.shape.clone(),
            data: full.to_vec(),
        },
        Expand::Row => {
            let mut out = vec![0.0; cols];
            for (k, v) in full.iter().enumerate() {
                out[k % cols] += v;
            }
            Tensor {
                shape: operand.shape.clone(),
                data: out,
            }
        }
        Expand::Scalar => Tensor {
            shape: operand.shape.clone(),
            data: vec![full.iter().sum()],
        },
    }
}

fn last_axis_reduced_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 | 1 => Vec::new(),
        n => shape[..n - 1].to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict: true,
        }
    }

    /// A graph that lets non-finite values through (used by the
    /// finite-difference probes, which may step outside a domain).
    pub fn lenient() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict: false,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::numeric(name, "non-finite result"));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Registers an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape.clone()
    }

    pub fn item(&self, var: Var) -> Result<f64> {
        self.nodes.borrow()[var.0].value.item()
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Expand, Expand)> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].value.shape, &nodes[b.0].value.shape);
        let is_scalar = |s: &Vec<usize>| s.iter().product::<usize>() == 1 && s.len() <= 1;
        if sa == sb {
            Ok((sa.clone(), Expand::Full, Expand::Full))
        } else if is_scalar(sb) {
            Ok((sa.clone(), Expand::Full, Expand::Scalar))
        } else if is_scalar(sa) {
            Ok((sb.clone(), Expand::Scalar, Expand::Full))
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            Ok((sa.clone(), Expand::Full, Expand::Row))
        } else if sb.len() == 2 && sa.len() == 1 && sb[1] == sa[0] {
            Ok((sb.clone(), Expand::Row, Expand::Full))
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Expand, Expand) -> Op,
    ) -> Result<Var> {
        let (shape, ea, eb) = self.broadcast(name, a, b)?;
        let cols = shape.last().copied().unwrap_or(1);
        let value = {
            let nodes = self.nodes.borrow();
            let (da, db) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|k| f(da[expand_index(ea, k, cols)], db[expand_index(eb, k, cols)]))
                .collect();
            Tensor { shape, data }
        };
        self.push(value, make(a, b, ea, eb), self.needs(&[a, b]), name)
    }

    /// Elementwise sum. A rank-1 operand broadcasts over the leading axis of a
    /// rank-2 one; a one-element operand broadcasts everywhere.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.strict {
            let nodes = self.nodes.borrow();
            if nodes[b.0].value.data.iter().any(|&v| v == 0.0) {
                return Err(Error::numeric("div", "division by zero"));
            }
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, op, self.needs(&[a]), name)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::Shift(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if self.strict && self.nodes.borrow()[a.0].value.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::numeric("log", "non-positive argument"));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
            }
            matmul_raw(ta, tb)
        };
        self.push(value, Op::MatMul(a, b), self.needs(&[a, b]), "matmul")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(Error::shape("transpose", format!("{:?}", t.shape)));
            }
            transpose_raw(t)
        };
        self.push(value, Op::Transpose(a), self.needs(&[a]), "transpose")
    }

    fn require_rank(&self, op: &'static str, a: Var, ranks: &[usize]) -> Result<()> {
        let rank = self.nodes.borrow()[a.0].value.rank();
        if ranks.contains(&rank) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("unsupported rank {rank}")))
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.require_rank("softmax", a, &[1, 2])?;
        let value = {
            let nodes = self.nodes.borrow();
            rowwise(&nodes[a.0].value, |row, out| {
                out.copy_from_slice(&super::softmax(row));
            })
        };
        self.push(value, Op::SoftmaxLast(a), self.needs(&[a]), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.require_rank("log_softmax", a, &[1, 2])?;
        let value = {
            let nodes = self.nodes.borrow();
            rowwise(&nodes[a.0].value, |row, out| {
                let lse = logsumexp(row);
                for (o, v) in out.iter_mut().zip(row) {
                    *o = v - lse;
                }
            })
        };
        self.push(value, Op::LogSoftmaxLast(a), self.needs(&[a]), "log_softmax")
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let total = self.nodes.borrow()[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), self.needs(&[a]), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            t.data.iter().sum::<f64>() / t.numel() as f64
        };
        self.push(Tensor::scalar(value), Op::Mean(a), self.needs(&[a]), "mean")
    }

    /// Sums the last axis: `[m, n] -> [m]`, `[n] -> []`.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        self.require_rank("sum_last", a, &[1, 2])?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let data = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
            Tensor {
                shape: last_axis_reduced_shape(&t.shape),
                data,
            }
        };
        self.push(value, Op::SumLast(a), self.needs(&[a]), "sum_last")
    }

    /// Averages over the leading axis: `[m, n] -> [n]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        self.require_rank("mean_rows", a, &[2])?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (m, n) = (t.shape[0], t.shape[1]);
            let mut data = vec![0.0; n];
            for i in 0..m {
                for (d, v) in data.iter_mut().zip(t.row(i)) {
                    *d += v;
                }
            }
            data.iter_mut().for_each(|d| *d /= m as f64);
            Tensor { shape: vec![n], data }
        };
        self.push(value, Op::MeanRows(a), self.needs(&[a]), "mean_rows")
    }

    /// Euclidean norm over the last axis. A zero-norm row is a numeric error.
    pub fn norm_last(&self, a: Var) -> Result<Var> {
        self.require_rank("norm_last", a, &[1, 2])?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let data: Vec<f64> = (0..t.rows()).map(|i| l2(t.row(i))).collect();
            if data.iter().any(|&n| n == 0.0) {
                return Err(Error::numeric("norm_last", "zero-norm row"));
            }
            Tensor {
                shape: last_axis_reduced_shape(&t.shape),
                data,
            }
        };
        self.push(value, Op::NormLast(a), self.needs(&[a]), "norm_last")
    }

    /// Scales every row over the last axis to unit norm.
    pub fn normalize(&self, a: Var) -> Result<Var> {
        self.require_rank("normalize", a, &[1, 2])?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let mut zero = false;
            let out = rowwise(t, |row, out| {
                let n = l2(row);
                zero |= n == 0.0;
                for (o, v) in out.iter_mut().zip(row) {
                    *o = v / n;
                }
            });
            if zero {
                return Err(Error::numeric("normalize", "zero-norm row"));
            }
            out
        };
        self.push(value, Op::NormalizeLast(a), self.needs(&[a]), "normalize")
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_matrix(&self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize(a)?;
        let nb = self.normalize(b)?;
        self.matmul(na, self.transpose(nb)?)
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(self.normalize(a)?, self.normalize(b)?)?;
        self.sum(prod)
    }

    /// Stacks along the leading axis. Rank-1 parts concatenate into a vector;
    /// rank-2 parts must share their column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let mut data = Vec::new();
            let mut rows = 0;
            if first.rank() <= 1 {
                for p in parts {
                    let t = &nodes[p.0].value;
                    if t.rank() > 1 {
                        return Err(Error::shape("concat_rows", "mixed ranks"));
                    }
                    data.extend_from_slice(&t.data);
                }
                Tensor {
                    shape: vec![data.len()],
                    data,
                }
            } else {
                let cols = first.shape[1];
                for p in parts {
                    let t = &nodes[p.0].value;
                    if t.rank() != 2 || t.shape[1] != cols {
                        return Err(Error::shape(
                            "concat_rows",
                            format!("{:?} vs {:?}", t.shape, first.shape),
                        ));
                    }
                    rows += t.shape[0];
                    data.extend_from_slice(&t.data);
                }
                Tensor {
                    shape: vec![rows, cols],
                    data,
                }
            }
        };
        self.push(
            value,
            Op::ConcatRows(parts.to_vec()),
            self.needs(parts),
            "concat_rows",
        )
    }

    /// Concatenates along the last axis. Rank-1 parts form a longer vector;
    /// rank-2 parts must share their row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let rows = first.rows();
            let rank = first.rank().max(1);
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rank().max(1) != rank || t.rows() != rows || rank > 2 {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("{:?} vs {:?}", t.shape, first.shape),
                    ));
                }
                widths.push(t.last_dim());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(i));
                }
            }
            let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
            Tensor { shape, data }
        };
        self.push(
            value,
            Op::ConcatCols(parts.to_vec()),
            self.needs(parts),
            "concat_cols",
        )
    }

    /// Selects rows (or elements of a vector) by index, with repetition allowed.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::shape("select_rows", "empty index list"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (rows, cols) = match t.rank() {
                1 => (t.shape[0], 1),
                2 => (t.shape[0], t.shape[1]),
                r => return Err(Error::shape("select_rows", format!("rank {r}"))),
            };
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(Error::shape("select_rows", format!("index {i} >= {rows}")));
                }
                data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
            }
            let shape = if t.rank() == 1 {
                vec![indices.len()]
            } else {
                vec![indices.len(), cols]
            };
            Tensor { shape, data }
        };
        self.push(
            value,
            Op::SelectRows(a, indices.to_vec()),
            self.needs(&[a]),
            "select_rows",
        )
    }

    /// Picks `a[i, indices[i]]` for every row: `[m, n] -> [m]`.
    pub fn gather_last(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 || t.shape[0] != indices.len() {
                return Err(Error::shape(
                    "gather_last",
                    format!("{:?} with {} indices", t.shape, indices.len()),
                ));
            }
            let cols = t.shape[1];
            let mut data = Vec::with_capacity(indices.len());
            for (i, &j) in indices.iter().enumerate() {
                if j >= cols {
                    return Err(Error::shape("gather_last", format!("index {j} >= {cols}")));
                }
                data.push(t.data[i * cols + j]);
            }
            Tensor {
                shape: vec![indices.len()],
                data,
            }
        };
        self.push(
            value,
            Op::GatherLast(a, indices.to_vec()),
            self.needs(&[a]),
            "gather_last",
        )
    }

    /// Largest element as a scalar; the gradient flows to the first maximiser.
    pub fn max(&self, a: Var) -> Result<Var> {
        let (value, at) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.0].value.data;
            let at = super::argmax(d);
            (d[at], at)
        };
        self.push(Tensor::scalar(value), Op::Max(a, at), self.needs(&[a]), "max")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.reshape(shape)?;
        self.push(value, Op::Reshape(a), self.needs(&[a]), "reshape")
    }

    /// Computes the gradient of a one-element `root` with respect to every
    /// node that requires it. The graph itself is not modified, so several
    /// roots of one graph can be differentiated independently.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = nodes
            .get(root.0)
            .ok_or_else(|| Error::contract("backward root is not on this graph"))?;
        if root_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root_node.value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(&root_node.value.shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let contributions = local_grads(&nodes, node, &upstream);
            grads[i] = Some(upstream);
            for (parent, g) in contributions {
                if !nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn local_grads(nodes: &[Node], node: &Node, up: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b, ea, eb) => {
            let cols = out.last_dim();
            vec![
                (*a, reduce_to(*ea, &up.data, val(*a), cols)),
                (*b, reduce_to(*eb, &up.data, val(*b), cols)),
            ]
        }
        Op::Sub(a, b, ea, eb) => {
            let cols = out.last_dim();
            let neg: Vec<f64> = up.data.iter().map(|v| -v).collect();
            vec![
                (*a, reduce_to(*ea, &up.data, val(*a), cols)),
                (*b, reduce_to(*eb, &neg, val(*b), cols)),
            ]
        }
        Op::Mul(a, b, ea, eb) => {
            let cols = out.last_dim();
            let (da, db) = (&val(*a).data, &val(*b).data);
            let ga: Vec<f64> = (0..up.numel())
                .map(|k| up.data[k] * db[expand_index(*eb, k, cols)])
                .collect();
            let gb: Vec<f64> = (0..up.numel())
                .map(|k| up.data[k] * da[expand_index(*ea, k, cols)])
                .collect();
            vec![
                (*a, reduce_to(*ea, &ga, val(*a), cols)),
                (*b, reduce_to(*eb, &gb, val(*b), cols)),
            ]
        }
        Op::Div(a, b, ea, eb) => {
            let cols = out.last_dim();
            let (da, db) = (&val(*a).data, &val(*b).data);
            let ga: Vec<f64> = (0..up.numel())
                .map(|k| up.data[k] / db[expand_index(*eb, k, cols)])
                .collect();
            let gb: Vec<f64> = (0..up.numel())
                .map(|k| {
                    let y = db[expand_index(*eb, k, cols)];
                    -up.data[k] * da[expand_index(*ea, k, cols)] / (y * y)
                })
                .collect();
            vec![
                (*a, reduce_to(*ea, &ga, val(*a), cols)),
                (*b, reduce_to(*eb, &gb, val(*b), cols)),
            ]
        }
        Op::Scale(a, c) => vec![(*a, up.map(|g| g * c))],
        Op::Shift(a) => vec![(*a, up.clone())],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            vec![
                (*a, matmul_raw(up, &transpose_raw(tb))),
                (*b, matmul_raw(&transpose_raw(ta), up)),
            ]
        }
        Op::Transpose(a) => vec![(*a, transpose_raw(up))],
        Op::Exp(a) => vec![(*a, up.zip_map(out, |g, y| g * y))],
        Op::Log(a) => vec![(*a, up.zip_map(val(*a), |g, x| g / x))],
        Op::Sigmoid(a) => vec![(*a, up.zip_map(out, |g, y| g * y * (1.0 - y)))],
        Op::Relu(a) => vec![(*a, up.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::SoftmaxLast(a) => {
            let cols = out.last_dim();
            let mut data = vec![0.0; out.numel()];
            for i in 0..out.rows() {
                let (y, g) = (out.row(i), up.row(i));
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    data[i * cols + j] = y[j] * (g[j] - dot);
                }
            }
            vec![(
                *a,
                Tensor {
                    shape: out.shape.clone(),
                    data,
                },
            )]
        }
        Op::LogSoftmaxLast(a) => {
            let cols = out.last_dim();
            let mut data = vec![0.0; out.numel()];
            for i in 0..out.rows() {
                let (y, g) = (out.row(i), up.row(i));
                let gsum: f64 = g.iter().sum();
                for j in 0..cols {
                    data[i * cols + j] = g[j] - y[j].exp() * gsum;
                }
            }
            vec![(
                *a,
                Tensor {
                    shape: out.shape.clone(),
                    data,
                },
            )]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(&val(*a).shape, up.data[0]))],
        Op::Mean(a) => {
            let t = val(*a);
            vec![(*a, Tensor::full(&t.shape, up.data[0] / t.numel() as f64))]
        }
        Op::SumLast(a) => {
            let t = val(*a);
            let cols = t.last_dim();
            let data = (0..t.numel()).map(|k| up.data[k / cols]).collect();
            vec![(
                *a,
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )]
        }
        Op::MeanRows(a) => {
            let t = val(*a);
            let (m, n) = (t.shape[0], t.shape[1]);
            let data = (0..m * n).map(|k| up.data[k % n] / m as f64).collect();
            vec![(
                *a,
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )]
        }
        Op::NormLast(a) => {
            let t = val(*a);
            let cols = t.last_dim();
            let data = (0..t.numel())
                .map(|k| up.data[k / cols] * t.data[k] / out.data[k / cols])
                .collect();
            vec![(
                *a,
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )]
        }
        Op::NormalizeLast(a) => {
            let t = val(*a);
            let cols = t.last_dim();
            let mut data = vec![0.0; t.numel()];
            for i in 0..t.rows() {
                let n = l2(t.row(i));
                let (y, g) = (out.row(i), up.row(i));
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    data[i * cols + j] = (g[j] - y[j] * dot) / n;
                }
            }
            vec![(
                *a,
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )]
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let t = val(*p);
                    let n = t.numel();
                    let g = Tensor {
                        shape: t.shape.clone(),
                        data: up.data[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    (*p, g)
                })
                .collect()
        }
        Op::ConcatCols(parts) => {
            let total = out.last_dim();
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let t = val(*p);
                    let w = t.last_dim();
                    let mut data = Vec::with_capacity(t.numel());
                    for i in 0..t.rows() {
                        let start = i * total + offset;
                        data.extend_from_slice(&up.data[start..start + w]);
                    }
                    offset += w;
                    (
                        *p,
                        Tensor {
                            shape: t.shape.clone(),
                            data,
                        },
                    )
                })
                .collect()
        }
        Op::SelectRows(a, indices) => {
            let t = val(*a);
            let cols = if t.rank() == 1 { 1 } else { t.shape[1] };
            let mut data = vec![0.0; t.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..cols {
                    data[i * cols + j] += up.data[r * cols + j];
                }
            }
            vec![(
                *a,
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )]
        }
        Op::GatherLast(a, indices) => {
            let t = val(*a);
            let cols = t.shape[1];
            let mut data = vec![0.0; t.numel()];
            for (i, &j) in indices.iter().enumerate() {
                data[i * cols + j] += up.data[i];
            }
            vec![(
                *a,
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            )]
        }
        Op::Max(a, at) => {
            let t = val(*a);
            let mut g = Tensor::zeros(&t.shape);
            g.data[*at] = up.data[0];
            vec![(*a, g)]
        }
        Op::Reshape(a) => vec![(
            *a,
            Tensor {
                shape: val(*a).shape.clone(),
                data: up.data.clone(),
            },
        )],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn rowwise(t: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let cols = t.last_dim();
    let mut data = vec![0.0; t.numel()];
    for i in 0..t.rows() {
        f(t.row(i), &mut data[i * cols..(i + 1) * cols]);
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            for (o, y) in out.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data,
    }
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape[0], t.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = t.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()).unwrap(), true)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[0.0, 0.0]);
        assert_eq!(g.value(g.softmax(x).unwrap()).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_of_ln2_and_zero() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[2f64.ln(), 0.0]);
        let p = g.value(g.softmax(x).unwrap());
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[0.3, -1.2, 4.0]);
        let c = g.item(g.cosine_similarity(x, x).unwrap()).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[1.0, -2.0, 3.0]);
        let grads = g.backward(g.sum(x).unwrap()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_roots() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn strict_mode_flags_domain_errors() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[0.0, 1.0]);
        assert!(matches!(g.log(x), Err(Error::Numeric { .. })));
        let big = vec_leaf(&g, &[1000.0]);
        assert!(matches!(g.exp(big), Err(Error::Numeric { .. })));

        let lax = Graph::lenient();
        let x = vec_leaf(&lax, &[0.0]);
        assert!(lax.value(lax.log(x).unwrap()).data()[0].is_infinite());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Graph::new();
        let a = vec_leaf(&g, &[1.0, 2.0]);
        let b = vec_leaf(&g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let m = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(g.matmul(m, m), Err(Error::Shape { .. })));
    }

    #[test]
    fn row_broadcast_reduces_gradient() {
        let g = Graph::new();
        let m = g.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(), true);
        let b = vec_leaf(&g, &[10.0, 20.0]);
        let s = g.add(m, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let grads = g.backward(g.sum(s).unwrap()).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap(), true);
        let y = g
            .log_softmax(g.matmul(x, g.transpose(x).unwrap()).unwrap())
            .unwrap();
        let loss = g.mean(y).unwrap();
        let first = g.backward(loss).unwrap().get(x).unwrap().clone();
        let second = g.backward(loss).unwrap().get(x).unwrap().clone();
        assert_eq!(first, second);
    }

    #[test]
    fn concat_and_select_route_gradients() {
        let g = Graph::new();
        let a = vec_leaf(&g, &[1.0, 2.0]);
        let b = vec_leaf(&g, &[3.0]);
        let c = g.concat_rows(&[a, b]).unwrap();
        let picked = g.select_rows(c, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[3.0, 1.0, 3.0]);
        let grads = g.backward(g.sum(picked).unwrap()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = vec_leaf(&g, &[1.0, 2.0]);
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let grads = g.backward(g.sum(g.mul(x, c).unwrap()).unwrap()).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }
}
