use super::kernels::{gemm, MatRef};
use super::{OpKind, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize { input: Var, eps: f64 },
    /// Gate activations `i, f, o, g, tanh(c')` saved for the backward pass.
    LstmPointwise { pre: Var, c: Var, cache: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// How the smaller operand of a binary elementwise op is repeated.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// The right operand (this many elements) repeats over the left.
    Rhs(usize),
    /// The left operand repeats over the right.
    Lhs(usize),
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast(op: OpKind, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if is_suffix(b, a) || b == [1] {
        Ok((a.to_vec(), Broadcast::Rhs(b.iter().product())))
    } else if is_suffix(a, b) || a == [1] {
        Ok((b.to_vec(), Broadcast::Lhs(a.iter().product())))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

use super::fastmath::{exp, sigmoid, tanh};

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Splits a shape around `axis` into (outer, dim, inner) extents.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// A recording of one forward computation.
///
/// Nodes are appended in evaluation order, so append order is a topological
/// order and [`Tape::backward`] simply walks the nodes in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    recorded: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of values held by the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations not yet consumed by backward.
    pub fn recorded_ops(&self) -> usize {
        self.recorded
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward reached this value.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op_kind: OpKind, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_kind });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad {
            self.recorded += 1;
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m × k] · [k × n] → [m × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push(OpKind::MatMul, value, Op::MatMul(a, b), &[a, b])
    }

    /// `[B × m × k] · [B × k × n] → [B × m × n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::BatchMatMul,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        self.push(OpKind::BatchMatMul, value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// `a · b + c` where `c` is `[m × n]` or a row `[n]` added to every row.
    pub fn affine(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (sa, sb, sc) = (self.shape(a), self.shape(b), self.shape(c));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Affine,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sc != [m, n] && sc != [n] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::Affine,
                lhs: vec![m, n],
                rhs: sc.to_vec(),
            });
        }
        let cv = self.value(c).data();
        let mut out = if cv.len() == m * n {
            cv.to_vec()
        } else {
            let mut o = Vec::with_capacity(m * n);
            for _ in 0..m {
                o.extend_from_slice(cv);
            }
            o
        };
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            true,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push(OpKind::Affine, value, Op::Affine(a, b, c), &[a, b, c])
    }

    /// LSTM cell nonlinearities. `pre: [B × 4h]` holds the input, forget,
    /// output and candidate pre-activations; `c: [B × h]` is the previous
    /// cell. Returns `[B × 2h]` with the new hidden state in the first `h`
    /// columns of each row and the new cell in the last `h`.
    pub fn lstm_pointwise(&mut self, pre: Var, c: Var) -> Result<Var> {
        let (sp, sc) = (self.shape(pre), self.shape(c));
        if sp.len() != 2 || sc.len() != 2 || sp[0] != sc[0] || sp[1] != 4 * sc[1] {
            return Err(TensorError::ShapeMismatch {
                op: OpKind::LstmPointwise,
                lhs: sp.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let (batch, h) = (sc[0], sc[1]);
        let (pv, cv) = (self.value(pre).data(), self.value(c).data());
        let mut out = vec![0.0; batch * 2 * h];
        let mut cache = vec![0.0; batch * 5 * h];
        for b in 0..batch {
            let p = &pv[b * 4 * h..(b + 1) * 4 * h];
            let cp = &cv[b * h..(b + 1) * h];
            let (s_out, c_out) = out[b * 2 * h..(b + 1) * 2 * h].split_at_mut(h);
            let gates = &mut cache[b * 5 * h..(b + 1) * 5 * h];
            let (act, tc) = gates.split_at_mut(4 * h);
            for (a, &z) in act[..3 * h].iter_mut().zip(&p[..3 * h]) {
                *a = sigmoid(z);
            }
            for (a, &z) in act[3 * h..].iter_mut().zip(&p[3 * h..]) {
                *a = tanh(z);
            }
            let (i, rest) = act.split_at(h);
            let (f, rest) = rest.split_at(h);
            let (o, g) = rest.split_at(h);
            for j in 0..h {
                let cn = f[j] * cp[j] + i[j] * g[j];
                c_out[j] = cn;
                tc[j] = tanh(cn);
                s_out[j] = o[j] * tc[j];
            }
        }
        let value = Tensor::new(&[batch, 2 * h], out)?;
        self.push(OpKind::LstmPointwise, value, Op::LstmPointwise { pre, c, cache }, &[pre, c])
    }

    fn elementwise(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let (shape, bc) = broadcast(kind, self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs(n) => da
                .chunks(n)
                .flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect(),
            Broadcast::Lhs(n) => db
                .chunks(n)
                .flat_map(|c| da.iter().zip(c).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        Ok((Tensor::new(&shape, out)?, bc))
    }

    /// Elementwise sum. The smaller operand may broadcast over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(OpKind::Add, a, b, |x, y| x + y)?;
        self.push(OpKind::Add, value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(OpKind::Sub, a, b, |x, y| x - y)?;
        self.push(OpKind::Sub, value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(OpKind::Mul, a, b, |x, y| x * y)?;
        self.push(OpKind::Mul, value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.map(x, |v| c * v)?;
        self.push(OpKind::Scale, value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.map(x, |v| v + c)?;
        self.push(OpKind::AddScalar, value, Op::AddScalar(x), &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(TensorError::InvalidArgument {
                    op: OpKind::Concat,
                    msg: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: OpKind::Concat,
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = around_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push(OpKind::Concat, value, op, inputs)
    }

    /// Copies `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: OpKind::Slice,
                msg: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, dim, inner) = around_axis(&shape, axis);
        let width = (end - start) * inner;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&data[base..base + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let value = Tensor::new(&new_shape, out)?;
        self.push(OpKind::Slice, value, Op::Slice { input: x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape).map_err(|_| {
            TensorError::ShapeMismatch {
                op: OpKind::Reshape,
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            }
        })?;
        self.push(OpKind::Reshape, value, Op::Reshape(x), &[x])
    }

    /// Row lookup: `table[ids[i], :]` for each `i`, giving `[ids.len() × dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: OpKind::Gather,
                msg: format!("table shape {shape:?} with {} ids", ids.len()),
            });
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: OpKind::Gather,
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(&[ids.len(), dim], out)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push(OpKind::Gather, value, op, &[table])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, sigmoid)?;
        self.push(OpKind::Sigmoid, value, Op::Sigmoid(x), &[x])
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, log_sigmoid)?;
        self.push(OpKind::LogSigmoid, value, Op::LogSigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, tanh)?;
        self.push(OpKind::Tanh, value, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::exp)?;
        self.push(OpKind::Exp, value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: OpKind::Log,
                value: bad,
            });
        }
        let value = self.map(x, f64::ln)?;
        self.push(OpKind::Log, value, Op::Log(x), &[x])
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let width = *v.shape().last().expect("non-empty shape");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = exp(*e - max);
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push(OpKind::Softmax, value, Op::Softmax(x), &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(OpKind::Sum, Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(OpKind::Mean, Tensor::scalar(mean), Op::Mean(x), &[x])
    }

    /// Scales every vector along the last axis to unit length: `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: OpKind::L2Normalize,
                msg: format!("eps must be non-negative, got {eps}"),
            });
        }
        let v = self.value(x);
        let width = *v.shape().last().expect("non-empty shape");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            let denom = norm + eps;
            if denom > 0.0 {
                row.iter_mut().for_each(|e| *e /= denom);
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push(OpKind::L2Normalize, value, Op::L2Normalize { input: x, eps }, &[x])
    }

    // ---- backward ----------------------------------------------------------

    /// Adds the gradient contribution computed by `f` into `v`'s gradient buffer.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let mut g = node.grad.take().unwrap_or_else(|| vec![0.0; len]);
        f(&self.nodes, &mut g);
        self.nodes[v.0].grad = Some(g);
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are added (`+=`) to every reachable value with
    /// `requires_grad`. The recorded operations are consumed, so a second call
    /// on the same tape fails with [`TensorError::EmptyTape`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1] {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if self.recorded == 0 {
            return Err(TensorError::EmptyTape);
        }
        match &mut self.nodes[loss.0].grad {
            Some(g) => g[0] += 1.0,
            slot @ None => *slot = Some(vec![1.0]),
        }
        for idx in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.backprop_node(idx, &op, &g);
            self.nodes[idx].grad = Some(g);
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.recorded = 0;
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, g: &[f64]) {
        let out = Var(idx);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.accumulate(a, |nodes, ga| {
                    let bv = nodes[b.0].value.data();
                    gemm(MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), ga, true);
                });
                self.accumulate(b, |nodes, gb| {
                    let av = nodes[a.0].value.data();
                    gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, n), gb, true);
                });
            }
            Op::Affine(a, b, c) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.accumulate(a, |nodes, ga| {
                    let bv = nodes[b.0].value.data();
                    gemm(MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), ga, true);
                });
                self.accumulate(b, |nodes, gb| {
                    let av = nodes[a.0].value.data();
                    gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, n), gb, true);
                });
                self.accumulate(c, |_, gc| reduce_into(gc, g, 1.0));
            }
            Op::LstmPointwise { pre, c, ref cache } => {
                let h = self.shape(c)[1];
                let batch = self.shape(c)[0];
                let mut d_cell = vec![0.0; batch * h];
                for b in 0..batch {
                    let gates = &cache[b * 5 * h..(b + 1) * 5 * h];
                    let (gs, gc) = g[b * 2 * h..(b + 1) * 2 * h].split_at(h);
                    for j in 0..h {
                        let (o, tc) = (gates[2 * h + j], gates[4 * h + j]);
                        d_cell[b * h + j] = gc[j] + gs[j] * o * (1.0 - tc * tc);
                    }
                }
                self.accumulate(pre, |nodes, gp| {
                    let cv = nodes[c.0].value.data();
                    for b in 0..batch {
                        let gates = &cache[b * 5 * h..(b + 1) * 5 * h];
                        let gs = &g[b * 2 * h..b * 2 * h + h];
                        let dp = &mut gp[b * 4 * h..(b + 1) * 4 * h];
                        for j in 0..h {
                            let (i, f, o, gg, tc) =
                                (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j], gates[4 * h + j]);
                            let dc = d_cell[b * h + j];
                            dp[j] += dc * gg * i * (1.0 - i);
                            dp[h + j] += dc * cv[b * h + j] * f * (1.0 - f);
                            dp[2 * h + j] += gs[j] * tc * o * (1.0 - o);
                            dp[3 * h + j] += dc * i * (1.0 - gg * gg);
                        }
                    }
                });
                self.accumulate(c, |_, gcell| {
                    for b in 0..batch {
                        let gates = &cache[b * 5 * h..(b + 1) * 5 * h];
                        for j in 0..h {
                            gcell[b * h + j] += d_cell[b * h + j] * gates[h + j];
                        }
                    }
                });
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(b)[2];
                self.accumulate(a, |nodes, ga| {
                    let bv = nodes[b.0].value.data();
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                self.accumulate(b, |nodes, gb| {
                    let av = nodes[a.0].value.data();
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(a, |_, ga| reduce_into(ga, g, 1.0));
                self.accumulate(b, |_, gb| reduce_into(gb, g, sign));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |nodes, ga| {
                    mul_grad_into(ga, g, nodes[b.0].value.data());
                });
                self.accumulate(b, |nodes, gb| {
                    mul_grad_into(gb, g, nodes[a.0].value.data());
                });
            }
            Op::Scale(x, c) => self.accumulate(x, |_, gx| {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s);
            }),
            Op::AddScalar(x) | Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) => {
                let scalar_out = matches!(op, Op::Sum(_) | Op::Mean(_));
                self.accumulate(x, |_, gx| {
                    if scalar_out {
                        let mut s = g[0];
                        if matches!(op, Op::Mean(_)) {
                            s /= gx.len() as f64;
                        }
                        gx.iter_mut().for_each(|d| *d += s);
                    } else {
                        gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                })
            }
            Op::Concat { ref inputs, axis } => {
                let shape = self.shape(out).to_vec();
                let (outer, dim, inner) = around_axis(&shape, axis);
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[axis] * inner;
                    self.accumulate(v, |_, gv| {
                        for o in 0..outer {
                            let src = &g[o * dim * inner + offset..][..width];
                            let dst = &mut gv[o * width..(o + 1) * width];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = around_axis(self.shape(input), axis);
                let width = self.shape(out)[axis] * inner;
                self.accumulate(input, |_, gx| {
                    for o in 0..outer {
                        let dst = &mut gx[o * dim * inner + start * inner..][..width];
                        let src = &g[o * width..(o + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Gather { table, ref ids } => {
                let dim = self.shape(table)[1];
                self.accumulate(table, |_, gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        let src = &g[row * dim..(row + 1) * dim];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Sigmoid(x) => self.accumulate(x, |nodes, gx| {
                let y = nodes[idx].value.data();
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * y * (1.0 - y);
                }
            }),
            Op::LogSigmoid(x) => self.accumulate(x, |nodes, gx| {
                let xv = nodes[x.0].value.data();
                for ((d, &s), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *d += s * sigmoid(-xi);
                }
            }),
            Op::Tanh(x) => self.accumulate(x, |nodes, gx| {
                let y = nodes[idx].value.data();
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => self.accumulate(x, |nodes, gx| {
                let y = nodes[idx].value.data();
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(y) {
                    *d += s * y;
                }
            }),
            Op::Log(x) => self.accumulate(x, |nodes, gx| {
                let xv = nodes[x.0].value.data();
                for ((d, &s), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *d += s / xi;
                }
            }),
            Op::Softmax(x) => self.accumulate(x, |nodes, gx| {
                let y = &nodes[idx].value;
                let width = *y.shape().last().expect("non-empty shape");
                for ((dx, gy), yr) in gx
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(y.data().chunks(width))
                {
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &s), &yi) in dx.iter_mut().zip(gy).zip(yr) {
                        *d += yi * (s - dot);
                    }
                }
            }),
            Op::L2Normalize { input, eps } => self.accumulate(input, |nodes, gx| {
                let xv = &nodes[input.0].value;
                let width = *xv.shape().last().expect("non-empty shape");
                for ((dx, gy), xr) in gx
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(xv.data().chunks(width))
                {
                    let norm = xr.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let denom = norm + eps;
                    if denom == 0.0 {
                        continue;
                    }
                    let proj = if norm > 0.0 {
                        gy.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / (norm * denom * denom)
                    } else {
                        0.0
                    };
                    for ((d, &s), &xi) in dx.iter_mut().zip(gy).zip(xr) {
                        *d += s / denom - xi * proj;
                    }
                }
            }),
        }
    }
}

/// `dst += sign * g`, summing `g` over repeats when `dst` is the broadcast operand.
fn reduce_into(dst: &mut [f64], g: &[f64], sign: f64) {
    for chunk in g.chunks(dst.len()) {
        dst.iter_mut().zip(chunk).for_each(|(d, &s)| *d += sign * s);
    }
}

/// `dst += g ∘ other` with broadcasting in either direction.
fn mul_grad_into(dst: &mut [f64], g: &[f64], other: &[f64]) {
    if dst.len() >= other.len() {
        for (dc, gc) in dst.chunks_mut(other.len()).zip(g.chunks(other.len())) {
            dc.iter_mut().zip(gc).zip(other).for_each(|((d, &s), &o)| *d += s * o);
        }
    } else {
        for (gc, oc) in g.chunks(dst.len()).zip(other.chunks(dst.len())) {
            dst.iter_mut().zip(gc).zip(oc).for_each(|((d, &s), &o)| *d += s * o);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(Tensor::matrix(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_and_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.0]));
        let loss = tape.sigmoid(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn grad_of_log_softmax_matches_finite_differences() {
        let f = |x: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let s = tape.softmax(v)?;
            let first = tape.slice(s, 0, 0, 1)?;
            let l = tape.log(first)?;
            Ok(tape.value(l).item())
        };
        let x0 = Tensor::vector(vec![0.0, 0.0]);
        let fd = finite_difference_grad(f, &x0, 1e-6).unwrap();
        assert!((fd.data()[0] - 0.5).abs() < 1e-8);
        assert!((fd.data()[1] + 0.5).abs() < 1e-8);

        let mut tape = Tape::new();
        let v = tape.param(x0);
        let s = tape.softmax(v).unwrap();
        let first = tape.slice(s, 0, 0, 1).unwrap();
        let l = tape.log(first).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: OpKind::MatMul,
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().starts_with("matmul"));
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { op: OpKind::Add, .. })));
        let neg = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(tape.log(neg), Err(TensorError::Domain { op: OpKind::Log, .. })));
        let big = tape.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(tape.exp(big), Err(TensorError::NonFinite { op: OpKind::Exp })));
    }

    #[test]
    fn backward_preconditions() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
        assert_eq!(tape.backward(s), Err(TensorError::EmptyTape));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn two_tapes_contribute_identical_gradients() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0]));
            let e = tape.exp(x).unwrap();
            let t = tape.tanh(e).unwrap();
            let l = tape.sum(t).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (g1, g2) = (run(), run());
        let accumulated: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let doubled: Vec<f64> = g1.iter().map(|a| 2.0 * a).collect();
        assert_eq!(accumulated, doubled);
    }

    // ---- per-primitive gradient checks ------------------------------------

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Checks backward against central differences for a loss built from `build`,
    /// with every input trainable. A fixed random projection turns the op output
    /// into a scalar so that every output element contributes.
    fn check_op(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let weights_for = |tape: &Tape, out: Var| -> Tensor {
            let n = tape.value(out).len();
            Tensor::new(
                tape.shape(out),
                (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect(),
            )
            .unwrap()
        };
        let loss_of = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let out = build(tape, vars)?;
            let w = weights_for(tape, out);
            let w = tape.constant(w);
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = loss_of(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();

        for (which, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[which]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
            let f = |x: &Tensor| -> Result<f64> {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| t.constant(if i == which { x.clone() } else { v.clone() }))
                    .collect();
                let l = loss_of(&mut t, &vs)?;
                Ok(t.value(l).item())
            };
            let numeric = finite_difference_grad(f, input, 1e-5).unwrap();
            for (a, b) in analytic.iter().zip(numeric.data()) {
                let err = relative_error(*a, *b);
                assert!(err <= 1e-4 || (a - b).abs() < 1e-9, "input {which}: {a} vs {b} (rel {err})");
            }
        }
    }

    fn shape2(rng: &mut ChaCha8Rng) -> [usize; 2] {
        [rng.gen_range(1..5), rng.gen_range(1..5)]
    }

    macro_rules! grad_check_op {
        ($name:ident, |$rng:ident| $body:expr) => {
            #[test]
            fn $name() {
                let mut $rng = ChaCha8Rng::seed_from_u64(stringify!($name).len() as u64);
                for _ in 0..100 {
                    $body;
                }
            }
        };
    }

    grad_check_op!(grad_matmul, |rng| {
        let [m, k] = shape2(&mut rng);
        let n = rng.gen_range(1..5);
        let a = random_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[k, n], -2.0, 2.0);
        check_op(&[a, b], &|t, v| t.matmul(v[0], v[1]));
    });

    grad_check_op!(grad_affine, |rng| {
        let [m, k] = shape2(&mut rng);
        let n = rng.gen_range(1..5);
        let a = random_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[k, n], -2.0, 2.0);
        let c = if rng.gen_bool(0.5) {
            random_tensor(&mut rng, &[m, n], -2.0, 2.0)
        } else {
            random_tensor(&mut rng, &[n], -2.0, 2.0)
        };
        check_op(&[a, b, c], &|t, v| t.affine(v[0], v[1], v[2]));
    });

    grad_check_op!(grad_lstm_pointwise, |rng| {
        let (batch, h) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let pre = random_tensor(&mut rng, &[batch, 4 * h], -3.0, 3.0);
        let c = random_tensor(&mut rng, &[batch, h], -2.0, 2.0);
        check_op(&[pre, c], &|t, v| t.lstm_pointwise(v[0], v[1]));
    });

    #[test]
    fn lstm_pointwise_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, h) = (3, 4);
        let pre = random_tensor(&mut rng, &[batch, 4 * h], -3.0, 3.0);
        let c = random_tensor(&mut rng, &[batch, h], -2.0, 2.0);
        let mut tape = Tape::new();
        let (p, cv) = (tape.constant(pre), tape.constant(c));
        let fused = tape.lstm_pointwise(p, cv).unwrap();
        let ifo_pre = tape.slice(p, 1, 0, 3 * h).unwrap();
        let ifo = tape.sigmoid(ifo_pre).unwrap();
        let g_pre = tape.slice(p, 1, 3 * h, 4 * h).unwrap();
        let g = tape.tanh(g_pre).unwrap();
        let i = tape.slice(ifo, 1, 0, h).unwrap();
        let f = tape.slice(ifo, 1, h, 2 * h).unwrap();
        let o = tape.slice(ifo, 1, 2 * h, 3 * h).unwrap();
        let kept = tape.mul(f, cv).unwrap();
        let written = tape.mul(i, g).unwrap();
        let c_next = tape.add(kept, written).unwrap();
        let tc = tape.tanh(c_next).unwrap();
        let s_next = tape.mul(o, tc).unwrap();
        let want = tape.concat(&[s_next, c_next], 1).unwrap();
        for (a, b) in tape.value(fused).data().iter().zip(tape.value(want).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    grad_check_op!(grad_batch_matmul, |rng| {
        let (bs, m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let a = random_tensor(&mut rng, &[bs, m, k], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[bs, k, n], -2.0, 2.0);
        check_op(&[a, b], &|t, v| t.batch_matmul(v[0], v[1]));
    });

    grad_check_op!(grad_add_broadcast, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        let b = random_tensor(&mut rng, &s[1..], -2.0, 2.0);
        check_op(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
        check_op(&[b, a], &|t, v| t.add(v[0], v[1]));
    });

    grad_check_op!(grad_sub, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        let b = random_tensor(&mut rng, &s, -2.0, 2.0);
        check_op(&[a, b], &|t, v| t.sub(v[0], v[1]));
    });

    grad_check_op!(grad_mul_broadcast, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        let b = random_tensor(&mut rng, &s[1..], -2.0, 2.0);
        check_op(&[a.clone(), a.clone()], &|t, v| t.mul(v[0], v[1]));
        check_op(&[a, b], &|t, v| t.mul(v[0], v[1]));
    });

    grad_check_op!(grad_scale_and_shift, |rng| {
        let s = shape2(&mut rng);
        let c = rng.gen_range(-3.0..3.0);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        check_op(&[a], &|t, v| {
            let y = t.scale(v[0], c)?;
            t.add_scalar(y, c)
        });
    });

    grad_check_op!(grad_concat, |rng| {
        let s = shape2(&mut rng);
        let axis = rng.gen_range(0..2);
        let mut s2 = s;
        s2[axis] = rng.gen_range(1..4);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        let b = random_tensor(&mut rng, &s2, -2.0, 2.0);
        check_op(&[a, b], &|t, v| t.concat(v, axis));
    });

    grad_check_op!(grad_slice_reshape, |rng| {
        let s = [rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..3)];
        let axis = rng.gen_range(0..3);
        let start = rng.gen_range(0..s[axis]);
        let end = rng.gen_range(start + 1..=s[axis]);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        check_op(&[a], &|t, v| {
            let y = t.slice(v[0], axis, start, end)?;
            let n = t.value(y).len();
            t.reshape(y, &[n])
        });
    });

    grad_check_op!(grad_gather, |rng| {
        let rows = rng.gen_range(1..5);
        let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..rows)).collect();
        let table = random_tensor(&mut rng, &[rows, 3], -1.0, 1.0);
        check_op(&[table], &|t, v| t.gather(v[0], &ids));
    });

    grad_check_op!(grad_sigmoid_logsigmoid_tanh, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -4.0, 4.0);
        check_op(&[a.clone()], &|t, v| t.sigmoid(v[0]));
        check_op(&[a.clone()], &|t, v| t.log_sigmoid(v[0]));
        check_op(&[a], &|t, v| t.tanh(v[0]));
    });

    grad_check_op!(grad_exp_log, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -2.0, 2.0);
        let p = random_tensor(&mut rng, &s, 0.2, 3.0);
        check_op(&[a], &|t, v| t.exp(v[0]));
        check_op(&[p], &|t, v| t.log(v[0]));
    });

    grad_check_op!(grad_softmax, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -3.0, 3.0);
        check_op(&[a], &|t, v| t.softmax(v[0]));
    });

    grad_check_op!(grad_sum_mean, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -3.0, 3.0);
        check_op(&[a.clone()], &|t, v| t.sum(v[0]));
        check_op(&[a], &|t, v| t.mean(v[0]));
    });

    grad_check_op!(grad_l2_normalize, |rng| {
        let s = shape2(&mut rng);
        let a = random_tensor(&mut rng, &s, -3.0, 3.0);
        check_op(&[a], &|t, v| t.l2_normalize(v[0], 1e-12));
    });

    proptest! {
        #[test]
        fn softmax_is_normalized_and_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(logits.clone()));
            let y = tape.softmax(x).unwrap();
            let total: f64 = tape.value(y).data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let shifted = tape.constant(Tensor::vector(logits.iter().map(|v| v + shift).collect()));
            let z = tape.softmax(shifted).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(tape.value(z).data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
