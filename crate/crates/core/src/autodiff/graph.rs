use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    MulConst(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        cin: usize,
        cout: usize,
        k: usize,
        nout: usize,
        cols: Vec<f64>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log10(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    BroadcastAdd {
        x: Var,
        bias: Var,
        per_row: bool,
    },
    Scale(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    OverlapAdd {
        frames: Var,
        hop: usize,
        counts: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::MulConst(..) => "mul_const",
            Op::AddConst(..) => "add_const",
            Op::Matmul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d_valid",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Log10(..) => "log10",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot(..) => "dot",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Transpose(..) => "transpose",
            Op::BroadcastAdd { .. } => "broadcast_add",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::OverlapAdd { .. } => "overlap_add",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run computation tape.
///
/// Every op evaluates eagerly and records how to propagate adjoints.
/// Nodes are appended in creation order, which is a topological order, so
/// [`Graph::backward`] only needs a reverse sweep.
///
/// Gradients are kept for leaves that require them. Intermediate adjoints
/// are dropped once propagated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects any op producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Free leaf variable whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Binds a stored parameter into this graph. Binding the same parameter
    /// twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.bound.len() <= idx {
            self.bound.resize(idx + 1, None);
        }
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.push_leaf(store.value(id).clone(), store.is_trainable(id), Some(id));
        self.bound[idx] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every bound parameter, indexed like `store`; `None` for
    /// parameters that were not reached.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                out[idx] = self.nodes[v.0].grad.clone();
            }
        }
        out
    }

    /// Adds the gradients of bound parameters into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::filled(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.nodes[i].grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => self.nodes[i].grad = Some(g),
                }
            } else {
                propagate(&self.nodes, i, &g, &mut adj);
            }
        }
        Ok(())
    }

    /// Clears all leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulConst(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a), &[a])
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (ta.dims2(), tb.dims2()) else {
            return Err(mismatch("matmul", ta, tb));
        };
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul(a, b),
            &[a, b],
        )
    }

    /// Valid (unpadded) 1-D cross-correlation.
    ///
    /// `signal` is `[channels × len]` and `kernel` is
    /// `[out_channels × channels × kernel_len]`; the result is
    /// `[out_channels × ((len − kernel_len)/stride + 1)]`. A rank-1 signal with
    /// a rank-1 kernel is the single-channel case and yields a rank-1 result.
    pub fn conv1d_valid(&mut self, signal: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (ts, tk) = (self.value(signal), self.value(kernel));
        let (cin, n, cout, k, rank1) = match (ts.shape(), tk.shape()) {
            (&[n], &[k]) => (1, n, 1, k, true),
            (&[cin, n], &[cout, cin2, k]) if cin == cin2 => (cin, n, cout, k, false),
            _ => return Err(mismatch("conv1d_valid", ts, tk)),
        };
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv1d_valid",
                msg: "stride must be positive".into(),
            });
        }
        if n < k {
            return Err(mismatch("conv1d_valid", ts, tk));
        }
        let nout = (n - k) / stride + 1;
        let ck = cin * k;
        let x = ts.data();
        let mut cols = vec![0.0; nout * ck];
        for t in 0..nout {
            let row = &mut cols[t * ck..(t + 1) * ck];
            for c in 0..cin {
                let src = &x[c * n + t * stride..c * n + t * stride + k];
                row[c * k..(c + 1) * k].copy_from_slice(src);
            }
        }
        let mut out = vec![0.0; cout * nout];
        gemm(
            cout,
            ck,
            nout,
            tk.data(),
            false,
            &cols,
            true,
            &mut out,
            false,
        );
        let shape = if rank1 { vec![nout] } else { vec![cout, nout] };
        let op = Op::Conv1d {
            x: signal,
            w: kernel,
            stride,
            cin,
            cout,
            k,
            nout,
            cols,
        };
        self.push(Tensor::from_parts(shape, out), op, &[signal, kernel])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn log10(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::log10);
        self.push(v, Op::Log10(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let d = dot(self.value(a).data(), self.value(b).data());
        self.push(Tensor::scalar(d), Op::Dot(a, b), &[a, b])
    }

    /// `len` entries starting at `start` along `axis` (rank 1 or 2).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let bad = || AutodiffError::InvalidArgument {
            op: "slice",
            msg: format!(
                "range {start}..{} on axis {axis} of shape {:?}",
                start + len,
                t.shape()
            ),
        };
        if len == 0 {
            return Err(bad());
        }
        let value = match (t.shape(), axis) {
            (&[n], 0) if start + len <= n => {
                Tensor::from_parts(vec![len], t.data()[start..start + len].to_vec())
            }
            (&[r, c], 0) if start + len <= r => Tensor::from_parts(
                vec![len, c],
                t.data()[start * c..(start + len) * c].to_vec(),
            ),
            (&[r, c], 1) if start + len <= c => {
                let mut out = Vec::with_capacity(r * len);
                for row in t.data().chunks_exact(c) {
                    out.extend_from_slice(&row[start..start + len]);
                }
                Tensor::from_parts(vec![r, len], out)
            }
            _ => return Err(bad()),
        };
        self.push(value, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Joins tensors of equal rank along `axis`; other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let s0 = self.value(first).shape().to_vec();
        if axis >= s0.len() || s0.len() > 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} invalid for shape {s0:?}"),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for &x in xs {
                data.extend_from_slice(self.value(x).data());
            }
        } else {
            let rows = s0[0];
            for r in 0..rows {
                for &x in xs {
                    let t = self.value(x);
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
        }
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some((r, c)) = t.dims2() else {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", t.shape()),
            });
        };
        let out = transpose(r, c, t.data());
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    /// Bias addition. A bias of shape `[c]` is added to every row of an
    /// `[r×c]` input; a bias of shape `[r, 1]` is added to every column.
    /// No other broadcasting exists.
    pub fn broadcast_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let Some((r, c)) = tx.dims2() else {
            return Err(mismatch("broadcast_add", tx, tb));
        };
        let per_row = match *tb.shape() {
            [n] if n == c => false,
            [n, 1] if n == r => true,
            _ => return Err(mismatch("broadcast_add", tx, tb)),
        };
        let b = tb.data();
        let mut out = tx.data().to_vec();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            if per_row {
                row.iter_mut().for_each(|v| *v += b[i]);
            } else {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
        }
        let op = Op::BroadcastAdd { x, bias, per_row };
        self.push(Tensor::from_parts(vec![r, c], out), op, &[x, bias])
    }

    /// `x · s` for a scalar node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(mismatch("scale", self.value(x), ts));
        }
        let k = ts.item();
        let v = self.value(x).map(|e| e * k);
        self.push(v, Op::Scale(x, s), &[x, s])
    }

    /// Standardizes each column of `x` (`[features × positions]`, or a single
    /// rank-1 column) over the feature axis, then applies per-feature `gain`
    /// and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (f, p) = match *tx.shape() {
            [f] => (f, 1),
            [f, p] => (f, p),
            _ => return Err(mismatch("layer_norm", tx, tg)),
        };
        if tg.shape() != [f] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [f] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let xd = tx.data();
        let mut xhat = vec![0.0; f * p];
        let mut inv_std = vec![0.0; p];
        let mut mean = vec![0.0; p];
        for r in 0..f {
            for (m, v) in mean.iter_mut().zip(&xd[r * p..(r + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= f as f64);
        let mut var = vec![0.0; p];
        for r in 0..f {
            for ((s, v), m) in var.iter_mut().zip(&xd[r * p..(r + 1) * p]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (inv, s) in inv_std.iter_mut().zip(&var) {
            *inv = 1.0 / (s / f as f64 + eps).sqrt();
        }
        let mut out = vec![0.0; f * p];
        let (g, b) = (tg.data(), tb.data());
        for r in 0..f {
            for c in 0..p {
                let i = r * p + c;
                xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                out[i] = g[r] * xhat[i] + b[r];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        let shape = tx.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x, gain, bias])
    }

    /// Averaging overlap-add of `[num_frames × frame_len]` frames spaced `hop`
    /// apart, truncated to `original_len` samples.
    pub fn overlap_add(&mut self, frames: Var, hop: usize, original_len: usize) -> Result<Var> {
        let t = self.value(frames);
        let Some((nf, fl)) = t.dims2() else {
            return Err(AutodiffError::InvalidArgument {
                op: "overlap_add",
                msg: format!("expected a frame matrix, got shape {:?}", t.shape()),
            });
        };
        let covered = (nf - 1) * hop + fl;
        if hop == 0 || hop > fl || original_len == 0 || original_len > covered {
            return Err(AutodiffError::InvalidArgument {
                op: "overlap_add",
                msg: format!(
                    "{nf} frames of {fl} with hop {hop} cannot cover {original_len} samples"
                ),
            });
        }
        let mut sum = vec![0.0; covered];
        let mut counts = vec![0.0; covered];
        for (i, frame) in t.data().chunks_exact(fl).enumerate() {
            let off = i * hop;
            for (j, v) in frame.iter().enumerate() {
                sum[off + j] += v;
                counts[off + j] += 1.0;
            }
        }
        sum.truncate(original_len);
        counts.truncate(original_len);
        for (s, c) in sum.iter_mut().zip(&counts) {
            *s /= c;
        }
        let op = Op::OverlapAdd {
            frames,
            hop,
            counts,
        };
        self.push(Tensor::from_parts(vec![original_len], sum), op, &[frames])
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match adj[v.0].as_mut() {
        Some(acc) => acc.add_assign(&contribution),
        None => adj[v.0] = Some(contribution),
    }
}

fn accumulate_with(nodes: &[Node], adj: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
    if nodes[v.0].requires_grad {
        let contribution = f();
        accumulate(nodes, adj, v, contribution);
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

fn propagate(nodes: &[Node], i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_with(nodes, adj, *a, || g.clone());
            accumulate_with(nodes, adj, *b, || g.clone());
        }
        Op::Sub(a, b) => {
            accumulate_with(nodes, adj, *a, || g.clone());
            accumulate_with(nodes, adj, *b, || g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate_with(nodes, adj, *a, || elementwise(g, val(*b), |x, y| x * y));
            accumulate_with(nodes, adj, *b, || elementwise(g, val(*a), |x, y| x * y));
        }
        Op::Neg(a) => accumulate_with(nodes, adj, *a, || g.map(|x| -x)),
        Op::MulConst(a, c) => accumulate_with(nodes, adj, *a, || g.map(|x| x * c)),
        Op::AddConst(a) => accumulate_with(nodes, adj, *a, || g.clone()),
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.dims2().unwrap();
            let n = tb.shape()[1];
            accumulate_with(nodes, adj, *a, || {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, tb.data(), true, &mut out, false);
                Tensor::from_parts(vec![m, k], out)
            });
            accumulate_with(nodes, adj, *b, || {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g.data(), false, &mut out, false);
                Tensor::from_parts(vec![k, n], out)
            });
        }
        Op::Conv1d {
            x,
            w,
            stride,
            cin,
            cout,
            k,
            nout,
            cols,
        } => {
            let ck = cin * k;
            accumulate_with(nodes, adj, *w, || {
                let mut out = vec![0.0; cout * ck];
                gemm(
                    *cout,
                    *nout,
                    ck,
                    g.data(),
                    false,
                    cols,
                    false,
                    &mut out,
                    false,
                );
                Tensor::from_parts(val(*w).shape().to_vec(), out)
            });
            accumulate_with(nodes, adj, *x, || {
                let mut gcols = vec![0.0; nout * ck];
                gemm(
                    *nout,
                    *cout,
                    ck,
                    g.data(),
                    true,
                    val(*w).data(),
                    false,
                    &mut gcols,
                    false,
                );
                let xs = val(*x).shape().to_vec();
                let n = *xs.last().unwrap();
                let mut gx = vec![0.0; cin * n];
                for t in 0..*nout {
                    let row = &gcols[t * ck..(t + 1) * ck];
                    for c in 0..*cin {
                        let dst = &mut gx[c * n + t * stride..c * n + t * stride + k];
                        for (d, s) in dst.iter_mut().zip(&row[c * k..(c + 1) * k]) {
                            *d += s;
                        }
                    }
                }
                Tensor::from_parts(xs, gx)
            });
        }
        Op::Sigmoid(a) => accumulate_with(nodes, adj, *a, || {
            elementwise(g, y, |g, s| g * s * (1.0 - s))
        }),
        Op::Tanh(a) => accumulate_with(nodes, adj, *a, || {
            elementwise(g, y, |g, t| g * (1.0 - t * t))
        }),
        Op::Relu(a) => accumulate_with(nodes, adj, *a, || {
            elementwise(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })
        }),
        Op::Log10(a) => accumulate_with(nodes, adj, *a, || {
            elementwise(g, val(*a), |g, x| g / (x * std::f64::consts::LN_10))
        }),
        Op::Sum(a) => {
            let s = g.item();
            accumulate_with(nodes, adj, *a, || Tensor::filled(val(*a).shape(), s));
        }
        Op::Mean(a) => {
            let t = val(*a);
            let s = g.item() / t.len() as f64;
            accumulate_with(nodes, adj, *a, || Tensor::filled(t.shape(), s));
        }
        Op::Dot(a, b) => {
            let s = g.item();
            accumulate_with(nodes, adj, *a, || val(*b).map(|x| x * s));
            accumulate_with(nodes, adj, *b, || val(*a).map(|x| x * s));
        }
        Op::Slice { x, axis, start } => accumulate_with(nodes, adj, *x, || {
            let src = val(*x);
            let mut out = Tensor::zeros(src.shape());
            match (src.shape(), axis) {
                (&[_], 0) => out.data_mut()[*start..*start + g.len()].copy_from_slice(g.data()),
                (&[_, c], 0) => {
                    out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data())
                }
                (&[_, c], 1) => {
                    let len = g.shape()[1];
                    for (dst, row) in out
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(g.data().chunks_exact(len))
                    {
                        dst[*start..start + len].copy_from_slice(row);
                    }
                }
                _ => unreachable!("slice validated at construction"),
            }
            out
        }),
        Op::Concat { xs, axis } => {
            let mut offset = 0;
            for &x in xs {
                let s = val(x).shape().to_vec();
                let part = s[*axis];
                accumulate_with(nodes, adj, x, || {
                    if *axis == 0 {
                        let stride = s.get(1).copied().unwrap_or(1);
                        let d = g.data()[offset * stride..(offset + part) * stride].to_vec();
                        Tensor::from_parts(s.clone(), d)
                    } else {
                        let total = g.shape()[1];
                        let mut d = Vec::with_capacity(s[0] * part);
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[offset..offset + part]);
                        }
                        Tensor::from_parts(s.clone(), d)
                    }
                });
                offset += part;
            }
        }
        Op::Transpose(a) => accumulate_with(nodes, adj, *a, || {
            let (r, c) = g.dims2().unwrap();
            Tensor::from_parts(vec![c, r], transpose(r, c, g.data()))
        }),
        Op::BroadcastAdd { x, bias, per_row } => {
            accumulate_with(nodes, adj, *x, || g.clone());
            accumulate_with(nodes, adj, *bias, || {
                let (r, c) = g.dims2().unwrap();
                let shape = val(*bias).shape().to_vec();
                if *per_row {
                    let d = g
                        .data()
                        .chunks_exact(c)
                        .map(|row| row.iter().sum())
                        .collect();
                    Tensor::from_parts(shape, d)
                } else {
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    debug_assert_eq!(r * c, g.len());
                    Tensor::from_parts(shape, d)
                }
            });
        }
        Op::Scale(x, s) => {
            let k = val(*s).item();
            accumulate_with(nodes, adj, *x, || g.map(|v| v * k));
            accumulate_with(nodes, adj, *s, || {
                let shape = val(*s).shape().to_vec();
                Tensor::from_parts(shape, vec![dot(g.data(), val(*x).data())])
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let f = val(*gain).len();
            let p = inv_std.len();
            let gd = g.data();
            accumulate_with(nodes, adj, *bias, || {
                let d = gd.chunks_exact(p).map(|row| row.iter().sum()).collect();
                Tensor::from_parts(vec![f], d)
            });
            accumulate_with(nodes, adj, *gain, || {
                let d = gd
                    .chunks_exact(p)
                    .zip(xhat.chunks_exact(p))
                    .map(|(gr, xr)| dot(gr, xr))
                    .collect();
                Tensor::from_parts(vec![f], d)
            });
            accumulate_with(nodes, adj, *x, || {
                let gain = val(*gain).data();
                let mut sum_d = vec![0.0; p];
                let mut sum_dx = vec![0.0; p];
                for r in 0..f {
                    for c in 0..p {
                        let d = gd[r * p + c] * gain[r];
                        sum_d[c] += d;
                        sum_dx[c] += d * xhat[r * p + c];
                    }
                }
                let nf = f as f64;
                let mut out = vec![0.0; f * p];
                #[allow(clippy::needless_range_loop)]
                for r in 0..f {
                    for c in 0..p {
                        let i = r * p + c;
                        let d = gd[i] * gain[r];
                        out[i] = inv_std[c] / nf * (nf * d - sum_d[c] - xhat[i] * sum_dx[c]);
                    }
                }
                Tensor::from_parts(val(*x).shape().to_vec(), out)
            });
        }
        Op::OverlapAdd {
            frames,
            hop,
            counts,
        } => accumulate_with(nodes, adj, *frames, || {
            let src = val(*frames);
            let (_, fl) = src.dims2().unwrap();
            let mut out = Tensor::zeros(src.shape());
            let gd = g.data();
            for (i, row) in out.data_mut().chunks_exact_mut(fl).enumerate() {
                let off = i * hop;
                for (j, v) in row.iter_mut().enumerate() {
                    if let Some(c) = counts.get(off + j) {
                        *v = gd[off + j] / c;
                    }
                }
            }
            out
        }),
    }
}
