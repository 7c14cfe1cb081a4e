use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Silu,
    Tanh,
    Softplus,
    Exp,
    Sigmoid,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `max(v, 0) + log1p(exp(-|v|))`, finite for every finite `v`.
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Unary {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Unary::Relu => v.max(0.0),
            Unary::Silu => v * sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Softplus => softplus(v),
            Unary::Exp => v.exp(),
            Unary::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative given the input `v` and the forward output `y`.
    fn derivative(self, v: f64, y: f64) -> f64 {
        match self {
            // subgradient 0 at exactly 0
            Unary::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(v),
            Unary::Exp => y,
            Unary::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Operation with a hand-written adjoint, recorded by modules outside
/// `numerics` (the selective scan, neighbour aggregation, losses).
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient buffer per input, each with the
    /// input's length.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Reshape(Var),
    Unary(Unary, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mean(Vec<Var>),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    PermuteRows {
        x: Var,
        perm: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives; replaying their adjoints in
/// reverse yields gradients for every leaf created with `requires_grad`.
///
/// A tape belongs to one forward pass and is not shared between threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, contrib: impl IntoIterator<Item = (usize, f64)>) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    for (i, v) in contrib {
        g[i] += v;
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib.to_vec()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`; `None`
    /// when `v` does not depend on any `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let data = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    /// Zeroes every gradient slot and re-arms `backward`.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// `x[M×Din] · w[Din×Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (m, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.iter().product::<usize>() != dout {
                return Err(Error::dim("linear bias", ws, bs));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; m * dout];
        for (i, orow) in out.chunks_exact_mut(dout).enumerate() {
            if let Some(b) = b {
                orow.copy_from_slice(self.value(b).data());
            }
            for (k, &xv) in xd[i * din..(i + 1) * din].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[k * dout..(k + 1) * dout];
                orow.iter_mut().zip(wrow).for_each(|(o, &wv)| *o += xv * wv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let needs = self.needs(&inputs);
        Ok(self.push(Tensor::new(vec![m, dout], out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let t = self.value(x).map(|v| op.apply(v));
        let needs = self.needs(&[x]);
        self.push(t, Op::Unary(op, x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let t = self.value(x).map(|v| v * alpha);
        let needs = self.needs(&[x]);
        self.push(t, Op::Scale(x, alpha), needs)
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty list".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &x in xs {
            let t = self.value(x);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("mean", &shape, t.shape()));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
        }
        let n = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let needs = self.needs(xs);
        Ok(self.push(Tensor::new(shape, acc)?, Op::Mean(xs.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} on rank {}", shape.len())));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (out[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs))
    }

    /// Row-wise layer normalisation of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("layer_norm", &xs, &[2]));
        }
        let d = xs[1];
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(Error::dim("layer_norm affine", &xs, self.shape(p)));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xs[0] * d];
        let mut rstd = Vec::with_capacity(xs[0]);
        for (row, orow) in self.value(x).data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * r * g[j] + b[j];
            }
            rstd.push(r);
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(xs, out)?, Op::LayerNorm { x, gamma, beta, rstd }, needs))
    }

    /// `out[t] = x[perm[t]]` along the leading axis.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if perm.len() != t.rows() {
            return Err(Error::dim("permute_rows", t.shape(), &[perm.len()]));
        }
        let mut data = Vec::with_capacity(t.len());
        for &p in perm {
            if p >= t.rows() {
                return Err(Error::Validation(format!("row index {p} out of range")));
            }
            data.extend_from_slice(t.row(p));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::PermuteRows { x, perm: perm.to_vec() }, needs))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let rev: Vec<usize> = (0..self.value(x).rows()).rev().collect();
        self.permute_rows(x, &rev)
    }

    /// Records an already-computed output of a [`CustomOp`].
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse adjoint replay from a scalar `loss` with seed 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let wants = |v: &Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xt = &nodes[x.0].value;
                let wt = &nodes[w.0].value;
                let (m, din) = (xt.shape()[0], xt.shape()[1]);
                let dout = wt.shape()[1];
                let (xd, wd) = (xt.data(), wt.data());
                if wants(x) {
                    let mut dx = vec![0.0; m * din];
                    for i in 0..m {
                        let grow = &g[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let wrow = &wd[k * dout..(k + 1) * dout];
                            dx[i * din + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if wants(w) {
                    let mut dw = vec![0.0; din * dout];
                    for i in 0..m {
                        let grow = &g[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let xv = xd[i * din + k];
                            if xv == 0.0 {
                                continue;
                            }
                            dw[k * dout..(k + 1) * dout]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, &gv)| *d += xv * gv);
                        }
                    }
                    add_into(&mut grads[w.0], &dw);
                }
                if let Some(b) = b.filter(wants) {
                    let mut db = vec![0.0; dout];
                    for grow in g.chunks_exact(dout) {
                        db.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(x) => {
                if wants(x) {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Reshape(x) => {
                if wants(x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Unary(op, x) => {
                if wants(x) {
                    let xv = nodes[x.0].value.data();
                    let yv = node.value.data();
                    let n = g.len();
                    accumulate(
                        &mut grads[x.0],
                        n,
                        (0..n).map(|i| (i, g[i] * op.derivative(xv[i], yv[i]))),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = g.len();
                if wants(a) {
                    accumulate(&mut grads[a.0], n, (0..n).map(|i| (i, g[i] * bv[i])));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], n, (0..n).map(|i| (i, g[i] * av[i])));
                }
            }
            Op::Scale(x, alpha) => {
                if wants(x) {
                    let n = g.len();
                    accumulate(&mut grads[x.0], n, (0..n).map(|i| (i, g[i] * alpha)));
                }
            }
            Op::Mean(xs) => {
                let inv = 1.0 / xs.len() as f64;
                let n = g.len();
                for x in xs.iter().filter(|v| wants(v)) {
                    accumulate(&mut grads[x.0], n, (0..n).map(|i| (i, g[i] * inv)));
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let n = nodes[x.0].value.len();
                    accumulate(&mut grads[x.0], n, (0..n).map(|i| (i, g[0])));
                }
            }
            Op::Softmax { x, axis } => {
                if wants(x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xt = &nodes[x.0].value;
                let d = xt.shape()[1];
                let gam = nodes[gamma.0].value.data();
                let mut dx = vec![0.0; xt.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, row) in xt.data().chunks_exact(d).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    let grow = &g[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rs).collect();
                    let gh: Vec<f64> = (0..d).map(|j| grow[j] * gam[j]).collect();
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rs * (gh[j] - mean_gh - xhat[j] * mean_ghx);
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                }
                if wants(x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if wants(gamma) {
                    add_into(&mut grads[gamma.0], &dg);
                }
                if wants(beta) {
                    add_into(&mut grads[beta.0], &db);
                }
            }
            Op::PermuteRows { x, perm } => {
                if wants(x) {
                    let c = node.value.cols();
                    let n = node.value.len();
                    accumulate(
                        &mut grads[x.0],
                        n,
                        perm.iter()
                            .enumerate()
                            .flat_map(|(t, &p)| (0..c).map(move |j| (p * c + j, g[t * c + j]))),
                    );
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let contribs = op.backward(&ins, &node.value, g);
                for (v, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c.filter(|_| wants(v)) {
                        debug_assert_eq!(c.len(), nodes[v.0].value.len(), "{} adjoint length", op.name());
                        add_into(&mut grads[v.0], &c);
                    }
                }
            }
        }
    }
}

/// `(outer, axis extent, inner)` sizes for iterating along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
