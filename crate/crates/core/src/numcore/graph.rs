//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node. Parameters enter through
//! [`Graph::param`] (inserted once per graph), data through
//! [`Graph::constant`] or [`Graph::input`]. [`Graph::backward`] walks the tape
//! in reverse and returns [`Gradients`] for every node that depends on a
//! parameter or a gradient-requiring input.

use std::collections::HashMap;

use super::tensor::{matmul_into, row_moments};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    NormalizeRows(Var, f64),
    CapsShared(Var, Var),
    CapsFull(Var, Var),
    RouteNodes(Var, Var),
    RouteAgreement(Var, Var),
    GcnNormalize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; only constants and inputs.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.params
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A data leaf; tracked for gradients iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let track = t.requires_grad();
        self.push(t, Op::Leaf, track, "input")
    }

    /// The leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph was created without a parameter store");
        let value = store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.numel() != n {
            return Err(Error::dim("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(out.with_requires_grad(false), Op::AddRow(a, bias), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim("mul_scalar", self.value(a).shape(), sv.shape()));
        }
        let c = sv.item();
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a) || self.needs(s);
        self.push(out, Op::MulScalar(a, s), ng, "mul_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng, "tanh")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng, "abs")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmaxRows(a), ng, "log_softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = self.value(x).layer_norm(self.value(gain), self.value(bias), eps)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, ng, "layer_norm")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng, "transpose")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(v.row(r));
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || len == 0 || start + len > v.rows() {
            return Err(Error::dim("slice_rows", v.shape(), &[start, len]));
        }
        let c = v.cols();
        let out = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(a);
        self.push(out, Op::SliceRows(a, start), ng, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || len == 0 || start + len > v.cols() {
            return Err(Error::dim("slice_cols", v.shape(), &[start, len]));
        }
        let (r, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(a);
        self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols(a, start), ng, "slice_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.sum() / v.numel() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng, "mean")
    }

    /// Diagonal of a square matrix as a `1 × n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || v.shape()[0] != v.shape()[1] {
            return Err(Error::dim("diag", v.shape(), &[v.cols(), v.cols()]));
        }
        let n = v.cols();
        let d: Vec<f64> = (0..n).map(|i| v.at(i, i)).collect();
        let ng = self.needs(a);
        self.push(Tensor::row_vector(&d), Op::Diag(a), ng, "diag")
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` are
    /// divided by `eps` instead.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::NormalizeRows(a, eps), ng, "normalize_rows")
    }

    /// Capsules with one weight matrix per node: `caps[i, j] = W[j] · h[i]`.
    ///
    /// `h` is `T × d_in`, `w` is `J_max × d × d_in`; the first `nodes` matrices
    /// are used. Output shape `T × nodes × d`.
    pub fn capsules_shared(&mut self, h: Var, w: Var, nodes: usize) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        if hv.rank() != 2 || wv.rank() != 3 || wv.shape()[2] != hv.cols() || nodes == 0 || nodes > wv.shape()[0] {
            return Err(Error::dim("capsules_shared", hv.shape(), wv.shape()));
        }
        let (t, din) = (hv.rows(), hv.cols());
        let d = wv.shape()[1];
        let mut out = vec![0.0; t * nodes * d];
        for i in 0..t {
            let x = hv.row(i);
            for j in 0..nodes {
                let wj = &wv.data()[j * d * din..(j + 1) * d * din];
                let o = &mut out[(i * nodes + j) * d..(i * nodes + j + 1) * d];
                for (k, ok) in o.iter_mut().enumerate() {
                    *ok = dot(&wj[k * din..(k + 1) * din], x);
                }
            }
        }
        let ng = self.needs(h) || self.needs(w);
        self.push(Tensor::new(vec![t, nodes, d], out)?, Op::CapsShared(h, w), ng, "capsules_shared")
    }

    /// Capsules with one weight matrix per (timestep, node) pair:
    /// `caps[i, j] = W[i, j] · h[i]`, `w` of shape `T_max × J_max × d × d_in`.
    pub fn capsules_full(&mut self, h: Var, w: Var, nodes: usize) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        if hv.rank() != 2
            || wv.rank() != 4
            || wv.shape()[3] != hv.cols()
            || hv.rows() > wv.shape()[0]
            || nodes == 0
            || nodes > wv.shape()[1]
        {
            return Err(Error::dim("capsules_full", hv.shape(), wv.shape()));
        }
        let (t, din) = (hv.rows(), hv.cols());
        let (jmax, d) = (wv.shape()[1], wv.shape()[2]);
        let mut out = vec![0.0; t * nodes * d];
        for i in 0..t {
            let x = hv.row(i);
            for j in 0..nodes {
                let base = (i * jmax + j) * d * din;
                let wij = &wv.data()[base..base + d * din];
                let o = &mut out[(i * nodes + j) * d..(i * nodes + j + 1) * d];
                for (k, ok) in o.iter_mut().enumerate() {
                    *ok = dot(&wij[k * din..(k + 1) * din], x);
                }
            }
        }
        let ng = self.needs(h) || self.needs(w);
        self.push(Tensor::new(vec![t, nodes, d], out)?, Op::CapsFull(h, w), ng, "capsules_full")
    }

    /// `nodes[j] = Σ_i r[i, j] · caps[i, j]` for `r: T × J`, `caps: T × J × d`.
    pub fn route_nodes(&mut self, r: Var, caps: Var) -> Result<Var> {
        let (rv, cv) = (self.value(r), self.value(caps));
        if rv.rank() != 2 || cv.rank() != 3 || rv.shape() != &cv.shape()[..2] {
            return Err(Error::dim("route_nodes", rv.shape(), cv.shape()));
        }
        let (t, jn, d) = (cv.shape()[0], cv.shape()[1], cv.shape()[2]);
        let mut out = vec![0.0; jn * d];
        for i in 0..t {
            for j in 0..jn {
                let rij = rv.data()[i * jn + j];
                let c = &cv.data()[(i * jn + j) * d..(i * jn + j + 1) * d];
                for (o, &x) in out[j * d..(j + 1) * d].iter_mut().zip(c) {
                    *o += rij * x;
                }
            }
        }
        let ng = self.needs(r) || self.needs(caps);
        self.push(Tensor::new(vec![jn, d], out)?, Op::RouteNodes(r, caps), ng, "route_nodes")
    }

    /// `a[i, j] = ⟨caps[i, j], v[j]⟩` for `caps: T × J × d`, `v: J × d`.
    pub fn route_agreement(&mut self, caps: Var, v: Var) -> Result<Var> {
        let (cv, vv) = (self.value(caps), self.value(v));
        if cv.rank() != 3 || vv.rank() != 2 || &cv.shape()[1..] != vv.shape() {
            return Err(Error::dim("route_agreement", cv.shape(), vv.shape()));
        }
        let (t, jn, d) = (cv.shape()[0], cv.shape()[1], cv.shape()[2]);
        let mut out = vec![0.0; t * jn];
        for i in 0..t {
            for j in 0..jn {
                out[i * jn + j] = dot(&cv.data()[(i * jn + j) * d..(i * jn + j + 1) * d], vv.row(j));
            }
        }
        let ng = self.needs(caps) || self.needs(v);
        self.push(Tensor::new(vec![t, jn], out)?, Op::RouteAgreement(caps, v), ng, "route_agreement")
    }

    /// Symmetric normalization with self-loops: `D^{-1/2} (E + I) D^{-1/2}`,
    /// `D` the row-degree matrix of `E + I`.
    pub fn gcn_normalize(&mut self, e: Var) -> Result<Var> {
        let ev = self.value(e);
        if ev.rank() != 2 || ev.shape()[0] != ev.shape()[1] {
            return Err(Error::dim("gcn_normalize", ev.shape(), ev.shape()));
        }
        let n = ev.cols();
        let s = inv_sqrt_degrees(ev);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let et = ev.at(i, k) + if i == k { 1.0 } else { 0.0 };
                out[i * n + k] = s[i] * et * s[k];
            }
        }
        let ng = self.needs(e);
        self.push(Tensor::new(vec![n, n], out)?, Op::GcnNormalize(e), ng, "gcn_normalize")
    }

    // ---- composite helpers ----

    /// `x · W + b` for `x: n × d_in`, `W: d_in × d_out`, `b: d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    // ---- backward ----

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                shape: lv.shape().to_vec(),
                reason: "backward needs a one-element loss".into(),
            });
        }
        self.backward_seeded(&[(loss, Tensor::ones(lv.shape()))])
    }

    /// Backpropagates from arbitrary seed gradients (summed if a node is
    /// seeded twice).
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::dim("backward seed", g.shape(), self.value(*v).shape()));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: op_name(&node.op) });
                }
            }
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if want(*a) {
                    let bt = bv.transpose()?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if want(*b) {
                    let at = av.transpose()?;
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), "mul'", |x, y| x * y)?);
                }
                if want(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), "mul'", |x, y| x * y)?);
                }
            }
            Op::AddRow(a, bias) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = val(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                if want(*a) {
                    accumulate(grads, *a, g.map(|x| x * sv));
                }
                if want(*s) {
                    let ds: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    let shape = val(*s).shape().to_vec();
                    accumulate(grads, *s, Tensor::new(shape, vec![ds])?);
                }
            }
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), "relu'", |x, y| if y > 0.0 { x } else { 0.0 })?);
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.zip_map(out, "tanh'", |x, y| x * (1.0 - y * y))?);
            }
            Op::Abs(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), "abs'", |x, y| x * sign(y))?);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut dx = g.clone().with_requires_grad(false);
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let s = dot(drow, yrow);
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - s);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut dx = g.clone().with_requires_grad(false);
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let s: f64 = drow.iter().sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d -= y.exp() * s;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gv = val(*gain);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let grow = g.row(r);
                    let (mean, inv_std) = row_moments(row, *eps);
                    for k in 0..d {
                        xhat[k] = (row[k] - mean) * inv_std;
                        dxhat[k] = grow[k] * gv.data()[k];
                        dgain[k] += grow[k] * xhat[k];
                        dbias[k] += grow[k];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, &xhat) / d as f64;
                    for k in 0..d {
                        dx[r * d + k] = inv_std * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                }
                if want(*x) {
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if want(*gain) {
                    accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), dgain)?);
                }
                if want(*bias) {
                    accumulate(grads, *bias, Tensor::new(val(*bias).shape().to_vec(), dbias)?);
                }
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, g.transpose()?);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if want(p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(grads, p, Tensor::new(vec![r, c], slice)?);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if want(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, p, Tensor::new(vec![rows, c], d)?);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let (c, len) = (av.cols(), g.cols());
                let mut d = vec![0.0; av.numel()];
                for r in 0..av.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let av = val(*a);
                let gv = g.item() / av.numel() as f64;
                accumulate(grads, *a, Tensor::full(av.shape(), gv));
            }
            Op::Diag(a) => {
                let n = g.cols();
                let mut d = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    d.data_mut()[i * n + i] = g.data()[i];
                }
                accumulate(grads, *a, d);
            }
            Op::NormalizeRows(a, eps) => {
                let av = val(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.numel()];
                for r in 0..av.rows() {
                    let x = av.row(r);
                    let y = out.row(r);
                    let gr = g.row(r);
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dr = &mut d[r * c..(r + 1) * c];
                    if n > *eps {
                        let s = dot(gr, y);
                        for k in 0..c {
                            dr[k] = (gr[k] - y[k] * s) / n;
                        }
                    } else {
                        for k in 0..c {
                            dr[k] = gr[k] / eps;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::CapsShared(h, w) => {
                let (hv, wv) = (val(*h), val(*w));
                let (t, din) = (hv.rows(), hv.cols());
                let (nodes, d) = (out.shape()[1], out.shape()[2]);
                let mut dh = vec![0.0; hv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                for i in 0..t {
                    let x = hv.row(i);
                    for j in 0..nodes {
                        let go = &g.data()[(i * nodes + j) * d..(i * nodes + j + 1) * d];
                        let base = j * d * din;
                        for (k, &gk) in go.iter().enumerate() {
                            if gk == 0.0 {
                                continue;
                            }
                            let wrow = &wv.data()[base + k * din..base + (k + 1) * din];
                            for l in 0..din {
                                dh[i * din + l] += gk * wrow[l];
                                dw[base + k * din + l] += gk * x[l];
                            }
                        }
                    }
                }
                if want(*h) {
                    accumulate(grads, *h, Tensor::new(hv.shape().to_vec(), dh)?);
                }
                if want(*w) {
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::CapsFull(h, w) => {
                let (hv, wv) = (val(*h), val(*w));
                let (t, din) = (hv.rows(), hv.cols());
                let (nodes, d) = (out.shape()[1], out.shape()[2]);
                let jmax = wv.shape()[1];
                let mut dh = vec![0.0; hv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                for i in 0..t {
                    let x = hv.row(i);
                    for j in 0..nodes {
                        let go = &g.data()[(i * nodes + j) * d..(i * nodes + j + 1) * d];
                        let base = (i * jmax + j) * d * din;
                        for (k, &gk) in go.iter().enumerate() {
                            let wrow = &wv.data()[base + k * din..base + (k + 1) * din];
                            for l in 0..din {
                                dh[i * din + l] += gk * wrow[l];
                                dw[base + k * din + l] += gk * x[l];
                            }
                        }
                    }
                }
                if want(*h) {
                    accumulate(grads, *h, Tensor::new(hv.shape().to_vec(), dh)?);
                }
                if want(*w) {
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::RouteNodes(r, caps) => {
                let (rv, cv) = (val(*r), val(*caps));
                let (t, jn, d) = (cv.shape()[0], cv.shape()[1], cv.shape()[2]);
                let mut dr = vec![0.0; rv.numel()];
                let mut dc = vec![0.0; cv.numel()];
                for i in 0..t {
                    for j in 0..jn {
                        let off = (i * jn + j) * d;
                        let gj = g.row(j);
                        dr[i * jn + j] = dot(gj, &cv.data()[off..off + d]);
                        let rij = rv.data()[i * jn + j];
                        for k in 0..d {
                            dc[off + k] = rij * gj[k];
                        }
                    }
                }
                if want(*r) {
                    accumulate(grads, *r, Tensor::new(rv.shape().to_vec(), dr)?);
                }
                if want(*caps) {
                    accumulate(grads, *caps, Tensor::new(cv.shape().to_vec(), dc)?);
                }
            }
            Op::RouteAgreement(caps, v) => {
                let (cv, vv) = (val(*caps), val(*v));
                let (t, jn, d) = (cv.shape()[0], cv.shape()[1], cv.shape()[2]);
                let mut dc = vec![0.0; cv.numel()];
                let mut dv = vec![0.0; vv.numel()];
                for i in 0..t {
                    for j in 0..jn {
                        let gij = g.data()[i * jn + j];
                        let off = (i * jn + j) * d;
                        let vj = vv.row(j);
                        for k in 0..d {
                            dc[off + k] = gij * vj[k];
                            dv[j * d + k] += gij * cv.data()[off + k];
                        }
                    }
                }
                if want(*caps) {
                    accumulate(grads, *caps, Tensor::new(cv.shape().to_vec(), dc)?);
                }
                if want(*v) {
                    accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), dv)?);
                }
            }
            Op::GcnNormalize(e) => {
                let ev = val(*e);
                let n = ev.cols();
                let s = inv_sqrt_degrees(ev);
                let et = |i: usize, k: usize| ev.at(i, k) + if i == k { 1.0 } else { 0.0 };
                // out[i,k] = s_i · Ẽ[i,k] · s_k, s_i = deg_i^{-1/2}, deg_i = Σ_k Ẽ[i,k]
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    for k in 0..n {
                        let gik = g.at(i, k);
                        ds[i] += gik * et(i, k) * s[k];
                        ds[k] += gik * s[i] * et(i, k);
                    }
                }
                let mut de = vec![0.0; n * n];
                for i in 0..n {
                    // ds/ddeg = -1/2 deg^{-3/2} = -1/2 s^3
                    let ddeg = -0.5 * ds[i] * s[i] * s[i] * s[i];
                    for k in 0..n {
                        de[i * n + k] = g.at(i, k) * s[i] * s[k] + ddeg;
                    }
                }
                accumulate(grads, *e, Tensor::new(vec![n, n], de)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

fn inv_sqrt_degrees(e: &Tensor) -> Vec<f64> {
    let n = e.cols();
    (0..n)
        .map(|i| {
            let deg: f64 = e.row(i).iter().sum::<f64>() + 1.0;
            1.0 / deg.sqrt()
        })
        .collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::MulScalar(..) => "mul_scalar",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Abs(_) => "abs",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Transpose(_) => "transpose",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Diag(_) => "diag",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::CapsShared(..) => "capsules_shared",
        Op::CapsFull(..) => "capsules_full",
        Op::RouteNodes(..) => "route_nodes",
        Op::RouteAgreement(..) => "route_agreement",
        Op::GcnNormalize(_) => "gcn_normalize",
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a node, `None` if it does not influence the seeds.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter used by the graph, by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
