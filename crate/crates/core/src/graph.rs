//! Define-by-run computation graph over [`Tensor`]s.
//!
//! Values are computed eagerly as nodes are appended, so node order is a
//! topological order. [`Graph::backward`] runs reverse mode from a scalar
//! loss. [`Graph::hvp`] computes a Hessian-vector product by pushing a
//! tangent through the forward pass and then differentiating every step of
//! the reverse sweep along that tangent (forward-over-reverse).
//!
//! `relu` and `clamp` have second derivative zero everywhere, including at
//! their kinks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    Parameter,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Second operand may be a row vector broadcast over the first.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Clamp(NodeId, f64, f64),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    /// `mu + sigma * eps`
    GaussianSample(NodeId, NodeId, NodeId),
    /// Mean over rows of the squared row-wise error.
    MseLoss(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Per-node derivative output of [`Graph::backward`] or [`Graph::hvp`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Derivative w.r.t. `node`; zeros when the node does not reach the loss.
    pub fn get(&self, node: NodeId) -> Tensor {
        self.grads[node.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }

    pub fn is_connected(&self, node: NodeId) -> bool {
        self.grads[node.0].is_some()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn unary_prime(op: &Op, x: &Tensor, y: &Tensor) -> (Tensor, Option<Tensor>) {
    // (f'(x), f''(x)); `None` means the second derivative vanishes.
    match op {
        Op::Relu(_) => (x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }), None),
        Op::Tanh(_) => (
            y.map(|t| 1.0 - t * t),
            Some(y.map(|t| -2.0 * t * (1.0 - t * t))),
        ),
        Op::Softplus(_) => {
            let s = x.map(sigmoid);
            let ss = s.map(|v| v * (1.0 - v));
            (s, Some(ss))
        }
        Op::Exp(_) => (y.clone(), Some(y.clone())),
        Op::Log(_) => (x.map(|v| 1.0 / v), Some(x.map(|v| -1.0 / (v * v)))),
        Op::Square(_) => (x.map(|v| 2.0 * v), Some(Tensor::full(x.shape(), 2.0))),
        Op::Clamp(_, lo, hi) => (
            x.map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 }),
            None,
        ),
        _ => unreachable!("not a unary elementwise op"),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Tensor>, value: Tensor) {
    match slot {
        Some(t) => t.add_assign(&value),
        None => *slot = Some(value),
    }
}

fn sum_opt(a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.add(&b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn is_row_broadcast(a: &[usize], b: &[usize]) -> bool {
    a.len() == 2 && b.len() == 1 && a[1] == b[0]
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("graph node {} ({op:?})", self.nodes.len())));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Data fed into the graph (states, actions, targets).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value)
    }

    /// Fixed tensor such as a mask or a detached target.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value)
    }

    /// Differentiable leaf.
    pub fn parameter(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Parameter, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).matmul(self.val(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).transpose()?;
        self.push(Op::Transpose(a), v)
    }

    fn binary_value(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.val(a), self.val(b));
        if x.shape() == y.shape() {
            Ok(x.zip_map(y, f))
        } else if is_row_broadcast(x.shape(), y.shape()) {
            Ok(x.zip_rows(y, f))
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_value("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_value("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_value("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.val(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.val(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.val(a);
        if x.is_empty() {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.val(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).concat_cols(self.val(b))?;
        self.push(Op::Concat(a, b), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.val(a).slice_cols(start, end)?;
        self.push(Op::SliceCols(a, start, end), v)
    }

    /// Reparameterized Gaussian sample `mu + sigma * eps`; `eps` is supplied
    /// by the caller so the graph stays deterministic.
    pub fn gaussian_sample(&mut self, mu: NodeId, sigma: NodeId, eps: NodeId) -> Result<NodeId> {
        let (m, s, e) = (self.val(mu), self.val(sigma), self.val(eps));
        if m.shape() != s.shape() || m.shape() != e.shape() {
            return Err(Error::shape(
                "gaussian_sample",
                format!("{:?} / {:?} / {:?}", m.shape(), s.shape(), e.shape()),
            ));
        }
        let v = m.add(&s.mul(e));
        self.push(Op::GaussianSample(mu, sigma, eps), v)
    }

    /// `(1/B) Σ_i ‖pred_i − target_i‖²` where `B` is the row count.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.val(pred), self.val(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let rows = Self::mse_rows(p);
        let v = Tensor::scalar(p.sub(t).norm_sq() / rows as f64);
        self.push(Op::MseLoss(pred, target), v)
    }

    fn mse_rows(t: &Tensor) -> usize {
        match t.shape() {
            [] => 1,
            [n] => *n,
            s => s[0],
        }
        .max(1)
    }

    /// Reverse-mode gradient of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (adj, _) = self.reverse(loss, None)?;
        self.finish(adj)
    }

    /// Hessian-vector product `∇²L · v`, where `v` assigns a tangent to some
    /// parameter nodes (all others get zero).
    pub fn hvp(&self, loss: NodeId, v: &[(NodeId, Tensor)]) -> Result<Gradients> {
        Ok(self.grad_and_hvp(loss, v)?.1)
    }

    /// Gradient and Hessian-vector product from a single sweep.
    pub fn grad_and_hvp(&self, loss: NodeId, v: &[(NodeId, Tensor)]) -> Result<(Gradients, Gradients)> {
        let lv = self.val(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut seed: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        for (id, t) in v {
            if !matches!(self.nodes[id.0].op, Op::Parameter) {
                return Err(Error::shape("hvp", format!("node {} is not a parameter", id.0)));
            }
            if t.shape() != self.val(*id).shape() {
                return Err(Error::shape(
                    "hvp",
                    format!("tangent {:?} vs parameter {:?}", t.shape(), self.val(*id).shape()),
                ));
            }
            if id.0 <= loss.0 {
                seed[id.0] = Some(t.clone());
            }
        }
        let tangents = self.forward_tangents(loss, seed)?;
        let (adj, adj_dot) = self.reverse(loss, Some(&tangents))?;
        Ok((self.finish(adj)?, self.finish(adj_dot)?))
    }

    fn finish(&self, mut grads: Vec<Option<Tensor>>) -> Result<Gradients> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("derivative of node {i}")));
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn forward_tangents(&self, loss: NodeId, mut tan: Vec<Option<Tensor>>) -> Result<Vec<Option<Tensor>>> {
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            let y = &node.value;
            let t = |id: NodeId, tan: &Vec<Option<Tensor>>| tan[id.0].clone();
            let out = match &node.op {
                Op::Input | Op::Constant | Op::Parameter => continue,
                Op::MatMul(a, b) => {
                    let l = match &tan[a.0] {
                        Some(da) => Some(da.matmul(self.val(*b))?),
                        None => None,
                    };
                    let r = match &tan[b.0] {
                        Some(db) => Some(self.val(*a).matmul(db)?),
                        None => None,
                    };
                    sum_opt(l, r)
                }
                Op::Transpose(a) => match &tan[a.0] {
                    Some(da) => Some(da.transpose()?),
                    None => None,
                },
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let da = t(*a, &tan);
                    let db = t(*b, &tan).map(|db| {
                        if db.shape() == y.shape() {
                            db.scale(sign)
                        } else {
                            Tensor::zeros(y.shape()).zip_rows(&db, |_, v| sign * v)
                        }
                    });
                    sum_opt(da, db)
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let bcast = va.shape() != vb.shape();
                    let l = tan[a.0].as_ref().map(|da| {
                        if bcast {
                            da.zip_rows(vb, |x, y| x * y)
                        } else {
                            da.mul(vb)
                        }
                    });
                    let r = tan[b.0].as_ref().map(|db| {
                        if bcast {
                            va.zip_rows(db, |x, y| x * y)
                        } else {
                            va.mul(db)
                        }
                    });
                    sum_opt(l, r)
                }
                Op::Scale(a, c) => tan[a.0].as_ref().map(|da| da.scale(*c)),
                Op::Relu(a)
                | Op::Tanh(a)
                | Op::Softplus(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Square(a)
                | Op::Clamp(a, ..) => match &tan[a.0] {
                    Some(da) => {
                        let (d1, _) = unary_prime(&node.op, self.val(*a), y);
                        Some(d1.mul(da))
                    }
                    None => None,
                },
                Op::Sum(a) => tan[a.0].as_ref().map(|da| Tensor::scalar(da.sum())),
                Op::Mean(a) => tan[a.0]
                    .as_ref()
                    .map(|da| Tensor::scalar(da.sum() / da.len() as f64)),
                Op::Concat(a, b) => {
                    if tan[a.0].is_none() && tan[b.0].is_none() {
                        None
                    } else {
                        let da = t(*a, &tan).unwrap_or_else(|| Tensor::zeros(self.val(*a).shape()));
                        let db = t(*b, &tan).unwrap_or_else(|| Tensor::zeros(self.val(*b).shape()));
                        Some(da.concat_cols(&db)?)
                    }
                }
                Op::SliceCols(a, s, e) => match &tan[a.0] {
                    Some(da) => Some(da.slice_cols(*s, *e)?),
                    None => None,
                },
                Op::GaussianSample(mu, sigma, eps) => {
                    let l = t(*mu, &tan);
                    let m = tan[sigma.0].as_ref().map(|ds| ds.mul(self.val(*eps)));
                    let r = tan[eps.0].as_ref().map(|de| self.val(*sigma).mul(de));
                    sum_opt(sum_opt(l, m), r)
                }
                Op::MseLoss(p, q) => {
                    if tan[p.0].is_none() && tan[q.0].is_none() {
                        None
                    } else {
                        let (vp, vq) = (self.val(*p), self.val(*q));
                        let dp = t(*p, &tan).unwrap_or_else(|| Tensor::zeros(vp.shape()));
                        let dq = t(*q, &tan).unwrap_or_else(|| Tensor::zeros(vq.shape()));
                        let rows = Self::mse_rows(vp) as f64;
                        Some(Tensor::scalar(2.0 / rows * vp.sub(vq).dot(&dp.sub(&dq))))
                    }
                }
            };
            tan[i] = out;
        }
        Ok(tan)
    }

    /// Reverse sweep. With `tangents`, also propagates the directional
    /// derivative of every adjoint along those tangents.
    fn reverse(
        &self,
        loss: NodeId,
        tangents: Option<&[Option<Tensor>]>,
    ) -> Result<(Vec<Option<Tensor>>, Vec<Option<Tensor>>)> {
        let lv = self.val(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        let mut adj_dot: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::ones(lv.shape()));
        let tan = |id: NodeId| -> Option<&Tensor> { tangents.and_then(|t| t[id.0].as_ref()) };
        let second = tangents.is_some();

        for i in (0..n).rev() {
            let Some(ybar) = adj[i].take() else { continue };
            let ydot_bar = adj_dot[i].take();
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Input | Op::Constant | Op::Parameter => {
                    adj[i] = Some(ybar);
                    adj_dot[i] = ydot_bar;
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    accumulate(&mut adj[a.0], ybar.matmul_nt(vb)?);
                    accumulate(&mut adj[b.0], va.matmul_tn(&ybar)?);
                    if second {
                        let mut da = ydot_bar.as_ref().map(|d| d.matmul_nt(vb)).transpose()?;
                        if let Some(db) = tan(*b) {
                            da = sum_opt(da, Some(ybar.matmul_nt(db)?));
                        }
                        let mut dbb = ydot_bar.as_ref().map(|d| va.matmul_tn(d)).transpose()?;
                        if let Some(dat) = tan(*a) {
                            dbb = sum_opt(dbb, Some(dat.matmul_tn(&ybar)?));
                        }
                        if let Some(v) = da {
                            accumulate(&mut adj_dot[a.0], v);
                        }
                        if let Some(v) = dbb {
                            accumulate(&mut adj_dot[b.0], v);
                        }
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj[a.0], ybar.transpose()?);
                    if let Some(d) = &ydot_bar {
                        accumulate(&mut adj_dot[a.0], d.transpose()?);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let bshape = self.val(*b).shape().to_vec();
                    let reduce = |g: &Tensor| -> Tensor {
                        if g.shape() == bshape.as_slice() {
                            g.scale(sign)
                        } else {
                            g.sum_rows(bshape[0]).scale(sign)
                        }
                    };
                    accumulate(&mut adj[b.0], reduce(&ybar));
                    if let Some(d) = &ydot_bar {
                        accumulate(&mut adj_dot[a.0], d.clone());
                        accumulate(&mut adj_dot[b.0], reduce(d));
                    }
                    accumulate(&mut adj[a.0], ybar);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let bcast = va.shape() != vb.shape();
                    let times_b = |g: &Tensor, bv: &Tensor| {
                        if bcast {
                            g.zip_rows(bv, |x, y| x * y)
                        } else {
                            g.mul(bv)
                        }
                    };
                    let reduce = |g: Tensor| if bcast { g.sum_rows(vb.len()) } else { g };
                    accumulate(&mut adj[a.0], times_b(&ybar, vb));
                    accumulate(&mut adj[b.0], reduce(ybar.mul(va)));
                    if second {
                        let mut da = ydot_bar.as_ref().map(|d| times_b(d, vb));
                        if let Some(db) = tan(*b) {
                            da = sum_opt(da, Some(times_b(&ybar, db)));
                        }
                        let mut dbb = ydot_bar.as_ref().map(|d| d.mul(va));
                        if let Some(dat) = tan(*a) {
                            dbb = sum_opt(dbb, Some(ybar.mul(dat)));
                        }
                        if let Some(v) = da {
                            accumulate(&mut adj_dot[a.0], v);
                        }
                        if let Some(v) = dbb {
                            accumulate(&mut adj_dot[b.0], reduce(v));
                        }
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj[a.0], ybar.scale(*c));
                    if let Some(d) = &ydot_bar {
                        accumulate(&mut adj_dot[a.0], d.scale(*c));
                    }
                }
                Op::Relu(a)
                | Op::Tanh(a)
                | Op::Softplus(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Square(a)
                | Op::Clamp(a, ..) => {
                    let (d1, d2) = unary_prime(&node.op, self.val(*a), y);
                    if second {
                        let mut da = ydot_bar.as_ref().map(|d| d.mul(&d1));
                        if let (Some(d2), Some(xdot)) = (&d2, tan(*a)) {
                            da = sum_opt(da, Some(ybar.mul(d2).mul(xdot)));
                        }
                        if let Some(v) = da {
                            accumulate(&mut adj_dot[a.0], v);
                        }
                    }
                    accumulate(&mut adj[a.0], ybar.mul(&d1));
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let shape = self.val(*a).shape().to_vec();
                    let k = if matches!(node.op, Op::Mean(_)) {
                        1.0 / self.val(*a).len() as f64
                    } else {
                        1.0
                    };
                    accumulate(&mut adj[a.0], Tensor::full(&shape, ybar.item() * k));
                    if let Some(d) = &ydot_bar {
                        accumulate(&mut adj_dot[a.0], Tensor::full(&shape, d.item() * k));
                    }
                }
                Op::Concat(a, b) => {
                    let wa = *self.val(*a).shape().last().unwrap_or(&1);
                    let w = *y.shape().last().unwrap_or(&1);
                    accumulate(&mut adj[a.0], ybar.slice_cols(0, wa)?);
                    accumulate(&mut adj[b.0], ybar.slice_cols(wa, w)?);
                    if let Some(d) = &ydot_bar {
                        accumulate(&mut adj_dot[a.0], d.slice_cols(0, wa)?);
                        accumulate(&mut adj_dot[b.0], d.slice_cols(wa, w)?);
                    }
                }
                Op::SliceCols(a, s, _) => {
                    let shape = self.val(*a).shape().to_vec();
                    accumulate(&mut adj[a.0], Tensor::embed_cols(&shape, &ybar, *s));
                    if let Some(d) = &ydot_bar {
                        accumulate(&mut adj_dot[a.0], Tensor::embed_cols(&shape, d, *s));
                    }
                }
                Op::GaussianSample(mu, sigma, eps) => {
                    let (vs, ve) = (self.val(*sigma), self.val(*eps));
                    accumulate(&mut adj[mu.0], ybar.clone());
                    accumulate(&mut adj[sigma.0], ybar.mul(ve));
                    accumulate(&mut adj[eps.0], ybar.mul(vs));
                    if second {
                        let mut ds = ydot_bar.as_ref().map(|d| d.mul(ve));
                        let mut de = ydot_bar.as_ref().map(|d| d.mul(vs));
                        if let Some(t) = tan(*eps) {
                            ds = sum_opt(ds, Some(ybar.mul(t)));
                        }
                        if let Some(t) = tan(*sigma) {
                            de = sum_opt(de, Some(ybar.mul(t)));
                        }
                        if let Some(d) = &ydot_bar {
                            accumulate(&mut adj_dot[mu.0], d.clone());
                        }
                        if let Some(v) = ds {
                            accumulate(&mut adj_dot[sigma.0], v);
                        }
                        if let Some(v) = de {
                            accumulate(&mut adj_dot[eps.0], v);
                        }
                    }
                }
                Op::MseLoss(p, q) => {
                    let (vp, vq) = (self.val(*p), self.val(*q));
                    let k = 2.0 / Self::mse_rows(vp) as f64;
                    let diff = vp.sub(vq);
                    let g = diff.scale(k * ybar.item());
                    accumulate(&mut adj[q.0], g.scale(-1.0));
                    accumulate(&mut adj[p.0], g);
                    if second {
                        let mut dp = ydot_bar.as_ref().map(|d| diff.scale(k * d.item()));
                        let ddiff = match (tan(*p), tan(*q)) {
                            (None, None) => None,
                            (Some(a), None) => Some(a.clone()),
                            (None, Some(b)) => Some(b.scale(-1.0)),
                            (Some(a), Some(b)) => Some(a.sub(b)),
                        };
                        if let Some(dd) = ddiff {
                            dp = sum_opt(dp, Some(dd.scale(k * ybar.item())));
                        }
                        if let Some(v) = dp {
                            accumulate(&mut adj_dot[q.0], v.scale(-1.0));
                            accumulate(&mut adj_dot[p.0], v);
                        }
                    }
                }
            }
        }
        Ok((adj, adj_dot))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_norm_sq(g: &mut Graph, theta: NodeId) -> NodeId {
        let sq = g.square(theta).unwrap();
        let s = g.sum(sq).unwrap();
        g.scale(s, 0.5).unwrap()
    }

    #[test]
    fn half_norm_gradient_is_theta() {
        let mut g = Graph::new();
        let theta = g.parameter(Tensor::vector(vec![3.0, -2.0])).unwrap();
        let loss = half_norm_sq(&mut g, theta);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).data(), &[3.0, -2.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let theta = g.parameter(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = g.constant(Tensor::vector(vec![4.0, 5.0])).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(!grads.is_connected(theta));
        assert_eq!(grads.get(theta).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let theta = g.parameter(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(theta), Err(Error::NotScalar(_))));
    }

    #[test]
    fn quadratic_hvp() {
        // L = ½ θᵀ diag(2, 1) θ
        let mut g = Graph::new();
        let theta = g.parameter(Tensor::vector(vec![0.7, -1.3])).unwrap();
        let a = g.constant(Tensor::vector(vec![2.0, 1.0])).unwrap();
        let sq = g.square(theta).unwrap();
        let w = g.mul(sq, a).unwrap();
        let s = g.sum(w).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let hv = g.hvp(loss, &[(theta, Tensor::vector(vec![1.0, 0.0]))]).unwrap();
        assert_eq!(hv.get(theta).data(), &[2.0, 0.0]);
        let hz = g.hvp(loss, &[(theta, Tensor::vector(vec![0.0, 0.0]))]).unwrap();
        assert_eq!(hz.get(theta).data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let b = g.parameter(Tensor::vector(vec![0.5, -0.5])).unwrap();
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1., 2.])).unwrap();
        let b = g.input(Tensor::vector(vec![1., 2., 3.])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }
}
