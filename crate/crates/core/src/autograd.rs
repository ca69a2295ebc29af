//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass. Node ids are
//! assigned in creation order, which is a topological order, so
//! [`Tape::backward`] is a single reverse sweep. Leaves created from a
//! [`ParamStore`](crate::param::ParamStore) remember their parameter id and
//! their gradients can be folded back into the store.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom, PoolKind};
use crate::param::ParamId;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const NORMALIZE_MIN_NORM: f64 = 1e-12;
const COS_CLAMP: f64 = 1e-7;
const THETA_MARGIN: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddN(Vec<usize>),
    Scale(usize, T),
    Mul(usize, usize),
    SumAll(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Prelu {
        x: usize,
        slope: usize,
    },
    Pool {
        x: usize,
        kind: PoolKind,
        geom: PoolGeom,
        argmax: Vec<usize>,
    },
    Concat(Vec<usize>),
    WeightedSum {
        inputs: Vec<Option<usize>>,
        weights: usize,
    },
    Softmax(usize),
    Log(usize),
    Exp(usize),
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    MseMean(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MatmulNt(usize, usize),
    AddBias(usize, usize),
    GlobalAvgPool(usize),
    Reshape(usize),
    Row(usize, usize),
    ArcMargin {
        cos: usize,
        labels: Vec<usize>,
        dtarget: Vec<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates of every convolution recorded so far.
    pub fn conv_macs(&self) -> u64 {
        self.nodes
            .borrow()
            .iter()
            .map(|n| match &n.op {
                Op::Conv2d { geom, .. } => geom.macs(),
                _ => 0,
            })
            .sum()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that takes part in differentiation iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg, None)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false, None)
    }

    pub(crate) fn param_leaf(&self, id: ParamId, tensor: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(tensor, Op::Leaf, requires_grad, Some(id))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn node(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(value, op, rg, None)
    }

    /// Runs the reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Pairs of (parameter, gradient) for every parameter leaf reached.
    pub fn param_grads<'a>(&'a self, tape: &Tape<T>) -> Vec<(ParamId, &'a [T])> {
        let nodes = tape.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let pid = n.param?;
                if !n.requires_grad {
                    return None;
                }
                self.grads[i].as_deref().map(|g| (pid, g))
            })
            .collect()
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, g.to_vec());
            acc(grads, nodes, *b, g.to_vec());
        }
        Op::AddN(ins) => {
            for &i in ins {
                acc(grads, nodes, i, g.to_vec());
            }
        }
        Op::Scale(a, s) => acc(grads, nodes, *a, g.iter().map(|&v| v * *s).collect()),
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(grads, nodes, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
            acc(grads, nodes, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
        }
        Op::SumAll(a) => acc(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = kernels::conv2d_backward(
                val(*x).data(),
                val(*w).data(),
                g,
                geom,
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
            );
            if let Some(dx) = dx {
                acc(grads, nodes, *x, dx);
            }
            if let Some(dw) = dw {
                acc(grads, nodes, *w, dw);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let [n, c, h, w] = val(*x).dims4().expect("bn input is NCHW");
            let hw = h * w;
            let m = T::from_usize_lossy(n * hw);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dbeta[ch] += g[i];
                        dgamma[ch] += g[i] * xhat[i];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let mut dx = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let k = gam[ch] * inv_std[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                k / m * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                acc(grads, nodes, *x, dx);
            }
            acc(grads, nodes, *gamma, dgamma);
            acc(grads, nodes, *beta, dbeta);
        }
        Op::Prelu { x, slope } => {
            let xv = val(*x);
            let [_, c, h, w] = channel_layout(xv.shape());
            let hw = h * w;
            let sl = val(*slope).data();
            let mut dx = vec![T::zero(); g.len()];
            let mut ds = vec![T::zero(); c];
            for (i, (&xi, &gi)) in xv.data().iter().zip(g).enumerate() {
                let ch = (i / hw) % c;
                if xi > T::zero() {
                    dx[i] = gi;
                } else {
                    dx[i] = gi * sl[ch];
                    ds[ch] += gi * xi;
                }
            }
            acc(grads, nodes, *x, dx);
            acc(grads, nodes, *slope, ds);
        }
        Op::Pool { x, kind, geom, argmax } => {
            acc(grads, nodes, *x, kernels::pool2d_backward(g, geom, *kind, argmax));
        }
        Op::Concat(ins) => {
            let out = &node.value;
            let [n, ctot, h, w] = out.dims4().expect("concat output is NCHW");
            let hw = h * w;
            let mut off = 0;
            for &i in ins {
                let ci = val(i).shape()[1];
                let mut d = Vec::with_capacity(n * ci * hw);
                for b in 0..n {
                    let start = (b * ctot + off) * hw;
                    d.extend_from_slice(&g[start..start + ci * hw]);
                }
                acc(grads, nodes, i, d);
                off += ci;
            }
        }
        Op::WeightedSum { inputs, weights } => {
            let wv = val(*weights).data();
            let mut dw = vec![T::zero(); wv.len()];
            for (k, inp) in inputs.iter().enumerate() {
                let Some(i) = *inp else { continue };
                let xv = val(i).data();
                dw[k] = xv.iter().zip(g).map(|(&a, &b)| a * b).sum();
                acc(grads, nodes, i, g.iter().map(|&d| d * wv[k]).collect());
            }
            acc(grads, nodes, *weights, dw);
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let d = *node.value.shape().last().expect("rank >= 1");
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..y.len() / d {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] = ys[j] * (gs[j] - dot);
                }
            }
            acc(grads, nodes, *a, dx);
        }
        Op::Log(a) => acc(
            grads,
            nodes,
            *a,
            g.iter().zip(val(*a).data()).map(|(&d, &x)| d / x).collect(),
        ),
        Op::Exp(a) => acc(
            grads,
            nodes,
            *a,
            g.iter().zip(node.value.data()).map(|(&d, &y)| d * y).collect(),
        ),
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let d = *node.value.shape().last().expect("rank >= 1");
            let mut dx = vec![T::zero(); y.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dx[r * d + j] = (gs[j] - ys[j] * dot) / nrm;
                }
            }
            acc(grads, nodes, *x, dx);
        }
        Op::MseMean(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let k = g[0] * T::lit(2.0) / T::from_usize_lossy(av.len());
            let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
            if nodes[*b].requires_grad {
                acc(grads, nodes, *b, da.iter().map(|&v| -v).collect());
            }
            acc(grads, nodes, *a, da);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = val(*logits).shape()[1];
            let scale = g[0] / T::from_usize_lossy(labels.len());
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &y) in labels.iter().enumerate() {
                d[r * k + y] -= scale;
            }
            acc(grads, nodes, *logits, d);
        }
        Op::MatmulNt(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, kd) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            if nodes[*a].requires_grad {
                let mut da = vec![T::zero(); m * kd];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for t in 0..kd {
                            da[i * kd + t] += gij * bv.data()[j * kd + t];
                        }
                    }
                }
                acc(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = vec![T::zero(); n * kd];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for t in 0..kd {
                            db[j * kd + t] += gij * av.data()[i * kd + t];
                        }
                    }
                }
                acc(grads, nodes, *b, db);
            }
        }
        Op::AddBias(x, b) => {
            let n = val(*b).len();
            let mut db = vec![T::zero(); n];
            for (i, &d) in g.iter().enumerate() {
                db[i % n] += d;
            }
            acc(grads, nodes, *x, g.to_vec());
            acc(grads, nodes, *b, db);
        }
        Op::GlobalAvgPool(x) => {
            let [n, c, h, w] = val(*x).dims4().expect("gap input is NCHW");
            let hw = h * w;
            let inv = T::one() / T::from_usize_lossy(hw);
            let mut dx = vec![T::zero(); n * c * hw];
            for p in 0..n * c {
                let share = g[p] * inv;
                dx[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v = share);
            }
            acc(grads, nodes, *x, dx);
        }
        Op::Reshape(x) => acc(grads, nodes, *x, g.to_vec()),
        Op::Row(x, r) => {
            let xv = val(*x);
            let d = xv.shape()[1];
            let mut dx = vec![T::zero(); xv.len()];
            dx[r * d..(r + 1) * d].copy_from_slice(g);
            acc(grads, nodes, *x, dx);
        }
        Op::ArcMargin {
            cos,
            labels,
            dtarget,
            scale,
        } => {
            let k = val(*cos).shape()[1];
            let mut d: Vec<T> = g.iter().map(|&v| v * *scale).collect();
            for (r, &y) in labels.iter().enumerate() {
                d[r * k + y] = g[r * k + y] * dtarget[r];
            }
            acc(grads, nodes, *cos, d);
        }
    }
}

/// Treats rank 2 `(N, C)` as `(N, C, 1, 1)`.
fn channel_layout(shape: &[usize]) -> [usize; 4] {
    match *shape {
        [n, c, h, w] => [n, c, h, w],
        [n, c] => [n, c, 1, 1],
        [c] => [1, c, 1, 1],
        _ => [1, shape.iter().product(), 1, 1],
    }
}

/// Training-mode batch statistics produced by [`Var::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Values per channel the moments were taken over.
    pub count: usize,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        self.tape.node(value, op, inputs)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("add", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.emit(t, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise sum of equally shaped variables, accumulated left to right.
    pub fn add_n(vars: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("add_n of an empty list"))?;
        if vars.len() == 1 {
            return Ok(*first);
        }
        let shape = first.shape();
        let mut data = first.value().data().to_vec();
        for v in &vars[1..] {
            first.same_tape(v);
            let val = v.value();
            if val.shape() != shape.as_slice() {
                return Err(Error::shape("add_n", &shape, val.shape()));
            }
            data.iter_mut().zip(val.data()).for_each(|(a, &b)| *a += b);
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        Ok(first.emit(Tensor::new(&shape, data)?, Op::AddN(ids.clone()), &ids))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(a.shape(), data).expect("same shape");
        self.emit(t, Op::Scale(self.id, s), &[self.id])
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(a.shape(), data)?;
        Ok(self.emit(t, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.emit(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    /// Bias-free 2-D convolution of an NCHW input with an `O × I/groups × k × k` weight.
    pub fn conv2d(&self, weight: Var<'t, T>, stride: usize, padding: usize, groups: usize) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let xd = x.dims4()?;
        let wd = match w.shape() {
            &[o, i, kh, kw] => [o, i, kh, kw],
            s => return Err(Error::shape("conv2d", x.shape(), s)),
        };
        let geom = ConvGeom::new(xd, wd, stride, padding, groups)?;
        let out = kernels::conv2d_forward(x.data(), w.data(), &geom);
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.emit(
            t,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
            },
            &[self.id, weight.id],
        ))
    }

    /// Batch normalisation over `(N, H, W)` per channel.
    ///
    /// With `running = None` the batch statistics are used and returned so
    /// that the caller can update its running estimates; otherwise the
    /// supplied `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let x = self.value();
        let dims = x.dims4()?;
        let [n, c, h, w] = dims;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("batch_norm", x.shape(), gv.shape()));
        }
        let eps = T::lit(BN_EPS);
        let (mean, var, stats) = match running {
            None => {
                if n * h * w <= 1 {
                    return Err(Error::invalid(
                        "batch_norm in training mode needs more than one value per channel",
                    ));
                }
                let (m, v) = kernels::channel_moments(x.data(), dims);
                (m.clone(), v.clone(), Some(BatchStats { mean: m, var: v, count: n * h * w }))
            }
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (i, &xi) in x.data().iter().enumerate() {
            let ch = (i / hw) % c;
            let xh = (xi - mean[ch]) * inv_std[ch];
            xhat[i] = xh;
            out[i] = gv.data()[ch] * xh + bv.data()[ch];
        }
        let t = Tensor::new(x.shape(), out)?;
        let batch_stats = stats.is_some();
        let v = self.emit(
            t,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats,
            },
            &[self.id, gamma.id, beta.id],
        );
        Ok((v, stats))
    }

    /// `max(0, x) + slope_c · min(0, x)` with one slope per channel.
    pub fn prelu(&self, slope: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&slope);
        let x = self.value();
        let s = slope.value();
        let [_, c, h, w] = channel_layout(x.shape());
        if x.rank() < 2 || s.len() != c {
            return Err(Error::shape("prelu", x.shape(), s.shape()));
        }
        let hw = h * w;
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { v * s.data()[(i / hw) % c] })
            .collect();
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.emit(
            t,
            Op::Prelu {
                x: self.id,
                slope: slope.id,
            },
            &[self.id, slope.id],
        ))
    }

    pub fn pool2d(&self, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let geom = PoolGeom::new(x.dims4()?, k, stride, padding)?;
        let (out, argmax) = kernels::pool2d_forward(x.data(), &geom, kind);
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.emit(
            t,
            Op::Pool {
                x: self.id,
                kind,
                geom,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Concatenates NCHW variables along the channel axis.
    pub fn concat_channels(vars: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let [n, _, h, w] = first.value().dims4()?;
        let mut ctot = 0;
        let vals: Vec<_> = vars.iter().map(|v| v.value()).collect();
        for (v, var) in vals.iter().zip(vars) {
            first.same_tape(var);
            let [vn, vc, vh, vw] = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape("concat_channels", first.value().shape(), v.shape()));
            }
            ctot += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let t = Tensor::new(&[n, ctot, h, w], out)?;
        Ok(first.emit(t, Op::Concat(ids.clone()), &ids))
    }

    /// `Σ_k weights[k] · inputs[k]`; a `None` input stands for an all-zero
    /// tensor of the output shape.
    pub fn weighted_sum(inputs: &[Option<Var<'t, T>>], weights: Var<'t, T>) -> Result<Var<'t, T>> {
        let wv = weights.value();
        if wv.len() != inputs.len() {
            return Err(Error::shape("weighted_sum", &[inputs.len()], wv.shape()));
        }
        let first = inputs
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::invalid("weighted_sum needs at least one non-zero input"))?;
        let shape = first.shape();
        let mut out = vec![T::zero(); shape.iter().product()];
        for (k, inp) in inputs.iter().enumerate() {
            let Some(v) = inp else { continue };
            weights.same_tape(v);
            let val = v.value();
            if val.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, val.shape()));
            }
            let wk = wv.data()[k];
            out.iter_mut().zip(val.data()).for_each(|(o, &x)| *o += wk * x);
        }
        let mut ids: Vec<usize> = inputs.iter().flatten().map(|v| v.id).collect();
        ids.push(weights.id);
        let t = Tensor::new(&shape, out)?;
        Ok(weights.emit(
            t,
            Op::WeightedSum {
                inputs: inputs.iter().map(|v| v.map(|v| v.id)).collect(),
                weights: weights.id,
            },
            &ids,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().expect("rank >= 1");
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            out.extend(softmax_row(row));
        }
        let t = Tensor::new(x.shape(), out).expect("same shape");
        self.emit(t, Op::Softmax(self.id), &[self.id])
    }

    pub fn ln(&self) -> Var<'t, T> {
        let x = self.value();
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v.ln()).collect()).expect("same shape");
        self.emit(t, Op::Log(self.id), &[self.id])
    }

    pub fn exp(&self) -> Var<'t, T> {
        let x = self.value();
        let t = Tensor::new(x.shape(), x.data().iter().map(|v| v.exp()).collect()).expect("same shape");
        self.emit(t, Op::Exp(self.id), &[self.id])
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().expect("rank >= 1");
        let mut out = Vec::with_capacity(x.len());
        let mut norms = Vec::with_capacity(x.len() / d);
        for (r, row) in x.data().chunks(d).enumerate() {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm.as_f64() > NORMALIZE_MIN_NORM) {
                return Err(Error::invalid(format!(
                    "cannot normalise row {r}: norm {} is at or below {NORMALIZE_MIN_NORM:e}",
                    nrm
                )));
            }
            out.extend(row.iter().map(|&v| v / nrm));
            norms.push(nrm);
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.emit(t, Op::L2Normalize { x: self.id, norms }, &[self.id]))
    }

    /// Mean over all elements of `(self − target)²`.
    pub fn mse_mean(&self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&target);
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mse_mean", a.shape(), b.shape()));
        }
        let s: T = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let t = Tensor::scalar(s / T::from_usize_lossy(a.len()));
        Ok(self.emit(t, Op::MseMean(self.id, target.id), &[self.id, target.id]))
    }

    /// Mean softmax cross-entropy of `(M, K)` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (m, k) = match *x.shape() {
            [k] => (1, k),
            [m, k] => (m, k),
            _ => return Err(Error::invalid(format!("cross_entropy expects (M, K) logits, got {:?}", x.shape()))),
        };
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(m * k);
        let mut loss = T::zero();
        for (row, &y) in x.data().chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let t = Tensor::scalar(loss / T::from_usize_lossy(m));
        let logits = if x.rank() == 1 {
            self.reshape(&[1, k])?
        } else {
            *self
        };
        Ok(self.emit(
            t,
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.id],
        ))
    }

    /// `self · otherᵀ` for `(M, K)` and `(N, K)` matrices.
    pub fn matmul_nt(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k, n, k2) = match (a.shape(), b.shape()) {
            (&[m, k], &[n, k2]) => (m, k, n, k2),
            (s1, s2) => return Err(Error::shape("matmul_nt", s1, s2)),
        };
        if k != k2 {
            return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &a.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b.data()[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.emit(t, Op::MatmulNt(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`N` bias to every row of an `(M, N)` matrix.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().expect("rank >= 1");
        if b.len() != n {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % n])
            .collect();
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.emit(t, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// `(N, C, H, W) → (N, C)` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize_lossy(hw);
        let out = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.emit(t, Op::GlobalAvgPool(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let t = (*x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.emit(t, Op::Reshape(self.id), &[self.id]))
    }

    /// Row `r` of a rank-2 variable, as a rank-1 variable.
    pub fn row(&self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (m, d) = match *x.shape() {
            [m, d] => (m, d),
            _ => return Err(Error::invalid(format!("row() expects a matrix, got {:?}", x.shape()))),
        };
        if r >= m {
            return Err(Error::invalid(format!("row {r} out of range for {m} rows")));
        }
        let t = Tensor::new(&[d], x.data()[r * d..(r + 1) * d].to_vec())?;
        Ok(self.emit(t, Op::Row(self.id, r), &[self.id]))
    }

    /// Additive angular margin logits from an `(M, C)` cosine matrix.
    ///
    /// Target entries become `s·cos(θ + m)` with `θ = arccos(cos)` (cosine
    /// clamped to `±(1 − 1e-7)`, θ clamped to `[0, π − m − 1e-6]`); all other
    /// entries become `s·cos`.
    pub fn arc_margin(&self, labels: &[usize], scale: T, margin: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (m, k) = match *x.shape() {
            [m, k] => (m, k),
            _ => return Err(Error::invalid(format!("arc_margin expects (M, C), got {:?}", x.shape()))),
        };
        if labels.len() != m {
            return Err(Error::shape("arc_margin", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let lo = -T::one() + T::lit(COS_CLAMP);
        let hi = T::one() - T::lit(COS_CLAMP);
        let theta_max = T::lit(std::f64::consts::PI) - margin - T::lit(THETA_MARGIN);
        let mut out: Vec<T> = x.data().iter().map(|&c| c * scale).collect();
        let mut dtarget = Vec::with_capacity(m);
        for (r, &y) in labels.iter().enumerate() {
            let c = x.data()[r * k + y];
            let cc = c.max(lo).min(hi);
            let theta = cc.acos();
            let tc = theta.min(theta_max).max(T::zero());
            out[r * k + y] = scale * (tc + margin).cos();
            let active = cc == c && tc == theta;
            dtarget.push(if active {
                scale * (theta + margin).sin() / theta.sin()
            } else {
                T::zero()
            });
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.emit(
            t,
            Op::ArcMargin {
                cos: self.id,
                labels: labels.to_vec(),
                dtarget,
                scale,
            },
            &[self.id],
        ))
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_conv_is_multiplication() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[3.0]).with_requires_grad(true));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[-2.0]).with_requires_grad(true));
        let y = x.conv2d(w, 1, 0, 1).unwrap();
        assert_eq!(y.item(), -6.0);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3.0]);
        assert_eq!(g.get(x).unwrap(), &[-2.0]);
    }

    #[test]
    fn stem_rule_halves_spatial_extent() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros(&[8, 3, 3, 3]).unwrap());
        assert_eq!(x.conv2d(w, 2, 1, 1).unwrap().shape(), vec![1, 8, 2, 2]);
    }

    #[test]
    fn conv_rejects_bad_groups_and_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros(&[4, 1, 3, 3]).unwrap());
        assert!(x.conv2d(w, 1, 1, 2).is_err());
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]).unwrap());
        let err = x.conv2d(w, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[4, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn depthwise_matches_naive_correlation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::randn(&[3, 1, 3, 3], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), 1, 1, 3)
            .unwrap()
            .value();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..5 {
                    for j in 0..5 {
                        let mut s = 0.0;
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                    s += x.data()[((b * 3 + c) * 5 + ii as usize) * 5 + jj as usize]
                                        * w.data()[c * 9 + di * 3 + dj];
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + c) * 5 + i) * 5 + j];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_normalises_per_channel() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::randn(&[2, 3, 4, 4], 2.0, &mut rng).unwrap());
        let g = tape.constant(Tensor::full(&[3], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]).unwrap());
        let (y, stats) = x.batch_norm(g, b, None).unwrap();
        assert!(stats.is_some());
        let (m, v) = kernels::channel_moments(y.value().data(), [2, 3, 4, 4]);
        for c in 0..3 {
            assert!(m[c].abs() < 1e-4);
            assert!((v[c] - 1.0).abs() < 1e-4);
        }
        let zeros = tape.constant(Tensor::zeros(&[2, 3, 4, 4]).unwrap());
        let (z, _) = zeros.batch_norm(g, b, None).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_rejects_single_value_channels() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert!(x.batch_norm(g, b, None).is_err());
        let m = [0.0, 0.0];
        let v = [1.0, 1.0];
        assert!(x.batch_norm(g, b, Some((&m, &v))).is_ok());
    }

    #[test]
    fn prelu_identity_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 1, 2], &[1.0, 2.0, 0.5, 3.0]));
        let s = tape.constant(t(&[2], &[0.25, 0.1]));
        assert_eq!(x.prelu(s).unwrap().value().data(), &[1.0, 2.0, 0.5, 3.0]);
        let mixed = tape.constant(t(&[1, 2, 1, 2], &[-1.0, 2.0, -0.5, 3.0]));
        let ones = tape.constant(t(&[2], &[1.0, 1.0]));
        assert_eq!(mixed.prelu(ones).unwrap().value().data(), &[-1.0, 2.0, -0.5, 3.0]);
        let bad = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(mixed.prelu(bad).is_err());
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = x.pool2d(PoolKind::Max, 3, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert_eq!(y.value().data()[4], 9.0);
        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.7).unwrap());
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let y = c.pool2d(kind, 3, 1, 1).unwrap();
            assert!(y.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_and_normalize_examples() {
        let tape = Tape::new();
        let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let n = tape.constant(t(&[2], &[3.0, 4.0])).l2_normalize().unwrap();
        let d = n.value();
        assert!((d.data()[0] - 0.6).abs() < 1e-12 && (d.data()[1] - 0.8).abs() < 1e-12);
        assert!(tape.constant(t(&[2], &[0.0, 1e-13])).l2_normalize().is_err());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        assert!(Var::concat_channels(&[a, b]).is_err());
        let c = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        assert_eq!(Var::concat_channels(&[a, c]).unwrap().shape(), vec![1, 5, 4, 4]);
    }

    #[test]
    fn backward_trivia() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad(true));
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);
        let l = w.mse_mean(w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(tape.backward(w).is_err());
    }
}
