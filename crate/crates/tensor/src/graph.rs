use std::collections::HashMap;

use crate::kernels::{self, BinaryKind, Moment, Pooling, UnaryKind};
use crate::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameters of a per-channel two-layer perceptron, see [`Graph::channel_mlp`].
#[derive(Clone, Copy, Debug)]
pub struct ChannelMlpVars {
    /// `[1, C, hidden, inputs]`
    pub w1: Var,
    /// `[1, C, hidden, 1]`
    pub b1: Var,
    /// `[1, C, hidden, 1]`
    pub w2: Var,
    /// `[1, C, 1, 1]`
    pub b2: Var,
}

enum Op<T> {
    Input,
    Param,
    Conv { x: Var, w: Var, b: Option<Var> },
    MaxPool2 { x: Var, arg: Vec<u32> },
    Upsample2 { x: Var },
    Concat { xs: Vec<Var> },
    Binary { a: Var, b: Var, kind: BinaryKind },
    Unary { x: Var, kind: UnaryKind },
    Scale { x: Var, s: T },
    Moment { x: Var, pooling: Pooling, m: Moment },
    Gather { x: Var, index: Vec<u32> },
    ChannelMlp { inputs: Vec<Var>, p: ChannelMlpVars, hidden: Vec<T> },
    BceLogits { x: Var, target: Tensor<T> },
    BceProb { p: Var, target: Tensor<T> },
    Mse { a: Var, b: Var },
    MeanAll { x: Var },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for backpropagation.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Probability clamp used by [`Graph::bce_prob`].
pub const PROB_EPS: f64 = 1e-12;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no gradient requirements (inference).
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient can be read back from [`Gradients::of`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(out, Op::Conv { x, w, b }, &ins)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (out, arg) = kernels::maxpool2(self.value(x));
        self.push(out, Op::MaxPool2 { x, arg }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        self.push(out, Op::Upsample2 { x }, &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let s0 = self.shape(xs[0]);
        let c_total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let [n, _, h, w] = s0;
        let mut out = Tensor::zeros([n, c_total, h, w]);
        let hw = h * w;
        for s in 0..n {
            let mut off = 0;
            for &v in xs {
                let t = self.value(v);
                let [tn, c, th, tw] = t.shape();
                assert_eq!((tn, th, tw), (n, h, w), "concat shape mismatch");
                let src = &t.data()[s * c * hw..(s + 1) * c * hw];
                let dst_start = (s * c_total + off) * hw;
                out.data_mut()[dst_start..dst_start + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        self.push(out, Op::Concat { xs: xs.to_vec() }, xs)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Var {
        let out = kernels::binary(kind, self.value(a), self.value(b));
        self.push(out, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Div)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let out = kernels::unary(kind, self.value(x));
        self.push(out, Op::Unary { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn mean(&mut self, x: Var, pooling: Pooling) -> Var {
        let m = Moment::Mean;
        let out = kernels::moment(self.value(x), pooling, m);
        self.push(out, Op::Moment { x, pooling, m }, &[x])
    }

    pub fn std(&mut self, x: Var, pooling: Pooling, eps: f64) -> Var {
        let m = Moment::Std { eps };
        let out = kernels::moment(self.value(x), pooling, m);
        self.push(out, Op::Moment { x, pooling, m }, &[x])
    }

    /// `out[n, c, p] = x[n, c, index[n, c, p]]`, a permutation within each plane.
    pub fn gather_plane(&mut self, x: Var, index: Vec<u32>) -> Var {
        let t = self.value(x);
        assert_eq!(index.len(), t.len());
        let hw = t.plane();
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| t.data()[(i / hw) * hw + j as usize])
            .collect();
        let out = Tensor::from_vec(t.shape(), data);
        self.push(out, Op::Gather { x, index }, &[x])
    }

    /// Independent tanh perceptron per channel: each `[N, C, 1, 1]` input
    /// contributes one feature to channel `c`'s hidden layer.
    pub fn channel_mlp(&mut self, inputs: &[Var], p: ChannelMlpVars) -> Var {
        let [n, c, _, _] = self.shape(inputs[0]);
        let [_, pc, hidden, nin] = self.shape(p.w1);
        assert_eq!(pc, c);
        assert_eq!(nin, inputs.len());
        for &v in inputs {
            assert_eq!(self.shape(v), [n, c, 1, 1], "channel_mlp input shape");
        }
        let (w1, b1, w2, b2) = (
            self.value(p.w1).data(),
            self.value(p.b1).data(),
            self.value(p.w2).data(),
            self.value(p.b2).data(),
        );
        let mut h_store = vec![T::zero(); n * c * hidden];
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for s in 0..n {
            for ch in 0..c {
                let mut acc = b2[ch];
                for j in 0..hidden {
                    let mut z = b1[ch * hidden + j];
                    for (k, &v) in inputs.iter().enumerate() {
                        z += w1[(ch * hidden + j) * nin + k] * self.value(v).data()[s * c + ch];
                    }
                    let h = z.tanh();
                    h_store[(s * c + ch) * hidden + j] = h;
                    acc += w2[ch * hidden + j] * h;
                }
                out.data_mut()[s * c + ch] = acc;
            }
        }
        let mut deps = inputs.to_vec();
        deps.extend([p.w1, p.b1, p.w2, p.b2]);
        self.push(
            out,
            Op::ChannelMlp {
                inputs: inputs.to_vec(),
                p,
                hidden: h_store,
            },
            &deps,
        )
    }

    /// Mean binary cross-entropy of logits `x` against soft targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<T>) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.shape(), target.shape());
        let mut s = T::zero();
        for (&v, &t) in xt.data().iter().zip(target.data()) {
            s += v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(s / T::of(xt.len() as f64));
        self.push(out, Op::BceLogits { x, target }, &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`) against soft targets.
    pub fn bce_prob(&mut self, p: Var, target: Tensor<T>) -> Var {
        let pt = self.value(p);
        assert_eq!(pt.shape(), target.shape());
        let (lo, hi) = (T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
        let mut s = T::zero();
        for (&v, &t) in pt.data().iter().zip(target.data()) {
            let q = v.max(lo).min(hi);
            s -= t * q.ln() + (T::one() - t) * (T::one() - q).ln();
        }
        let out = Tensor::scalar(s / T::of(pt.len() as f64));
        self.push(out, Op::BceProb { p, target }, &[p])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape(), bt.shape());
        let s: T = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / T::of(at.len() as f64));
        self.push(out, Op::Mse { a, b }, &[a, b])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(out, Op::MeanAll { x }, &[x])
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), [1, 1, 1, 1], "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        };
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => return,
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Conv { x, w, b } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.wants(*x),
                );
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    acc(*w, cg.dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(*b, cg.db);
                    }
                }
            }
            Op::MaxPool2 { x, arg } => {
                acc(*x, kernels::maxpool2_backward(self.shape(*x), arg, g));
            }
            Op::Upsample2 { x } => {
                acc(*x, kernels::upsample2_backward(self.shape(*x), g));
            }
            Op::Concat { xs } => {
                let [n, ct, h, w] = g.shape();
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut t = Tensor::zeros([n, c, h, w]);
                        for s in 0..n {
                            let src = (s * ct + off) * hw;
                            t.data_mut()[s * c * hw..(s + 1) * c * hw]
                                .copy_from_slice(&g.data()[src..src + c * hw]);
                        }
                        acc(v, t);
                    }
                    off += c;
                }
            }
            Op::Binary { a, b, kind } => {
                let (ga, gb) =
                    kernels::binary_backward(*kind, self.value(*a), self.value(*b), g);
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Unary { x, kind } => {
                acc(*x, kernels::unary_backward(*kind, self.value(*x), out, g));
            }
            Op::Scale { x, s } => {
                acc(*x, g.map(|v| v * *s));
            }
            Op::Moment { x, pooling, m } => {
                acc(
                    *x,
                    kernels::moment_backward(self.value(*x), *pooling, *m, out, g),
                );
            }
            Op::Gather { x, index } => {
                let hw = g.plane();
                let mut dx = Tensor::zeros(self.shape(*x));
                for (k, (&j, &gv)) in index.iter().zip(g.data()).enumerate() {
                    dx.data_mut()[(k / hw) * hw + j as usize] += gv;
                }
                acc(*x, dx);
            }
            Op::ChannelMlp { inputs, p, hidden } => {
                let [n, c, _, _] = g.shape();
                let [_, _, hd, nin] = self.shape(p.w1);
                let w1 = self.value(p.w1).data();
                let w2 = self.value(p.w2).data();
                let mut dw1 = Tensor::zeros(self.shape(p.w1));
                let mut db1 = Tensor::zeros(self.shape(p.b1));
                let mut dw2 = Tensor::zeros(self.shape(p.w2));
                let mut db2 = Tensor::zeros(self.shape(p.b2));
                let mut din: Vec<Tensor<T>> =
                    inputs.iter().map(|_| Tensor::zeros([n, c, 1, 1])).collect();
                for s in 0..n {
                    for ch in 0..c {
                        let go = g.data()[s * c + ch];
                        db2.data_mut()[ch] += go;
                        for j in 0..hd {
                            let h = hidden[(s * c + ch) * hd + j];
                            dw2.data_mut()[ch * hd + j] += go * h;
                            let dz = go * w2[ch * hd + j] * (T::one() - h * h);
                            db1.data_mut()[ch * hd + j] += dz;
                            for (k, &v) in inputs.iter().enumerate() {
                                let xv = self.value(v).data()[s * c + ch];
                                dw1.data_mut()[(ch * hd + j) * nin + k] += dz * xv;
                                din[k].data_mut()[s * c + ch] +=
                                    dz * w1[(ch * hd + j) * nin + k];
                            }
                        }
                    }
                }
                for (&v, d) in inputs.iter().zip(din) {
                    if self.wants(v) {
                        acc(v, d);
                    }
                }
                for (v, d) in [(p.w1, dw1), (p.b1, db1), (p.w2, dw2), (p.b2, db2)] {
                    if self.wants(v) {
                        acc(v, d);
                    }
                }
            }
            Op::BceLogits { x, target } => {
                let xt = self.value(*x);
                let scale = g.data()[0] / T::of(xt.len() as f64);
                let d = xt
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&v, &t)| (kernels::sigmoid(v) - t) * scale)
                    .collect();
                acc(*x, Tensor::from_vec(xt.shape(), d));
            }
            Op::BceProb { p, target } => {
                let pt = self.value(*p);
                let scale = g.data()[0] / T::of(pt.len() as f64);
                let (lo, hi) = (T::of(PROB_EPS), T::of(1.0 - PROB_EPS));
                let d = pt
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&v, &t)| {
                        if v < lo || v > hi {
                            T::zero()
                        } else {
                            scale * (v - t) / (v * (T::one() - v))
                        }
                    })
                    .collect();
                acc(*p, Tensor::from_vec(pt.shape(), d));
            }
            Op::Mse { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let scale = g.data()[0] * T::of(2.0) / T::of(at.len() as f64);
                let da: Vec<T> = at
                    .data()
                    .iter()
                    .zip(bt.data())
                    .map(|(&x, &y)| scale * (x - y))
                    .collect();
                if self.wants(*b) {
                    acc(*b, Tensor::from_vec(bt.shape(), da.iter().map(|&v| -v).collect()));
                }
                if self.wants(*a) {
                    acc(*a, Tensor::from_vec(at.shape(), da));
                }
            }
            Op::MeanAll { x } => {
                let shape = self.shape(*x);
                let n: usize = shape.iter().product();
                acc(*x, Tensor::full(shape, g.data()[0] / T::of(n as f64)));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|v| self.of(*v))
    }
}
