//! Reverse-mode tape. One tape holds the graph of a single sample's forward
//! pass; `backward` walks it once and returns gradients keyed by parameter.

use std::collections::{BTreeMap, HashMap};

use ndarray::{ArrayD, IxDyn};

use super::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, Conv2dShape};
use super::params::{Binding, ParamId, ParamKey, ParamSet};
use super::{Element, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter, in deterministic order.
pub type GradMap<E> = BTreeMap<ParamKey, Tensor<E>>;

enum Op<E: Element> {
    Const,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, E),
    AddScalar(Var, E),
    Ln(Var),
    Exp(Var),
    Sigmoid(Var),
    LeakyRelu(Var, E),
    /// w (out, in) · x (in,) + nothing — bias is a separate Add.
    MatVec { w: Var, x: Var },
    Conv2d { x: Var, w: Var, sh: Conv2dShape },
    /// b (C,) broadcast onto x (C, H, W).
    BiasAdd { x: Var, b: Var },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mu: Vec<E>,
        inv_std: Vec<E>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    SliceChannels { x: Var, start: usize, len: usize },
    Reshape { x: Var, from: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
}

struct Node<E: Element> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

/// Computation tape for one sample.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    bindings: HashMap<(ParamKey, bool), Var>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Contiguous elementwise map; all tape values are standard layout.
fn unary<E: Element>(x: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    let mut out = x.clone();
    for v in out.as_slice_mut().expect("contiguous") {
        *v = f(*v);
    }
    out
}

fn binary<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let mut out = a.clone();
    let os = out.as_slice_mut().expect("contiguous");
    let bs = b.as_slice().expect("contiguous");
    for (o, bv) in os.iter_mut().zip(bs) {
        *o = f(*o, *bv);
    }
    out
}

fn slice_sum<E: Element>(x: &Tensor<E>) -> E {
    super::simd::sum(x.as_slice().expect("contiguous"))
}

/// In-place a += b over slices.
pub(crate) fn add_assign<E: Element>(a: &mut Tensor<E>, b: &Tensor<E>) {
    let as_ = a.as_slice_mut().expect("contiguous");
    let bs = b.as_slice().expect("contiguous");
    for (x, y) in as_.iter_mut().zip(bs) {
        *x = *x + *y;
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> E {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "expected scalar node");
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, Op::Const)
    }

    pub fn leaf_scalar(&mut self, v: E) -> Var {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), false, Op::Const)
    }

    /// Binds one parameter. Repeated bindings of the same parameter on one
    /// tape share a node so gradients accumulate naturally.
    pub fn param(&mut self, set: &ParamSet<E>, id: ParamId, binding: Binding) -> Var {
        let key = set.key(id);
        let trainable = binding == Binding::Trainable;
        if let Some(&v) = self.bindings.get(&(key, trainable)) {
            return v;
        }
        let value = set.value(id).as_ref().clone();
        let op = if trainable { Op::Param(key) } else { Op::Const };
        let v = self.push(value, trainable, op);
        self.bindings.insert((key, trainable), v);
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, ng, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, ng, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let value = unary(&self.nodes[a.0].value, |v| v * c);
        let ng = self.ng(a);
        self.push(value, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let value = unary(&self.nodes[a.0].value, |v| v + c);
        let ng = self.ng(a);
        self.push(value, ng, Op::AddScalar(a, c))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = unary(&self.nodes[a.0].value, |v| v.ln());
        let ng = self.ng(a);
        self.push(value, ng, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = unary(&self.nodes[a.0].value, |v| v.exp());
        let ng = self.ng(a);
        self.push(value, ng, Op::Exp(a))
    }

    /// Sigmoid clamped to (floor, 1-floor) so downstream logs stay finite.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let floor = E::prob_floor();
        let one = E::one();
        let value = unary(&self.nodes[a.0].value, |v| {
            let s = one / (one + (-v).exp());
            s.max(floor).min(one - floor)
        });
        let ng = self.ng(a);
        self.push(value, ng, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: E) -> Var {
        let zero = E::zero();
        let value = unary(&self.nodes[a.0].value, |v| if v > zero { v } else { v * slope });
        let ng = self.ng(a);
        self.push(value, ng, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, E::zero())
    }

    // ---- linear algebra ----

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 2, "matvec weight must be 2-d");
        let (out_dim, in_dim) = (ws[0], ws[1]);
        assert_eq!(in_dim, self.nodes[x.0].value.len(), "matvec dim mismatch");
        let mut y = vec![E::zero(); out_dim];
        let ws_flat = self.nodes[w.0].value.as_slice().unwrap();
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        for (r, yv) in y.iter_mut().enumerate() {
            *yv = super::simd::dot(&ws_flat[r * in_dim..(r + 1) * in_dim], xs);
        }
        let ng = self.ng(w) || self.ng(x);
        self.push(ArrayD::from_shape_vec(IxDyn(&[out_dim]), y).unwrap(), ng, Op::MatVec { w, x })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be (C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (Cout,Cin,k,k)");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let sh = Conv2dShape::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad);
        let y = conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &sh);
        let ng = self.ng(x) || self.ng(w);
        self.push(y, ng, Op::Conv2d { x, w, sh })
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.nodes[b.0].value.len(), xs[0], "bias length != channels");
        let mut y = self.nodes[x.0].value.clone();
        {
            let bs = &self.nodes[b.0].value;
            let plane = xs[1] * xs[2];
            let ys = y.as_slice_mut().unwrap();
            for (c, bv) in bs.iter().enumerate() {
                for v in &mut ys[c * plane..(c + 1) * plane] {
                    *v = *v + *bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(y, ng, Op::BiasAdd { x, b })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: E) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(c % groups == 0, "channels not divisible by groups");
        let gsize = (c / groups) * h * w;
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let mut mu = vec![E::zero(); groups];
        let mut inv_std = vec![E::zero(); groups];
        let mut y = vec![E::zero(); xv.len()];
        let n = E::from_f64(gsize as f64);
        for g in 0..groups {
            let seg = &xv[g * gsize..(g + 1) * gsize];
            let m = super::simd::sum(seg) / n;
            let var = (super::simd::dot(seg, seg) / n - m * m).max(E::zero());
            let is = E::one() / (var + eps).sqrt();
            mu[g] = m;
            inv_std[g] = is;
            for (i, v) in seg.iter().enumerate() {
                y[g * gsize + i] = (*v - m) * is;
            }
        }
        // affine: per-channel gamma/beta
        let gv = self.nodes[gamma.0].value.as_slice().unwrap().to_vec();
        let bv = self.nodes[beta.0].value.as_slice().unwrap().to_vec();
        let plane = h * w;
        for ch in 0..c {
            for i in 0..plane {
                let idx = ch * plane + i;
                y[idx] = y[idx] * gv[ch] + bv[ch];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&xs), y).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let _ = eps;
        self.push(value, ng, Op::GroupNorm { x, gamma, beta, groups, mu, inv_std })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let mut y = vec![E::zero(); c * 4 * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[(ch * h + i) * w + j];
                    let base = ch * 4 * h * w;
                    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        y[base + (2 * i + a) * 2 * w + (2 * j + b)] = v;
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, 2 * h, 2 * w]), y).unwrap();
        let ng = self.ng(x);
        self.push(value, ng, Op::Upsample2(x))
    }

    // ---- shape ----

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = Vec::new();
        let mut ng = false;
        for p in parts {
            assert_eq!(self.nodes[p.0].value.ndim(), 1, "concat expects vectors");
            out.extend(self.nodes[p.0].value.iter().copied());
            ng = ng || self.ng(*p);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[out.len()]), out).unwrap();
        self.push(value, ng, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert_eq!(self.nodes[x.0].value.ndim(), 1, "slice expects a vector");
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        assert!(start + len <= xv.len(), "slice out of bounds");
        let value = ArrayD::from_shape_vec(IxDyn(&[len]), xv[start..start + len].to_vec()).unwrap();
        let ng = self.ng(x);
        self.push(value, ng, Op::Slice { x, start, len })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3);
        let plane = xs[1] * xs[2];
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let value = ArrayD::from_shape_vec(
            IxDyn(&[len, xs[1], xs[2]]),
            xv[start * plane..(start + len) * plane].to_vec(),
        )
        .unwrap();
        let ng = self.ng(x);
        self.push(value, ng, Op::SliceChannels { x, start, len })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.nodes[x.0].value.shape().to_vec();
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let ng = self.ng(x);
        self.push(value, ng, Op::Reshape { x, from })
    }

    // ---- reductions / distributions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = slice_sum(&self.nodes[a.0].value);
        let ng = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), ng, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = slice_sum(&self.nodes[a.0].value);
        let m = s / E::from_f64(n as f64);
        let ng = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), ng, Op::MeanAll(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.ndim(), 1);
        let value = softmax_1d(&self.nodes[a.0].value);
        let ng = self.ng(a);
        self.push(value, ng, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.ndim(), 1);
        let x = &self.nodes[a.0].value;
        let max = x.iter().fold(E::neg_infinity(), |m, v| m.max(*v));
        let lse = x.iter().fold(E::zero(), |acc, v| acc + (*v - max).exp()).ln() + max;
        let value = x.mapv(|v| v - lse);
        let ng = self.ng(a);
        self.push(value, ng, Op::LogSoftmax(a))
    }

    // ---- composites ----

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// max(margin - d, 0) as used by the hinge terms.
    pub fn hinge(&mut self, d: Var, margin: E) -> Var {
        let neg = self.scale(d, E::from_f64(-1.0));
        let shifted = self.add_scalar(neg, margin);
        self.relu(shifted)
    }

    /// Cross-entropy of a one-hot label against logits (stable log-softmax).
    pub fn cross_entropy_logits(&mut self, logits: Var, class: usize) -> Var {
        let lsm = self.log_softmax(logits);
        let picked = self.slice(lsm, class, 1);
        let s = self.sum_all(picked);
        self.scale(s, E::from_f64(-1.0))
    }

    /// Σ p·log p computed as softmax ⊙ log-softmax (0·log 0 is an exact 0).
    pub fn neg_entropy_logits(&mut self, logits: Var) -> Var {
        let p = self.softmax(logits);
        let lp = self.log_softmax(logits);
        let prod = self.mul(p, lp);
        self.sum_all(prod)
    }

    /// ½ Σ (μ² + exp(logvar) − 1 − logvar).
    pub fn kl_standard_normal(&mut self, mu: Var, logvar: Var) -> Var {
        let mu2 = self.mul(mu, mu);
        let ev = self.exp(logvar);
        let a = self.add(mu2, ev);
        let b = self.add_scalar(a, E::from_f64(-1.0));
        let c = self.sub(b, logvar);
        let s = self.sum_all(c);
        self.scale(s, E::from_f64(0.5))
    }

    // ---- backward ----

    /// Accumulates gradients of `loss` (a scalar node) into a map keyed by
    /// parameter. Node traversal order is fixed, so results are deterministic.
    pub fn backward(&self, loss: Var) -> GradMap<E> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), E::one()));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = grads[i].take().unwrap();
            self.backward_node(i, &dy, &mut grads);
            if matches!(self.nodes[i].op, Op::Param(_)) {
                grads[i] = Some(dy); // keep for extraction
            }
        }

        let mut map = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = node.op {
                if let Some(g) = grads[i].take() {
                    map.entry(key)
                        .and_modify(|acc| *acc = &*acc + &g)
                        .or_insert(g);
                }
            }
        }
        map
    }

    fn accum(&self, grads: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_assign(g, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, i: usize, dy: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &self.nodes[i].op {
            Op::Const | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, unary(dy, |v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accum(grads, *a, binary(dy, &self.nodes[b.0].value, |g, v| g * v));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, binary(dy, &self.nodes[a.0].value, |g, v| g * v));
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if self.ng(*a) {
                    self.accum(grads, *a, binary(dy, bv, |g, v| g / v));
                }
                if self.ng(*b) {
                    let y = &self.nodes[i].value;
                    let mut d = binary(dy, y, |g, v| -g * v);
                    let ds = d.as_slice_mut().unwrap();
                    for (x, v) in ds.iter_mut().zip(bv.as_slice().unwrap()) {
                        *x = *x / *v;
                    }
                    self.accum(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, unary(dy, |v| v * c));
            }
            Op::AddScalar(a, _) => {
                self.accum(grads, *a, dy.clone());
            }
            Op::Ln(a) => {
                self.accum(grads, *a, binary(dy, &self.nodes[a.0].value, |g, v| g / v));
            }
            Op::Exp(a) => {
                self.accum(grads, *a, binary(dy, &self.nodes[i].value, |g, v| g * v));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let one = E::one();
                let d = binary(dy, y, |g, s| g * s * (one - s));
                self.accum(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let x = &self.nodes[a.0].value;
                let d = binary(dy, x, |g, xv| if xv > E::zero() { g } else { g * slope });
                self.accum(grads, *a, d);
            }
            Op::MatVec { w, x } => {
                let dys = dy.as_slice().unwrap();
                let ws = self.nodes[w.0].value.shape();
                let (out_dim, in_dim) = (ws[0], ws[1]);
                if self.ng(*w) {
                    // dW = dy ⊗ x
                    let xs = self.nodes[x.0].value.as_slice().unwrap();
                    let mut dw = vec![E::zero(); out_dim * in_dim];
                    for (r, dval) in dys.iter().enumerate() {
                        let row = &mut dw[r * in_dim..(r + 1) * in_dim];
                        for (o, xval) in row.iter_mut().zip(xs) {
                            *o = *dval * *xval;
                        }
                    }
                    self.accum(
                        grads,
                        *w,
                        ArrayD::from_shape_vec(IxDyn(&[out_dim, in_dim]), dw).unwrap(),
                    );
                }
                if self.ng(*x) {
                    // dX = Wᵀ · dy, accumulated row by row
                    let ws_flat = self.nodes[w.0].value.as_slice().unwrap();
                    let mut dx = vec![E::zero(); in_dim];
                    for (r, g) in dys.iter().enumerate() {
                        let row = &ws_flat[r * in_dim..(r + 1) * in_dim];
                        for (d, wv) in dx.iter_mut().zip(row) {
                            *d = *d + *g * *wv;
                        }
                    }
                    self.accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&[in_dim]), dx).unwrap());
                }
            }
            Op::Conv2d { x, w, sh } => {
                if self.ng(*w) {
                    let dw = conv2d_backward_weight(dy, &self.nodes[x.0].value, sh);
                    self.accum(grads, *w, dw);
                }
                if self.ng(*x) {
                    let dx = conv2d_backward_input(dy, &self.nodes[w.0].value, sh);
                    self.accum(grads, *x, dx);
                }
            }
            Op::BiasAdd { x, b } => {
                self.accum(grads, *x, dy.clone());
                if self.ng(*b) {
                    let shape = self.nodes[x.0].value.shape();
                    let (c, plane) = (shape[0], shape[1] * shape[2]);
                    let ds = dy.as_slice().unwrap();
                    let mut db = vec![E::zero(); c];
                    for ch in 0..c {
                        for v in &ds[ch * plane..(ch + 1) * plane] {
                            db[ch] = db[ch] + *v;
                        }
                    }
                    self.accum(grads, *b, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mu, inv_std } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let plane = h * w;
                let gsize = (c / groups) * plane;
                let xv = self.nodes[x.0].value.as_slice().unwrap();
                let gv = self.nodes[gamma.0].value.as_slice().unwrap();
                let ds = dy.as_slice().unwrap();
                // xhat recomputed from saved statistics
                let mut xhat = vec![E::zero(); xv.len()];
                for g in 0..*groups {
                    for i in 0..gsize {
                        let idx = g * gsize + i;
                        xhat[idx] = (xv[idx] - mu[g]) * inv_std[g];
                    }
                }
                if self.ng(*gamma) {
                    let mut dgamma = vec![E::zero(); c];
                    for ch in 0..c {
                        for i in 0..plane {
                            let idx = ch * plane + i;
                            dgamma[ch] = dgamma[ch] + ds[idx] * xhat[idx];
                        }
                    }
                    self.accum(grads, *gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                }
                if self.ng(*beta) {
                    let mut dbeta = vec![E::zero(); c];
                    for ch in 0..c {
                        for i in 0..plane {
                            dbeta[ch] = dbeta[ch] + ds[ch * plane + i];
                        }
                    }
                    self.accum(grads, *beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
                }
                if self.ng(*x) {
                    let n = E::from_f64(gsize as f64);
                    let mut dxhat = vec![E::zero(); xv.len()];
                    for ch in 0..c {
                        for i in 0..plane {
                            let idx = ch * plane + i;
                            dxhat[idx] = ds[idx] * gv[ch];
                        }
                    }
                    let mut dx = vec![E::zero(); xv.len()];
                    for g in 0..*groups {
                        let seg = g * gsize..(g + 1) * gsize;
                        let mut sum_d = E::zero();
                        let mut sum_dx = E::zero();
                        for idx in seg.clone() {
                            sum_d = sum_d + dxhat[idx];
                            sum_dx = sum_dx + dxhat[idx] * xhat[idx];
                        }
                        let m_d = sum_d / n;
                        let m_dx = sum_dx / n;
                        for idx in seg {
                            dx[idx] = inv_std[g] * (dxhat[idx] - m_d - xhat[idx] * m_dx);
                        }
                    }
                    self.accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap());
                }
            }
            Op::Upsample2(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let ds = dy.as_slice().unwrap();
                let mut dx = vec![E::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let mut s = E::zero();
                            let base = ch * 4 * h * w;
                            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                s = s + ds[base + (2 * i + a) * 2 * w + (2 * j + b)];
                            }
                            dx[(ch * h + i) * w + j] = s;
                        }
                    }
                }
                self.accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap());
            }
            Op::Concat(parts) => {
                let ds = dy.as_slice().unwrap();
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let dv = ds[off..off + len].to_vec();
                    off += len;
                    self.accum(grads, *p, ArrayD::from_shape_vec(IxDyn(&[len]), dv).unwrap());
                }
            }
            Op::Slice { x, start, len } => {
                let total = self.nodes[x.0].value.len();
                let mut dx = vec![E::zero(); total];
                let ds = dy.as_slice().unwrap();
                dx[*start..*start + *len].copy_from_slice(ds);
                self.accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&[total]), dx).unwrap());
            }
            Op::SliceChannels { x, start, len } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let plane = shape[1] * shape[2];
                let mut dx = vec![E::zero(); shape.iter().product()];
                let ds = dy.as_slice().unwrap();
                dx[*start * plane..(*start + *len) * plane].copy_from_slice(ds);
                self.accum(grads, *x, ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap());
            }
            Op::Reshape { x, from } => {
                let d = dy.clone().into_shape_with_order(IxDyn(from)).unwrap();
                self.accum(grads, *x, d);
            }
            Op::SumAll(a) => {
                let g = *dy.iter().next().unwrap();
                let d = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g);
                self.accum(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let n = E::from_f64(self.nodes[a.0].value.len() as f64);
                let g = *dy.iter().next().unwrap() / n;
                let d = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g);
                self.accum(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let dot = dy.iter().zip(y.iter()).fold(E::zero(), |acc, (g, p)| acc + *g * *p);
                let d = ndarray::Zip::from(dy).and(y).map_collect(|g, p| (*g - dot) * *p);
                self.accum(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let sum = dy.iter().fold(E::zero(), |acc, g| acc + *g);
                let d = ndarray::Zip::from(dy).and(y).map_collect(|g, ly| *g - ly.exp() * sum);
                self.accum(grads, *a, d);
            }
        }
    }
}

fn softmax_1d<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let max = x.iter().fold(E::neg_infinity(), |m, v| m.max(*v));
    let ex = x.mapv(|v| (v - max).exp());
    let s = ex.iter().fold(E::zero(), |acc, v| acc + *v);
    ex.mapv(|v| v / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. one parameter of `set`.
    fn fd_grad(
        set: &mut ParamSet<f64>,
        id: ParamId,
        eps: f64,
        mut f: impl FnMut(&ParamSet<f64>) -> f64,
    ) -> ArrayD<f64> {
        let shape = set.value(id).shape().to_vec();
        let n = set.value(id).len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = set.value(id).as_slice().unwrap()[i];
            set.update(id.0, |t| t.as_slice_mut().unwrap()[i] = orig + eps);
            let fp = f(set);
            set.update(id.0, |t| t.as_slice_mut().unwrap()[i] = orig - eps);
            let fm = f(set);
            set.update(id.0, |t| t.as_slice_mut().unwrap()[i] = orig);
            g[i] = (fp - fm) / (2.0 * eps);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), g).unwrap()
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-4);
            assert!(
                ((x - y) / denom).abs() < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    /// Exercises every op in one composite graph against finite differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut set = ParamSet::<f64>::new("t");
        let wconv = set.add("wconv", randn(&mut rng, &[3, 2, 3, 3]) * 0.5);
        let bconv = set.add("bconv", randn(&mut rng, &[3]) * 0.1);
        let gamma = set.add("gamma", ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let beta = set.add("beta", ArrayD::from_elem(IxDyn(&[3]), 0.0));
        let wd = set.add("wd", randn(&mut rng, &[4, 27]) * 0.3);
        let bd = set.add("bd", randn(&mut rng, &[4]) * 0.1);
        let x0 = randn(&mut rng, &[2, 6, 6]) * 0.8;

        let eval = |set: &ParamSet<f64>| -> f64 {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x0.clone());
            let w = t.param(set, wconv, Binding::Trainable);
            let b = t.param(set, bconv, Binding::Trainable);
            let g = t.param(set, gamma, Binding::Trainable);
            let be = t.param(set, beta, Binding::Trainable);
            let c = t.conv2d(x, w, 2, 1); // (3,3,3)
            let c = t.bias_add(c, b);
            let c = t.group_norm(c, g, be, 3, 1e-5);
            let c = t.leaky_relu(c, 0.1);
            let u = t.upsample2(c); // (3,6,6)
            let u = t.slice_channels(u, 0, 3);
            let s = t.sigmoid(u);
            let flat = t.reshape(c, &[27]);
            let wdv = t.param(set, wd, Binding::Trainable);
            let bdv = t.param(set, bd, Binding::Trainable);
            let h = t.matvec(wdv, flat);
            let h = t.add(h, bdv);
            let sm = t.neg_entropy_logits(h);
            let lsm = t.cross_entropy_logits(h, 1);
            let p1 = t.slice(h, 0, 2);
            let p2 = t.slice(h, 2, 2);
            let cc = t.concat(&[p2, p1]);
            let e = t.exp(cc);
            let l = t.ln(e);
            let q = t.mul(l, l);
            let d = t.div(q, e);
            let m1 = t.mean_all(d);
            let m2 = t.mean_all(s);
            let kl = t.kl_standard_normal(p1, p2);
            let h1 = t.hinge(m1, 0.5);
            let sum1 = t.add(m2, sm);
            let sum2 = t.add(lsm, kl);
            let sum3 = t.add(sum1, h1);
            let total = t.add(sum3, sum2);
            t.scalar(total)
        };

        // autodiff grads
        let mut t = Tape::<f64>::new();
        let x = t.leaf(x0.clone());
        let w = t.param(&set, wconv, Binding::Trainable);
        let b = t.param(&set, bconv, Binding::Trainable);
        let g = t.param(&set, gamma, Binding::Trainable);
        let be = t.param(&set, beta, Binding::Trainable);
        let c = t.conv2d(x, w, 2, 1);
        let c = t.bias_add(c, b);
        let c = t.group_norm(c, g, be, 3, 1e-5);
        let c = t.leaky_relu(c, 0.1);
        let u = t.upsample2(c);
        let u = t.slice_channels(u, 0, 3);
        let s = t.sigmoid(u);
        let flat = t.reshape(c, &[27]);
        let wdv = t.param(&set, wd, Binding::Trainable);
        let bdv = t.param(&set, bd, Binding::Trainable);
        let h = t.matvec(wdv, flat);
        let h = t.add(h, bdv);
        let sm = t.neg_entropy_logits(h);
        let lsm = t.cross_entropy_logits(h, 1);
        let p1 = t.slice(h, 0, 2);
        let p2 = t.slice(h, 2, 2);
        let cc = t.concat(&[p2, p1]);
        let e = t.exp(cc);
        let l = t.ln(e);
        let q = t.mul(l, l);
        let d = t.div(q, e);
        let m1 = t.mean_all(d);
        let m2 = t.mean_all(s);
        let kl = t.kl_standard_normal(p1, p2);
        let h1 = t.hinge(m1, 0.5);
        let sum1 = t.add(m2, sm);
        let sum2 = t.add(lsm, kl);
        let sum3 = t.add(sum1, h1);
        let total = t.add(sum3, sum2);
        let grads = t.backward(total);

        for id in [wconv, bconv, gamma, beta, wd, bd] {
            let key = set.key(id);
            let auto = grads.get(&key).expect("gradient present");
            let fd = fd_grad(&mut set, id, 1e-6, &eval);
            assert_close(auto, &fd, 1e-4);
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = ParamSet::<f64>::new("t");
        let w = set.add("w", randn(&mut rng, &[3, 3]));
        let mut t = Tape::<f64>::new();
        let x = t.leaf(randn(&mut rng, &[3]));
        let wv = t.param(&set, w, Binding::Frozen);
        let y = t.matvec(wv, x);
        let loss = t.mean_all(y);
        let grads = t.backward(loss);
        assert!(grads.is_empty());
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut set = ParamSet::<f64>::new("t");
        let w = set.add("w", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut t = Tape::<f64>::new();
        let a = t.param(&set, w, Binding::Trainable);
        let b = t.param(&set, w, Binding::Trainable);
        assert_eq!(a, b);
        let s = t.add(a, b); // y = 2w, dy/dw = 2
        let loss = t.sum_all(s);
        let grads = t.backward(loss);
        let g = grads.get(&set.key(w)).unwrap();
        assert!(g.iter().all(|v| (*v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn slice_concat_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = randn(&mut rng, &[10]);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(v.clone());
        let a = t.slice(x, 0, 3);
        let b = t.slice(x, 3, 4);
        let c = t.slice(x, 7, 3);
        let back = t.concat(&[a, b, c]);
        assert_eq!(t.value(back), &v);
    }
}
