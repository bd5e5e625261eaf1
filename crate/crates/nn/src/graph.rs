//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value; `backward` walks the tape
//! in reverse. Values are reference counted so parameters can be bound to a
//! graph without copying.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T>;

    /// Returns one gradient per input (`None` for inputs with no gradient).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, stride: (usize, usize), padding: (usize, usize) },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Sum(Var),
    Mean(Var),
    MeanSquaredError(Var, Var),
    SpatialMean(Var),
    AddBias(Var, Var),
    NormalizeRows(Var),
    Custom(Arc<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    track: bool,
    // parameter leaves keyed by the address of their shared tensor
    bound: HashMap<usize, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients for parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track: true, bound: HashMap::new() }
    }

    /// A graph for inference: parameters are bound as constants and no
    /// backward state is kept.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), track: false, bound: HashMap::new() }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    /// Trainable parameter leaf (a constant in `no_grad` graphs).
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        let rg = self.track;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Like [`Graph::param`], but binding the same `Arc` twice returns the
    /// same leaf, so a parameter used at several places gets one gradient.
    pub fn bind(&mut self, value: &Arc<Tensor<T>>) -> Var {
        let key = Arc::as_ptr(value) as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.param(value.clone());
        self.bound.insert(key, v);
        v
    }

    /// Leaf previously created by [`Graph::bind`] for this tensor.
    pub fn bound(&self, value: &Arc<Tensor<T>>) -> Option<Var> {
        self.bound.get(&(Arc::as_ptr(value) as usize)).copied()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant_shared(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.unary(x, value, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.unary(x, value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.unary(x, value, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sqrt());
        self.unary(x, value, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(x, value, Op::LeakyRelu(x, slope))
    }

    /// Clamp with pass-through gradient on `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.unary(x, value, Op::Clamp(x, lo, hi))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = (*self.nodes[x.0].value).clone().reshape(shape);
        self.unary(x, value, Op::Reshape(x))
    }

    /// Concatenation along axis 1 of tensors that agree on every other axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert_eq!(s[0], outer, "concat leading dim mismatch");
            assert_eq!(&s[2..], &first[2..], "concat trailing dims mismatch");
            channels += s[1];
        }
        let mut data = Vec::with_capacity(outer * channels * inner);
        for n in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = self.needs(parts);
        self.push(Tensor::new(&shape, data), Op::ConcatChannels(parts.to_vec()), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), padding: (usize, usize)) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding);
        let rg = self.needs(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b, stride, padding }, rg)
    }

    /// `op(a) * op(b)` for rank-2 operands, `op` transposing when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, T::one(), self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), out.data_mut());
        let rg = self.needs(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.unary(x, value, Op::Mean(x))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / T::from_usize(ta.len()).unwrap());
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MeanSquaredError(a, b), rg)
    }

    /// `[n, c, h, w] -> [n, c]` average over the spatial axes.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = h * w;
        let denom = T::from_usize(hw).unwrap();
        let value =
            Tensor::from_fn(&[n, c], |i| t.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / denom);
        self.unary(x, value, Op::SpatialMean(x))
    }

    /// `[n, c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c) = self.value(x).dims2();
        assert_eq!(self.shape(bias), &[c], "bias shape");
        let (t, b) = (self.value(x), self.value(bias));
        let value = Tensor::from_fn(&[n, c], |i| t.data()[i] + b.data()[i % c]);
        let rg = self.needs(&[x, bias]);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    /// Rows of a `[n, c]` tensor scaled to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = t.dims2();
        let mut value = t.clone();
        for r in 0..n {
            let row = &mut value.data_mut()[r * c..(r + 1) * c];
            let norm = row_norm(row);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        self.unary(x, value, Op::NormalizeRows(x))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Var {
        let value = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            op.forward(&refs)
        };
        let rg = self.needs(inputs);
        self.push(value, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * *c)),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv / xv)),
            Op::Sqrt(x) => acc(*x, g.zip_map(y, |gv, yv| gv * T::lit(0.5) / yv)),
            Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * (xv + xv))),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::LeakyRelu(x, slope) => {
                acc(*x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * *slope }))
            }
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { T::zero() }),
            ),
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))),
            Op::ConcatChannels(parts) => {
                let shape = y.shape();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let c = ps[1];
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(outer * c * inner);
                        for n in 0..outer {
                            let start = (n * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        acc(p, Tensor::new(&ps, data));
                    }
                    offset += c;
                }
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let need_x = self.nodes[x.0].requires_grad;
                let cg = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *padding, need_x);
                if let Some(gx) = cg.input {
                    acc(*x, gx);
                }
                acc(*w, cg.weight);
                acc(*b, cg.bias);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = g.dims2();
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(av.shape());
                    if ta {
                        gemm(k, n, m, T::one(), bv.data(), tb, g.data(), true, T::zero(), ga.data_mut());
                    } else {
                        gemm(m, n, k, T::one(), g.data(), false, bv.data(), !tb, T::zero(), ga.data_mut());
                    }
                    acc(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(bv.shape());
                    if tb {
                        gemm(n, m, k, T::one(), g.data(), true, av.data(), ta, T::zero(), gb.data_mut());
                    } else {
                        gemm(k, m, n, T::one(), av.data(), !ta, g.data(), false, T::zero(), gb.data_mut());
                    }
                    acc(*b, gb);
                }
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                acc(*x, Tensor::full(self.shape(*x), g.item() / n))
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = g.item() * T::lit(2.0) / T::from_usize(av.len()).unwrap();
                let da = av.zip_map(bv, |x, y| (x - y) * c);
                acc(*b, da.map(|v| -v));
                acc(*a, da);
            }
            Op::SpatialMean(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let denom = T::from_usize(hw).unwrap();
                acc(*x, Tensor::from_fn(&[n, c, h, w], |i| g.data()[i / hw] / denom));
            }
            Op::AddBias(x, bias) => {
                let (n, c) = g.dims2();
                acc(*x, g.clone());
                let mut gb = Tensor::zeros(&[c]);
                for r in 0..n {
                    for j in 0..c {
                        gb.data_mut()[j] += g.data()[r * c + j];
                    }
                }
                acc(*bias, gb);
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let (n, c) = xv.dims2();
                let mut gx = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    let norm = row_norm(&xv.data()[r * c..(r + 1) * c]);
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*x, gx);
            }
            Op::Custom(op, inputs) => {
                let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&refs, y, g);
                assert_eq!(gs.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(*v, gi);
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn row_norm<T: Real>(row: &[T]) -> T {
    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    norm.max(T::lit(1e-12))
}
