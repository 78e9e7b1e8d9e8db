use std::sync::Arc;

use super::kernels::{self, LayerNormSaved, NO_SOURCE};
use super::optim::{Grads, ParamId, ParamStore};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Operations shared by the recording tape and the forward-only evaluator,
/// so model code is written once and runs in both modes.
pub trait Recorder<T: Scalar> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V;
    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn constant_shared(&mut self, t: &Arc<Tensor<T>>) -> Self::V;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// `x W + b` with `b` broadcast over rows.
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Adds a row vector to every row of `a`.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: T) -> Self::V;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn gather(&mut self, a: &Self::V, idx: &Arc<Vec<usize>>) -> Result<Self::V>;
    fn scatter_max(&mut self, a: &Self::V, seg: &Arc<Vec<usize>>, n: usize) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V>;
    fn silu(&mut self, a: &Self::V) -> Self::V;
    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Linear(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Concat(Vec<usize>, Vec<(usize, usize)>, usize),
    Gather(usize, Arc<Vec<usize>>, usize),
    ScatterMax(usize, Vec<usize>, usize),
    LayerNorm(usize, usize, usize, LayerNormSaved<T>),
    Silu(usize),
    Mse(usize, usize),
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records every operation for a later [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulates `scale * d loss / d param` into `grads`.
    pub fn backward(&self, loss: Var, scale: T, grads: &mut Grads<T>) -> Result<()> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        let mut bufs: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        bufs[loss.0] = Some(Tensor {
            shape: lv.shape.clone(),
            data: vec![scale],
        });
        for i in (0..=loss.0).rev() {
            let Some(g) = bufs[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut bufs, grads)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        bufs: &mut [Option<Tensor<T>>],
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let needs = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => grads.accumulate(*id, &g.data)?,
            &Op::MatMul(a, b) | &Op::Linear(a, b, _) => {
                let (av, bv) = (self.val(Var(a)), self.val(Var(b)));
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if needs(a) {
                    let buf = buffer(bufs, a, av);
                    gemm(&g.data, false, &bv.data, true, m, n, k, T::one(), &mut buf.data);
                }
                if needs(b) {
                    let buf = buffer(bufs, b, bv);
                    gemm(&av.data, true, &g.data, false, k, m, n, T::one(), &mut buf.data);
                }
                if let Op::Linear(_, _, c) = node.op {
                    if needs(c) {
                        add_into(buffer(bufs, c, self.val(Var(c))), &kernels::col_sum(&g));
                    }
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    add_into(buffer(bufs, a, self.val(Var(a))), &g.data);
                }
                if needs(b) {
                    add_into(buffer(bufs, b, self.val(Var(b))), &g.data);
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    add_into(buffer(bufs, a, self.val(Var(a))), &g.data);
                }
                if needs(b) {
                    let buf = buffer(bufs, b, self.val(Var(b)));
                    buf.data.iter_mut().zip(&g.data).for_each(|(o, &x)| *o = *o - x);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(Var(a)), self.val(Var(b)));
                if needs(a) {
                    let buf = buffer(bufs, a, av);
                    for ((o, &x), &y) in buf.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *o = *o + x * y;
                    }
                }
                if needs(b) {
                    let buf = buffer(bufs, b, bv);
                    for ((o, &x), &y) in buf.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o = *o + x * y;
                    }
                }
            }
            &Op::AddRow(a, r) => {
                if needs(a) {
                    add_into(buffer(bufs, a, self.val(Var(a))), &g.data);
                }
                if needs(r) {
                    add_into(buffer(bufs, r, self.val(Var(r))), &kernels::col_sum(&g));
                }
            }
            &Op::Scale(a, s) => {
                if needs(a) {
                    let buf = buffer(bufs, a, self.val(Var(a)));
                    buf.data.iter_mut().zip(&g.data).for_each(|(o, &x)| *o = *o + x * s);
                }
            }
            Op::Concat(parts, dims, axis) => {
                for (&p, gp) in parts.iter().zip(kernels::split(&g, dims, *axis)) {
                    if needs(p) {
                        add_into(buffer(bufs, p, self.val(Var(p))), &gp.data);
                    }
                }
            }
            Op::Gather(a, idx, n) => {
                if needs(*a) {
                    let s = kernels::scatter_add(&g, idx, *n);
                    add_into(buffer(bufs, *a, self.val(Var(*a))), &s.data);
                }
            }
            Op::ScatterMax(a, arg, c) => {
                if needs(*a) {
                    let buf = buffer(bufs, *a, self.val(Var(*a)));
                    for (o, &src) in arg.iter().enumerate() {
                        if src != NO_SOURCE {
                            let k = src * c + o % c;
                            buf.data[k] = buf.data[k] + g.data[o];
                        }
                    }
                }
            }
            Op::LayerNorm(x, gm, bt, saved) => {
                let (dx, dg, db) = kernels::layer_norm_backward(&g, self.val(Var(*gm)), saved);
                if needs(*x) {
                    add_into(buffer(bufs, *x, self.val(Var(*x))), &dx.data);
                }
                if needs(*gm) {
                    add_into(buffer(bufs, *gm, self.val(Var(*gm))), &dg);
                }
                if needs(*bt) {
                    add_into(buffer(bufs, *bt, self.val(Var(*bt))), &db);
                }
            }
            &Op::Silu(a) => {
                let av = self.val(Var(a));
                let buf = buffer(bufs, a, av);
                for ((o, &x), &gx) in buf.data.iter_mut().zip(&av.data).zip(&g.data) {
                    *o = *o + gx * kernels::silu_grad(x);
                }
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (self.val(Var(a)), self.val(Var(b)));
                let c = g.data[0] * T::of(2.0) / T::from_usize(av.numel()).expect("count fits");
                if needs(a) {
                    let buf = buffer(bufs, a, av);
                    for ((o, &x), &y) in buf.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *o = *o + c * (x - y);
                    }
                }
                if needs(b) {
                    let buf = buffer(bufs, b, bv);
                    for ((o, &x), &y) in buf.data.iter_mut().zip(&av.data).zip(&bv.data) {
                        *o = *o - c * (x - y);
                    }
                }
            }
            &Op::Sum(a) | &Op::Mean(a) => {
                let av = self.val(Var(a));
                let mut c = g.data[0];
                if matches!(node.op, Op::Mean(_)) {
                    c = c / T::from_usize(av.numel().max(1)).expect("count fits");
                }
                let buf = buffer(bufs, a, av);
                buf.data.iter_mut().for_each(|o| *o = *o + c);
            }
        }
        Ok(())
    }
}

fn buffer<'a, T: Scalar>(bufs: &'a mut [Option<Tensor<T>>], j: usize, like: &Tensor<T>) -> &'a mut Tensor<T> {
    bufs[j].get_or_insert_with(|| Tensor::zeros(&like.shape))
}

fn add_into<T: Scalar>(buf: &mut Tensor<T>, g: &[T]) {
    debug_assert_eq!(buf.data.len(), g.len());
    buf.data.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
}

fn scalar_of<T: Scalar>(v: T) -> Tensor<T> {
    Tensor { shape: vec![], data: vec![v] }
}

impl<T: Scalar> Recorder<T> for Tape<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    fn constant_shared(&mut self, t: &Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let y = kernels::linear(self.val(*x), self.val(*w), self.val(*b))?;
        Ok(self.push(y, Op::Linear(x.0, w.0, b.0), &[x.0, w.0, b.0]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::zip("add", self.val(*a), self.val(*b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::zip("sub", self.val(*a), self.val(*b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::zip("mul", self.val(*a), self.val(*b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let y = kernels::add_row(self.val(*a), self.val(*row))?;
        Ok(self.push(y, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    fn scale(&mut self, a: &Var, s: T) -> Var {
        let y = kernels::map(self.val(*a), |x| x * s);
        self.push(y, Op::Scale(a.0, s), &[a.0])
    }

    fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let dims = vals.iter().map(|v| v.dims2()).collect::<Result<Vec<_>>>()?;
        let y = kernels::concat(&vals, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(y, Op::Concat(ids.clone(), dims, axis), &ids))
    }

    fn gather(&mut self, a: &Var, idx: &Arc<Vec<usize>>) -> Result<Var> {
        let av = self.val(*a);
        let n = av.rows();
        let y = kernels::gather(av, idx)?;
        Ok(self.push(y, Op::Gather(a.0, idx.clone(), n), &[a.0]))
    }

    fn scatter_max(&mut self, a: &Var, seg: &Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let av = self.val(*a);
        let c = av.cols();
        let (y, arg) = kernels::scatter_max(av, seg, n)?;
        Ok(self.push(y, Op::ScatterMax(a.0, arg, c), &[a.0]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let (y, saved) = kernels::layer_norm(self.val(*x), self.val(*gamma), self.val(*beta))?;
        Ok(self.push(y, Op::LayerNorm(x.0, gamma.0, beta.0, saved), &[x.0, gamma.0, beta.0]))
    }

    fn silu(&mut self, a: &Var) -> Var {
        let y = kernels::map(self.val(*a), kernels::silu);
        self.push(y, Op::Silu(a.0), &[a.0])
    }

    fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = kernels::mse(self.val(*a), self.val(*b))?;
        Ok(self.push(scalar_of(v), Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let s = self.val(*a).data.iter().fold(T::zero(), |s, &x| s + x);
        self.push(scalar_of(s), Op::Sum(a.0), &[a.0])
    }

    fn mean(&mut self, a: &Var) -> Var {
        let av = self.val(*a);
        let s = av.data.iter().fold(T::zero(), |s, &x| s + x) / T::from_usize(av.numel().max(1)).expect("count fits");
        self.push(scalar_of(s), Op::Mean(a.0), &[a.0])
    }
}

/// Forward-only evaluation; intermediate values are freed as soon as they
/// are no longer referenced.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Scalar> Recorder<T> for Eager {
    type V = Arc<Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::V {
        store.shared(id)
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        Arc::new(t)
    }

    fn constant_shared(&mut self, t: &Arc<Tensor<T>>) -> Self::V {
        t.clone()
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::matmul(a, b).map(Arc::new)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::linear(x, w, b).map(Arc::new)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::zip("add", a, b, |x, y| x + y).map(Arc::new)
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::zip("sub", a, b, |x, y| x - y).map(Arc::new)
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::zip("mul", a, b, |x, y| x * y).map(Arc::new)
    }

    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V> {
        kernels::add_row(a, row).map(Arc::new)
    }

    fn scale(&mut self, a: &Self::V, s: T) -> Self::V {
        Arc::new(kernels::map(a, |x| x * s))
    }

    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| &**p).collect();
        kernels::concat(&vals, axis).map(Arc::new)
    }

    fn gather(&mut self, a: &Self::V, idx: &Arc<Vec<usize>>) -> Result<Self::V> {
        kernels::gather(a, idx).map(Arc::new)
    }

    fn scatter_max(&mut self, a: &Self::V, seg: &Arc<Vec<usize>>, n: usize) -> Result<Self::V> {
        kernels::scatter_max(a, seg, n).map(|(y, _)| Arc::new(y))
    }

    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V> {
        kernels::layer_norm(x, gamma, beta).map(|(y, _)| Arc::new(y))
    }

    fn silu(&mut self, a: &Self::V) -> Self::V {
        Arc::new(kernels::map(a, kernels::silu))
    }

    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::mse(a, b).map(|v| Arc::new(scalar_of(v)))
    }

    fn sum(&mut self, a: &Self::V) -> Self::V {
        Arc::new(scalar_of(a.data.iter().fold(T::zero(), |s, &x| s + x)))
    }

    fn mean(&mut self, a: &Self::V) -> Self::V {
        let s = a.data.iter().fold(T::zero(), |s, &x| s + x);
        Arc::new(scalar_of(s / T::from_usize(a.numel().max(1)).expect("count fits")))
    }
}
