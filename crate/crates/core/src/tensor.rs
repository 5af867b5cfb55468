//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every op result keeps `Rc` handles to its inputs plus a closure mapping
//! the output gradient to input gradients, so the graph is a DAG rooted at
//! whatever was computed last. [`Tensor::backward`] walks it once in
//! reverse topological order and accumulates into leaves created with
//! [`Tensor::param`].

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::{s, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Cheaply clonable handle to a node of the differentiation graph.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Gradient-tracked leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![T::zero(); numel(shape)], false)
            .expect("zero-sized dimension")
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![1], vec![v], false).unwrap()
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| s(v)).collect())
    }

    /// Result of a differentiable op. `backward` maps the output gradient to
    /// one optional gradient per parent, in order.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(Box::new(backward) as BackwardFn<T>))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false).unwrap()
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a one-element loss. Gradients accumulate into
    /// every reachable [`Tensor::param`] leaf.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // iterative post-order DFS
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.len());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    // ---- elementwise ----

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = data.clone();
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .zip(&y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn scale(&self, k: T) -> Self {
        self.unary(move |x| x * k, move |_, _| k)
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, k: T) -> Self {
        self.unary(move |x| x + k, |_, _| T::one())
    }

    pub fn exp(&self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self) -> Self {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let sg = sigmoid(x);
                sg + x * sg * (T::one() - sg)
            },
        )
    }

    pub fn square(&self) -> Self {
        self.unary(|x| x * x, |x, _| x + x)
    }

    fn binary(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Self> {
        let bc = Broadcast::new(op, self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = match bc.kind {
            BroadcastKind::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..bc.len())
                .map(|i| {
                    let (ia, ib) = bc.index(i);
                    f(a[ia], b[ib])
                })
                .collect(),
        };
        let (ta, tb) = (self.clone(), other.clone());
        let bc2 = bc.clone();
        Ok(Self::from_op(
            bc.out_shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let (a, b) = (ta.data(), tb.data());
                let mut ga = ta.requires_grad().then(|| vec![T::zero(); a.len()]);
                let mut gb = tb.requires_grad().then(|| vec![T::zero(); b.len()]);
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = bc2.index(i);
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gi * da(a[ia], b[ib]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += gi * db(a[ia], b[ib]);
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    // ---- linear algebra ----

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch
    /// dimensions.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch = Broadcast::new("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .map_err(|_| err())?;
        let nb = batch.len();
        let mut out_shape = if sa.len().max(sb.len()) > 2 {
            batch.out_shape.clone()
        } else {
            Vec::new()
        };
        out_shape.extend([m, n]);
        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            let (ia, ib) = batch.index(bi);
            mm_acc(
                &a[ia * m * k..(ia + 1) * m * k],
                &b[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Self::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let (a, b) = (ta.data(), tb.data());
                let mut ga = ta.requires_grad().then(|| vec![T::zero(); a.len()]);
                let mut gb = tb.requires_grad().then(|| vec![T::zero(); b.len()]);
                for bi in 0..nb {
                    let (ia, ib) = batch.index(bi);
                    let gblk = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC · Bᵀ
                        let bblk = &b[ib * k * n..(ib + 1) * k * n];
                        let dst = &mut ga[ia * m * k..(ia + 1) * m * k];
                        for r in 0..m {
                            let grow = &gblk[r * n..(r + 1) * n];
                            for c in 0..k {
                                let brow = &bblk[c * n..(c + 1) * n];
                                dst[r * k + c] += dot(grow, brow);
                            }
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = Aᵀ · dC
                        let ablk = &a[ia * m * k..(ia + 1) * m * k];
                        let dst = &mut gb[ib * k * n..(ib + 1) * k * n];
                        for r in 0..m {
                            let grow = &gblk[r * n..(r + 1) * n];
                            for c in 0..k {
                                let av = ablk[r * k + c];
                                axpy(av, grow, &mut dst[c * n..(c + 1) * n]);
                            }
                        }
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let sh = self.shape();
        if sh.len() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("rank {} < 2", sh.len()),
            });
        }
        let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let nb = self.len() / (r * c);
        let mut out_shape = sh.to_vec();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let tr = move |src: &[T], rows: usize, cols: usize| {
            let mut dst = vec![T::zero(); src.len()];
            for b in 0..nb {
                let o = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[o + j * rows + i] = src[o + i * cols + j];
                    }
                }
            }
            dst
        };
        let data = tr(self.data(), r, c);
        Ok(Self::from_op(out_shape, data, vec![self.clone()], move |g| {
            vec![Some(tr(g, c, r))]
        }))
    }

    // ---- normalisation ----

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let n = *self.shape().last().unwrap();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let y = out.clone();
        Self::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let inner = dot(yr, gr);
                for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - inner);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        let c = *self.shape().last().unwrap();
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.len() / c;
        let cn = s::<T>(c as f64);
        let mut xhat = vec![T::zero(); self.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.len()];
        let (gd, bd) = (gain.data(), bias.data());
        for r in 0..rows {
            let x = &self.data()[r * c..(r + 1) * c];
            let mean = x.iter().copied().sum::<T>() / cn;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (x[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gd[j] + bd[j];
            }
        }
        let gain_t = gain.clone();
        let (x_rg, g_rg, b_rg) = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
        Ok(Self::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let gd = gain_t.data();
                let mut dx = x_rg.then(|| vec![T::zero(); g.len()]);
                let mut dg = g_rg.then(|| vec![T::zero(); c]);
                let mut db = b_rg.then(|| vec![T::zero(); c]);
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    if let Some(dg) = dg.as_mut() {
                        axpy_mul(gr, xh, dg);
                    }
                    if let Some(db) = db.as_mut() {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 = m1 / cn;
                        m2 = m2 / cn;
                        for j in 0..c {
                            let dxh = gr[j] * gd[j];
                            dx[r * c + j] = inv_std[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
                vec![dx, dg, db]
            },
        ))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Self {
        let total = self.data().iter().copied().sum::<T>();
        let n = self.len();
        Self::from_op(vec![1], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Self {
        let n = s::<T>(self.len() as f64);
        self.sum().scale(T::one() / n)
    }

    fn axis_split(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let sh = self.shape();
        if axis >= sh.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("axis {axis} out of range for shape {sh:?}"),
            });
        }
        let outer = numel(&sh[..axis]);
        let inner = numel(&sh[axis + 1..]);
        let mut out_shape: Vec<usize> = sh[..axis].iter().chain(&sh[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((outer, sh[axis], inner, out_shape))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner, out_shape) = self.axis_split(axis, "sum_axis")?;
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &v)| *d += v);
            }
        }
        Ok(Self::from_op(out_shape, out, vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    dx[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = *self.shape().get(axis).unwrap_or(&1);
        Ok(self.sum_axis(axis)?.scale(T::one() / s::<T>(len as f64)))
    }

    /// Maximum along `axis`. The gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner, out_shape) = self.axis_split(axis, "max_axis")?;
        let x = self.data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + l) * inner + i];
                    let slot = o * inner + i;
                    // strict comparison keeps the first maximum
                    if l == 0 || v > out[slot] {
                        out[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        Ok(Self::from_op(out_shape, out, vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    dx[(o * len + arg[slot]) * inner + i] += g[slot];
                }
            }
            vec![Some(dx)]
        }))
    }

    // ---- structural ----

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let sh = first.shape().to_vec();
        if axis >= sh.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {sh:?}"),
            });
        }
        for p in parts {
            let ps = p.shape();
            let ok = ps.len() == sh.len()
                && ps.iter().zip(&sh).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: sh,
                    rhs: ps.to_vec(),
                });
            }
        }
        let outer = numel(&sh[..axis]);
        let inner = numel(&sh[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = sh.clone();
        out_shape[axis] = total / inner;
        Ok(Self::from_op(out_shape, out, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Selects rows (entries along axis 0) by index; repeated indices
    /// accumulate in the gradient.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let rows = self.shape()[0];
        let width = self.len() / rows;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "empty index list".into(),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(Self::from_op(out_shape, out, vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); rows * width];
            for (r, &i) in idx.iter().enumerate() {
                dx[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                    .for_each(|(d, &v)| *d += v);
            }
            vec![Some(dx)]
        }))
    }

    // ---- losses ----

    /// Mean softmax cross-entropy of `[B, C]` (or `[C]`) logits against
    /// integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let c = *self.shape().last().unwrap();
        let b = self.len() / c;
        if labels.len() != b {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for {b} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut probs = self.to_vec();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &self.data()[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            loss += lse - row[label];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let bn = s::<T>(b as f64);
        let labels = labels.to_vec();
        Ok(Self::from_op(vec![1], vec![loss / bn], vec![self.clone()], move |g| {
            let mut dx = probs.clone();
            for (r, &label) in labels.iter().enumerate() {
                dx[r * c + label] -= T::one();
            }
            let k = g[0] / bn;
            dx.iter_mut().for_each(|v| *v *= k);
            vec![Some(dx)]
        }))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        let e = (*v - m).exp();
        *v = if e < T::min_positive_value() { T::zero() } else { e };
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += a · x`
#[inline]
/// Dot product with eight independent partial sums, which lets long
/// products vectorise.
pub(crate) fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = dot(ra, rb);
    for l in lanes {
        acc += l;
    }
    acc
}

pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// `y += a ⊙ b`
#[inline]
fn axpy_mul<T: Scalar>(a: &[T], b: &[T], y: &mut [T]) {
    for ((yv, &av), &bv) in y.iter_mut().zip(a).zip(b) {
        *yv += av * bv;
    }
}

/// `out += a[m,k] · b[k,n]`
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av != T::zero() {
                axpy(av, &b[c * n..(c + 1) * n], orow);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BroadcastKind {
    Same,
    /// rhs repeats over the leading dims of lhs
    RhsSuffix,
    LhsSuffix,
    General,
}

/// Index mapping for numpy-style broadcasting of two shapes.
#[derive(Clone, Debug)]
struct Broadcast {
    out_shape: Vec<usize>,
    kind: BroadcastKind,
    a_len: usize,
    b_len: usize,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            std::iter::repeat(1).take(rank - s.len()).chain(s.iter().copied()).collect()
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(TensorError::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
            out_shape.push(x.max(y));
        }
        let strides = |p: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if p[d] == 1 && out_shape[d] != 1 { 0 } else { acc };
                acc *= p[d];
            }
            st
        };
        let kind = if a == b {
            BroadcastKind::Same
        } else if a.len() >= b.len() && a.ends_with(b) {
            BroadcastKind::RhsSuffix
        } else if b.len() > a.len() && b.ends_with(a) {
            BroadcastKind::LhsSuffix
        } else {
            BroadcastKind::General
        };
        let (a_strides, b_strides) = (strides(&pa), strides(&pb));
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Self {
            a_strides,
            b_strides,
            a_len: numel(a).max(1),
            b_len: numel(b).max(1),
            out_shape,
            kind,
        })
    }

    fn len(&self) -> usize {
        numel(&self.out_shape)
    }

    #[inline]
    fn index(&self, i: usize) -> (usize, usize) {
        match self.kind {
            BroadcastKind::Same => (i, i),
            BroadcastKind::RhsSuffix => (i, i % self.b_len),
            BroadcastKind::LhsSuffix => (i % self.a_len, i),
            BroadcastKind::General => {
                let mut rem = i;
                let (mut ia, mut ib) = (0, 0);
                for d in (0..self.out_shape.len().min(self.a_strides.len())).rev() {
                    let dim = self.out_shape[d];
                    let c = rem % dim;
                    rem /= dim;
                    ia += c * self.a_strides[d];
                    ib += c * self.b_strides[d];
                }
                (ia, ib)
            }
        }
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the analytic gradient of a scalar function with central
/// differences `(f(x+εe_i) − f(x−εe_i)) / 2ε` at every coordinate.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<GradCheck> {
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    let y = f(&leaf)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); x.len()]);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = s::<T>(orig.to_f64_lossy() + eps);
        let fp = f(&Tensor::new(x.shape(), buf.clone())?)?.item().to_f64_lossy();
        buf[i] = s::<T>(orig.to_f64_lossy() - eps);
        let fm = f(&Tensor::new(x.shape(), buf.clone())?)?.item().to_f64_lossy();
        buf[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i].to_f64_lossy();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = numel(shape);
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[2.0, 3.0]);
        assert_eq!(i.matmul(&v).unwrap().data(), &[2.0, 3.0]);
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[3, 2, 4]);
        let b = rand_t(&mut rng, &[4, 5]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let ai = Tensor::new(&[2, 4], a.data()[bi * 8..(bi + 1) * 8].to_vec()).unwrap();
            let ci = ai.matmul(&b).unwrap();
            assert_eq!(&c.data()[bi * 10..(bi + 1) * 10], ci.data());
        }
        let g = finite_diff_check(|x| Ok(x.matmul(&b)?.square().sum()), &a, 1e-5).unwrap();
        assert!(g.max_rel_error < 1e-6, "{g:?}");
        let g = finite_diff_check(|x| Ok(a.matmul(x)?.square().sum()), &b, 1e-5).unwrap();
        assert!(g.max_rel_error < 1e-6, "{g:?}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, &[3, 3]);
        let b = rand_t(&mut rng, &[3, 3]);
        let g = finite_diff_check(|x| Ok(x.matmul(&b)?.sum()), &a, 1e-5).unwrap();
        assert!(g.max_rel_error < 1e-6, "{g:?}");
    }

    #[test]
    fn softmax_examples() {
        let y = t(&[2], &[0.0, 0.0]).softmax_rows();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = t(&[3], &[1000.0, 1000.0, 1000.0]).softmax_rows();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = t(&[2], &[0.0, 3f64.ln()]).softmax_rows();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        let y = t(&[2], &[f64::NAN, 0.0]).softmax_rows();
        assert!(y.data()[0].is_nan());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_t(&mut rng, &[4, 7]).scale(10.0);
        let y = z.softmax_rows();
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let y2 = z.add_scalar(123.0).softmax_rows();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[2], &[1.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let y = t(&[2], &[3.0, 3.0]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = t(&[2], &[1.0, -1.0]).layer_norm(&one, &zero, 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[2, 4]);
        let gain = rand_t(&mut rng, &[4]);
        let bias = rand_t(&mut rng, &[4]);
        let w = rand_t(&mut rng, &[2, 4]);
        let check = |f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>, at: &Tensor<f64>| {
            let g = finite_diff_check(f, at, 1e-5).unwrap();
            assert!(g.max_rel_error < 1e-6, "{g:?}");
        };
        check(&|x| Ok(x.layer_norm(&gain, &bias, 1e-5)?.mul(&w)?.sum()), &x);
        check(&|g| Ok(x.layer_norm(g, &bias, 1e-5)?.mul(&w)?.sum()), &gain);
        check(&|b| Ok(x.layer_norm(&gain, b, 1e-5)?.mul(&w)?.sum()), &bias);
    }

    #[test]
    fn swish_examples() {
        let y = t(&[4], &[0.0, 50.0, -50.0, 1.0]).swish();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 50.0).abs() < 1e-9);
        assert!(y.data()[2].abs() < 1e-9);
        assert!((y.data()[3] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        x.zero_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
        let err = x.backward().unwrap_err();
        assert_eq!(err, TensorError::NonScalarLoss(vec![3]));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = sum(a*x + swish(x)) with x feeding two consumers
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_t(&mut rng, &[5]);
        let a = rand_t(&mut rng, &[5]);
        let x = Tensor::param(&[5], xv.to_vec()).unwrap();
        x.mul(&a).unwrap().add(&x.swish()).unwrap().sum().backward().unwrap();
        let both = x.grad().unwrap();

        let x1 = Tensor::param(&[5], xv.to_vec()).unwrap();
        x1.mul(&a).unwrap().sum().backward().unwrap();
        let x2 = Tensor::param(&[5], xv.to_vec()).unwrap();
        x2.swish().sum().backward().unwrap();
        for i in 0..5 {
            let want = x1.grad().unwrap()[i] + x2.grad().unwrap()[i];
            assert!((both[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..3 {
            let r = 2 + trial;
            let c = 3 + trial;
            let x = rand_t(&mut rng, &[r, c]);
            let w = rand_t(&mut rng, &[r, c]);
            let bias = rand_t(&mut rng, &[c]);
            let m = rand_t(&mut rng, &[c, 2]);
            let fns: Vec<(&str, Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>)> = vec![
                ("sum", Box::new(|x| Ok(x.sum()))),
                ("mean", Box::new(|x| Ok(x.square().mean()))),
                ("add", Box::new(|x| Ok(x.add(&bias)?.square().sum()))),
                ("sub", Box::new(|x| Ok(bias.sub(x)?.square().sum()))),
                ("mul", Box::new(|x| Ok(x.mul(&w)?.mul(x)?.sum()))),
                ("matmul", Box::new(|x| Ok(x.matmul(&m)?.square().sum()))),
                ("softmax", Box::new(|x| Ok(x.softmax_rows().mul(&w)?.sum()))),
                ("swish", Box::new(|x| Ok(x.swish().mul(&w)?.sum()))),
                ("sigmoid", Box::new(|x| Ok(x.sigmoid().mul(&w)?.sum()))),
                ("exp", Box::new(|x| Ok(x.exp().mul(&w)?.sum()))),
                ("sum_axis0", Box::new(|x| Ok(x.sum_axis(0)?.square().sum()))),
                ("mean_axis1", Box::new(|x| Ok(x.mean_axis(1)?.square().sum()))),
                ("max_axis0", Box::new(|x| Ok(x.max_axis(0)?.square().sum()))),
                ("max_axis1", Box::new(|x| Ok(x.max_axis(1)?.square().sum()))),
                ("concat", Box::new(|x| Ok(Tensor::concat(&[x.clone(), w.clone(), x.square()], 1)?.square().sum()))),
                ("gather", Box::new(|x| Ok(x.gather(&[1, 0, 1])?.square().sum()))),
                ("transpose", Box::new(|x| Ok(x.transpose()?.matmul(&w)?.square().sum()))),
                ("reshape", Box::new(|x| Ok(x.reshape(&[r * c])?.square().sum()))),
                ("cross_entropy", Box::new(|x| x.cross_entropy(&vec![1; r]))),
            ];
            for (name, f) in fns {
                let g = finite_diff_check(f, &x, 1e-5).unwrap();
                assert!(g.max_rel_error < 1e-5, "{name}: {g:?}");
            }
        }
    }

    #[test]
    fn max_routes_ties_to_first() {
        let x = Tensor::<f64>::param(&[3], vec![2.0, 5.0, 5.0]).unwrap();
        x.max_axis(0).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::<f64>::zeros(&[10]);
        let l = z.cross_entropy(&[3]).unwrap().item();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let mut v = vec![0.0; 10];
        v[2] = 1000.0;
        let l = t(&[10], &v).cross_entropy(&[2]).unwrap().item();
        assert!(l.abs() < 1e-12);
        assert!(z.cross_entropy(&[10]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_t(&mut rng, &[6]).scale(3.0);
        let leaf = Tensor::param(&[6], z.to_vec()).unwrap();
        leaf.cross_entropy(&[4]).unwrap().backward().unwrap();
        let p = z.softmax_rows();
        for (i, g) in leaf.grad().unwrap().iter().enumerate() {
            let want = p.data()[i] - if i == 4 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_diff_of_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&mut rng, &[7]);
        let g = finite_diff_check(|x| Ok(x.sum()), &x, 1e-4).unwrap();
        assert!(g.max_rel_error < 1e-9);
        let g = finite_diff_check(|x| Ok(x.swish().sum()), &x, 1e-4).unwrap();
        assert!(g.max_rel_error < 1e-6);
    }

    #[test]
    fn broadcast_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(a.add(&Tensor::zeros(&[3])).is_ok());
        assert!(a.add(&Tensor::zeros(&[2, 1])).is_ok());
        assert!(a.add(&Tensor::zeros(&[2])).is_err());
        let x = t(&[2, 1], &[1.0, 2.0]);
        let y = t(&[3], &[10.0, 20.0, 30.0]);
        let z = x.add(&y).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert_eq!(z.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xr = rand_t(&mut rng, &[2, 1]);
        let g = finite_diff_check(|x| Ok(x.mul(&y)?.square().sum()), &xr, 1e-5).unwrap();
        assert!(g.max_rel_error < 1e-6);
    }

    #[test]
    fn constants_build_no_graph() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = a.swish().add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
    }
}
