//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive executed through a [`Var`] appends one node to its
//! [`Tape`]. Node ids increase in execution order, so [`Var::backward`]
//! replays the tape from the loss down to id 0 and visits each node once.
//!
//! ```
//! use trimf::autodiff::Tape;
//! use trimf::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.var(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_requires_grad(true));
//! let loss = w.mul(w).unwrap().sum().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
//! ```
//!
//! Broadcasting is limited to scalar constants and a trailing-axis bias row
//! ([`Var::add_row`]); everything else requires identical shapes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_finite, Scalar, Tensor};

/// Backward rule of a user-supplied primitive: `(upstream, inputs, output)`
/// to one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[T], &[&[T]], &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Offset(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Tile(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BceLogits {
        logits: usize,
        targets: Vec<T>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded operation record. Create one per forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var<'_, T>> {
        check_finite(op_name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records `tensor` as a leaf; it receives a gradient iff it requires one.
    pub fn var(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: tensor.into_data(),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.var(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so a parameter used in several places gets one summed gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.var(store.get(id).clone().with_requires_grad(true));
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Records a primitive whose backward rule is supplied by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        shape: &[usize],
        value: Vec<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var<'t, T>> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("custom", shape, &[value.len()]));
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.any_requires_grad(&ids);
        self.push(
            "custom",
            shape.to_vec(),
            value,
            Op::Custom {
                inputs: ids,
                backward,
            },
            rg,
        )
    }

    fn any_requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over output indices
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn to_vec(self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(self) -> T {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(self, other: Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn elementwise(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::shape(name, &a.shape, &b.shape));
            }
            let v: Vec<T> = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        self.tape.push(name, shape, value, op, rg)
    }

    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&[T], &[usize]) -> Result<(Vec<T>, Vec<usize>)>,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (value, shape, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (v, s) = f(&a.value, &a.shape)?;
            (v, s, a.requires_grad)
        };
        self.tape.push(name, shape, value, op, rg)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    /// Adds a `[d]` row to every trailing-axis row of `self` (`[..., d]`).
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias);
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let d = *x.shape.last().unwrap();
            if b.shape != [d] {
                return Err(Error::shape("add_row", &x.shape, &b.shape));
            }
            let mut v = x.value.clone();
            for row in v.chunks_exact_mut(d) {
                row.iter_mut().zip(&b.value).for_each(|(a, &c)| *a += c);
            }
            (x.shape.clone(), v, x.requires_grad || b.requires_grad)
        };
        self.tape
            .push("add_row", shape, value, Op::AddRow(self.id, bias.id), rg)
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.unary(
            "scale",
            |x, s| Ok((x.iter().map(|&v| v * c).collect(), s.to_vec())),
            Op::Scale(self.id, c),
        )
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary(
            "add_scalar",
            |x, s| Ok((x.iter().map(|&v| v + c).collect(), s.to_vec())),
            Op::Offset(self.id),
        )
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, &a.value, false, &b.value, false, &mut c, false);
            (vec![m, n], c, a.requires_grad || b.requires_grad)
        };
        self.tape
            .push("matmul", shape, value, Op::MatMul(self.id, other.id), rg)
    }

    /// `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 3
                || b.shape.len() != 3
                || a.shape[0] != b.shape[0]
                || a.shape[2] != b.shape[1]
            {
                return Err(Error::shape("bmm", &a.shape, &b.shape));
            }
            let (batch, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut c = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a.value[i * m * k..(i + 1) * m * k],
                    false,
                    &b.value[i * k * n..(i + 1) * k * n],
                    false,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            (vec![batch, m, n], c, a.requires_grad || b.requires_grad)
        };
        self.tape
            .push("bmm", shape, value, Op::BatchMatMul(self.id, other.id), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let perm = perm.to_vec();
        let p2 = perm.clone();
        self.unary(
            "permute",
            move |x, s| {
                let mut seen = vec![false; s.len()];
                if p2.len() != s.len() || p2.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
                    return Err(Error::shape("permute", s, &p2));
                }
                Ok(permute_data(x, s, &p2))
            },
            Op::Permute(self.id, perm),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let target = shape.to_vec();
        self.unary(
            "reshape",
            move |x, s| {
                if target.iter().product::<usize>() != x.len() || target.contains(&0) {
                    return Err(Error::shape("reshape", s, &target));
                }
                Ok((x.to_vec(), target))
            },
            Op::Reshape(self.id),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for p in parts {
            first.same_tape(*p);
        }
        let tape = first.tape;
        let (shape, value, rg) = {
            let nodes = tape.nodes.borrow();
            let base = &nodes[first.id].shape;
            if axis >= base.len() {
                return Err(Error::shape("concat", base, &[axis]));
            }
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                let same_rest = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !same_rest {
                    return Err(Error::shape("concat", base, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(base, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let block = n.shape[axis] * inner;
                    out.extend_from_slice(&n.value[o * block..(o + 1) * block]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (shape, out, rg)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        tape.push("concat", shape, value, Op::Concat(ids, axis), rg)
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.unary(
            "slice",
            |x, s| {
                if axis >= s.len() || start >= end || end > s[axis] {
                    return Err(Error::shape("slice", s, &[axis, start, end]));
                }
                let (outer, len, inner) = split_axis(s, axis);
                let width = (end - start) * inner;
                let mut out = Vec::with_capacity(outer * width);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    out.extend_from_slice(&x[base..base + width]);
                }
                let mut shape = s.to_vec();
                shape[axis] = end - start;
                Ok((out, shape))
            },
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
        )
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn tile(self, n: usize) -> Result<Var<'t, T>> {
        self.unary(
            "tile",
            |x, s| {
                if n == 0 {
                    return Err(Error::shape("tile", s, &[n]));
                }
                let mut shape = vec![n];
                shape.extend_from_slice(s);
                Ok((x.repeat(n), shape))
            },
            Op::Tile(self.id),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        self.unary(
            "sum",
            |x, _| Ok((vec![x.iter().copied().sum()], vec![1])),
            Op::Sum(self.id),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        self.unary(
            "mean",
            |x, _| {
                let n = T::of(x.len() as f64);
                Ok((vec![x.iter().copied().sum::<T>() / n], vec![1]))
            },
            Op::Mean(self.id),
        )
    }

    /// Sums out `axis` (the axis is removed; a rank-1 input yields `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.unary(
            "sum_axis",
            |x, s| {
                if axis >= s.len() {
                    return Err(Error::shape("sum_axis", s, &[axis]));
                }
                let (outer, len, inner) = split_axis(s, axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                        out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                let mut shape = s.to_vec();
                shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                Ok((out, shape))
            },
            Op::SumAxis(self.id, axis),
        )
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        self.unary(
            "softmax",
            |x, s| {
                if axis >= s.len() {
                    return Err(Error::shape("softmax", s, &[axis]));
                }
                let (outer, len, inner) = split_axis(s, axis);
                let mut out = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                        let mut denom = T::zero();
                        for j in 0..len {
                            let e = (x[at(j)] - max).exp();
                            out[at(j)] = e;
                            denom += e;
                        }
                        for j in 0..len {
                            out[at(j)] /= denom;
                        }
                    }
                }
                Ok((out, s.to_vec()))
            },
            Op::Softmax(self.id, axis),
        )
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary(
            "gelu",
            |x, s| Ok((x.iter().map(|&v| v * std_normal_cdf(v)).collect(), s.to_vec())),
            Op::Gelu(self.id),
        )
    }

    /// Normalizes each trailing-axis row to zero mean and unit (population)
    /// variance, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (shape, value, xhat, inv_std, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *x.shape.last().unwrap();
            if g.shape != [d] || b.shape != [d] {
                return Err(Error::shape("layer_norm", &x.shape, &g.shape));
            }
            let rows = x.value.len() / d;
            let dn = T::of(d as f64);
            let mut xhat = vec![T::zero(); x.value.len()];
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = vec![T::zero(); x.value.len()];
            for r in 0..rows {
                let row = &x.value[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..d {
                    let h = (row[j] - mean) * inv;
                    xhat[r * d + j] = h;
                    out[r * d + j] = g.value[j] * h + b.value[j];
                }
            }
            let rg = x.requires_grad || g.requires_grad || b.requires_grad;
            (x.shape.clone(), out, xhat, inv_std, rg)
        };
        self.tape.push(
            "layer_norm",
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of `self` (logits) against 0/1 `targets`,
    /// evaluated as `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let y = targets.data().to_vec();
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape != targets.shape() {
                return Err(Error::shape("bce_with_logits", &x.shape, targets.shape()));
            }
            let total: T = x
                .value
                .iter()
                .zip(&y)
                .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
                .sum();
            (total / T::of(y.len() as f64), x.requires_grad)
        };
        self.tape.push(
            "bce_with_logits",
            vec![1],
            vec![value],
            Op::BceLogits {
                logits: self.id,
                targets: y,
            },
            rg,
        )
    }

    /// Reverse sweep from this scalar. Leaves that do not influence it get
    /// zero gradients.
    pub fn backward(self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[self.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(vec![T::one()]);

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut shapes = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if let Some(g) = &grads[i] {
                check_finite("backward", g)?;
            }
            shapes.push(n.shape.clone());
        }
        let params = self
            .tape
            .params
            .borrow()
            .iter()
            .map(|(&p, &n)| (p, n))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    contribution: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contribution();
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(c),
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, || g.iter().zip(bv).map(|(&u, &w)| u * w).collect());
            accumulate(nodes, grads, *b, || g.iter().zip(av).map(|(&u, &w)| u * w).collect());
        }
        Op::AddRow(x, b) => {
            accumulate(nodes, grads, *x, || g.to_vec());
            let d = nodes[*b].value.len();
            accumulate(nodes, grads, *b, || {
                let mut db = vec![T::zero(); d];
                for row in g.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                db
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, || g.iter().map(|&v| v * *c).collect()),
        Op::Offset(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, || g.to_vec()),
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            accumulate(nodes, grads, *a, || {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, &nodes[*b].value, true, &mut da, false);
                da
            });
            accumulate(nodes, grads, *b, || {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, &nodes[*a].value, true, g, false, &mut db, false);
                db
            });
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, || {
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        true,
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                da
            });
            accumulate(nodes, grads, *b, || {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                db
            });
        }
        Op::Permute(x, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            accumulate(nodes, grads, *x, || permute_data(g, &node.shape, &inverse).0);
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                accumulate(nodes, grads, p, || {
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        out.extend_from_slice(&g[base..base + len * inner]);
                    }
                    out
                });
                offset += len;
            }
        }
        Op::Slice { src, axis, start } => {
            let src_shape = &nodes[*src].shape;
            let (outer, len, inner) = split_axis(src_shape, *axis);
            let width = node.shape[*axis] * inner;
            accumulate(nodes, grads, *src, || {
                let mut out = vec![T::zero(); nodes[*src].value.len()];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    out[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                out
            });
        }
        Op::Tile(x) => {
            let len = nodes[*x].value.len();
            accumulate(nodes, grads, *x, || {
                let mut out = vec![T::zero(); len];
                for block in g.chunks_exact(len) {
                    out.iter_mut().zip(block).for_each(|(a, &v)| *a += v);
                }
                out
            });
        }
        Op::Sum(x) => {
            let len = nodes[*x].value.len();
            accumulate(nodes, grads, *x, || vec![g[0]; len]);
        }
        Op::Mean(x) => {
            let len = nodes[*x].value.len();
            accumulate(nodes, grads, *x, || vec![g[0] / T::of(len as f64); len]);
        }
        Op::SumAxis(x, axis) => {
            let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
            accumulate(nodes, grads, *x, || {
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out
            });
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            let y = &node.value;
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                dx
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, || {
                xv.iter()
                    .zip(g)
                    .map(|(&v, &u)| {
                        let d = std_normal_cdf(v) + v * T::of(std_normal_pdf(v.f64()));
                        u * d
                    })
                    .collect()
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = nodes[*gain].value.len();
            let gv = &nodes[*gain].value;
            let dn = T::of(d as f64);
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[rows.clone()], &xhat[rows.clone()]);
                    let dh: Vec<T> = gr.iter().zip(gv).map(|(&u, &w)| u * w).collect();
                    let sum_dh: T = dh.iter().copied().sum();
                    let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = inv / dn * (dn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                dx
            });
            accumulate(nodes, grads, *gain, || {
                let mut dg = vec![T::zero(); d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
                dg
            });
            accumulate(nodes, grads, *bias, || {
                let mut db = vec![T::zero(); d];
                for gr in g.chunks_exact(d) {
                    db.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
                }
                db
            });
        }
        Op::BceLogits { logits, targets } => {
            let xv = &nodes[*logits].value;
            let scale = g[0] / T::of(targets.len() as f64);
            accumulate(nodes, grads, *logits, || {
                xv.iter()
                    .zip(targets)
                    .map(|(&l, &t)| {
                        let s = T::one() / (T::one() + (-l).exp());
                        (s - t) * scale
                    })
                    .collect()
            });
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<&[T]> = inputs.iter().map(|&i| nodes[i].value.as_slice()).collect();
            let input_grads = backward(g, &values, &node.value);
            if input_grads.len() != inputs.len() {
                return Err(Error::Contract("custom backward arity mismatch".into()));
            }
            for (&i, gi) in inputs.iter().zip(input_grads) {
                if gi.len() != nodes[i].value.len() {
                    return Err(Error::shape("custom backward", &nodes[i].shape, &[gi.len()]));
                }
                accumulate(nodes, grads, i, || gi);
            }
        }
    }
    Ok(())
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var` (zeros when unreached).
    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds the gradient of every parameter bound on the tape into the
    /// store's accumulated `grad` fields.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(pid, node) in &self.params {
            let t = store.get_mut(pid);
            match &self.grads[node] {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![T::zero(); t.numel()])?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_overflow_safe() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let y = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = y.softmax(0).unwrap().to_vec();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-300);
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -10.0]));
        let y = x.gelu().unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        // 1·Φ(1), Φ(1) = 0.8413447460685429 (mpmath, 30 digits)
        assert!((y[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!(y[2].abs() < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[2.5, 2.5, 2.5]));
        assert_eq!(x.layer_norm(g, b, 1e-5).unwrap().to_vec(), vec![0.0; 3]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().to_vec();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-15 && (y[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn backward_simple() {
        let tape = Tape::new();
        let w = tape.var(Tensor::<f64>::zeros(&[2, 3]).with_requires_grad(true));
        let g = w.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(w).data(), &[1.0; 6]);

        let tape = Tape::new();
        let w = tape.var(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let g = w.square().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.var(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(w.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let w = tape.var(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = tape.var(t(&[1], &[3.0]).with_requires_grad(true));
        let g = c.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_param_accumulates_across_backwards() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, -1.0]));
        for _ in 0..2 {
            let tape = Tape::new();
            let a = tape.param(&store, id);
            let b = tape.param(&store, id);
            assert_eq!(a.id(), b.id());
            let g = a.add(b).unwrap().sum().unwrap().backward().unwrap();
            g.accumulate_into(&mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn permute_concat_slice_tile_shapes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(x.transpose().unwrap().to_vec(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = Var::concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 6]);
        assert_eq!(c.slice(1, 3, 5).unwrap().to_vec(), vec![0.0, 1.0, 3.0, 4.0]);
        assert_eq!(x.tile(2).unwrap().shape(), vec![2, 2, 3]);
        assert_eq!(x.sum_axis(0).unwrap().to_vec(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        assert!(matches!(x.scale(1e300), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn bce_saturates_without_overflow() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 30.0]));
        let y = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        let l = x.bce_with_logits(&y).unwrap().item();
        assert!((l - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    }
}
