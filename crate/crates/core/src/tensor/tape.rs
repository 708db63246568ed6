//! Wengert tape: every op appends a node holding its output value, its input
//! ids and (when any input needs a gradient) a vector-Jacobian product
//! closure. `backward` walks the nodes once in reverse creation order, which
//! is a valid reverse topological order because inputs always precede their
//! consumers.

use super::{cast, check_perm, invert_perm, permute_copy, topk_indices, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a VJP closure sees during the backward pass.
pub struct BackwardCtx<'a, T: Element> {
    /// Upstream gradient, shaped like `output`.
    pub grad: &'a [T],
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    needs: Vec<bool>,
}

impl<T: Element> BackwardCtx<'_, T> {
    /// Whether input `i` needs a gradient. Closures may skip work for inputs
    /// that do not.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

type VjpFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Element> {
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    vjp: Option<VjpFn<T>>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::from_parts(
                self.shapes[v.0].clone(),
                vec![T::zero(); self.shapes[v.0].iter().product()],
            ),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records an input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            inputs: Vec::new(),
            vjp: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op computed outside the tape. The closure receives the
    /// upstream gradient and returns one optional gradient per input; `None`
    /// means "no contribution".
    pub fn record<F>(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], vjp: F) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            vjp: if requires_grad { Some(Box::new(vjp)) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.rank() != 0 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a 0-dimensional tensor, got shape {:?}", root.value.shape()),
            ));
        }
        let mut acc: Vec<Option<Vec<T>>> = Vec::new();
        acc.resize_with(loss.0 + 1, || None);
        acc[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(vjp) = node.vjp.as_ref() else { continue };
            let Some(grad) = acc[id].as_ref() else { continue };
            let ctx = BackwardCtx {
                grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect(),
            };
            let input_grads = vjp(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "vjp arity for {}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input].value.numel(), "vjp size for {}", node.op);
                match &mut acc[input] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| self.nodes[id].requires_grad)
                    .map(|g| Tensor::from_parts(shapes[id].clone(), g))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let x = self.value(a);
        let out = x.map(f);
        self.record(op, out, &[a], move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = zip_map(x, y, |p, q| p + q);
        self.record("add", out, &[a, b], |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = zip_map(x, y, |p, q| p - q);
        self.record("sub", out, &[a, b], |ctx| {
            vec![
                Some(ctx.grad.to_vec()),
                ctx.needs(1).then(|| ctx.grad.iter().map(|&g| -g).collect()),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = zip_map(x, y, |p, q| p * q);
        self.record("mul", out, &[a, b], |ctx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs(0).then(|| ctx.grad.iter().zip(y).map(|(&g, &q)| g * q).collect()),
                ctx.needs(1).then(|| ctx.grad.iter().zip(x).map(|(&g, &p)| g * p).collect()),
            ]
        })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        self.record("add_scalar", out, &[a], |ctx| vec![Some(ctx.grad.to_vec())])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.record("mul_scalar", out, &[a], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |v| v.exp(), |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |v| v.ln(), |x, _| x.recip())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu_value, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid_value, |_, y| y * (T::one() - y))
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            move |v| v.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch, m, k, n) = if sa.len() == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                matmul_acc(
                    &x[bi * m * k..(bi + 1) * m * k],
                    &y[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut out_shape = if sa.len() == 2 { vec![] } else { vec![batch] };
        out_shape.extend([m, n]);
        self.record("matmul", Tensor::from_parts(out_shape, out), &[a, b], move |ctx| {
            let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let ga = ctx.needs(0).then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    matmul_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &y[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    matmul_tn_acc(
                        &x[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        self.record("reshape", out, &[a], |ctx| vec![Some(ctx.grad.to_vec())])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let perm = check_perm(self.shape(a), axes)?;
        let out = permute_copy(self.value(a), &perm);
        let inv = invert_perm(&perm);
        self.record("permute", out, &[a], move |ctx| {
            let g = Tensor::from_parts(ctx.output.shape().to_vec(), ctx.grad.to_vec());
            vec![Some(permute_copy(&g, &inv).to_vec())]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose", format!("rank {r} tensor")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let n_parts = parts.len();
        self.record("concat", Tensor::from_parts(shape, out), parts, move |ctx| {
            let mut grads: Vec<Vec<T>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut at = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    gi.extend_from_slice(&ctx.grad[at..at + e * inner]);
                    at += e * inner;
                }
            }
            debug_assert_eq!(grads.len(), n_parts);
            grads.into_iter().map(Some).collect()
        })
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let e = shape[axis];
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * e + start) * inner..(o * e + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.record("slice", Tensor::from_parts(out_shape, out), &[a], move |ctx| {
            let mut g = vec![T::zero(); outer * e * inner];
            for o in 0..outer {
                g[(o * e + start) * inner..(o * e + start + len) * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Selects rows (first-axis entries) by index; rows may repeat. The
    /// gradient scatters back into the selected rows.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || index.is_empty() {
            return Err(Error::invalid("gather_rows", "needs rank >= 1 and a non-empty index"));
        }
        let rows = shape[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for shape {shape:?}"),
            ));
        }
        let width: usize = shape[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let index = index.to_vec();
        self.record("gather_rows", Tensor::from_parts(out_shape, out), &[a], move |ctx| {
            let mut g = vec![T::zero(); rows * width];
            for (r, &i) in index.iter().enumerate() {
                let src = &ctx.grad[r * width..(r + 1) * width];
                g[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(g)]
        })
    }

    // ---- reductions -----------------------------------------------------

    fn axis_split(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((outer, shape[axis], inner, out_shape))
    }

    /// Sums out `axis`; the result drops that axis.
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_linear("reduce_sum", a, axis, T::one())
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let e = self.shape(a).get(axis).copied().unwrap_or(1);
        self.reduce_linear("reduce_mean", a, axis, cast::<T>(1.0 / e as f64))
    }

    fn reduce_linear(&mut self, op: &'static str, a: Var, axis: usize, scale: T) -> Result<Var> {
        let (outer, e, inner, out_shape) = self.axis_split(op, a, axis)?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let row = &d[(o * e + j) * inner..(o * e + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, &v)| *acc += v);
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        self.record(op, Tensor::from_parts(out_shape, out), &[a], move |ctx| {
            let mut g = vec![T::zero(); outer * e * inner];
            for o in 0..outer {
                for j in 0..e {
                    g[(o * e + j) * inner..(o * e + j + 1) * inner]
                        .iter_mut()
                        .zip(&ctx.grad[o * inner..(o + 1) * inner])
                        .for_each(|(dst, &s)| *dst = s * scale);
                }
            }
            vec![Some(g)]
        })
    }

    /// Max over `axis`; the gradient goes to the first maximal entry.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, e, inner, out_shape) = self.axis_split("reduce_max", a, axis)?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..e {
                    if d[(o * e + j) * inner + i] > d[(o * e + best) * inner + i] {
                        best = j;
                    }
                }
                out[o * inner + i] = d[(o * e + best) * inner + i];
                arg[o * inner + i] = best;
            }
        }
        self.record("reduce_max", Tensor::from_parts(out_shape, out), &[a], move |ctx| {
            let mut g = vec![T::zero(); outer * e * inner];
            for o in 0..outer {
                for i in 0..inner {
                    g[(o * e + arg[o * inner + i]) * inner + i] = ctx.grad[o * inner + i];
                }
            }
            vec![Some(g)]
        })
    }

    /// Sum of every element, as a 0-dimensional tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.value(a).sum();
        self.record("sum_all", Tensor::scalar(s), &[a], move |ctx| vec![Some(vec![ctx.grad[0]; n])])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.mul_scalar(s, cast::<T>(1.0 / n as f64))
    }

    // ---- softmax / selection --------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl("softmax", a, axis, None)
    }

    /// Softmax where `keep[i] == false` entries act as `-inf` logits and get
    /// exactly zero probability. Errors if a whole slice is masked out.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(a).numel() {
            return Err(Error::invalid(
                "softmax_masked",
                format!("mask has {} entries for shape {:?}", keep.len(), self.shape(a)),
            ));
        }
        self.softmax_impl("softmax_masked", a, axis, Some(keep))
    }

    fn softmax_impl(&mut self, op: &'static str, a: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let (outer, e, inner, _) = self.axis_split(op, a, axis)?;
        let shape = self.shape(a).to_vec();
        let d = self.value(a).data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * e + j) * inner + i;
                let kept = |j: usize| keep.is_none_or(|k| k[at(j)]);
                let mut max = T::neg_infinity();
                for j in (0..e).filter(|&j| kept(j)) {
                    max = max.max(d[at(j)]);
                }
                if max == T::neg_infinity() {
                    return Err(Error::invalid(op, "every entry of a softmax slice is masked"));
                }
                let mut total = T::zero();
                for j in (0..e).filter(|&j| kept(j)) {
                    let v = (d[at(j)] - max).exp();
                    out[at(j)] = v;
                    total += v;
                }
                for j in 0..e {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        self.record(op, Tensor::from_parts(shape, out), &[a], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad;
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * e + j) * inner + i;
                    let dot: T = (0..e).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..e {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Top-k indices of a recorded value; records nothing.
    pub fn topk_indices(&self, a: Var, axis: usize, k: usize) -> Result<Vec<usize>> {
        topk_indices(self.value(a), axis, k)
    }

    /// Short op tag of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }
}

fn zip_map<T: Element>(x: &Tensor<T>, y: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
    )
}

pub(crate) fn sigmoid_value<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Element>(x: T) -> T {
    let (c, a, half) = (cast::<T>(GELU_C), cast::<T>(GELU_A), cast::<T>(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let (c, a, half) = (cast::<T>(GELU_C), cast::<T>(GELU_A), cast::<T>(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    let three = cast::<T>(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn matmul_nt_acc<T: Element>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_tn_acc<T: Element>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(o, &gv)| *o += av * gv);
        }
    }
}
