//! Reverse-mode differentiation through an operation tape.
//!
//! Every operator records its inputs and output into an append-only arena,
//! which keeps the tape topologically ordered for free: an operation's inputs
//! always precede it. `backward` walks the arena once in reverse, taking each
//! intermediate gradient as it is consumed so peak memory shrinks as the pass
//! proceeds. Gradients persist only on `requires_grad` leaves.
//!
//! Tapes are per-forward-pass: the trainer builds a fresh tape each
//! iteration, so gradients never accumulate across passes. Calling `backward`
//! twice on the same tape is defined and accumulates into leaf gradients.

use std::sync::Arc;

use super::kernels::{
    conv3x3_backward, conv3x3_forward, filter_same_backward, filter_same_forward, ConvScratch,
    FilterKernel,
};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Outcome of a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardStatus {
    /// Gradients were propagated to every reachable `requires_grad` leaf.
    Completed,
    /// The output was a leaf with no recorded operations behind it; nothing
    /// to propagate. Callers may treat this as a warning.
    DetachedNoOp,
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Filter2d {
        input: Var,
        kernel: Arc<FilterKernel<T>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    AddScalar(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Record of executed operations with their input/output tensors.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scratch: ConvScratch<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scratch: ConvScratch::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are collected for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a constant (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar-shaped var.
    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Gradient of `v`, present only after `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<Shape> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape(context, sa, sb));
        }
        Ok(sa)
    }

    // ── Operators ────────────────────────────────────────────────────

    /// 3x3 convolution with padding 1 and zero fill; spatial size preserved.
    /// `bias` has shape (1, co, 1, 1).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = conv3x3_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            &mut self.scratch,
        )?;
        let needs = self.needs(input)
            || self.needs(weight)
            || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, needs, Op::Conv2d { input, weight, bias }))
    }

    /// Depthwise fixed-coefficient filter, zero-padded same size. The kernel
    /// itself is not differentiated.
    pub fn filter2d(&mut self, input: Var, kernel: &Arc<FilterKernel<T>>) -> Result<Var> {
        let out = filter_same_forward(self.value(input), kernel);
        let needs = self.needs(input);
        Ok(self.push(
            out,
            needs,
            Op::Filter2d {
                input,
                kernel: Arc::clone(kernel),
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.map_unary(input, |x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(input);
        self.push(value, needs, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.map_unary(input, sigmoid_scalar);
        let needs = self.needs(input);
        self.push(value, needs, Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.map_unary(input, |x| x.tanh());
        let needs = self.needs(input);
        self.push(value, needs, Op::Tanh(input))
    }

    /// Stacks `a` then `b` along the channel axis; batch and spatial dims
    /// must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        let hw = sa.h * sa.w;
        for item in 0..sa.n {
            data.extend_from_slice(
                &self.value(a).data()[item * sa.c * hw..(item + 1) * sa.c * hw],
            );
            data.extend_from_slice(
                &self.value(b).data()[item * sb.c * hw..(item + 1) * sb.c * hw],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(shape, data)?,
            needs,
            Op::ConcatChannels { a, b },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_binary(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_binary(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_binary(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let value = self.zip_binary(a, b, |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Div { a, b }))
    }

    /// Multiplication by a plain scalar.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.map_unary(input, |x| x * factor);
        let needs = self.needs(input);
        self.push(value, needs, Op::Scale { input, factor })
    }

    /// Addition of a plain scalar to every element.
    pub fn add_scalar(&mut self, input: Var, offset: T) -> Var {
        let value = self.map_unary(input, |x| x + offset);
        let needs = self.needs(input);
        self.push(value, needs, Op::AddScalar(input))
    }

    /// Mean over all elements, yielding a (1,1,1,1) tensor. The sum runs in
    /// row-major element order.
    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let mut acc = T::zero();
        for v in t.data() {
            acc += *v;
        }
        let value = Tensor::scalar(acc / T::from_f64(t.numel() as f64));
        let needs = self.needs(input);
        self.push(value, needs, Op::Mean(input))
    }

    fn map_unary(&self, input: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(input);
        Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary op preserves length")
    }

    fn zip_binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b);
        Tensor::from_vec(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
        .expect("binary op preserves length")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Propagates d(output)/d(leaf) into every reachable `requires_grad`
    /// leaf. The output must be scalar-shaped.
    pub fn backward(&mut self, output: Var) -> Result<BackwardStatus> {
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {}",
                self.nodes[output.0].value.shape()
            )));
        }
        if matches!(self.nodes[output.0].op, Op::Leaf) {
            if self.nodes[output.0].needs_grad {
                // d(x)/d(x) = 1 for a bare leaf.
                self.accumulate(output, Tensor::scalar(T::one()));
                return Ok(BackwardStatus::Completed);
            }
            return Ok(BackwardStatus::DetachedNoOp);
        }

        self.nodes[output.0].grad = Some(match self.nodes[output.0].grad.take() {
            Some(mut g) => {
                g.data_mut()[0] += T::one();
                g
            }
            None => Tensor::scalar(T::one()),
        });

        for id in (0..=output.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            // Intermediate gradients are consumed exactly once, in reverse
            // topological order; taking them frees memory as we go.
            let Some(g_out) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.dispatch_vjp(Var(id), op, g_out)?;
        }
        Ok(BackwardStatus::Completed)
    }

    fn dispatch_vjp(&mut self, out: Var, op: Op<T>, g: Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => unreachable!("leaves are skipped in backward"),
            Op::Conv2d { input, weight, bias } => {
                let (d_in, d_w, d_b) = conv3x3_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    &g,
                    self.nodes[input.0].needs_grad,
                    self.nodes[weight.0].needs_grad,
                    bias.is_some_and(|b| self.nodes[b.0].needs_grad),
                    &mut self.scratch,
                )?;
                if let Some(d) = d_in {
                    self.accumulate(input, d);
                }
                if let Some(d) = d_w {
                    self.accumulate(weight, d);
                }
                if let (Some(d), Some(b)) = (d_b, bias) {
                    self.accumulate(b, d);
                }
            }
            Op::Filter2d { input, kernel } => {
                if self.needs(input) {
                    let d = filter_same_backward(&g, &kernel);
                    self.accumulate(input, d);
                }
            }
            Op::Relu(input) => {
                if self.needs(input) {
                    // Subgradient 0 at exactly 0.
                    let d = self.zip_with_grad(input, &g, |x, gv| {
                        if x > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(input, d);
                }
            }
            Op::Sigmoid(input) => {
                if self.needs(input) {
                    let d = self.zip_out_with_grad(out, &g, |s, gv| gv * s * (T::one() - s));
                    self.accumulate(input, d);
                }
            }
            Op::Tanh(input) => {
                if self.needs(input) {
                    let d = self.zip_out_with_grad(out, &g, |t, gv| gv * (T::one() - t * t));
                    self.accumulate(input, d);
                }
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let hw = sa.h * sa.w;
                if self.needs(a) {
                    let mut d = Tensor::zeros(sa);
                    for item in 0..sa.n {
                        let src = &g.data()[item * (sa.c + sb.c) * hw..];
                        d.data_mut()[item * sa.c * hw..(item + 1) * sa.c * hw]
                            .copy_from_slice(&src[..sa.c * hw]);
                    }
                    self.accumulate(a, d);
                }
                if self.needs(b) {
                    let mut d = Tensor::zeros(sb);
                    for item in 0..sb.n {
                        let src = &g.data()[item * (sa.c + sb.c) * hw + sa.c * hw..];
                        d.data_mut()[item * sb.c * hw..(item + 1) * sb.c * hw]
                            .copy_from_slice(&src[..sb.c * hw]);
                    }
                    self.accumulate(b, d);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, g.clone());
                }
                if self.needs(b) {
                    self.accumulate(b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, g.clone());
                }
                if self.needs(b) {
                    let neg =
                        Tensor::from_vec(g.shape(), g.data().iter().map(|&v| -v).collect())?;
                    self.accumulate(b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let d = self.zip_with_grad(b, &g, |bv, gv| gv * bv);
                    self.accumulate(a, d);
                }
                if self.needs(b) {
                    let d = self.zip_with_grad(a, &g, |av, gv| gv * av);
                    self.accumulate(b, d);
                }
            }
            Op::Div { a, b } => {
                if self.needs(a) {
                    let d = self.zip_with_grad(b, &g, |bv, gv| gv / bv);
                    self.accumulate(a, d);
                }
                if self.needs(b) {
                    // d(a/b)/db = -a/b^2 = -(out)/b
                    let o = self.value(out).data();
                    let bv = self.value(b).data();
                    let d = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(o.iter().zip(bv))
                            .map(|(&gv, (&ov, &bvv))| -gv * ov / bvv)
                            .collect(),
                    )?;
                    self.accumulate(b, d);
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(input) {
                    let d =
                        Tensor::from_vec(g.shape(), g.data().iter().map(|&v| v * factor).collect())?;
                    self.accumulate(input, d);
                }
            }
            Op::AddScalar(input) => {
                if self.needs(input) {
                    self.accumulate(input, g);
                }
            }
            Op::Mean(input) => {
                if self.needs(input) {
                    let shape = self.value(input).shape();
                    let per = g.item() / T::from_f64(shape.numel() as f64);
                    self.accumulate(input, Tensor::filled(shape, per));
                }
            }
        }
        Ok(())
    }

    fn zip_with_grad(&self, v: Var, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let t = self.value(v);
        Tensor::from_vec(
            g.shape(),
            t.data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| f(x, gv))
                .collect(),
        )
        .expect("gradient preserves length")
    }

    fn zip_out_with_grad(&self, out: Var, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        self.zip_with_grad(out, g, f)
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            None => node.grad = Some(delta),
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
