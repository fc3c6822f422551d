//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass together with
//! the primitive that produced it. Nodes are appended in execution order, so
//! the tape is topologically sorted by construction and [`Tape::backward`] is
//! a single reverse sweep. The tape is rebuilt for every forward pass.
//!
//! Nodes created from constants do not require gradients and neither does
//! anything computed only from them; the backward sweep skips such nodes,
//! which is what keeps finite-difference probes and no-grad evaluation cheap.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One element of a [`Tape::stack`] call.
#[derive(Clone, Copy, Debug)]
pub enum Slot<T> {
    Const(T),
    /// A single-element node.
    Var(Var),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy { scalar: Var, input: Var },
    AddBias { input: Var, bias: Var },
    Relu(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Clamp { input: Var, lo: Tensor<T>, hi: Tensor<T> },
    Max { input: Var, argmax: Vec<usize>, len: usize, inner: usize },
    Sum(Var),
    Mean(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    Stack(Vec<Slot<T>>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Softplus(..) => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Max { .. } => "max",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Stack(..) => "stack",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that rejects any op producing NaN or infinity.
    pub fn checked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, &[self.shape(v)]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Multiplies every element of `input` by the single-element node `scalar`.
    pub fn scale_by(&mut self, scalar: Var, input: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(Error::shape("scale_by", &[self.shape(scalar), self.shape(input)]));
        }
        let s = self.value(scalar).item();
        let v = self.value(input).map(|x| x * s);
        self.push(v, Op::ScaleBy { scalar, input }, &[scalar, input])
    }

    /// Adds a length-`n` bias to every row of an `m×n` input.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", input)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", &[self.shape(input), self.shape(bias)]));
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (x, &bb) in row.iter_mut().zip(b) {
                *x += bb;
            }
        }
        self.push(Tensor::new(&[m, n], out)?, Op::AddBias { input, bias }, &[input, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.sin());
        self.push(v, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.cos());
        self.push(v, Op::Cos(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, input: Var, lo: Tensor<T>, hi: Tensor<T>) -> Result<Var> {
        if lo.shape() != self.shape(input) || hi.shape() != self.shape(input) {
            return Err(Error::shape("clamp", &[self.shape(input), lo.shape(), hi.shape()]));
        }
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        let v = Tensor::new(x.shape(), data)?;
        self.push(v, Op::Clamp { input, lo, hi }, &[input])
    }

    /// Max over `axis`, which is removed from the output shape. Ties resolve
    /// to the first maximal index.
    pub fn max_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("max", &[&shape]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            let mut best: Vec<T> = x[base..base + inner].to_vec();
            let mut idx: Vec<usize> = (0..inner).map(|i| base + i).collect();
            for l in 1..len {
                let row = &x[base + l * inner..base + (l + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    if v > best[i] {
                        best[i] = v;
                        idx[i] = base + l * inner + i;
                    }
                }
            }
            out.extend(best);
            argmax.extend(idx);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(
            Tensor::new(&out_shape, out)?,
            Op::Max { input, argmax, len, inner },
            &[input],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s = x.sum() / T::of(x.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[label]` for a `B×C` input.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("softmax_ce", logits)?;
        if b != labels.len() || b == 0 {
            return Err(Error::shape("softmax_ce", &[self.shape(logits), &[labels.len()]]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = T::zero();
        for (row, &y) in x.chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[y];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = loss / T::of(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Concatenates along axis 0 (any rank, matching trailing dims) or
    /// axis 1 (2-D, matching row counts).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero inputs".into()))?;
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        let out = match axis {
            0 => {
                let tail = &self.shape(first)[1..];
                if shapes.iter().any(|s| s.is_empty() || &s[1..] != tail) {
                    return Err(Error::shape("concat", &shapes));
                }
                let rows: usize = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::new();
                for &v in inputs {
                    data.extend_from_slice(self.value(v).data());
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(tail);
                Tensor::new(&shape, data)?
            }
            1 => {
                let rows = self.dims2("concat", first)?.0;
                if shapes.iter().any(|s| s.len() != 2 || s[0] != rows) {
                    return Err(Error::shape("concat", &shapes));
                }
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &v in inputs {
                        data.extend_from_slice(self.value(v).row(r));
                    }
                }
                Tensor::new(&[rows, cols], data)?
            }
            _ => return Err(Error::shape("concat", &shapes)),
        };
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape("slice_rows", &[&shape, &[start, len]]));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(input).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        self.push(Tensor::new(&out_shape, data)?, Op::SliceRows { input, start }, &[input])
    }

    /// Columns `start..end` of a 2-D input.
    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", input)?;
        if start > end || end > cols {
            return Err(Error::shape("slice_cols", &[self.shape(input), &[start, end]]));
        }
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + end]);
        }
        self.push(
            Tensor::new(&[rows, end - start], data)?,
            Op::SliceCols { input, start },
            &[input],
        )
    }

    /// Single element `index` (flat) of `input`, as a one-element node.
    pub fn element(&mut self, input: Var, index: usize) -> Result<Var> {
        let n = self.value(input).len();
        if index >= n {
            return Err(Error::shape("element", &[self.shape(input), &[index]]));
        }
        let flat = self.reshape(input, &[n, 1])?;
        self.slice_rows(flat, index, 1)
    }

    /// Builds a tensor of `shape` whose entries are constants or
    /// single-element nodes.
    pub fn stack(&mut self, shape: &[usize], slots: &[Slot<T>]) -> Result<Var> {
        if shape.iter().product::<usize>() != slots.len() {
            return Err(Error::shape("stack", &[shape, &[slots.len()]]));
        }
        let mut inputs = Vec::new();
        let mut data = Vec::with_capacity(slots.len());
        for s in slots {
            match *s {
                Slot::Const(c) => data.push(c),
                Slot::Var(v) => {
                    if self.value(v).len() != 1 {
                        return Err(Error::shape("stack", &[self.shape(v)]));
                    }
                    data.push(self.value(v).item());
                    inputs.push(v);
                }
            }
        }
        self.push(Tensor::new(shape, data)?, Op::Stack(slots.to_vec()), &inputs)
    }

    /// Smallest distance of any recorded input to a point where a ReLU,
    /// max or clamp is non-differentiable. Finite-difference checks are only
    /// meaningful when perturbations stay well inside this margin.
    ///
    /// Exact ties in a max are skipped: they come from saturated inputs
    /// (dead ReLUs, clamped values) or duplicated rows, whose sensitivity is
    /// either covered by the saturating op's own margin or absent.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        margin = margin.min(x.f64().abs());
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    for ((&x, &l), &h) in self.value(*input).data().iter().zip(lo.data()).zip(hi.data()) {
                        margin = margin.min((x - l).f64().abs()).min((h - x).f64().abs());
                    }
                }
                &Op::Max { input, ref argmax, len, inner } => {
                    let x = self.value(input).data();
                    for &win in argmax {
                        let i = win % inner;
                        let base = (win / (len * inner)) * len * inner + i;
                        for l in 0..len {
                            let j = base + l * inner;
                            if j != win && x[j] != x[win] {
                                margin = margin.min((x[win] - x[j]).f64());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Hash of every branch taken by non-smooth ops: max winners, ReLU
    /// signs and clamp states. Two evaluations with equal signatures lie in
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    for ((&x, &l), &u) in self.value(*input).data().iter().zip(lo.data()).zip(hi.data()) {
                        ((x < l) as u8 + 2 * (x > u) as u8).hash(&mut h);
                    }
                }
                Op::Max { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().1;
                if ng(a) {
                    let bv = self.value(b).data();
                    let da = slot(grads, a, &[m, k]);
                    T::gemm(m, n, k, gd, (n as isize, 1), bv, (1, n as isize), da.data_mut(), true);
                }
                if ng(b) {
                    let av = self.value(a).data();
                    let db = slot(grads, b, &[k, n]);
                    T::gemm(k, m, n, av, (1, k as isize), gd, (n as isize, 1), db.data_mut(), true);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if ng(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if ng(a) {
                    slot(grads, a, g.shape()).add_assign(g);
                }
                if ng(b) {
                    slot(grads, b, g.shape()).axpy(-T::one(), g);
                }
            }
            &Op::Mul(a, b) => {
                if ng(a) {
                    let t = g.zip_map(self.value(b), |x, y| x * y);
                    slot(grads, a, g.shape()).add_assign(&t);
                }
                if ng(b) {
                    let t = g.zip_map(self.value(a), |x, y| x * y);
                    slot(grads, b, g.shape()).add_assign(&t);
                }
            }
            &Op::Scale(a, s) => {
                if ng(a) {
                    slot(grads, a, g.shape()).axpy(s, g);
                }
            }
            &Op::ScaleBy { scalar, input } => {
                if ng(scalar) {
                    let x = self.value(input).data();
                    let ds: T = gd.iter().zip(x).map(|(&a, &b)| a * b).sum();
                    slot(grads, scalar, self.shape(scalar)).data_mut()[0] += ds;
                }
                if ng(input) {
                    let s = self.value(scalar).item();
                    slot(grads, input, g.shape()).axpy(s, g);
                }
            }
            &Op::AddBias { input, bias } => {
                if ng(input) {
                    slot(grads, input, g.shape()).add_assign(g);
                }
                if ng(bias) {
                    let n = self.shape(bias)[0];
                    let db = slot(grads, bias, &[n]);
                    for row in gd.chunks_exact(n) {
                        for (d, &x) in db.data_mut().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                let da = slot(grads, a, g.shape());
                for ((d, &gi), &xi) in da.data_mut().iter_mut().zip(gd).zip(x) {
                    if xi > T::zero() {
                        *d += gi;
                    }
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                let da = slot(grads, a, g.shape());
                for ((d, &gi), &yi) in da.data_mut().iter_mut().zip(gd).zip(y) {
                    *d += gi * (T::one() - yi * yi);
                }
            }
            &Op::Sin(a) => {
                let x = self.value(a).data();
                let da = slot(grads, a, g.shape());
                for ((d, &gi), &xi) in da.data_mut().iter_mut().zip(gd).zip(x) {
                    *d += gi * xi.cos();
                }
            }
            &Op::Cos(a) => {
                let x = self.value(a).data();
                let da = slot(grads, a, g.shape());
                for ((d, &gi), &xi) in da.data_mut().iter_mut().zip(gd).zip(x) {
                    *d -= gi * xi.sin();
                }
            }
            &Op::Softplus(a) => {
                let x = self.value(a).data();
                let da = slot(grads, a, g.shape());
                for ((d, &gi), &xi) in da.data_mut().iter_mut().zip(gd).zip(x) {
                    *d += gi * sigmoid(xi);
                }
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                let da = slot(grads, *input, g.shape());
                for (i, d) in da.data_mut().iter_mut().enumerate() {
                    if x[i] >= lo.data()[i] && x[i] <= hi.data()[i] {
                        *d += gd[i];
                    }
                }
            }
            Op::Max { input, argmax, .. } => {
                let shape = self.shape(*input).to_vec();
                let da = slot(grads, *input, &shape);
                for (&src, &gi) in argmax.iter().zip(gd) {
                    da.data_mut()[src] += gi;
                }
            }
            &Op::Sum(a) => {
                let gi = g.item();
                let da = slot(grads, a, self.shape(a));
                da.data_mut().iter_mut().for_each(|d| *d += gi);
            }
            &Op::Mean(a) => {
                let gi = g.item() / T::of(self.value(a).len() as f64);
                let da = slot(grads, a, self.shape(a));
                da.data_mut().iter_mut().for_each(|d| *d += gi);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g.item() / T::of(labels.len() as f64);
                let shape = self.shape(*logits).to_vec();
                let dl = slot(grads, *logits, &shape);
                for (r, &y) in labels.iter().enumerate() {
                    let row = &mut dl.data_mut()[r * c..(r + 1) * c];
                    for (j, d) in row.iter_mut().enumerate() {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        *d += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Concat { inputs, axis } => match axis {
                0 => {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = self.value(v).len();
                        if ng(v) {
                            let shape = self.shape(v).to_vec();
                            let dv = slot(grads, v, &shape);
                            for (d, &x) in dv.data_mut().iter_mut().zip(&gd[offset..offset + n]) {
                                *d += x;
                            }
                        }
                        offset += n;
                    }
                }
                _ => {
                    let cols = g.shape()[1];
                    let mut start = 0;
                    for &v in inputs {
                        let (rows, w) = self.value(v).dims2().unwrap();
                        if ng(v) {
                            let dv = slot(grads, v, &[rows, w]);
                            for r in 0..rows {
                                let src = &gd[r * cols + start..r * cols + start + w];
                                for (d, &x) in dv.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *d += x;
                                }
                            }
                        }
                        start += w;
                    }
                }
            },
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let da = slot(grads, a, &shape);
                for (d, &x) in da.data_mut().iter_mut().zip(gd) {
                    *d += x;
                }
            }
            &Op::Transpose(a) => {
                let t = g.transpose2().expect("2-D gradient");
                slot(grads, a, t.shape()).add_assign(&t);
            }
            &Op::SliceRows { input, start } => {
                let shape = self.shape(input).to_vec();
                let row: usize = shape[1..].iter().product();
                let da = slot(grads, input, &shape);
                for (d, &x) in da.data_mut()[start * row..].iter_mut().zip(gd) {
                    *d += x;
                }
            }
            &Op::SliceCols { input, start } => {
                let (rows, cols) = self.value(input).dims2().unwrap();
                let w = g.shape()[1];
                let da = slot(grads, input, &[rows, cols]);
                for r in 0..rows {
                    for j in 0..w {
                        da.data_mut()[r * cols + start + j] += gd[r * w + j];
                    }
                }
            }
            Op::Stack(slots) => {
                for (s, &gi) in slots.iter().zip(gd) {
                    if let Slot::Var(v) = *s {
                        if ng(v) {
                            let shape = self.shape(v).to_vec();
                            slot(grads, v, &shape).data_mut()[0] += gi;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else if x < T::of(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let err = tape.matmul(b, a).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
    }

    #[test]
    fn relu_blocks_gradient_for_negative_input() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(&[3, 4]));
        let loss = tape.softmax_ce(logits, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.wrt(loss).data(), &[1.0]);
    }

    #[test]
    fn independent_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[3], &[5.0, 6.0, 7.0]));
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.wrt(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut tape = Tape::new();
        // 2 clouds × 3 points × 2 features, ties in the second feature
        let x = tape.param(t(&[2, 3, 2], &[1., 5., 3., 5., 2., 0., 0., 1., 0., 1., -1., 1.]));
        let m = tape.max_axis(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[3., 5., 0., 1.]);
        let loss = tape.sum(m).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0., 1., 1., 0., 0., 0., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn checked_tape_reports_non_finite() {
        let mut tape = Tape::<f64>::checked();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn stack_and_slices_route_gradients() {
        let mut tape = Tape::new();
        let theta = tape.param(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let a = tape.element(theta, 0).unwrap();
        let c = tape.element(theta, 2).unwrap();
        let m = tape.stack(&[2, 2], &[Slot::Var(a), Slot::Const(1.0), Slot::Const(0.0), Slot::Var(c)]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 1.0, 0.0, 2.0]);
        let col = tape.slice_cols(m, 1, 2).unwrap();
        let both = tape.concat(&[m, col], 1).unwrap();
        assert_eq!(tape.shape(both), &[2, 3]);
        let loss = tape.sum(both).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta).data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_is_bit_reproducible() {
        let build = || {
            let mut tape = Tape::<f32>::new();
            let w = tape.param(Tensor::from_f64(&[3, 2], &[0.1, -0.4, 0.3, 0.7, -0.2, 0.05]).unwrap());
            let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, -1.0, 0.5, 0.25, 3.0]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h).unwrap();
            let l = tape.softmax_ce(h, &[0, 1]).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).clone(), g.wrt(w))
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn branch_signature_tracks_relu_and_max_switches() {
        let sig = |x: &[f64]| {
            let mut t = Tape::<f64>::new();
            let v = t.constant(Tensor::from_f64(&[1, 3], x).unwrap());
            let r = t.relu(v).unwrap();
            t.max_axis(r, 1).unwrap();
            t.branch_signature()
        };
        let base = sig(&[0.5, -1.0, 0.2]);
        // same signs and winner, different values
        assert_eq!(sig(&[0.6, -2.0, 0.1]), base);
        // a ReLU flips sign
        assert_ne!(sig(&[0.5, 1e-3, 0.2]), base);
        // the max winner moves
        assert_ne!(sig(&[0.5, -1.0, 0.7]), base);
        // smooth ops do not contribute
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::from_f64(&[2], &[0.3, -0.3]).unwrap());
        t.tanh(v).unwrap();
        assert_eq!(t.branch_signature(), Tape::<f64>::new().branch_signature());
    }
}
