use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{
    axis_split, conv_forward, conv_grad_input, conv_grad_kernel, gemm, gemm_to_kernel, kernel_to_gemm,
    pad_sequences, unpad_sequences, ConvShape, MatRef,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Conv1d { input: usize, kernel: usize, pad: usize },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Softmax(usize),
    Reshape(usize),
    Cosine(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is single-threaded; build one per forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input: data, graphs, masks, frozen parameters.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.check(v).expect("variable from another tape");
        Rc::clone(&self.nodes.borrow()[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn get(&self, index: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[index].value)
    }

    // ---- elementwise -------------------------------------------------------

    /// `a + b`, where one operand's shape may be a trailing suffix of the
    /// other's (it is then repeated over the leading axes).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("add", a, b)?;
        let (x, y) = (self.get(a), self.get(b));
        let period = y.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + y.data()[i % period])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with the same suffix broadcasting as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("mul", a, b)?;
        let (x, y) = (self.get(a), self.get(b));
        let period = y.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * y.data()[i % period])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.get(ia).map(|v| v * factor);
        self.record("scale", out, Op::Scale(ia, factor), &[ia])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.get(ia).map(|v| v.max(0.0));
        self.record("relu", out, Op::Relu(ia), &[ia])
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.get(ia).map(f64::exp);
        self.record("exp", out, Op::Exp(ia), &[ia])
    }

    /// Natural logarithm; every input entry must be strictly positive.
    pub fn log(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = self.get(ia);
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = x.map(f64::ln);
        self.record("log", out, Op::Log(ia), &[ia])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.get(ia).sum());
        self.record("sum", out, Op::Sum(ia), &[ia])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = self.get(ia);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.record("mean", out, Op::Mean(ia), &[ia])
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = reduce_axis(&self.get(ia), axis, "sum_axis")?;
        self.record("sum_axis", out, Op::SumAxis(ia, axis), &[ia])
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = self.get(ia);
        let mut out = reduce_axis(&x, axis, "mean_axis")?;
        let n = x.shape()[axis];
        if n == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        out.data_mut().iter_mut().for_each(|v| *v /= n as f64);
        self.record("mean_axis", out, Op::MeanAxis(ia, axis), &[ia])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = self.get(ia);
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if width == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record("softmax", out, Op::Softmax(ia), &[ia])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.get(ia).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.get(ia).shape()),
            )
        })?;
        self.record("reshape", out, Op::Reshape(ia), &[ia])
    }

    // ---- structured --------------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// Leading (batch) axes must agree, or one operand must be a plain matrix
    /// that is then shared across the other's batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (self.get(ia), self.get(ib));
        let plan = MatMulPlan::new(x.shape(), y.shape())?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        plan.forward(x.data(), y.data(), &mut out);
        let out = Tensor::new(plan.out_shape.clone(), out)?;
        self.record("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Multi-channel 1-D cross-correlation along time, stride 1.
    ///
    /// `input` is `[sequences, length, c_in]`, `kernel` is `[c_out, c_in, k]`,
    /// and `pad` zeros are added on both ends of every sequence.
    pub fn conv1d(&self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let (x, w) = (self.get(ii), self.get(ik));
        let geo = ConvGeometry::new(x.shape(), w.shape(), pad)?;
        let wg = kernel_to_gemm(w.data(), geo.c_out, geo.c_in, geo.k);
        let xp = pad_sequences(x.data(), geo.n, geo.len, geo.c_in, pad);
        let out = conv_forward(&xp, &wg, geo.shape(pad));
        let out = Tensor::new(vec![geo.n, geo.out_len, geo.c_out], out)?;
        self.record(
            "conv1d",
            out,
            Op::Conv1d {
                input: ii,
                kernel: ik,
                pad,
            },
            &[ii, ik],
        )
    }

    /// Pairwise cosine similarity between the rows of `a` `[n, d]` and
    /// `b` `[m, d]`, giving `[n, m]`. A zero-norm row has similarity 0 with
    /// everything and receives no gradient.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (self.get(ia), self.get(ib));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let (n, m, d) = (x.shape()[0], y.shape()[0], x.shape()[1]);
        let nx = row_norms(x.data(), n, d);
        let ny = row_norms(y.data(), m, d);
        let mut out = vec![0.0; n * m];
        gemm(
            MatRef::row_major(x.data(), n, d),
            MatRef::row_major(y.data(), m, d).t(),
            0.0,
            &mut out,
        );
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = if nx[i] == 0.0 || ny[j] == 0.0 {
                    0.0
                } else {
                    (out[i * m + j] / (nx[i] * ny[j])).clamp(-1.0, 1.0)
                };
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.record("cosine_similarity", out, Op::Cosine(ia, ib), &[ia, ib])
    }

    /// Orders operands so the second's shape is a suffix of the first's.
    fn order_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.get(ia).shape().to_vec(), self.get(ib).shape().to_vec());
        if sa.ends_with(&sb) {
            Ok((ia, ib))
        } else if sb.ends_with(&sa) {
            Ok((ib, ia))
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates adjoints of the scalar `root` into every node that
    /// requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.check(root)?;
        let nodes = self.nodes.borrow();
        let root_value = &nodes[r].value;
        if !root_value.is_scalar() {
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[r].requires_grad {
            grads[r] = Some(Tensor::ones(root_value.shape()));
        }

        for idx in (0..=r).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            // Leaves keep their adjoint; intermediate buffers are dropped.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let needs = |i: usize| nodes[i].requires_grad;
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if needs(b) {
                        let shape = nodes[b].value.shape().to_vec();
                        accumulate(&mut grads, b, fold_leading(&g, &shape));
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    let period = y.len();
                    if needs(a) {
                        let data = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * y.data()[i % period])
                            .collect();
                        accumulate(&mut grads, a, Tensor::new(x.shape().to_vec(), data)?);
                    }
                    if needs(b) {
                        let prod: Vec<f64> =
                            g.data().iter().zip(x.data()).map(|(gv, xv)| gv * xv).collect();
                        let prod = Tensor::new(x.shape().to_vec(), prod)?;
                        accumulate(&mut grads, b, fold_leading(&prod, y.shape()));
                    }
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, a, g.map(|v| v * factor));
                }
                Op::Relu(a) => {
                    let x = &nodes[a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Exp(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, yv)| gv * yv)
                        .collect();
                    accumulate(&mut grads, a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Log(a) => {
                    let x = &nodes[a].value;
                    let data = g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    accumulate(&mut grads, a, Tensor::full(nodes[a].value.shape(), gv));
                }
                Op::Mean(a) => {
                    let x = &nodes[a].value;
                    let gv = g.item()? / x.len() as f64;
                    accumulate(&mut grads, a, Tensor::full(x.shape(), gv));
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let shape = nodes[a].value.shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, axis);
                    let factor = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut data = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for (d, &s) in data[base..base + inner].iter_mut().zip(src) {
                                *d = s * factor;
                            }
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(shape, data)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let width = *y.shape().last().expect("softmax rank");
                    let mut data = vec![0.0; y.len()];
                    for ((out, yr), gr) in data
                        .chunks_mut(width)
                        .zip(y.data().chunks(width))
                        .zip(g.data().chunks(width))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Reshape(a) => {
                    let shape = nodes[a].value.shape().to_vec();
                    accumulate(&mut grads, a, Tensor::new(shape, g.into_data())?);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    let plan = MatMulPlan::new(x.shape(), y.shape())?;
                    let (ga, gb) = plan.backward(x.data(), y.data(), g.data(), needs(a), needs(b));
                    if let Some(ga) = ga {
                        accumulate(&mut grads, a, Tensor::new(x.shape().to_vec(), ga)?);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, b, Tensor::new(y.shape().to_vec(), gb)?);
                    }
                }
                Op::Conv1d { input, kernel, pad } => {
                    let (x, w) = (&nodes[input].value, &nodes[kernel].value);
                    let geo = ConvGeometry::new(x.shape(), w.shape(), pad)?;
                    let sh = geo.shape(pad);
                    if needs(kernel) {
                        let xp = pad_sequences(x.data(), geo.n, geo.len, geo.c_in, pad);
                        let gw = conv_grad_kernel(&xp, g.data(), sh);
                        let gk = gemm_to_kernel(&gw, geo.c_out, geo.c_in, geo.k);
                        accumulate(&mut grads, kernel, Tensor::new(w.shape().to_vec(), gk)?);
                    }
                    if needs(input) {
                        let wg = kernel_to_gemm(w.data(), geo.c_out, geo.c_in, geo.k);
                        let gxp = conv_grad_input(g.data(), &wg, sh);
                        let gx = unpad_sequences(&gxp, geo.n, geo.len, geo.c_in, pad);
                        accumulate(&mut grads, input, Tensor::new(x.shape().to_vec(), gx)?);
                    }
                }
                Op::Cosine(a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    let (n, m, d) = (x.shape()[0], y.shape()[0], x.shape()[1]);
                    let s = node.value.data();
                    let nx = row_norms(x.data(), n, d);
                    let ny = row_norms(y.data(), m, d);
                    if needs(a) {
                        let mut ga = vec![0.0; n * d];
                        for i in (0..n).filter(|&i| nx[i] > 0.0) {
                            let mut gs = 0.0;
                            let row = &mut ga[i * d..(i + 1) * d];
                            for j in (0..m).filter(|&j| ny[j] > 0.0) {
                                let gij = g.data()[i * m + j];
                                gs += gij * s[i * m + j];
                                let yj = &y.data()[j * d..(j + 1) * d];
                                for (r, &yv) in row.iter_mut().zip(yj) {
                                    *r += gij * yv / ny[j];
                                }
                            }
                            let xi = &x.data()[i * d..(i + 1) * d];
                            for (r, &xv) in row.iter_mut().zip(xi) {
                                *r = (*r - gs * xv / nx[i]) / nx[i];
                            }
                        }
                        accumulate(&mut grads, a, Tensor::new(vec![n, d], ga)?);
                    }
                    if needs(b) {
                        let mut gb = vec![0.0; m * d];
                        for j in (0..m).filter(|&j| ny[j] > 0.0) {
                            let mut gs = 0.0;
                            let row = &mut gb[j * d..(j + 1) * d];
                            for i in (0..n).filter(|&i| nx[i] > 0.0) {
                                let gij = g.data()[i * m + j];
                                gs += gij * s[i * m + j];
                                let xi = &x.data()[i * d..(i + 1) * d];
                                for (r, &xv) in row.iter_mut().zip(xi) {
                                    *r += gij * xv / nx[i];
                                }
                            }
                            let yj = &y.data()[j * d..(j + 1) * d];
                            for (r, &yv) in row.iter_mut().zip(yj) {
                                *r = (*r - gs * yv / ny[j]) / ny[j];
                            }
                        }
                        accumulate(&mut grads, b, Tensor::new(vec![m, d], gb)?);
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Adjoints produced by [`Tape::backward`], retained for leaves.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sum a broadcast gradient back down to the trailing `shape`.
fn fold_leading(g: &Tensor, shape: &[usize]) -> Tensor {
    let period: usize = shape.iter().product();
    let mut out = vec![0.0; period];
    for chunk in g.data().chunks(period) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("fold shape")
}

fn reduce_axis(x: &Tensor, axis: usize, op: &'static str) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(op, format!("axis {axis} on shape {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let base = (o * len + l) * inner;
            for (d, v) in dst.iter_mut().zip(&x.data()[base..base + inner]) {
                *d += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn row_norms(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            data[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BatchMode {
    /// Right operand is a plain matrix: fold the left batch into rows.
    SharedRight,
    /// Left operand is a plain matrix applied to every right batch.
    SharedLeft,
    Paired,
}

struct MatMulPlan {
    mode: BatchMode,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must have rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (mode, batch_dims) = if bb.is_empty() {
            (BatchMode::SharedRight, ba)
        } else if ba.is_empty() {
            (BatchMode::SharedLeft, bb)
        } else if ba == bb {
            (BatchMode::Paired, ba)
        } else {
            return Err(Error::shape(
                "matmul",
                format!("batch dimensions differ: {sa:?} x {sb:?}"),
            ));
        };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            mode,
            batch: batch_dims.iter().product(),
            m,
            k,
            n,
            out_shape,
        })
    }

    fn a_stride(&self) -> usize {
        if self.mode == BatchMode::SharedLeft {
            0
        } else {
            self.m * self.k
        }
    }

    fn b_stride(&self) -> usize {
        if self.mode == BatchMode::SharedRight {
            0
        } else {
            self.k * self.n
        }
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.mode == BatchMode::SharedRight {
            let rows = self.batch * m;
            gemm(
                MatRef::row_major(a, rows, k),
                MatRef::row_major(b, k, n),
                0.0,
                out,
            );
            return;
        }
        for t in 0..self.batch {
            let ao = t * self.a_stride();
            let bo = t * self.b_stride();
            gemm(
                MatRef::row_major(&a[ao..ao + m * k], m, k),
                MatRef::row_major(&b[bo..bo + k * n], k, n),
                0.0,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
    }

    fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        g: &[f64],
        want_a: bool,
        want_b: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.mode == BatchMode::SharedRight {
            let rows = self.batch * m;
            let ga = want_a.then(|| {
                let mut ga = vec![0.0; rows * k];
                gemm(
                    MatRef::row_major(g, rows, n),
                    MatRef::row_major(b, k, n).t(),
                    0.0,
                    &mut ga,
                );
                ga
            });
            let gb = want_b.then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(
                    MatRef::row_major(a, rows, k).t(),
                    MatRef::row_major(g, rows, n),
                    0.0,
                    &mut gb,
                );
                gb
            });
            return (ga, gb);
        }
        let mut ga = want_a.then(|| vec![0.0; if self.a_stride() == 0 { m * k } else { a.len() }]);
        let mut gb = want_b.then(|| vec![0.0; if self.b_stride() == 0 { k * n } else { b.len() }]);
        for t in 0..self.batch {
            let ao = t * self.a_stride();
            let bo = t * self.b_stride();
            let gt = MatRef::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
            if let Some(ga) = ga.as_mut() {
                let beta = if self.a_stride() == 0 && t > 0 { 1.0 } else { 0.0 };
                gemm(
                    gt,
                    MatRef::row_major(&b[bo..bo + k * n], k, n).t(),
                    beta,
                    &mut ga[ao..ao + m * k],
                );
            }
            if let Some(gb) = gb.as_mut() {
                let beta = if self.b_stride() == 0 && t > 0 { 1.0 } else { 0.0 };
                gemm(
                    MatRef::row_major(&a[ao..ao + m * k], m, k).t(),
                    gt,
                    beta,
                    &mut gb[bo..bo + k * n],
                );
            }
        }
        (ga, gb)
    }
}

struct ConvGeometry {
    n: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    out_len: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("expected [n, len, c_in] input and [c_out, c_in, k] kernel, got {x:?} and {w:?}"),
            ));
        }
        if x[2] != w[1] {
            return Err(Error::shape(
                "conv1d",
                format!("input has {} channels, kernel expects {}", x[2], w[1]),
            ));
        }
        let padded = x[1] + 2 * pad;
        if w[2] == 0 || w[2] > padded {
            return Err(Error::KernelTooLong {
                kernel: w[2],
                length: padded,
            });
        }
        Ok(Self {
            n: x[0],
            len: x[1],
            c_in: x[2],
            c_out: w[0],
            k: w[2],
            out_len: padded - w[2] + 1,
        })
    }

    fn shape(&self, pad: usize) -> ConvShape {
        ConvShape {
            n: self.n,
            padded_len: self.len + 2 * pad,
            c_in: self.c_in,
            k: self.k,
            out_len: self.out_len,
            c_out: self.c_out,
        }
    }
}
