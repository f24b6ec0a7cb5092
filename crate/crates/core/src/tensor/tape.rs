use super::ops::{self, Padding, PoolMode};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d(Var, Var, Padding),
    /// Adds a bias vector along `axis` (broadcast over every other axis).
    AddBias(Var, Var, usize),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var, usize),
    AvgPool(Var, (usize, usize), PoolMode),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    /// Index of the selected element for every output position.
    MaxAxis(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    LayerNorm(Var, Vec<f64>),
    SumAll(Var),
    Bce(Var, Tensor, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass for reverse-mode differentiation.
///
/// A tape is single-owner: build it, evaluate the loss, call
/// [`Tape::backward`] once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn out_shape_without(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                std::mem::discriminant(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose(self.value(a))?;
        self.push(y, Op::Transpose(a))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(k), padding)?;
        self.push(y, Op::Conv2d(x, k, padding))
    }

    /// `x + b` with `b` a vector matching `x`'s extent along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        if bv.len() != len {
            return Err(Error::dim(format!(
                "bias of length {} cannot broadcast over axis {axis} of {:?}",
                bv.len(),
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for (a, &bias) in bv.data().iter().enumerate() {
                let start = (o * len + a) * inner;
                for v in &mut out[start..start + inner] {
                    *v += bias;
                }
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(y, Op::AddBias(x, b, axis))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        av.expect_same_shape(bv, what)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.value(a).map(|v| v * c);
        self.push(y, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(a));
        self.push(y, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = ops::relu(self.value(a));
        self.push(y, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(f64::exp);
        self.push(y, Op::Exp(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(a), axis)?;
        self.push(y, Op::Softmax(a, axis))
    }

    pub fn avg_pool2d(&mut self, a: Var, window: (usize, usize), mode: PoolMode) -> Result<Var> {
        let y = ops::avg_pool2d(self.value(a), window, mode)?;
        self.push(y, Op::AvgPool(a, window, mode))
    }

    fn reduce_axis(&self, a: Var, axis: usize, scale: bool) -> Result<Tensor> {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        Tensor::new(out_shape_without(x.shape(), axis), out)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = self.reduce_axis(a, axis, false)?;
        self.push(y, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = self.reduce_axis(a, axis, true)?;
        self.push(y, Op::MeanAxis(a, axis))
    }

    /// Maximum over `axis` (removed from the shape). Ties pick the first
    /// index, which then receives the whole gradient.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let src = (o * len + k) * inner + i;
                    let dst = o * inner + i;
                    if x.data()[src] > out[dst] {
                        out[dst] = x.data()[src];
                        arg[dst] = src;
                    }
                }
            }
        }
        let y = Tensor::new(out_shape_without(x.shape(), axis), out)?;
        self.push(y, Op::MaxAxis(a, arg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        axis_split(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let y = Tensor::new(shape, out)?;
        self.push(y, Op::Concat(parts.to_vec(), axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        self.push(y, Op::Reshape(a))
    }

    /// Normalizes each row of a 2-D tensor to zero mean and unit variance
    /// (no learned gain or shift).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        x.expect_rank(2, "layer_norm")?;
        let n = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.shape()[0]);
        for row in x.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + EPS).sqrt();
            inv_std.push(s);
            out.extend(row.iter().map(|v| (v - mean) * s));
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        self.push(y, Op::LayerNorm(a, inv_std))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::SumAll(a))
    }

    /// Summed binary cross-entropy of probabilities `pred` against
    /// constant `target`, with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target, "bce")?;
        let loss = bce_value(p.data(), target.data(), eps);
        self.push(Tensor::scalar(loss), Op::Bce(pred, target.clone(), eps))
    }

    /// Reverse pass from the scalar `loss`. Each recorded operation is
    /// visited once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let y = &node.value;
            let mut acc = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(*a, ops::matmul(&g, &ops::transpose(bv)?)?);
                    acc(*b, ops::matmul(&ops::transpose(av)?, &g)?);
                }
                Op::Transpose(a) => acc(*a, ops::transpose(&g)?),
                Op::Conv2d(x, k, pad) => {
                    let (gx, gk) = ops::conv2d_backward(self.value(*x), self.value(*k), *pad, &g)?;
                    acc(*x, gx);
                    acc(*k, gk);
                }
                Op::AddBias(x, b, axis) => {
                    let (outer, len, inner) = axis_split(g.shape(), *axis)?;
                    let mut gb = vec![0.0; len];
                    for o in 0..outer {
                        for (a, slot) in gb.iter_mut().enumerate() {
                            let start = (o * len + a) * inner;
                            *slot += g.data()[start..start + inner].iter().sum::<f64>();
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    acc(*b, Tensor::new(bshape, gb)?);
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(*a, zip_map(&g, bv, |g, b| g * b));
                    acc(*b, zip_map(&g, av, |g, a| g * a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(*a, zip_map(&g, bv, |g, b| g / b));
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = zip_map(&g, y, |g, y| g * y);
                    acc(*b, zip_map(&gy, bv, |gy, b| -gy / b));
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, y, |g, s| g * s * (1.0 - s))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(*a, zip_map(&g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Exp(a) => acc(*a, zip_map(&g, y, |g, e| g * e)),
                Op::Softmax(a, axis) => acc(*a, ops::softmax_backward(y, &g, *axis)?),
                Op::AvgPool(a, window, mode) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(*a, ops::avg_pool2d_backward(&shape, *window, *mode, &g)?);
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let shape = self.value(*a).shape().to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis)?;
                    let s = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let dst = &mut gx[(o * len + k) * inner..(o * len + k + 1) * inner];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d = v * s;
                            }
                        }
                    }
                    acc(*a, Tensor::new(shape, gx)?);
                }
                Op::MaxAxis(a, arg) => {
                    let shape = self.value(*a).shape().to_vec();
                    let mut gx = Tensor::zeros(&shape);
                    for (&src, &gv) in arg.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    acc(*a, gx);
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = axis_split(g.shape(), *axis)?;
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let len = shape[*axis];
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        offset += len;
                        acc(p, Tensor::new(shape, gp)?);
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(*a, g.reshape(&shape)?);
                }
                Op::LayerNorm(a, inv_std) => {
                    let n = y.shape()[1];
                    let mut gx = Vec::with_capacity(y.len());
                    for ((yr, gr), s) in y.data().chunks(n).zip(g.data().chunks(n)).zip(inv_std) {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        gx.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(g, y)| s * (g - mean_g - y * mean_gy)),
                        );
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(*a, Tensor::full(&shape, g.data()[0]));
                }
                Op::Bce(pred, target, eps) => {
                    let p = self.value(*pred);
                    let up = g.data()[0];
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&o, &t)| {
                            if o < *eps || o > 1.0 - eps {
                                0.0
                            } else {
                                up * ((1.0 - t) / (1.0 - o) - t / o)
                            }
                        })
                        .collect();
                    acc(*pred, Tensor::new(p.shape().to_vec(), data)?);
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Summed binary cross-entropy with clamped predictions.
pub(crate) fn bce_value(pred: &[f64], target: &[f64], eps: f64) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&o, &t)| {
            let o = o.clamp(eps, 1.0 - eps);
            -(t * o.ln() + (1.0 - t) * (1.0 - o).ln())
        })
        .sum()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}
