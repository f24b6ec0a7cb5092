use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Spatial padding for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output keeps the input size (stride 1). For even
    /// kernels the extra cell goes on the trailing side.
    Same,
    Valid,
}

impl Padding {
    /// Leading and trailing pad for a kernel extent.
    pub(crate) fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let total = kernel - 1;
                (total / 2, total - total / 2)
            }
            Padding::Valid => (0, 0),
        }
    }
}

/// Window placement for [`avg_pool2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Non-overlapping windows; a trailing remainder smaller than the
    /// window is dropped.
    Truncate,
    /// Stride 1 with the output the size of the input. Windows running past
    /// the trailing border average only the cells that exist.
    Same,
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, p) = (a.shape[0], a.shape[1]);
    let (p2, n) = (b.shape[0], b.shape[1]);
    if p != p2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions disagree for {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a.data[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_t: usize,
    pad_f: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<ConvGeom> {
    input.expect_rank(3, "conv2d input")?;
    kernels.expect_rank(4, "conv2d kernels")?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c_in {
        return Err(Error::dim(format!(
            "conv2d: input {:?} has {c_in} channels, kernels {:?} expect {kc}",
            input.shape, kernels.shape
        )));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::dim("conv2d: empty kernel"));
    }
    let (pt0, pt1) = padding.amounts(kh);
    let (pf0, pf1) = padding.amounts(kw);
    let (ph, pw) = (h + pt0 + pt1, w + pf0 + pf1);
    if kh > ph || kw > pw {
        return Err(Error::dim(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
        pad_t: pt0,
        pad_f: pf0,
        out_h: ph - kh + 1,
        out_w: pw - kw + 1,
    })
}

/// Row `(ci, dt, df)` of the unfolded input holds, for every output
/// position, the input cell under kernel tap `(dt, df)` of channel `ci`
/// (zero where the tap falls into padding).
fn im2col(input: &Tensor, g: &ConvGeom) -> Vec<f64> {
    let positions = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * positions];
    for ci in 0..g.c_in {
        let x = &input.data[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dt in 0..g.kh {
            for df in 0..g.kw {
                let r = (ci * g.kh + dt) * g.kw + df;
                let row = &mut cols[r * positions..(r + 1) * positions];
                let (lo, hi) = tap_columns(g, df);
                for t in 0..g.out_h {
                    let Some(it) = tap_row(g, t, dt) else {
                        continue;
                    };
                    let src = &x[it * g.w..(it + 1) * g.w];
                    for f in lo..hi {
                        row[t * g.out_w + f] = src[f + df - g.pad_f];
                    }
                }
            }
        }
    }
    cols
}

/// Adds unfolded gradients back onto the input cells they came from.
fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let positions = g.out_h * g.out_w;
    for ci in 0..g.c_in {
        let x = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dt in 0..g.kh {
            for df in 0..g.kw {
                let r = (ci * g.kh + dt) * g.kw + df;
                let row = &cols[r * positions..(r + 1) * positions];
                let (lo, hi) = tap_columns(g, df);
                for t in 0..g.out_h {
                    let Some(it) = tap_row(g, t, dt) else {
                        continue;
                    };
                    let dst = &mut x[it * g.w..(it + 1) * g.w];
                    for f in lo..hi {
                        dst[f + df - g.pad_f] += row[t * g.out_w + f];
                    }
                }
            }
        }
    }
}

fn tap_row(g: &ConvGeom, t: usize, dt: usize) -> Option<usize> {
    let it = (t + dt).checked_sub(g.pad_t)?;
    (it < g.h).then_some(it)
}

/// Output columns whose tap `df` lands inside the input.
fn tap_columns(g: &ConvGeom, df: usize) -> (usize, usize) {
    let lo = g.pad_f.saturating_sub(df);
    let hi = (g.w + g.pad_f).saturating_sub(df).min(g.out_w);
    (lo, hi.max(lo))
}

/// 2-D cross-correlation of a `C_in x T x F` input with
/// `C_out x C_in x kh x kw` kernels, stride 1. Kernels are not flipped.
pub fn conv2d(input: &Tensor, kernels: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, padding)?;
    let positions = g.out_h * g.out_w;
    let taps = g.c_in * g.kh * g.kw;
    let cols = im2col(input, &g);
    let mut out = vec![0.0; g.c_out * positions];
    for co in 0..g.c_out {
        let orow = &mut out[co * positions..(co + 1) * positions];
        for r in 0..taps {
            let kv = kernels.data[co * taps + r];
            if kv == 0.0 {
                continue;
            }
            for (o, &c) in orow
                .iter_mut()
                .zip(&cols[r * positions..(r + 1) * positions])
            {
                *o += kv * c;
            }
        }
    }
    Tensor::new(vec![g.c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    padding: Padding,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(input, kernels, padding)?;
    let positions = g.out_h * g.out_w;
    let taps = g.c_in * g.kh * g.kw;
    let cols = im2col(input, &g);
    let mut gk = vec![0.0; kernels.len()];
    let mut gcols = vec![0.0; cols.len()];
    for co in 0..g.c_out {
        let grow = &grad_out.data[co * positions..(co + 1) * positions];
        for r in 0..taps {
            let crow = &cols[r * positions..(r + 1) * positions];
            gk[co * taps + r] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
            let kv = kernels.data[co * taps + r];
            if kv == 0.0 {
                continue;
            }
            for (d, &gv) in gcols[r * positions..(r + 1) * positions]
                .iter_mut()
                .zip(grow)
            {
                *d += kv * gv;
            }
        }
    }
    let mut gx = vec![0.0; input.len()];
    col2im(&gcols, &g, &mut gx);
    Ok((
        Tensor::new(input.shape.clone(), gx)?,
        Tensor::new(kernels.shape.clone(), gk)?,
    ))
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Softmax along `axis`, max-shifted for stability.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len)
                .map(|a| x.data[idx(a)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (x.data[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&y.shape, axis)?;
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: f64 = (0..len)
                .map(|a| y.data[idx(a)] * grad_out.data[idx(a)])
                .sum();
            for a in 0..len {
                gx[idx(a)] = y.data[idx(a)] * (grad_out.data[idx(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape.clone(), gx)
}

/// Visits every pooling window: `f(output index, input indices)`.
fn pool_windows(
    shape: &[usize],
    window: (usize, usize),
    mode: PoolMode,
    mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>),
) -> Result<Vec<usize>> {
    if shape.len() != 3 {
        return Err(Error::dim(format!(
            "avg_pool2d expects a rank-3 tensor, got shape {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (wh, ww) = window;
    if wh == 0 || ww == 0 {
        return Err(Error::dim("avg_pool2d: empty window"));
    }
    let (oh, ow, sh, sw) = match mode {
        PoolMode::Truncate => (h / wh, w / ww, wh, ww),
        PoolMode::Same => (h, w, 1, 1),
    };
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!(
            "avg_pool2d: window {wh}x{ww} larger than input {h}x{w}"
        )));
    }
    for ch in 0..c {
        for t in 0..oh {
            for fr in 0..ow {
                let t0 = t * sh;
                let f0 = fr * sw;
                let t1 = (t0 + wh).min(h);
                let f1 = (f0 + ww).min(w);
                let mut cells =
                    (t0..t1).flat_map(move |a| (f0..f1).map(move |b| (ch * h + a) * w + b));
                f((ch * oh + t) * ow + fr, &mut cells);
            }
        }
    }
    Ok(vec![c, oh, ow])
}

/// Average pooling over the two trailing axes of a `C x T x F` tensor.
pub fn avg_pool2d(x: &Tensor, window: (usize, usize), mode: PoolMode) -> Result<Tensor> {
    let mut out = Vec::new();
    let shape = pool_windows(&x.shape, window, mode, |o, cells| {
        let (mut s, mut n) = (0.0, 0usize);
        for i in cells {
            s += x.data[i];
            n += 1;
        }
        debug_assert_eq!(o, out.len());
        out.push(s / n as f64);
    })?;
    Tensor::new(shape, out)
}

pub(crate) fn avg_pool2d_backward(
    input_shape: &[usize],
    window: (usize, usize),
    mode: PoolMode,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let mut gx = vec![0.0; input_shape.iter().product()];
    pool_windows(input_shape, window, mode, |o, cells| {
        let idx: Vec<usize> = cells.collect();
        let share = grad_out.data[o] / idx.len() as f64;
        for i in idx {
            gx[i] += share;
        }
    })?;
    Tensor::new(input_shape.to_vec(), gx)
}
