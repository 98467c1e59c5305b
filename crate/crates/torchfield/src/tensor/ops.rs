//! Forward kernels and local gradient rules for tape operations.

use ndarray::{Array2, ArrayViewD, Axis, IxDyn, Slice, Zip};

use super::{Arr, Node};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Relu,
    Softplus,
    Sigmoid,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum ReduceKind {
    Sum,
    Mean,
    Max,
}

pub(super) enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Reduce(ReduceKind, usize, Option<usize>),
    CumsumExclusive(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    Conv1d {
        features: usize,
        kernel: usize,
        scale: usize,
        seg_len: usize,
        /// Per-tap products `X . W_k`, laid out `N x (K*C_out)`.
        cache: Array2<f64>,
    },
    /// Per-channel batch normalization with affine output, fused into one op:
    /// `y = (x - mean) * inv_std * scale + shift` with mean/var over axis 0.
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

/// Forward pass of fused batch norm. Returns `(y, mean, var, inv_std)`; the
/// batch statistics are per channel (axis-0 moments).
pub(super) fn batch_norm_forward(
    x: &Arr,
    scale: &Arr,
    shift: &Arr,
    eps: f64,
) -> Result<(Arr, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let x2 = as2(x)?;
    let (n, c) = x2.dim();
    if n == 0 {
        return Err(Error::Shape("batch_norm needs at least one row".into()));
    }
    if scale.len() != c || shift.len() != c {
        return Err(Error::Shape(format!(
            "batch_norm scale/shift must have {c} channels, got {}/{}",
            scale.len(),
            shift.len()
        )));
    }
    let xs = x2.as_slice().ok_or_else(|| {
        Error::Shape("batch_norm input must be contiguous row-major".into())
    })?;
    let (ss, hs) = (
        scale.as_slice().ok_or_else(|| Error::Shape("scale must be contiguous".into()))?,
        shift.as_slice().ok_or_else(|| Error::Shape("shift must be contiguous".into()))?,
    );
    let mut mean = vec![0.0f64; c];
    for row in xs.chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; c];
    for row in xs.chunks_exact(c) {
        var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (&v, &m))| {
            let d = v - m;
            *s += d * d;
        });
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0f64; n * c];
    for (yrow, row) in y.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
        for j in 0..c {
            yrow[j] = (row[j] - mean[j]) * inv_std[j] * ss[j] + hs[j];
        }
    }
    let y = Arr::from_shape_vec(IxDyn(&[n, c]), y).unwrap();
    Ok((y, mean, var, inv_std))
}

/// Gradients of fused batch norm. `want` selects `(x, scale, shift)`.
fn batch_norm_vjp(
    g_out: &Arr,
    x: &Arr,
    scale: &Arr,
    shift: &Arr,
    mean: &[f64],
    inv_std: &[f64],
    want: (bool, bool, bool),
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let x2 = as2(x).unwrap();
    let (n, c) = x2.dim();
    let xs = x2.as_slice().unwrap();
    let gs = as2(g_out).unwrap();
    let gs = gs.as_slice().unwrap();
    let ss = scale.as_slice().unwrap();
    let (want_x, want_s, want_h) = want;

    // Channel sums of g and of g * xhat, shared by every output.
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (grow, row) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
        for j in 0..c {
            let xhat = (row[j] - mean[j]) * inv_std[j];
            sum_g[j] += grow[j];
            sum_gx[j] += grow[j] * xhat;
        }
    }
    let d_x = if want_x {
        let mut dx = vec![0.0f64; n * c];
        let inv_n = 1.0 / n as f64;
        for ((dxrow, grow), row) in dx
            .chunks_exact_mut(c)
            .zip(gs.chunks_exact(c))
            .zip(xs.chunks_exact(c))
        {
            for j in 0..c {
                let xhat = (row[j] - mean[j]) * inv_std[j];
                dxrow[j] = ss[j]
                    * inv_std[j]
                    * (grow[j] - sum_g[j] * inv_n - xhat * sum_gx[j] * inv_n);
            }
        }
        Some(Arr::from_shape_vec(IxDyn(&[n, c]), dx).unwrap())
    } else {
        None
    };
    let d_scale = if want_s {
        Some(Arr::from_shape_vec(scale.raw_dim(), sum_gx).unwrap())
    } else {
        None
    };
    let d_shift = if want_h {
        Some(Arr::from_shape_vec(shift.raw_dim(), sum_g).unwrap())
    } else {
        None
    };
    (d_x, d_scale, d_shift)
}

pub(super) fn unary_forward(kind: UnaryKind, x: &Arr) -> Arr {
    match kind {
        UnaryKind::Neg => x.mapv(|v| -v),
        UnaryKind::Exp => x.mapv(f64::exp),
        UnaryKind::Log => x.mapv(f64::ln),
        UnaryKind::Sin => x.mapv(f64::sin),
        UnaryKind::Cos => x.mapv(f64::cos),
        UnaryKind::Relu => x.mapv(|v| v.max(0.0)),
        UnaryKind::Softplus => x.mapv(softplus),
        UnaryKind::Sigmoid => x.mapv(sigmoid),
        UnaryKind::Sqrt => x.mapv(f64::sqrt),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    // ln(1 + e^v), stable for large |v|
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Trailing-dimension broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[n - 1 - i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Broadcast(format!(
                "shapes {:?} and {:?} do not broadcast",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Sum over axis 0 with one pass over the flat buffer; falls back to ndarray
/// for non-contiguous input. Row-by-row `sum_axis` dominates profiles
/// otherwise (a contiguity check and generic zip per row).
fn sum_axis0(x: &Arr) -> Arr {
    if x.ndim() >= 1 {
        if let Some(xs) = x.as_slice() {
            let n = x.len_of(Axis(0));
            let c = if n == 0 { 0 } else { xs.len() / n };
            if c > 0 {
                let mut acc = vec![0.0f64; c];
                for row in xs.chunks_exact(c) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                return Arr::from_shape_vec(IxDyn(&x.shape()[1..]), acc).unwrap();
            }
        }
    }
    x.sum_axis(Axis(0))
}

/// Sum `g` down to `target` shape, undoing a broadcast.
fn unbroadcast(mut g: Arr, target: &[usize]) -> Arr {
    while g.ndim() > target.len() {
        g = sum_axis0(&g);
    }
    for (ax, (&gd, &td)) in g.shape().to_vec().iter().zip(target).enumerate() {
        if gd != td {
            debug_assert_eq!(td, 1);
            g = if ax == 0 {
                sum_axis0(&g).insert_axis(Axis(0))
            } else {
                g.sum_axis(Axis(ax)).insert_axis(Axis(ax))
            };
        }
    }
    g
}

/// `out[i] = out[i] (op) b[i % b.len()]`, monomorphized per op so the loops
/// vectorize.
fn apply_op_cycled(kind: BinaryKind, out: &mut [f64], b: &[f64]) {
    macro_rules! run {
        ($op:tt) => {
            if b.len() == 1 {
                let y = b[0];
                out.iter_mut().for_each(|o| *o = *o $op y);
            } else {
                for chunk in out.chunks_exact_mut(b.len()) {
                    chunk.iter_mut().zip(b).for_each(|(o, &y)| *o = *o $op y);
                }
            }
        };
    }
    match kind {
        BinaryKind::Add => run!(+),
        BinaryKind::Sub => run!(-),
        BinaryKind::Mul => run!(*),
        BinaryKind::Div => run!(/),
    }
}

/// True when broadcasting `b` against `a` tiles `b` whole over `a`'s trailing
/// dimensions, so the flat buffers line up as repeated contiguous chunks.
fn is_trailing_chunk(a: &[usize], b: &[usize]) -> bool {
    let b = {
        let lead = b.iter().take_while(|&&d| d == 1).count();
        &b[lead..]
    };
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

pub(super) fn binary_forward(kind: BinaryKind, a: &Arr, b: &Arr) -> Result<Arr> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if shape == a.shape() && is_trailing_chunk(a.shape(), b.shape()) {
        if a.as_slice().is_some() {
            if let Some(bs) = b.as_slice() {
                let mut out = a.to_owned();
                apply_op_cycled(kind, out.as_slice_mut().unwrap(), bs);
                return Ok(out);
            }
        }
    }
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = Arr::zeros(IxDyn(&shape));
    let f: fn(f64, f64) -> f64 = match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
        BinaryKind::Div => |x, y| x / y,
    };
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

fn as2(x: &Arr) -> Result<ndarray::ArrayView2<'_, f64>> {
    x.view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Shape(format!("expected rank-2 tensor, got {:?}", x.shape())))
}

pub(super) fn matmul_forward(a: &Arr, b: &Arr) -> Result<Arr> {
    let a2 = as2(a)?;
    let b2 = as2(b)?;
    if a2.ncols() != b2.nrows() {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a2.dot(&b2).into_dyn())
}

pub(super) fn reduce_forward(kind: ReduceKind, x: &Arr, axis: Option<usize>) -> Result<Arr> {
    match axis {
        None => {
            let v = match kind {
                ReduceKind::Sum => x.sum(),
                ReduceKind::Mean => x.sum() / x.len() as f64,
                ReduceKind::Max => first_max(x.iter().copied()).1,
            };
            Ok(super::scalar(v))
        }
        Some(ax) => {
            if ax >= x.ndim() {
                return Err(Error::Shape(format!(
                    "axis {} out of range for rank {}",
                    ax,
                    x.ndim()
                )));
            }
            Ok(match kind {
                ReduceKind::Sum if ax == 0 => sum_axis0(x),
                ReduceKind::Sum => x.sum_axis(Axis(ax)),
                ReduceKind::Mean if ax == 0 => sum_axis0(x) / x.len_of(Axis(0)) as f64,
                ReduceKind::Mean => x.sum_axis(Axis(ax)) / x.len_of(Axis(ax)) as f64,
                ReduceKind::Max => x.map_axis(Axis(ax), |lane| first_max(lane.iter().copied()).1),
            })
        }
    }
}

/// Index and value of the first maximal element (lowest index wins ties).
fn first_max(iter: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in iter.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(super) fn cumsum_exclusive_forward(x: &Arr) -> Arr {
    let n = x.len_of(Axis(0));
    if let Some(xs) = x.as_slice() {
        let c = if n == 0 { 0 } else { xs.len() / n };
        if c > 0 {
            let mut out = vec![0.0f64; xs.len()];
            for i in 1..n {
                let (done, rest) = out.split_at_mut(i * c);
                let prev = &done[(i - 1) * c..];
                let xrow = &xs[(i - 1) * c..i * c];
                rest[..c]
                    .iter_mut()
                    .zip(prev.iter().zip(xrow))
                    .for_each(|(o, (&p, &v))| *o = p + v);
            }
            return Arr::from_shape_vec(x.raw_dim(), out).unwrap();
        }
    }
    let mut out = Arr::zeros(x.raw_dim());
    let mut running = x.index_axis(Axis(0), 0).to_owned();
    running.fill(0.0);
    for i in 0..n {
        out.index_axis_mut(Axis(0), i).assign(&running);
        running += &x.index_axis(Axis(0), i);
    }
    out
}

pub(super) fn narrow_forward(x: &Arr, axis: usize, start: usize, len: usize) -> Result<Arr> {
    if axis >= x.ndim() || start + len > x.len_of(Axis(axis)) {
        return Err(Error::Shape(format!(
            "narrow {}..{} on axis {} out of range for {:?}",
            start,
            start + len,
            axis,
            x.shape()
        )));
    }
    Ok(x
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .to_owned())
}

pub(super) fn concat_forward(parts: &[&Arr], axis: usize) -> Result<Arr> {
    let views: Vec<ArrayViewD<'_, f64>> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(axis), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Clamp-to-edge index for tap `k` at sample `n` inside its segment.
#[inline]
fn tap_index(n: usize, k: usize, half: usize, seg_len: usize) -> usize {
    let seg0 = (n / seg_len) * seg_len;
    let idx = n as isize + k as isize - half as isize;
    idx.clamp(seg0 as isize, (seg0 + seg_len - 1) as isize) as usize
}

/// Flatten `K x C_in x C_out` filters into a `C_in x (K*C_out)` matrix so all
/// taps share one matrix product.
fn combined_filters(kernel: &Arr) -> (usize, usize, usize, Array2<f64>) {
    let (kk, cin, cout) = (
        kernel.len_of(Axis(0)),
        kernel.len_of(Axis(1)),
        kernel.len_of(Axis(2)),
    );
    let mut w2 = Array2::zeros((cin, kk * cout));
    for k in 0..kk {
        for i in 0..cin {
            for j in 0..cout {
                w2[[i, k * cout + j]] = kernel[[k, i, j]];
            }
        }
    }
    (kk, cin, cout, w2)
}

pub(super) fn conv1d_forward(
    x: &Arr,
    kernel: &Arr,
    scale: &Arr,
    seg_len: usize,
) -> Result<(Arr, Array2<f64>)> {
    let x2 = as2(x)?;
    if kernel.ndim() != 3 {
        return Err(Error::Shape(format!(
            "conv1d kernel must be K x C_in x C_out, got {:?}",
            kernel.shape()
        )));
    }
    let (kk, cin, cout, w2) = combined_filters(kernel);
    if kk % 2 == 0 {
        return Err(Error::Config(format!("conv1d kernel size must be odd, got {kk}")));
    }
    let n = x2.nrows();
    if x2.ncols() != cin {
        return Err(Error::Shape(format!(
            "conv1d features have {} channels, kernel expects {}",
            x2.ncols(),
            cin
        )));
    }
    let s2 = as2(scale)?;
    if s2.nrows() != n || s2.ncols() != kk {
        return Err(Error::Shape(format!(
            "per-tap scale must be {} x {}, got {:?}",
            n,
            kk,
            scale.shape()
        )));
    }
    if s2.iter().any(|v| !v.is_finite()) {
        return Err(Error::Value("per-tap scale contains non-finite entries".into()));
    }
    if seg_len == 0 || n % seg_len != 0 {
        return Err(Error::Shape(format!(
            "segment length {seg_len} does not divide sequence length {n}"
        )));
    }
    let half = kk / 2;
    let g = x2.dot(&w2); // N x (K*C_out)
    let gs = g.as_slice().unwrap();
    let mut y = Array2::<f64>::zeros((n, cout));
    let ys = y.as_slice_mut().unwrap();
    let kcout = kk * cout;
    for i in 0..n {
        let yrow = &mut ys[i * cout..(i + 1) * cout];
        for k in 0..kk {
            let m = tap_index(i, k, half, seg_len);
            let w = s2[[i, k]];
            let grow = &gs[m * kcout + k * cout..m * kcout + (k + 1) * cout];
            for j in 0..cout {
                yrow[j] += w * grow[j];
            }
        }
    }
    Ok((y.into_dyn(), g))
}

fn conv1d_vjp(
    g_out: &Arr,
    x: &Arr,
    kernel: &Arr,
    scale: &Arr,
    seg_len: usize,
    cache: &Array2<f64>,
    want: (bool, bool, bool),
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let x2 = as2(x).unwrap();
    let s2 = as2(scale).unwrap();
    let dy = as2(g_out).unwrap();
    let (kk, cin, cout, w2) = combined_filters(kernel);
    let half = kk / 2;
    let n = x2.nrows();
    let kcout = kk * cout;
    let (want_x, want_k, want_s) = want;

    let mut d_scale = if want_s {
        Some(Array2::<f64>::zeros((n, kk)))
    } else {
        None
    };
    // H[m, k-block] accumulates scale-weighted output grads routed to row m.
    let mut h = Array2::<f64>::zeros((n, kcout));
    {
        let hs = h.as_slice_mut().unwrap();
        let gs = cache.as_slice().unwrap();
        for i in 0..n {
            let dyrow = dy.row(i);
            let dyrow = dyrow.as_slice().unwrap();
            for k in 0..kk {
                let m = tap_index(i, k, half, seg_len);
                if let Some(ds) = d_scale.as_mut() {
                    let grow = &gs[m * kcout + k * cout..m * kcout + (k + 1) * cout];
                    let mut acc = 0.0;
                    for j in 0..cout {
                        acc += dyrow[j] * grow[j];
                    }
                    ds[[i, k]] = acc;
                }
                let w = s2[[i, k]];
                let hrow = &mut hs[m * kcout + k * cout..m * kcout + (k + 1) * cout];
                for j in 0..cout {
                    hrow[j] += w * dyrow[j];
                }
            }
        }
    }
    let d_kernel = if want_k {
        let dw2 = x2.t().dot(&h); // C_in x (K*C_out)
        let mut dk = Arr::zeros(IxDyn(&[kk, cin, cout]));
        for k in 0..kk {
            for i in 0..cin {
                for j in 0..cout {
                    dk[[k, i, j]] = dw2[[i, k * cout + j]];
                }
            }
        }
        Some(dk)
    } else {
        None
    };
    let d_x = if want_x {
        Some(h.dot(&w2.t()).into_dyn())
    } else {
        None
    };
    (d_x, d_kernel, d_scale.map(|d| d.into_dyn()))
}

/// Local gradient rule dispatch: returns `(input id, contribution)` pairs for
/// inputs that participate in gradient flow.
pub(super) fn vjp(op: &Op, g: &Arr, out_value: &Arr, nodes: &[Node]) -> Vec<(usize, Arr)> {
    let needs = |i: usize| nodes[i].needs_grad;
    let value = |i: usize| -> &Arr { &nodes[i].value };
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            if needs(*a) {
                let x = value(*a);
                let dx = match kind {
                    UnaryKind::Neg => g.mapv(|v| -v),
                    UnaryKind::Exp => g * out_value,
                    UnaryKind::Log => g / x,
                    UnaryKind::Sin => {
                        let mut d = x.mapv(f64::cos);
                        d *= g;
                        d
                    }
                    UnaryKind::Cos => {
                        let mut d = x.mapv(|v| -v.sin());
                        d *= g;
                        d
                    }
                    UnaryKind::Relu => {
                        let mut d = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        d *= g;
                        d
                    }
                    UnaryKind::Softplus => {
                        let mut d = x.mapv(sigmoid);
                        d *= g;
                        d
                    }
                    UnaryKind::Sigmoid => {
                        let mut d = out_value.mapv(|y| y * (1.0 - y));
                        d *= g;
                        d
                    }
                    UnaryKind::Sqrt => {
                        let mut d = out_value.mapv(|y| 0.5 / y);
                        d *= g;
                        d
                    }
                };
                out.push((*a, dx));
            }
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (value(*a), value(*b));
            match kind {
                BinaryKind::Add => {
                    if needs(*a) {
                        out.push((*a, unbroadcast(g.clone(), av.shape())));
                    }
                    if needs(*b) {
                        out.push((*b, unbroadcast(g.clone(), bv.shape())));
                    }
                }
                BinaryKind::Sub => {
                    if needs(*a) {
                        out.push((*a, unbroadcast(g.clone(), av.shape())));
                    }
                    if needs(*b) {
                        out.push((*b, unbroadcast(g.mapv(|v| -v), bv.shape())));
                    }
                }
                BinaryKind::Mul => {
                    if needs(*a) {
                        let d = binary_forward(BinaryKind::Mul, g, bv).unwrap();
                        out.push((*a, unbroadcast(d, av.shape())));
                    }
                    if needs(*b) {
                        let d = binary_forward(BinaryKind::Mul, g, av).unwrap();
                        out.push((*b, unbroadcast(d, bv.shape())));
                    }
                }
                BinaryKind::Div => {
                    if needs(*a) {
                        let d = binary_forward(BinaryKind::Div, g, bv).unwrap();
                        out.push((*a, unbroadcast(d, av.shape())));
                    }
                    if needs(*b) {
                        // d/db (a/b) = -a/b^2 = -out/b
                        let num = binary_forward(BinaryKind::Mul, g, out_value).unwrap();
                        let d = binary_forward(BinaryKind::Div, &num, bv).unwrap();
                        out.push((*b, unbroadcast(d.mapv(|v| -v), bv.shape())));
                    }
                }
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
        }
        Op::MulScalar(a, s) => {
            if needs(*a) {
                out.push((*a, g.mapv(|v| v * s)));
            }
        }
        Op::Matmul(a, b) => {
            let g2 = as2(g).unwrap();
            if needs(*a) {
                let b2 = as2(value(*b)).unwrap();
                out.push((*a, g2.dot(&b2.t()).into_dyn()));
            }
            if needs(*b) {
                let a2 = as2(value(*a)).unwrap();
                out.push((*b, a2.t().dot(&g2).into_dyn()));
            }
        }
        Op::Reduce(kind, a, axis) => {
            if needs(*a) {
                let x = value(*a);
                let dx = match (kind, axis) {
                    (ReduceKind::Sum, None) => Arr::from_elem(x.raw_dim(), g[[0]]),
                    (ReduceKind::Mean, None) => {
                        Arr::from_elem(x.raw_dim(), g[[0]] / x.len() as f64)
                    }
                    (ReduceKind::Max, None) => {
                        let mut dx = Arr::zeros(x.raw_dim());
                        let (i, _) = first_max(x.iter().copied());
                        dx.as_slice_mut().unwrap()[i] = g[[0]];
                        dx
                    }
                    (ReduceKind::Sum, Some(ax)) => {
                        let gb = g.clone().insert_axis(Axis(*ax));
                        gb.broadcast(x.raw_dim()).unwrap().to_owned()
                    }
                    (ReduceKind::Mean, Some(ax)) => {
                        let gb = g
                            .mapv(|v| v / x.len_of(Axis(*ax)) as f64)
                            .insert_axis(Axis(*ax));
                        gb.broadcast(x.raw_dim()).unwrap().to_owned()
                    }
                    (ReduceKind::Max, Some(ax)) => {
                        let mut dx = Arr::zeros(x.raw_dim());
                        Zip::from(dx.lanes_mut(Axis(*ax)))
                            .and(x.lanes(Axis(*ax)))
                            .and(g)
                            .for_each(|mut dl, xl, &gv| {
                                let (i, _) = first_max(xl.iter().copied());
                                dl[i] = gv;
                            });
                        dx
                    }
                };
                out.push((*a, dx));
            }
        }
        Op::CumsumExclusive(a) => {
            if needs(*a) {
                let mut dx = Arr::zeros(g.raw_dim());
                let mut running = g.index_axis(Axis(0), 0).to_owned();
                running.fill(0.0);
                for i in (0..g.len_of(Axis(0))).rev() {
                    dx.index_axis_mut(Axis(0), i).assign(&running);
                    running += &g.index_axis(Axis(0), i);
                }
                out.push((*a, dx));
            }
        }
        Op::Concat { parts, axis } => {
            let mut start = 0usize;
            for &p in parts {
                let len = value(p).len_of(Axis(*axis));
                if needs(p) {
                    out.push((p, narrow_forward(g, *axis, start, len).unwrap()));
                }
                start += len;
            }
        }
        Op::Narrow {
            input,
            axis,
            start,
            len,
        } => {
            if needs(*input) {
                let mut dx = Arr::zeros(value(*input).raw_dim());
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                out.push((*input, dx));
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                let x = value(*a);
                out.push((*a, g.to_shape(x.raw_dim()).unwrap().to_owned()));
            }
        }
        Op::Conv1d {
            features,
            kernel,
            scale,
            seg_len,
            cache,
        } => {
            let (dx, dk, ds) = conv1d_vjp(
                g,
                value(*features),
                value(*kernel),
                value(*scale),
                *seg_len,
                cache,
                (needs(*features), needs(*kernel), needs(*scale)),
            );
            if let Some(d) = dx {
                out.push((*features, d));
            }
            if let Some(d) = dk {
                out.push((*kernel, d));
            }
            if let Some(d) = ds {
                out.push((*scale, d));
            }
        }
        Op::BatchNorm {
            x,
            scale,
            shift,
            mean,
            inv_std,
        } => {
            let (dx, ds, dh) = batch_norm_vjp(
                g,
                value(*x),
                value(*scale),
                value(*shift),
                mean,
                inv_std,
                (needs(*x), needs(*scale), needs(*shift)),
            );
            if let Some(d) = dx {
                out.push((*x, d));
            }
            if let Some(d) = ds {
                out.push((*scale, d));
            }
            if let Some(d) = dh {
                out.push((*shift, d));
            }
        }
    }
    out
}
