//! Forward compute kernels on plain tensors.
//!
//! Shape validation happens at the graph layer; kernels assume conforming
//! inputs (debug assertions only). Everything is f64, direct loops,
//! deterministic: parallel sections write disjoint output slabs or reduce
//! per-sample partials in fixed index order.

use rayon::prelude::*;

use crate::tensor::{broadcast_shapes, strides_of, Tensor};

// ---------------------------------------------------------------------------
// Elementwise with broadcasting
// ---------------------------------------------------------------------------

pub fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shapes("kernel.binary", a.shape(), b.shape())
        .expect("validated by caller");
    let ax = a.broadcast_to(&out_shape).expect("validated");
    let bx = b.broadcast_to(&out_shape).expect("validated");
    let data = ax
        .data()
        .iter()
        .zip(bx.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(&out_shape, data)
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for l in 0..k {
            let aval = ad[i * k + l];
            if aval == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += aval * bv;
            }
        }
    });
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose2d(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Output shape of reducing `shape` over sorted `axes`.
pub fn reduced_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    if keepdims {
        let mut s = shape.to_vec();
        for &ax in axes {
            s[ax] = 1;
        }
        s
    } else {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    }
}

/// Per-input-axis output stride (0 on reduced axes) for flat index mapping.
fn reduction_out_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let kept_strides = strides_of(&kept);
    (0..shape.len())
        .map(|i| if axes.contains(&i) { 0 } else { kept_strides[i] })
        .collect()
}

fn fold_reduce(
    x: &Tensor,
    axes: &[usize],
    keepdims: bool,
    init: f64,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let out_shape = reduced_shape(x.shape(), axes, keepdims);
    let out_numel: usize = out_shape.iter().product();
    let mut out = vec![init; out_numel];
    let in_strides = strides_of(x.shape());
    let out_strides = reduction_out_strides(x.shape(), axes);
    for (flat, &v) in x.data().iter().enumerate() {
        let mut rem = flat;
        let mut o = 0usize;
        for (k, &is) in in_strides.iter().enumerate() {
            let idx = rem / is;
            rem %= is;
            o += idx * out_strides[k];
        }
        out[o] = f(out[o], v);
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn sum_axes(x: &Tensor, axes: &[usize], keepdims: bool) -> Tensor {
    fold_reduce(x, axes, keepdims, 0.0, |acc, v| acc + v)
}

pub fn mean_axes(x: &Tensor, axes: &[usize], keepdims: bool) -> Tensor {
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    sum_axes(x, axes, keepdims).scale(1.0 / count as f64)
}

/// Max/min over axes. Also returns, per output cell, the flat input index of
/// the selected element; ties go to the lowest flat index (ascending scan
/// with strict comparison).
pub fn extremum_axes(
    x: &Tensor,
    axes: &[usize],
    keepdims: bool,
    take_max: bool,
) -> (Tensor, Vec<usize>) {
    let out_shape = reduced_shape(x.shape(), axes, keepdims);
    let out_numel: usize = out_shape.iter().product();
    let init = if take_max { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut out = vec![init; out_numel];
    let mut arg = vec![usize::MAX; out_numel];
    let in_strides = strides_of(x.shape());
    let out_strides = reduction_out_strides(x.shape(), axes);
    for (flat, &v) in x.data().iter().enumerate() {
        let mut rem = flat;
        let mut o = 0usize;
        for (k, &is) in in_strides.iter().enumerate() {
            let idx = rem / is;
            rem %= is;
            o += idx * out_strides[k];
        }
        let better = if take_max { v > out[o] } else { v < out[o] };
        if better {
            out[o] = v;
            arg[o] = flat;
        }
    }
    (Tensor::from_vec(&out_shape, out), arg)
}

/// Scatters `g` (reduced shape) back into `input_shape` at `arg` positions;
/// the gradient of a max/min reduction.
pub fn scatter_flat(g: &Tensor, arg: &[usize], input_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; input_shape.iter().product()];
    for (&a, &v) in arg.iter().zip(g.data().iter()) {
        out[a] += v;
    }
    Tensor::from_vec(input_shape, out)
}

/// Reads `u` at `arg` positions; the adjoint of `scatter_flat`.
pub fn gather_flat(u: &Tensor, arg: &[usize], out_shape: &[usize]) -> Tensor {
    let data = arg.iter().map(|&a| u.data()[a]).collect();
    Tensor::from_vec(out_shape, data)
}

// ---------------------------------------------------------------------------
// Softmax over the last axis
// ---------------------------------------------------------------------------

pub fn softmax_last(x: &Tensor, tau: f64) -> Tensor {
    let c = *x.shape().last().expect("softmax needs rank >= 1");
    let mut out = vec![0.0; x.numel()];
    for (row_in, row_out) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        let m = row_in.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
        let mut z = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
            *o = (v / tau - m).exp();
            z += *o;
        }
        for o in row_out.iter_mut() {
            *o /= z;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

// ---------------------------------------------------------------------------
// Concat / slice
// ---------------------------------------------------------------------------

pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.to_vec();
    out_shape[axis] = total_axis;
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let a = p.shape()[axis];
            let start = o * a * inner;
            out.extend_from_slice(&p.data()[start..start + a * inner]);
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let a = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * a + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::from_vec(&out_shape, out)
}

// ---------------------------------------------------------------------------
// 2-D convolution (direct) and its two adjoints
// ---------------------------------------------------------------------------

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// x: [n, ci, h, w], wt: [co, ci, kh, kw] -> [n, co, oh, ow], zero padding.
pub fn conv2d(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = dims4(x);
    let (co, _, kh, kw) = dims4(wt);
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, stride, pad);
    let xd = x.data();
    let wd = wt.data();
    let mut out = vec![0.0; n * co * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(slab, oplane)| {
        let b = slab / co;
        let oc = slab % co;
        for ic in 0..ci {
            let xplane = &xd[(b * ci + ic) * h * w..(b * ci + ic + 1) * h * w];
            let wbase = ((oc * ci + ic) * kh) * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[n, co, oh, ow], out)
}

/// Adjoint of `conv2d` in its input: gy: [n, co, oh, ow] -> [n, ci, h, w].
pub fn conv2d_grad_input(
    gy: &Tensor,
    wt: &Tensor,
    stride: usize,
    pad: usize,
    hw: (usize, usize),
) -> Tensor {
    let (n, co, oh, ow) = dims4(gy);
    let (_, ci, kh, kw) = dims4(wt);
    let (h, w) = hw;
    let gd = gy.data();
    let wd = wt.data();
    let mut out = vec![0.0; n * ci * h * w];
    out.par_chunks_mut(ci * h * w).enumerate().for_each(|(b, gx)| {
        for oc in 0..co {
            let gplane = &gd[(b * co + oc) * oh * ow..(b * co + oc + 1) * oh * ow];
            for ic in 0..ci {
                let xplane = &mut gx[ic * h * w..(ic + 1) * h * w];
                let wbase = ((oc * ci + ic) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &mut xplane[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    xrow[ix as usize] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[n, ci, h, w], out)
}

/// Adjoint of `conv2d` in its kernel: x, gy -> [co, ci, kh, kw].
/// Per-sample partials are reduced in ascending sample order.
pub fn conv2d_grad_weight(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    khw: (usize, usize),
) -> Tensor {
    let (n, ci, h, w) = dims4(x);
    let (_, co, oh, ow) = dims4(gy);
    let (kh, kw) = khw;
    let xd = x.data();
    let gd = gy.data();
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut gw = vec![0.0; co * ci * kh * kw];
            for oc in 0..co {
                let gplane = &gd[(b * co + oc) * oh * ow..(b * co + oc + 1) * oh * ow];
                for ic in 0..ci {
                    let xplane = &xd[(b * ci + ic) * h * w..(b * ci + ic + 1) * h * w];
                    let wbase = ((oc * ci + ic) * kh) * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += gv * xrow[ix as usize];
                                    }
                                }
                            }
                            gw[wbase + ky * kw + kx] += acc;
                        }
                    }
                }
            }
            gw
        })
        .collect();
    let mut out = vec![0.0; co * ci * kh * kw];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Tensor::from_vec(&[co, ci, kh, kw], out)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub fn pool_out_hw(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    ((h - k) / stride + 1, (w - k) / stride + 1)
}

pub fn avg_pool2d(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = pool_out_hw(h, w, k, stride);
    let xd = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        acc += xp[row + kx];
                    }
                }
                op[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Adjoint of `avg_pool2d`: distributes gy/(k*k) back over each window.
pub fn avg_pool2d_grad(gy: &Tensor, k: usize, stride: usize, hw: (usize, usize)) -> Tensor {
    let (n, c, oh, ow) = dims4(gy);
    let (h, w) = hw;
    let gd = gy.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let gp = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        let op = &mut out[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gp[oy * ow + ox] * inv;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        op[row + kx] += gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Max pool returning, per output cell, the flat index of the winning input
/// element (ties to the lowest flat index).
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = pool_out_hw(h, w, k, stride);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        let xp = &xd[base..base + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0usize;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        let v = xp[row + kx];
                        if v > best {
                            best = v;
                            best_at = row + kx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = base + best_at;
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out), arg)
}

// ---------------------------------------------------------------------------
// Fixed 3x3 Gaussian blur over the trailing two axes
// ---------------------------------------------------------------------------

const BLUR_K: [[f64; 3]; 3] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
];

/// [..., h, w] -> [..., h, w] with zero padding. The kernel is symmetric, so
/// this operator is its own adjoint.
pub fn gaussian_blur3(x: &Tensor) -> Tensor {
    let rank = x.rank();
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    let planes = x.numel() / (h * w);
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let xp = &xd[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xcol in 0..w {
                let mut acc = 0.0;
                for (ky, krow) in BLUR_K.iter().enumerate() {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for (kx, &kv) in krow.iter().enumerate() {
                        let ix = xcol as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            acc += kv * xp[iy as usize * w + ix as usize];
                        }
                    }
                }
                op[y * w + xcol] = acc;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    debug_assert_eq!(t.rank(), 4, "expected rank-4 tensor, got {:?}", t.shape());
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
