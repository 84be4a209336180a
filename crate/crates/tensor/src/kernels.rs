//! Forward and backward numerics for each graph op, free of tape bookkeeping.

use crate::{Scalar, Tensor};

/// Largest im2col buffer (in elements) materialized at once.
const COL_BUDGET: usize = 1 << 20;

fn rows_per_chunk(k_len: usize, h: usize, w: usize) -> usize {
    (COL_BUDGET / (k_len * w).max(1)).clamp(1, h)
}

/// Fills `col` (shape `[cin*k*k, (y1-y0)*w]`) for output rows `y0..y1` of a
/// stride-1 convolution with symmetric zero padding `pad`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    y0: usize,
    y1: usize,
    col: &mut [T],
) {
    let cols = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * cols;
                let dst = &mut col[row..row + cols];
                for y in y0..y1 {
                    let out = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    y0: usize,
    y1: usize,
    dx: &mut [T],
) {
    let cols = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * cols;
                let src = &col[row..row + cols];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &src[(y - y0) * w..(y - y0 + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xo, &g) in line.iter().enumerate() {
                        let sx = xo as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `w` is `[cout, cin, k, k]`, `b` is `[1, cout, 1, 1]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    assert_eq!(cin, wcin, "conv input channels");
    assert_eq!(k, k2);
    assert!(k % 2 == 1, "only odd kernels are supported");
    let pad = k / 2;
    let hw = h * wd;
    let k_len = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let chunk = rows_per_chunk(k_len, h, wd);
    let mut col = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); k_len * chunk * wd]
    };
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..(s + 1) * cin * hw];
        let os = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        if k == 1 {
            unsafe {
                T::gemm(
                    cout,
                    cin,
                    hw,
                    T::one(),
                    w.data().as_ptr(),
                    cin as isize,
                    1,
                    xs.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    os.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
        } else {
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + chunk).min(h);
                let cols = (y1 - y0) * wd;
                im2col(xs, cin, h, wd, k, pad, y0, y1, &mut col[..k_len * cols]);
                unsafe {
                    T::gemm(
                        cout,
                        k_len,
                        cols,
                        T::one(),
                        w.data().as_ptr(),
                        k_len as isize,
                        1,
                        col.as_ptr(),
                        cols as isize,
                        1,
                        T::zero(),
                        os.as_mut_ptr().add(y0 * wd),
                        hw as isize,
                        1,
                    );
                }
                y0 = y1;
            }
        }
        if let Some(b) = b {
            for co in 0..cout {
                let bv = b.data()[co];
                for v in &mut os[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let pad = k / 2;
    let hw = h * wd;
    let k_len = cin * k * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let chunk = rows_per_chunk(k_len, h, wd);
    let mut col = vec![T::zero(); if k == 1 { 0 } else { k_len * chunk * wd }];
    let mut dcol = vec![T::zero(); if need_dx && k != 1 { k_len * chunk * wd } else { 0 }];
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..(s + 1) * cin * hw];
        let gs = &gout.data()[s * cout * hw..(s + 1) * cout * hw];
        for co in 0..cout {
            db.data_mut()[co] += gs[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if k == 1 {
            unsafe {
                // dW[cout, cin] += g[cout, hw] @ x^T[hw, cin]
                T::gemm(
                    cout,
                    hw,
                    cin,
                    T::one(),
                    gs.as_ptr(),
                    hw as isize,
                    1,
                    xs.as_ptr(),
                    1,
                    hw as isize,
                    T::one(),
                    dw.data_mut().as_mut_ptr(),
                    cin as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * cin * hw..(s + 1) * cin * hw];
                unsafe {
                    // dx[cin, hw] = W^T[cin, cout] @ g[cout, hw]
                    T::gemm(
                        cin,
                        cout,
                        hw,
                        T::one(),
                        w.data().as_ptr(),
                        1,
                        cin as isize,
                        gs.as_ptr(),
                        hw as isize,
                        1,
                        T::zero(),
                        dxs.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            }
            continue;
        }
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + chunk).min(h);
            let cols = (y1 - y0) * wd;
            im2col(xs, cin, h, wd, k, pad, y0, y1, &mut col[..k_len * cols]);
            unsafe {
                T::gemm(
                    cout,
                    cols,
                    k_len,
                    T::one(),
                    gs.as_ptr().add(y0 * wd),
                    hw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    cols as isize,
                    T::one(),
                    dw.data_mut().as_mut_ptr(),
                    k_len as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                unsafe {
                    T::gemm(
                        k_len,
                        cout,
                        cols,
                        T::one(),
                        w.data().as_ptr(),
                        1,
                        k_len as isize,
                        gs.as_ptr().add(y0 * wd),
                        hw as isize,
                        1,
                        T::zero(),
                        dcol.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                let dxs = &mut dx.data_mut()[s * cin * hw..(s + 1) * cin * hw];
                col2im(&dcol[..k_len * cols], cin, h, wd, k, pad, y0, y1, dxs);
            }
            y0 = y1;
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the in-plane argmax.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max pooling needs even sides");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = (2 * y) * w + 2 * xo;
                for cand in [
                    (2 * y) * w + 2 * xo + 1,
                    (2 * y + 1) * w + 2 * xo,
                    (2 * y + 1) * w + 2 * xo + 1,
                ] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = p * oh * ow + y * ow + xo;
                out.data_mut()[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(
    in_shape: [usize; 4],
    arg: &[u32],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let plane_in = in_shape[2] * in_shape[3];
    let plane_out = gout.plane();
    let mut dx = Tensor::zeros(in_shape);
    for (o, (&a, &g)) in arg.iter().zip(gout.data()).enumerate() {
        let p = o / plane_out;
        dx.data_mut()[p * plane_in + a as usize] += g;
    }
    dx
}

/// Bilinear 2x upsampling with half-pixel centers and edge clamping.
fn upsample_line<T: Scalar>(src: &[T], dst: &mut [T], stride_s: usize, stride_d: usize, len: usize) {
    let (a, b) = (T::of(0.75), T::of(0.25));
    for i in 0..len {
        let prev = i.saturating_sub(1);
        let next = (i + 1).min(len - 1);
        let c = src[i * stride_s];
        dst[(2 * i) * stride_d] = a * c + b * src[prev * stride_s];
        dst[(2 * i + 1) * stride_d] = a * c + b * src[next * stride_s];
    }
}

fn upsample_line_adjoint<T: Scalar>(
    g: &[T],
    dx: &mut [T],
    stride_g: usize,
    stride_x: usize,
    len: usize,
) {
    let (a, b) = (T::of(0.75), T::of(0.25));
    for i in 0..len {
        let prev = i.saturating_sub(1);
        let next = (i + 1).min(len - 1);
        let g0 = g[(2 * i) * stride_g];
        let g1 = g[(2 * i + 1) * stride_g];
        dx[i * stride_x] += a * (g0 + g1);
        dx[prev * stride_x] += b * g0;
        dx[next * stride_x] += b * g1;
    }
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut tmp = vec![T::zero(); n * c * h * 2 * w];
    for p in 0..n * c {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..];
            let dst = &mut tmp[(p * h + y) * 2 * w..];
            upsample_line(src, dst, 1, 1, w);
        }
    }
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let ow = 2 * w;
    for p in 0..n * c {
        let src = &tmp[p * h * ow..(p + 1) * h * ow];
        let dst = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for xo in 0..ow {
            upsample_line(&src[xo..], &mut dst[xo..], ow, ow, h);
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(in_shape: [usize; 4], gout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let ow = 2 * w;
    let mut tmp = vec![T::zero(); n * c * h * ow];
    for p in 0..n * c {
        let g = &gout.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let t = &mut tmp[p * h * ow..(p + 1) * h * ow];
        for xo in 0..ow {
            upsample_line_adjoint(&g[xo..], &mut t[xo..], ow, ow, h);
        }
    }
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..n * c {
        for y in 0..h {
            let g = &tmp[(p * h + y) * ow..(p * h + y + 1) * ow];
            let d = &mut dx.data_mut()[(p * h + y) * w..(p * h + y + 1) * w];
            upsample_line_adjoint(g, d, 1, 1, w);
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn broadcast_shape(a: [usize; 4], b: [usize; 4]) -> [usize; 4] {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => panic!("shapes {a:?} and {b:?} do not broadcast (dim {d}: {x} vs {y})"),
        };
    }
    out
}

fn strides_for(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let full = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast iteration space.
fn for_each_broadcast(
    a: [usize; 4],
    b: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) -> [usize; 4] {
    let out = broadcast_shape(a, b);
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, ba + w * sa[3], bb + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn binary<T: Scalar>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    macro_rules! run {
        ($op:tt) => {
            if a.shape() == b.shape() {
                for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                    *o = x $op y;
                }
            } else {
                for_each_broadcast(a.shape(), b.shape(), |o, i, j| out[o] = ad[i] $op bd[j]);
            }
        };
    }
    match kind {
        BinaryKind::Add => run!(+),
        BinaryKind::Sub => run!(-),
        BinaryKind::Mul => run!(*),
        BinaryKind::Div => run!(/),
    }
    Tensor::from_vec(out_shape, out)
}

pub fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    {
        let (gam, gbm) = (ga.data_mut(), gb.data_mut());
        for_each_broadcast(a.shape(), b.shape(), |o, i, j| {
            let go = gd[o];
            match kind {
                BinaryKind::Add => {
                    gam[i] += go;
                    gbm[j] += go;
                }
                BinaryKind::Sub => {
                    gam[i] += go;
                    gbm[j] -= go;
                }
                BinaryKind::Mul => {
                    gam[i] += go * bd[j];
                    gbm[j] += go * ad[i];
                }
                BinaryKind::Div => {
                    gam[i] += go / bd[j];
                    gbm[j] -= go * ad[i] / (bd[j] * bd[j]);
                }
            }
        });
    }
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn unary<T: Scalar>(kind: UnaryKind, x: &Tensor<T>) -> Tensor<T> {
    match kind {
        UnaryKind::Relu => x.map(|v| v.max(T::zero())),
        UnaryKind::Sigmoid => x.map(sigmoid),
        UnaryKind::Tanh => x.map(|v| v.tanh()),
        UnaryKind::Exp => x.map(|v| v.exp()),
        UnaryKind::Softplus => x.map(softplus),
    }
}

pub fn unary_backward<T: Scalar>(
    kind: UnaryKind,
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    let it = out
        .data_mut()
        .iter_mut()
        .zip(x.data().iter().zip(y.data()).zip(g.data()));
    for (o, ((&xv, &yv), &gv)) in it {
        *o = match kind {
            UnaryKind::Relu => {
                if xv > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            }
            UnaryKind::Sigmoid => gv * yv * (T::one() - yv),
            UnaryKind::Tanh => gv * (T::one() - yv * yv),
            UnaryKind::Exp => gv * yv,
            UnaryKind::Softplus => gv * sigmoid(xv),
        };
    }
    out
}

/// Which elements a moment is pooled over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Per sample and channel, over H x W (instance statistics). Output `[N, C, 1, 1]`.
    Instance,
    /// Per channel, over N x H x W (batch statistics). Output `[1, C, 1, 1]`.
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Moment {
    Mean,
    /// `sqrt(var + eps)` with the biased variance.
    Std { eps: f64 },
}

fn groups(shape: [usize; 4], pooling: Pooling) -> (usize, [usize; 4]) {
    let [n, c, h, w] = shape;
    match pooling {
        Pooling::Instance => (h * w, [n, c, 1, 1]),
        Pooling::Batch => (n * h * w, [1, c, 1, 1]),
    }
}

/// Visits the element indices of statistic group `gidx`.
fn group_indices(
    shape: [usize; 4],
    pooling: Pooling,
    gidx: usize,
) -> impl Iterator<Item = std::ops::Range<usize>> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let (first, count, step) = match pooling {
        Pooling::Instance => (gidx * hw, 1, 0),
        Pooling::Batch => (gidx * hw, n, c * hw),
    };
    (0..count).map(move |i| {
        let s = first + i * step;
        s..s + hw
    })
}

fn group_mean<T: Scalar>(x: &Tensor<T>, pooling: Pooling, g: usize, count: usize) -> T {
    let mut s = T::zero();
    for r in group_indices(x.shape(), pooling, g) {
        s += x.data()[r].iter().copied().sum::<T>();
    }
    s / T::of(count as f64)
}

pub fn moment<T: Scalar>(x: &Tensor<T>, pooling: Pooling, m: Moment) -> Tensor<T> {
    let (count, out_shape) = groups(x.shape(), pooling);
    let ngroups: usize = out_shape.iter().product();
    let mut out = Tensor::zeros(out_shape);
    for g in 0..ngroups {
        let mu = group_mean(x, pooling, g, count);
        out.data_mut()[g] = match m {
            Moment::Mean => mu,
            Moment::Std { eps } => {
                let mut ss = T::zero();
                for r in group_indices(x.shape(), pooling, g) {
                    for &v in &x.data()[r] {
                        let d = v - mu;
                        ss += d * d;
                    }
                }
                (ss / T::of(count as f64) + T::of(eps)).sqrt()
            }
        };
    }
    out
}

pub fn moment_backward<T: Scalar>(
    x: &Tensor<T>,
    pooling: Pooling,
    m: Moment,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (count, out_shape) = groups(x.shape(), pooling);
    let ngroups: usize = out_shape.iter().product();
    let inv = T::one() / T::of(count as f64);
    let mut dx = Tensor::zeros(x.shape());
    for gi in 0..ngroups {
        let go = g.data()[gi];
        match m {
            Moment::Mean => {
                for r in group_indices(x.shape(), pooling, gi) {
                    for v in &mut dx.data_mut()[r] {
                        *v += go * inv;
                    }
                }
            }
            Moment::Std { .. } => {
                let mu = group_mean(x, pooling, gi, count);
                let scale = go * inv / y.data()[gi];
                for r in group_indices(x.shape(), pooling, gi) {
                    let (xs, ds) = (&x.data()[r.clone()], &mut dx.data_mut()[r]);
                    for (d, &v) in ds.iter_mut().zip(xs) {
                        *d += scale * (v - mu);
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let pad = (k / 2) as isize;
        Tensor::from_fn([n, cout, h, wd], |i| {
            let xo = i % wd;
            let y = (i / wd) % h;
            let co = (i / (wd * h)) % cout;
            let s = i / (wd * h * cout);
            let mut acc = 0.0;
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xo as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += x.at(s, ci, sy as usize, sx as usize) * w.at(co, ci, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut state = seed;
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = pseudo([2, 3, 7, 5], 1);
        let w = pseudo([4, 3, 3, 3], 2);
        assert!(conv2d(&x, &w, None).max_abs_diff(&naive_conv(&x, &w)) < 1e-12);
    }

    #[test]
    fn chunked_conv_matches_direct_sum() {
        // 16 * 9 * 1200 > COL_BUDGET / rows, forcing several row chunks.
        let x = pseudo([1, 16, 70, 1200], 3);
        let w = pseudo([2, 16, 3, 3], 4);
        assert!(rows_per_chunk(16 * 9, 70, 1200) < 70);
        assert!(conv2d(&x, &w, None).max_abs_diff(&naive_conv(&x, &w)) < 1e-10);
    }

    #[test]
    fn bilinear_upsampling_of_a_ramp() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 2.0]);
        let y = upsample2(&x);
        assert_eq!(y.shape(), [1, 1, 2, 6]);
        assert_eq!(&y.data()[..6], &[0.0, 0.25, 0.75, 1.25, 1.75, 2.0]);
        assert_eq!(&y.data()[..6], &y.data()[6..]);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn batch_std_pools_over_samples() {
        let x = Tensor::from_vec([2, 1, 1, 1], vec![-1.0, 1.0]);
        let s = moment(&x, Pooling::Batch, Moment::Std { eps: 0.0 });
        assert_eq!(s.data(), &[1.0]);
        let i = moment(&x, Pooling::Instance, Moment::Std { eps: 0.0 });
        assert_eq!(i.data(), &[0.0, 0.0]);
    }
}
