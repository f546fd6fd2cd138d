//! Forward/backward kernels for the network. Every forward returns what its
//! backward needs; backward accumulates parameter gradients in place.

use crate::tensor::Tensor;

#[inline]
pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    #[cfg(test)]
    fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) struct ConvCache {
    /// `im2col` matrix (`cin k k × oh ow`); empty for pointwise convs.
    cols: Vec<f64>,
    input: Option<Tensor>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

fn im2col(x: &Tensor, s: &ConvShape, oh: usize, ow: usize) -> Vec<f64> {
    let kk = s.k * s.k;
    let n = oh * ow;
    let mut cols = vec![0.0; s.cin * kk * n];
    for ci in 0..s.cin {
        let plane = x.plane(ci);
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = &mut cols[((ci * s.k + ky) * s.k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..][..x.w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], s: &ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let mut dx = Tensor::zeros(s.cin, h, w);
    let n = oh * ow;
    for ci in 0..s.cin {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = &dcols[((ci * s.k + ky) * s.k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx.data[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `c[m×n] = beta c + a[m×k] b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover the strided ranges described by the shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], s: &ConvShape, keep: bool) -> (Tensor, ConvCache) {
    debug_assert_eq!(x.c, s.cin);
    let oh = conv_out_size(x.h, s.k, s.stride, s.pad);
    let ow = conv_out_size(x.w, s.k, s.stride, s.pad);
    let n = oh * ow;
    let kdim = s.cin * s.k * s.k;
    let mut y = Tensor::zeros(s.cout, oh, ow);
    for (co, &b) in bias.iter().enumerate() {
        y.data[co * n..(co + 1) * n].fill(b);
    }
    let (cols, input) = if s.is_pointwise() {
        gemm(s.cout, kdim, n, weight, kdim as isize, 1, &x.data, n as isize, 1, 1.0, &mut y.data);
        (Vec::new(), keep.then(|| x.clone()))
    } else {
        let cols = im2col(x, s, oh, ow);
        gemm(s.cout, kdim, n, weight, kdim as isize, 1, &cols, n as isize, 1, 1.0, &mut y.data);
        (if keep { cols } else { Vec::new() }, None)
    };
    let cache = ConvCache {
        cols,
        input,
        in_h: x.h,
        in_w: x.w,
        out_h: oh,
        out_w: ow,
    };
    (y, cache)
}

/// Returns the input gradient; accumulates into `dweight` and `dbias`.
pub(crate) fn conv_backward(
    dy: &Tensor,
    cache: &ConvCache,
    weight: &[f64],
    s: &ConvShape,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let n = cache.out_h * cache.out_w;
    let kdim = s.cin * s.k * s.k;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[co * n..(co + 1) * n].iter().sum::<f64>();
    }
    let cols: &[f64] = match &cache.input {
        Some(x) => &x.data,
        None => &cache.cols,
    };
    // dW += dy · colsᵀ
    gemm(s.cout, n, kdim, &dy.data, n as isize, 1, cols, 1, n as isize, 1.0, dweight);
    // dcols = Wᵀ · dy
    let mut dcols = vec![0.0; kdim * n];
    gemm(kdim, s.cout, n, weight, 1, kdim as isize, &dy.data, n as isize, 1, 0.0, &mut dcols);
    if s.is_pointwise() {
        Tensor {
            c: s.cin,
            h: cache.in_h,
            w: cache.in_w,
            data: dcols,
        }
    } else {
        col2im(&dcols, s, cache.in_h, cache.in_w, cache.out_h, cache.out_w)
    }
}

pub(crate) fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` by `y > 0` where `y` is the relu output.
pub(crate) fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    f: f64,
}

/// Half-pixel-centre sampling positions for resizing `n_in` to `n_out`.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap { i0, i1, f: src - i0 as f64 }
        })
        .collect()
}

/// Bilinear resize of every channel to `oh × ow`.
pub(crate) fn resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    if (x.h, x.w) == (oh, ow) {
        return x.clone();
    }
    let ty = resize_taps(x.h, oh);
    let tx = resize_taps(x.w, ow);
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let p = x.plane(c);
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = p[a.i0 * x.w + b.i0] * (1.0 - b.f) + p[a.i0 * x.w + b.i1] * b.f;
                let bot = p[a.i1 * x.w + b.i0] * (1.0 - b.f) + p[a.i1 * x.w + b.i1] * b.f;
                y.data[(c * oh + oy) * ow + ox] = top * (1.0 - a.f) + bot * a.f;
            }
        }
    }
    y
}

pub(crate) fn resize_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    if (dy.h, dy.w) == (in_h, in_w) {
        return dy.clone();
    }
    let ty = resize_taps(in_h, dy.h);
    let tx = resize_taps(in_w, dy.w);
    let mut dx = Tensor::zeros(dy.c, in_h, in_w);
    for c in 0..dy.c {
        let base = c * in_h * in_w;
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = dy.data[(c * dy.h + oy) * dy.w + ox];
                let gt = g * (1.0 - a.f);
                let gb = g * a.f;
                dx.data[base + a.i0 * in_w + b.i0] += gt * (1.0 - b.f);
                dx.data[base + a.i0 * in_w + b.i1] += gt * b.f;
                dx.data[base + a.i1 * in_w + b.i0] += gb * (1.0 - b.f);
                dx.data[base + a.i1 * in_w + b.i1] += gb * b.f;
            }
        }
    }
    dx
}

pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let n = d.plane_len();
    let a = Tensor {
        c: ca,
        h: d.h,
        w: d.w,
        data: d.data[..ca * n].to_vec(),
    };
    let b = Tensor {
        c: d.c - ca,
        h: d.h,
        w: d.w,
        data: d.data[ca * n..].to_vec(),
    };
    (a, b)
}

/// Depthwise valid cross-correlation of `search` with `kernel`, scaled by
/// `1 / (kh kw)`.
pub(crate) fn xcorr(search: &Tensor, kernel: &Tensor) -> Tensor {
    debug_assert_eq!(search.c, kernel.c);
    let oh = search.h - kernel.h + 1;
    let ow = search.w - kernel.w + 1;
    let norm = 1.0 / (kernel.h * kernel.w) as f64;
    let mut y = Tensor::zeros(search.c, oh, ow);
    for c in 0..search.c {
        let s = search.plane(c);
        let k = kernel.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kernel.h {
                    let srow = &s[(oy + ky) * search.w + ox..][..kernel.w];
                    let krow = &k[ky * kernel.w..][..kernel.w];
                    acc += srow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                y.data[(c * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    y
}

pub(crate) fn xcorr_backward(dy: &Tensor, search: &Tensor, kernel: &Tensor) -> (Tensor, Tensor) {
    let norm = 1.0 / (kernel.h * kernel.w) as f64;
    let mut ds = Tensor::zeros(search.c, search.h, search.w);
    let mut dk = Tensor::zeros(kernel.c, kernel.h, kernel.w);
    for c in 0..search.c {
        let s = search.plane(c);
        let k = kernel.plane(c);
        let sbase = c * search.h * search.w;
        let kbase = c * kernel.h * kernel.w;
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let g = dy.data[(c * dy.h + oy) * dy.w + ox] * norm;
                if g == 0.0 {
                    continue;
                }
                for ky in 0..kernel.h {
                    for kx in 0..kernel.w {
                        let si = (oy + ky) * search.w + ox + kx;
                        ds.data[sbase + si] += g * k[ky * kernel.w + kx];
                        dk.data[kbase + ky * kernel.w + kx] += g * s[si];
                    }
                }
            }
        }
    }
    (ds, dk)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy from logits and its gradient w.r.t. the logits.
pub(crate) fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / n);
    }
    (loss / n, grad)
}
