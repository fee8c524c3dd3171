//! Convolution kernels: 'same' zero padding, cross-correlation (no flip),
//! odd kernel extents.

use super::Tensor;

pub(crate) struct Conv2dDims {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dDims {
    pub fn from_shapes(x: &[usize], k: &[usize]) -> Self {
        Conv2dDims {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: k[0],
            kh: k[2],
            kw: k[3],
        }
    }
}

/// Visits every (input row, output row, column offset, weight index) tap.
/// The inner slices are aligned so `out_row[a..b]` pairs with `in_row[a+dj..b+dj]`.
#[inline]
fn for_each_tap(d: &Conv2dDims, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for bi in 0..d.b {
        for oi in 0..d.o {
            for ci in 0..d.c {
                for i in 0..d.kh {
                    let di = i as isize - ph;
                    for hi in 0..d.h {
                        let hs = hi as isize + di;
                        if hs < 0 || hs >= d.h as isize {
                            continue;
                        }
                        let in_row = ((bi * d.c + ci) * d.h + hs as usize) * d.w;
                        let out_row = ((bi * d.o + oi) * d.h + hi) * d.w;
                        for j in 0..d.kw {
                            let kidx = ((oi * d.c + ci) * d.kh + i) * d.kw + j;
                            // column offset encoded as j; caller derives the overlap
                            f(in_row, out_row, j, kidx, pw as usize);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn overlap(w: usize, j: usize, pw: usize) -> (usize, usize, isize) {
    let dj = j as isize - pw as isize;
    let start = (-dj).max(0) as usize;
    let end = (w as isize - dj).min(w as isize).max(0) as usize;
    (start, end, dj)
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let d = Conv2dDims::from_shapes(x.shape(), k.shape());
    let mut out = vec![0.0; d.b * d.o * d.h * d.w];
    let (xs, ks) = (x.data(), k.data());
    for_each_tap(&d, |in_row, out_row, j, kidx, pw| {
        let kv = ks[kidx];
        if kv == 0.0 {
            return;
        }
        let (s, e, dj) = overlap(d.w, j, pw);
        if s >= e {
            return;
        }
        let src = &xs[(in_row as isize + s as isize + dj) as usize..][..e - s];
        let dst = &mut out[out_row + s..out_row + e];
        for (o, &v) in dst.iter_mut().zip(src) {
            *o += kv * v;
        }
    });
    Tensor::new(vec![d.b, d.o, d.h, d.w], out).unwrap()
}

/// Returns (grad wrt input, grad wrt kernel).
pub(crate) fn conv2d_backward(x: &Tensor, k: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let d = Conv2dDims::from_shapes(x.shape(), k.shape());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let (xs, ks, gs) = (x.data(), k.data(), gout.data());
    for_each_tap(&d, |in_row, out_row, j, kidx, pw| {
        let (s, e, dj) = overlap(d.w, j, pw);
        if s >= e {
            return;
        }
        let base = (in_row as isize + s as isize + dj) as usize;
        let g = &gs[out_row + s..out_row + e];
        let src = &xs[base..base + (e - s)];
        gk[kidx] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
        let kv = ks[kidx];
        if kv != 0.0 {
            for (dst, &gv) in gx[base..base + (e - s)].iter_mut().zip(g) {
                *dst += kv * gv;
            }
        }
    });
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
    )
}

/// Direct seven-loop 2-D convolution, kept as the reference for the fast path.
pub fn conv2d_naive(x: &Tensor, k: &Tensor) -> Tensor {
    let d = Conv2dDims::from_shapes(x.shape(), k.shape());
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut out = Tensor::zeros(&[d.b, d.o, d.h, d.w]);
    for b in 0..d.b {
        for o in 0..d.o {
            for h in 0..d.h {
                for w in 0..d.w {
                    let mut acc = 0.0;
                    for c in 0..d.c {
                        for i in 0..d.kh {
                            for j in 0..d.kw {
                                let hh = h as isize + i as isize - ph;
                                let ww = w as isize + j as isize - pw;
                                if hh < 0 || ww < 0 || hh >= d.h as isize || ww >= d.w as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((b * d.c + c) * d.h + hh as usize) * d.w + ww as usize];
                                let kv = k.data()[((o * d.c + c) * d.kh + i) * d.kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data_mut()[((b * d.o + o) * d.h + h) * d.w + w] = acc;
                }
            }
        }
    }
    out
}

/// Direct 1-D convolution over `[B, C, L]` with kernel `[O, C, K]`.
pub fn conv1d_naive(x: &Tensor, k: &Tensor) -> Tensor {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kk) = (k.shape()[0], k.shape()[2]);
    let pad = (kk / 2) as isize;
    let mut out = Tensor::zeros(&[b, o, l]);
    for bi in 0..b {
        for oi in 0..o {
            for t in 0..l {
                let mut acc = 0.0;
                for ci in 0..c {
                    for j in 0..kk {
                        let s = t as isize + j as isize - pad;
                        if s < 0 || s >= l as isize {
                            continue;
                        }
                        acc += x.data()[(bi * c + ci) * l + s as usize]
                            * k.data()[(oi * c + ci) * kk + j];
                    }
                }
                out.data_mut()[(bi * o + oi) * l + t] = acc;
            }
        }
    }
    out
}
