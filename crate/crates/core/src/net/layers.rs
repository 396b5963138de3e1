//! Feature-map primitives with hand-written backward passes.
//!
//! Maps are stored HWC: the channel vector of each pixel is contiguous, so
//! the inner loops of the convolutions run over output channels.

use rand::Rng;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Fmap<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Fmap<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Fmap {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }
}

/// Same-size convolution (zero padding, stride 1). `kernel` is laid out
/// `[ks][ks][cin][cout]`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Fmap<T>,
    kernel: &[T],
    bias: &[T],
    ks: usize,
    cout: usize,
) -> Fmap<T> {
    let (h, w, cin) = (x.h, x.w, x.c);
    debug_assert_eq!(kernel.len(), ks * ks * cin * cout);
    let pad = ks / 2;
    let mut out = Fmap::zeros(h, w, cout);
    let tap = cin * cout;
    for y in 0..h {
        let (dy0, dy1) = tap_range(y, h, ks, pad);
        for xx in 0..w {
            let (dx0, dx1) = tap_range(xx, w, ks, pad);
            let o = &mut out.data[(y * w + xx) * cout..][..cout];
            o.copy_from_slice(bias);
            for dy in dy0..dy1 {
                let iy = y + dy - pad;
                for dx in dx0..dx1 {
                    let ix = xx + dx - pad;
                    let xin = &x.data[(iy * w + ix) * cin..][..cin];
                    let taps = &kernel[(dy * ks + dx) * tap..][..tap];
                    for (&a, wrow) in xin.iter().zip(taps.chunks_exact(cout)) {
                        if a == T::zero() {
                            continue;
                        }
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov = *ov + a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Kernel offsets `d` in `lo..hi` for which `pos + d - pad` is inside `0..len`.
fn tap_range(pos: usize, len: usize, ks: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(pos);
    let hi = ks.min(len + pad - pos);
    (lo, hi)
}

/// Accumulates kernel/bias gradients and, if requested, returns the
/// gradient with respect to the convolution input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &Fmap<T>,
    kernel: &[T],
    ks: usize,
    cout: usize,
    gout: &[T],
    gkernel: &mut [T],
    gbias: &mut [T],
    need_input_grad: bool,
) -> Option<Fmap<T>> {
    let (h, w, cin) = (x.h, x.w, x.c);
    let pad = ks / 2;
    let tap = cin * cout;
    let mut gin = need_input_grad.then(|| Fmap::zeros(h, w, cin));
    for y in 0..h {
        let (dy0, dy1) = tap_range(y, h, ks, pad);
        for xx in 0..w {
            let g = &gout[(y * w + xx) * cout..][..cout];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for (gb, &gv) in gbias.iter_mut().zip(g) {
                *gb = *gb + gv;
            }
            let (dx0, dx1) = tap_range(xx, w, ks, pad);
            for dy in dy0..dy1 {
                let iy = y + dy - pad;
                for dx in dx0..dx1 {
                    let ix = xx + dx - pad;
                    let pix = (iy * w + ix) * cin;
                    let xin = &x.data[pix..][..cin];
                    let off = (dy * ks + dx) * tap;
                    if let Some(gin) = gin.as_mut() {
                        let gpix = &mut gin.data[pix..][..cin];
                        for (gi, wrow) in gpix.iter_mut().zip(kernel[off..][..tap].chunks_exact(cout)) {
                            let dot = wrow
                                .iter()
                                .zip(g)
                                .fold(T::zero(), |acc, (&wv, &gv)| acc + wv * gv);
                            *gi = *gi + dot;
                        }
                    }
                    let gk = &mut gkernel[off..][..tap];
                    for (&a, gkrow) in xin.iter().zip(gk.chunks_exact_mut(cout)) {
                        if a != T::zero() {
                            for (gkv, &gv) in gkrow.iter_mut().zip(g) {
                                *gkv = *gkv + a * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn relu<T: Scalar>(x: &Fmap<T>) -> Fmap<T> {
    x.like(x.data.iter().map(|v| v.max(T::zero())).collect())
}

/// Masks `grad` by the sign pattern of the pre-activation.
pub(crate) fn relu_backward<T: Scalar>(pre: &Fmap<T>, grad: &mut [T]) {
    for (g, &z) in grad.iter_mut().zip(&pre.data) {
        if z <= T::zero() {
            *g = T::zero();
        }
    }
}

impl<T: Scalar> Fmap<T> {
    fn like(&self, data: Vec<T>) -> Self {
        Fmap {
            h: self.h,
            w: self.w,
            c: self.c,
            data,
        }
    }
}

/// 2x2 max-pool; returns the pooled map and, per output element, the flat
/// input index that won (first in scan order on ties).
pub(crate) fn max_pool2<T: Scalar>(x: &Fmap<T>) -> (Fmap<T>, Vec<u32>) {
    let (oh, ow, c) = (x.h / 2, x.w / 2, x.c);
    let mut out = Fmap::zeros(oh, ow, c);
    let mut idx = vec![0u32; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let mut best = ((2 * y) * x.w + 2 * xx) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * x.w + 2 * xx + dx) * c + ch;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (y * ow + xx) * c + ch;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub(crate) fn max_pool2_backward<T: Scalar>(grad_out: &[T], idx: &[u32], grad_in: &mut [T]) {
    for (&g, &i) in grad_out.iter().zip(idx) {
        grad_in[i as usize] = grad_in[i as usize] + g;
    }
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2<T: Scalar>(x: &Fmap<T>) -> Fmap<T> {
    let (oh, ow, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = Fmap::zeros(oh, ow, c);
    for y in 0..oh {
        for xx in 0..ow {
            let src = ((y / 2) * x.w + xx / 2) * c;
            let dst = (y * ow + xx) * c;
            out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(grad: &Fmap<T>) -> Fmap<T> {
    let (h, w, c) = (grad.h / 2, grad.w / 2, grad.c);
    let mut out = Fmap::zeros(h, w, c);
    for y in 0..grad.h {
        for xx in 0..grad.w {
            let src = (y * grad.w + xx) * c;
            let dst = ((y / 2) * w + xx / 2) * c;
            for ch in 0..c {
                out.data[dst + ch] = out.data[dst + ch] + grad.data[src + ch];
            }
        }
    }
    out
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat<T: Scalar>(a: &Fmap<T>, b: &Fmap<T>) -> Fmap<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.h * a.w * c);
    for (pa, pb) in a.data.chunks_exact(a.c).zip(b.data.chunks_exact(b.c)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Fmap {
        h: a.h,
        w: a.w,
        c,
        data,
    }
}

/// Splits a concatenated gradient back into its `[a, b]` parts.
pub(crate) fn split<T: Scalar>(g: &Fmap<T>, ca: usize) -> (Fmap<T>, Fmap<T>) {
    let cb = g.c - ca;
    let mut a = Fmap::zeros(g.h, g.w, ca);
    let mut b = Fmap::zeros(g.h, g.w, cb);
    for (i, px) in g.data.chunks_exact(g.c).enumerate() {
        a.data[i * ca..(i + 1) * ca].copy_from_slice(&px[..ca]);
        b.data[i * cb..(i + 1) * cb].copy_from_slice(&px[ca..]);
    }
    (a, b)
}

/// Inverted dropout. Returns the scaled map and the keep mask (`None` when
/// nothing was dropped).
pub(crate) fn dropout<T: Scalar, R: Rng>(
    x: &Fmap<T>,
    p_drop: f64,
    rng: &mut R,
) -> (Fmap<T>, Option<Vec<bool>>) {
    if p_drop <= 0.0 {
        return (x.clone(), None);
    }
    let scale = T::lit(1.0 / (1.0 - p_drop));
    let mut keep = Vec::with_capacity(x.data.len());
    let data = x
        .data
        .iter()
        .map(|&v| {
            let k = rng.random::<f64>() >= p_drop;
            keep.push(k);
            if k {
                v * scale
            } else {
                T::zero()
            }
        })
        .collect();
    (x.like(data), Some(keep))
}

pub(crate) fn dropout_backward<T: Scalar>(grad: &mut [T], keep: Option<&[bool]>, p_drop: f64) {
    let Some(keep) = keep else { return };
    let scale = T::lit(1.0 / (1.0 - p_drop));
    for (g, &k) in grad.iter_mut().zip(keep) {
        *g = if k { *g * scale } else { T::zero() };
    }
}

/// Numerically stable softmax over each pixel's logits.
pub(crate) fn softmax<T: Scalar>(logits: &Fmap<T>) -> Vec<T> {
    let mut out = logits.data.clone();
    for px in out.chunks_exact_mut(logits.c) {
        let m = px.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in px.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
