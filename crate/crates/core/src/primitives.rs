//! Numeric primitives shared by every stage: bilinear resampling, cosine
//! similarity and the broadcast Hadamard product.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Norms below this are treated as zero by [`cosine`].
pub const COSINE_NORM_EPS: f64 = 1e-12;

/// Interpolation taps along one axis for half-pixel-centre bilinear
/// resampling (align-corners disabled).
#[derive(Clone, Debug, PartialEq)]
pub struct ResizeAxis {
    pub src_len: usize,
    pub dst_len: usize,
    /// `(lo, hi, weight_lo, weight_hi)` per output coordinate.
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl ResizeAxis {
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(src_len - 1);
                let hi = (lo + 1).min(src_len - 1);
                let frac = if hi == lo { 0.0 } else { src - lo as f64 };
                (lo, hi, 1.0 - frac, frac)
            })
            .collect();
        Self { src_len, dst_len, taps }
    }
}

fn check_target(target_h: usize, target_w: usize) -> Result<()> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::arg(format!(
            "resize target must be positive, got {target_h}x{target_w}"
        )));
    }
    Ok(())
}

/// Resizes a `[C, H, W]` tensor (or `[H, W]`) to `target_h × target_w`.
pub fn bilinear_resize<T: Scalar>(map: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    check_target(target_h, target_w)?;
    let (c, h, w, rank2) = match map.shape() {
        &[h, w] => (1, h, w, true),
        &[c, h, w] => (c, h, w, false),
        s => return Err(Error::shape(format!("cannot resize tensor of shape {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::arg("cannot resize an empty map"));
    }
    let ry = ResizeAxis::new(h, target_h);
    let rx = ResizeAxis::new(w, target_w);
    let out = resize_planes(map.data(), c, h, w, &ry, &rx);
    let shape: Vec<usize> = if rank2 {
        vec![target_h, target_w]
    } else {
        vec![c, target_h, target_w]
    };
    Tensor::new(&shape, out)
}

pub(crate) fn resize_planes<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    ry: &ResizeAxis,
    rx: &ResizeAxis,
) -> Vec<T> {
    let (th, tw) = (ry.dst_len, rx.dst_len);
    let mut out = vec![T::zero(); c * th * tw];
    let mut row = vec![T::zero(); tw];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
        for (oy, &(y0, y1, wy0, wy1)) in ry.taps.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (v, &(x0, x1, wx0, wx1)) in row.iter_mut().zip(&rx.taps) {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                *v = top * wy0 + bot * wy1;
            }
            dst[oy * tw..(oy + 1) * tw].copy_from_slice(&row);
        }
    }
    out
}

/// Adjoint of [`resize_planes`]: scatters an output-sized gradient back onto
/// the source grid.
pub(crate) fn resize_planes_adjoint<T: Scalar>(
    grad: &[T],
    c: usize,
    h: usize,
    w: usize,
    ry: &ResizeAxis,
    rx: &ResizeAxis,
) -> Vec<T> {
    let (th, tw) = (ry.dst_len, rx.dst_len);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &grad[ch * th * tw..(ch + 1) * th * tw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ry.taps.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in rx.taps.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let v = g[oy * tw + ox];
                dst[y0 * w + x0] += v * wy0 * wx0;
                dst[y0 * w + x1] += v * wy0 * wx1;
                dst[y1 * w + x0] += v * wy1 * wx0;
                dst[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    out
}

/// Cosine similarity with a zero-norm guard: returns 0 when either vector
/// has norm below [`COSINE_NORM_EPS`].
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let eps = T::lit(COSINE_NORM_EPS);
    if na < eps || nb < eps {
        return Ok(T::zero());
    }
    Ok(dot / (na * nb))
}

/// Multiplies every channel of `a: [C, H, W]` elementwise by `b: [H, W]`
/// (or `[1, H, W]`).
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = a.chw()?;
    let (bh, bw) = match b.shape() {
        &[bh, bw] | &[1, bh, bw] => (bh, bw),
        s => return Err(Error::shape(format!("hadamard mask shape {s:?}"))),
    };
    if (bh, bw) != (h, w) {
        return Err(Error::shape(format!("hadamard of {h}x{w} map with {bh}x{bw} mask")));
    }
    let hw = h * w;
    let mut out = a.data().to_vec();
    for ch in 0..c {
        for (v, &m) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(b.data()) {
            *v *= m;
        }
    }
    Tensor::new(&[c, h, w], out)
}
