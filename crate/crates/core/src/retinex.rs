//! Retinex decomposition into reflectance and illumination.
//!
//! Illumination is estimated as a Gaussian-smoothed max-channel map and
//! reflectance is the clamped ratio `I / L`. Reflectance is unchanged by a
//! global brightness factor wherever neither clamp is active, which is what
//! makes it a useful illumination-invariant second view of an image.

use crate::error::Result;
use crate::tensor::Tensor;
use crate::types::ImageTensor;

/// Illumination floor.
pub const ILLUMINATION_FLOOR: f32 = 1e-3;

/// Reference blur at 400×400 input.
pub const REFERENCE_SIGMA: f32 = 2.0;
pub const REFERENCE_SIDE: f32 = 400.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub reflectance: ImageTensor,
    /// `[H, W]` map with values in `[ILLUMINATION_FLOOR, 1]`.
    pub illumination: Tensor<f32>,
}

/// Anything that can split an image into reflectance and illumination.
pub trait Decomposer: Send + Sync {
    fn decompose(&self, image: &ImageTensor) -> Result<Decomposition>;
}

/// Max-channel plus Gaussian smoothing decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianRetinex {
    /// Blur sigma in pixels; `None` scales [`REFERENCE_SIGMA`] with image size.
    pub sigma: Option<f32>,
}

impl Default for GaussianRetinex {
    fn default() -> Self {
        Self { sigma: None }
    }
}

impl GaussianRetinex {
    pub fn with_sigma(sigma: f32) -> Self {
        Self { sigma: Some(sigma) }
    }
}

impl Decomposer for GaussianRetinex {
    fn decompose(&self, image: &ImageTensor) -> Result<Decomposition> {
        let sigma = self
            .sigma
            .unwrap_or_else(|| default_sigma(image.height(), image.width()));
        decompose(image, sigma)
    }
}

/// Default blur for an image of the given size.
pub fn default_sigma(height: usize, width: usize) -> f32 {
    REFERENCE_SIGMA * height.max(width) as f32 / REFERENCE_SIDE
}

pub fn decompose(image: &ImageTensor, blur_sigma: f32) -> Result<Decomposition> {
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let d = image.tensor().data();
    let max_channel: Vec<f32> = (0..hw).map(|p| d[p].max(d[hw + p]).max(d[2 * hw + p])).collect();
    let illum: Vec<f32> = gaussian_blur(&max_channel, h, w, blur_sigma)
        .into_iter()
        .map(|v| v.clamp(ILLUMINATION_FLOOR, 1.0))
        .collect();
    let refl: Vec<f32> = d
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / illum[i % hw]).clamp(0.0, 1.0))
        .collect();
    Ok(Decomposition {
        reflectance: ImageTensor::new(Tensor::new(&[3, h, w], refl)?)?,
        illumination: Tensor::new(&[h, w], illum)?,
    })
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return src.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * src[y * w + clampi(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * tmp[clampi(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}
