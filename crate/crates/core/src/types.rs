//! Domain types: images, masks, feature maps, prototypes and episodes.

use crate::error::{Error, Result};
use crate::primitives::bilinear_resize;
use crate::tensor::{Scalar, Tensor};

pub const MIN_IMAGE_SIDE: usize = 8;

/// RGB image with values in `[0, 1]`, stored channel-first as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let (c, h, w) = data.chw()?;
        if c != 3 {
            return Err(Error::shape(format!("image needs 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::arg(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Builds an image from interleaved `H × W × 3` samples.
    pub fn from_hwc(height: usize, width: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * 3,
                hwc.len()
            )));
        }
        let hw = height * width;
        let mut chw = vec![0.0; 3 * hw];
        for (p, px) in hwc.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * hw + p] = px[c];
            }
        }
        Self::new(Tensor::new(&[3, height, width], chw)?)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(&[3, height, width], value))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    /// Interleaved `H × W × 3` samples.
    pub fn to_hwc(&self) -> Vec<f32> {
        let hw = self.height() * self.width();
        let d = self.data.data();
        (0..hw).flat_map(|p| [d[p], d[hw + p], d[2 * hw + p]]).collect()
    }

    pub fn mean(&self) -> f32 {
        self.data.sum() / self.data.len() as f32
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        let r = bilinear_resize(&self.data, height, width)?;
        Self::new(r.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Binary mask with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::arg("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value as u8; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self { height, width, data }
    }

    /// Thresholds a real map: values `> threshold` become foreground.
    pub fn from_threshold<T: Scalar>(map: &Tensor<T>, threshold: T) -> Result<Self> {
        let (h, w) = match map.shape() {
            &[h, w] | &[1, h, w] => (h, w),
            s => return Err(Error::shape(format!("cannot threshold shape {s:?}"))),
        };
        let data = map.data().iter().map(|&v| (v > threshold) as u8).collect();
        Self::new(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_foreground() as f64 / self.data.len() as f64
    }

    pub fn invert(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `[H, W]` real tensor with 0/1 entries.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| {
            if self.data[i] == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Bilinear resize to a feature grid, keeping the real-valued result.
    pub fn resized<T: Scalar>(&self, height: usize, width: usize) -> Result<Tensor<T>> {
        bilinear_resize(&self.to_tensor::<T>(), height, width)
    }

    /// Bilinear resize followed by the `> 0.5` threshold.
    pub fn downsample(&self, height: usize, width: usize) -> Result<Self> {
        let r = self.resized::<f64>(height, width)?;
        Self::from_threshold(&r, 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Rgb,
    Ref,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Block(u8),
    Mid,
    High,
}

/// Real `[C, H', W']` feature map tagged with its level and branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub data: Tensor<T>,
    pub level: Level,
    pub branch: Branch,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>, level: Level, branch: Branch) -> Result<Self> {
        let (c, h, w) = data.chw()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty feature map {c}x{h}x{w}")));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite(format!("{level:?}/{branch:?} feature map")));
        }
        Ok(Self { data, level, branch })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Foreground,
    Background,
}

/// Class embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T = f32> {
    pub data: Vec<T>,
    pub polarity: Polarity,
}

impl<T: Scalar> Prototype<T> {
    pub fn new(data: Vec<T>, polarity: Polarity) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype".into()));
        }
        Ok(Self { data, polarity })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(image: ImageTensor, mask: BinaryMask) -> Result<Self> {
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::shape(format!(
                "image {}x{} paired with mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { image, mask })
    }
}

/// K annotated support images and one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    support: Vec<Sample>,
    query: Sample,
}

impl Episode {
    pub fn new(support: Vec<Sample>, query: Sample) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::arg("episode needs at least one support sample"));
        }
        let dims = (query.image.height(), query.image.width());
        for (k, s) in support.iter().enumerate() {
            if (s.image.height(), s.image.width()) != dims {
                return Err(Error::shape(format!(
                    "support {k} is {}x{}, query is {}x{}",
                    s.image.height(),
                    s.image.width(),
                    dims.0,
                    dims.1
                )));
            }
            if s.mask.count_foreground() == 0 {
                return Err(Error::arg(format!("support mask {k} is empty")));
            }
        }
        Ok(Self { support, query })
    }

    pub fn support(&self) -> &[Sample] {
        &self.support
    }

    pub fn query(&self) -> &Sample {
        &self.query
    }

    pub fn shot_count(&self) -> usize {
        self.support.len()
    }

    pub fn height(&self) -> usize {
        self.query.image.height()
    }

    pub fn width(&self) -> usize {
        self.query.image.width()
    }
}
