//! PNG reading and atomic PNG writing.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{BinaryMask, ImageTensor};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let hwc: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::from_hwc(h as usize, w as usize, &hwc)
}

/// Single-channel image as a `[H, W]` tensor in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sibling temporary path used for write-then-rename.
fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = temp_path(path);
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |tmp| Ok(fs::write(tmp, bytes)?))
}

pub fn write_rgb(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let raw: Vec<u8> = image.to_hwc().into_iter().map(to_u8).collect();
    let buf: RgbImage =
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).ok_or_else(|| Error::shape("rgb buffer size"))?;
    write_atomic(path, |tmp| {
        buf.save_with_format(tmp, image::ImageFormat::Png)
            .map_err(image_err(path))
    })
}

/// Writes a `[H, W]` (or `[1, H, W]`) map in `[0, 1]` as 8-bit grayscale.
pub fn write_gray(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = match map.shape() {
        &[h, w] | &[1, h, w] => (h, w),
        s => return Err(Error::shape(format!("grayscale map shape {s:?}"))),
    };
    let raw: Vec<u8> = map.data().iter().map(|&v| to_u8(v)).collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::shape("gray buffer size"))?;
    write_atomic(path, |tmp| {
        buf.save_with_format(tmp, image::ImageFormat::Png)
            .map_err(image_err(path))
    })
}

/// Writes a mask with foreground = 255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_gray(path, &mask.to_tensor::<f32>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let hwc: Vec<f32> = (0..10 * 12 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = ImageTensor::from_hwc(10, 12, &hwc).unwrap();
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        let back = read_rgb(&p).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-6);

        let mask = BinaryMask::from_fn(10, 12, |y, x| (x + y) % 3 == 0);
        let mp = dir.path().join("m.png");
        write_mask(&mp, &mask).unwrap();
        let g = read_gray(&mp).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(BinaryMask::from_threshold(&g, 0.5).unwrap(), mask);
        assert!(!dir.path().join(format!("m.png.tmp{}", std::process::id())).exists());
    }
}
