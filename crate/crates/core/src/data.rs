//! Datasets, synthetic cracks, low-light degradation, augmentation and
//! episode sampling.
//!
//! On-disk layout: `<root>/images/<stem>.png` with a matching single-channel
//! `<root>/masks/<stem>.png` whose foreground is 255.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;
use crate::types::{BinaryMask, Episode, ImageTensor, Sample};

/// Loaded mask values above this become foreground.
pub const MASK_LOAD_THRESHOLD: f32 = 127.0 / 255.0;

pub const MIN_SYNTH_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub stem: String,
    pub image_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    pub sample: Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrackDataset {
    pub items: Vec<DatasetItem>,
    pub split: Split,
    pub resolution: (usize, usize),
}

impl CrackDataset {
    /// In-memory dataset; items are named `000000`, `000001`, ...
    pub fn from_samples(samples: Vec<Sample>, split: Split) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Load("dataset is empty".into()))?;
        let resolution = (first.image.height(), first.image.width());
        if let Some(s) = samples
            .iter()
            .find(|s| (s.image.height(), s.image.width()) != resolution)
        {
            return Err(Error::shape(format!(
                "mixed resolutions {resolution:?} and {}x{}",
                s.image.height(),
                s.image.width()
            )));
        }
        let items = samples
            .into_iter()
            .enumerate()
            .map(|(i, sample)| DatasetItem {
                stem: format!("{i:06}"),
                image_path: None,
                mask_path: None,
                sample,
            })
            .collect();
        Ok(Self {
            items,
            split,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.items[i].sample
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_mask(path: &Path, resolution: (usize, usize)) -> Result<BinaryMask> {
    let raw = imageio::read_gray(path)?;
    let (h, w) = resolution;
    let resized = crate::primitives::bilinear_resize(&raw, h, w)?;
    BinaryMask::from_threshold(&resized, MASK_LOAD_THRESHOLD)
}

/// Loads `<root>/images` and `<root>/masks`, resizing to `resolution`.
pub fn load_dataset(root: &Path, resolution: (usize, usize), split: Split) -> Result<CrackDataset> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(Error::Load(format!(
            "{} must contain images/ and masks/",
            root.display()
        )));
    }
    let images = png_stems(&images_dir)?;
    if images.is_empty() {
        return Err(Error::Load(format!("no images in {}", images_dir.display())));
    }
    let (h, w) = resolution;
    let mut items = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let mask_path = masks_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::Load(format!("missing mask for image '{stem}'")));
        }
        let image = imageio::read_rgb(&image_path)?;
        let image = if (image.height(), image.width()) == (h, w) {
            image
        } else {
            image.resize(h, w)?
        };
        let mask = load_mask(&mask_path, resolution)?;
        items.push(DatasetItem {
            stem,
            image_path: Some(image_path),
            mask_path: Some(mask_path),
            sample: Sample::new(image, mask)?,
        });
    }
    Ok(CrackDataset {
        items,
        split,
        resolution,
    })
}

/// Writes samples in the dataset layout as `<stem>.png` pairs.
pub fn write_dataset(root: &Path, items: &[(String, Sample)]) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for (stem, s) in items {
        imageio::write_rgb(&root.join("images").join(format!("{stem}.png")), &s.image)?;
        imageio::write_mask(&root.join("masks").join(format!("{stem}.png")), &s.mask)?;
    }
    Ok(())
}

/// Procedural crack image: a smoothly textured background with one to
/// three dark random-walk strokes of width 1–5 px. The mask is the stroke
/// support.
pub fn synth_crack(seed: u64, size: (usize, usize), texture_level: f32) -> Result<Sample> {
    let (h, w) = size;
    if h < MIN_SYNTH_SIDE || w < MIN_SYNTH_SIDE {
        return Err(Error::arg(format!(
            "synthetic images must be at least {MIN_SYNTH_SIDE}x{MIN_SYNTH_SIDE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as f32;

    let base: f32 = rng.random_range(0.45..0.7);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
    let mut shade = vec![0.0f32; h * w];
    for _ in 0..12 {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let sigma = rng.random_range(side / 16.0..side / 5.0);
        let amp = rng.random_range(-0.25..0.25) * texture_level;
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (p, s) in shade.iter_mut().enumerate() {
            let dy = (p / w) as f32 - cy;
            let dx = (p % w) as f32 - cx;
            *s += amp * (-(dy * dy + dx * dx) * inv).exp();
        }
    }
    let background: Vec<f32> = shade.iter().map(|s| (base + s).clamp(0.15, 0.95)).collect();

    let mut mask = vec![0u8; h * w];
    let mut darkness = vec![1.0f32; h * w];
    let strokes = rng.random_range(1..=3);
    for _ in 0..strokes {
        let width = rng.random_range(1..=5usize);
        let dark = rng.random_range(0.25..0.45f32);
        let step = 3.0f32;
        let steps = rng.random_range((side / 6.0) as usize..=(side / 3.0) as usize);
        let mut y = rng.random_range(0.2 * h as f32..0.8 * h as f32);
        let mut x = rng.random_range(0.2 * w as f32..0.8 * w as f32);
        let mut heading = rng.random_range(0.0..std::f32::consts::TAU);
        let turn = Normal::new(0.0f32, 0.3).unwrap();
        for _ in 0..steps {
            heading += turn.sample(&mut rng);
            let (ny, nx) = (y + step * heading.sin(), x + step * heading.cos());
            stamp_segment(&mut mask, &mut darkness, (h, w), (y, x), (ny, nx), width, dark);
            y = ny;
            x = nx;
        }
    }

    let mut hwc = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for t in tint {
            hwc.push(((background[p] + t).clamp(0.0, 1.0)) * darkness[p]);
        }
    }
    Sample::new(ImageTensor::from_hwc(h, w, &hwc)?, BinaryMask::new(h, w, mask)?)
}

fn stamp_segment(
    mask: &mut [u8],
    darkness: &mut [f32],
    (h, w): (usize, usize),
    from: (f32, f32),
    to: (f32, f32),
    width: usize,
    dark: f32,
) {
    let r = width as f32 / 2.0;
    let ri = r.ceil() as isize;
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let n = (len / 0.25).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f32 / n as f32;
        let py = from.0 + t * (to.0 - from.0);
        let px = from.1 + t * (to.1 - from.1);
        let (cy, cx) = (py.round() as isize, px.round() as isize);
        for yy in cy - ri..=cy + ri {
            for xx in cx - ri..=cx + ri {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let centre = yy == cy && xx == cx;
                let d2 = (yy as f32 - py).powi(2) + (xx as f32 - px).powi(2);
                if centre || (width > 1 && d2 <= r * r) {
                    let p = yy as usize * w + xx as usize;
                    mask[p] = 1;
                    darkness[p] = darkness[p].min(dark);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowLightParams {
    pub gamma: f32,
    pub scale: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for LowLightParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            scale: 0.5,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl LowLightParams {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=6.0).contains(&self.gamma) {
            return Err(Error::arg(format!("gamma {} outside [1, 6]", self.gamma)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::arg(format!("scale {} outside (0, 1]", self.scale)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::arg("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// `clamp(scale · I^gamma + N(0, sigma), 0, 1)` with seeded noise.
pub fn lowlight_transform(image: &ImageTensor, p: &LowLightParams) -> Result<ImageTensor> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0f32, p.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let out = image.tensor().map(|v| p.scale * v.powf(p.gamma));
    let data: Vec<f32> = out
        .data()
        .iter()
        .map(|&v| {
            let n = if p.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (v + n).clamp(0.0, 1.0)
        })
        .collect();
    ImageTensor::new(Tensor::new(image.tensor().shape(), data)?)
}

/// Left-right mirror of an image and its mask.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let src = sample.image.tensor();
    let img = Tensor::from_fn(&[3, h, w], |i| {
        let x = i % w;
        src.data()[i - x + (w - 1 - x)]
    });
    let mask = BinaryMask::from_fn(h, w, |y, x| sample.mask.get(y, w - 1 - x));
    Sample {
        image: ImageTensor::new(img).expect("flip preserves range"),
        mask,
    }
}

/// Flips image and mask together with probability 0.5 (seeded).
pub fn augment_flip(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

/// Indices of a seeded episode: K supports then the query. Items with an
/// empty mask are never drawn.
pub fn sample_episode_indices(dataset: &CrackDataset, shots: usize, seed: u64) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(Error::arg("shots must be at least 1"));
    }
    if dataset.len() < shots + 1 {
        return Err(Error::arg(format!(
            "{}-shot episodes need {} items, dataset has {}",
            shots,
            shots + 1,
            dataset.len()
        )));
    }
    let pool: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.sample(i).mask.count_foreground() > 0)
        .collect();
    if pool.len() < shots + 1 {
        return Err(Error::arg(format!(
            "only {} items have a non-empty mask, need {}",
            pool.len(),
            shots + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), shots + 1)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

pub fn sample_episode(dataset: &CrackDataset, shots: usize, seed: u64) -> Result<Episode> {
    let idx = sample_episode_indices(dataset, shots, seed)?;
    let support = idx[..shots].iter().map(|&i| dataset.sample(i).clone()).collect();
    Episode::new(support, dataset.sample(idx[shots]).clone())
}

/// Builds a synthetic dataset, optionally degraded to low light.
pub fn synth_dataset(
    count: usize,
    size: (usize, usize),
    seed: u64,
    lowlight: Option<LowLightParams>,
) -> Result<Vec<(String, Sample)>> {
    (0..count)
        .map(|i| {
            let item_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut s = synth_crack(item_seed, size, 1.0)?;
            if let Some(mut p) = lowlight {
                p.seed = p.seed.wrapping_add(item_seed);
                s.image = lowlight_transform(&s.image, &p)?;
            }
            Ok((format!("{i:06}"), s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_crack(7, (64, 80), 1.0).unwrap();
        let b = synth_crack(7, (64, 80), 1.0).unwrap();
        assert_eq!(a, b);
        assert!(synth_crack(7, (32, 80), 1.0).is_err());
    }

    #[test]
    fn synth_foreground_fraction_in_range() {
        for seed in 0..100 {
            let s = synth_crack(seed, (128, 128), 1.0).unwrap();
            let f = s.mask.foreground_fraction();
            assert!(f > 0.0 && f < 0.15, "seed {seed}: fraction {f}");
        }
    }

    #[test]
    fn strokes_darker_than_local_background() {
        for seed in 0..20 {
            let s = synth_crack(seed, (96, 96), 1.0).unwrap();
            let (h, w) = (96usize, 96usize);
            let lum = |y: usize, x: usize| (0..3).map(|c| s.image.tensor().at(c, y, x)).sum::<f32>() / 3.0;
            for y in 0..h {
                for x in 0..w {
                    if !s.mask.get(y, x) {
                        continue;
                    }
                    let mut sum = 0.0;
                    let mut n = 0;
                    for yy in y.saturating_sub(7)..(y + 8).min(h) {
                        for xx in x.saturating_sub(7)..(x + 8).min(w) {
                            if !s.mask.get(yy, xx) {
                                sum += lum(yy, xx);
                                n += 1;
                            }
                        }
                    }
                    if n > 0 {
                        assert!(lum(y, x) < sum / n as f32, "seed {seed} at ({y}, {x})");
                    }
                }
            }
        }
    }

    #[test]
    fn lowlight_examples() {
        let img = ImageTensor::filled(8, 8, 0.8).unwrap();
        let id = LowLightParams {
            gamma: 1.0,
            scale: 1.0,
            noise_sigma: 0.0,
            seed: 1,
        };
        assert_eq!(lowlight_transform(&img, &id).unwrap(), img);
        let dark = LowLightParams {
            gamma: 3.0,
            scale: 0.5,
            noise_sigma: 0.0,
            seed: 1,
        };
        let out = lowlight_transform(&img, &dark).unwrap();
        assert!(out.tensor().data().iter().all(|&v| (v - 0.256).abs() < 1e-6));
        assert!(out.mean() < img.mean());
        assert!(lowlight_transform(&img, &LowLightParams { gamma: 7.0, ..dark }).is_err());
    }

    #[test]
    fn lowlight_monotone_in_gamma_without_noise() {
        let s = synth_crack(3, (64, 64), 1.0).unwrap();
        let mut prev = s.image.clone();
        for g in [1.0, 1.5, 2.0, 3.0, 6.0] {
            let p = LowLightParams {
                gamma: g,
                scale: 0.7,
                noise_sigma: 0.0,
                seed: 0,
            };
            let out = lowlight_transform(&s.image, &p).unwrap();
            if g > 1.0 {
                for (a, b) in out.tensor().data().iter().zip(prev.tensor().data()) {
                    assert!(a <= b);
                }
            }
            prev = out;
        }
    }

    #[test]
    fn flip_is_an_involution_and_mirrors_columns() {
        let s = synth_crack(1, (64, 64), 1.0).unwrap();
        let f = flip_horizontal(&s);
        assert_eq!(flip_horizontal(&f), s);
        for c in 0..3 {
            for y in [0, 17, 63] {
                for x in [0, 5, 63] {
                    assert_eq!(f.image.tensor().at(c, y, x), s.image.tensor().at(c, y, 63 - x));
                    assert_eq!(f.mask.get(y, x), s.mask.get(y, 63 - x));
                }
            }
        }
    }

    #[test]
    fn augment_applies_one_decision_to_both() {
        let s = synth_crack(2, (64, 64), 1.0).unwrap();
        let mut flipped = 0;
        for seed in 0..40 {
            let a = augment_flip(&s, seed);
            if a == s {
                continue;
            }
            assert_eq!(a, flip_horizontal(&s));
            flipped += 1;
        }
        assert!(flipped > 5 && flipped < 35);
    }

    fn tiny_dataset(n: usize) -> CrackDataset {
        let samples = (0..n).map(|i| synth_crack(i as u64, (64, 64), 1.0).unwrap()).collect();
        CrackDataset::from_samples(samples, Split::Train).unwrap()
    }

    #[test]
    fn episodes_are_deterministic_and_disjoint() {
        let ds = tiny_dataset(8);
        let a = sample_episode_indices(&ds, 1, 42).unwrap();
        assert_eq!(a, sample_episode_indices(&ds, 1, 42).unwrap());
        for seed in 0..1000 {
            let idx = sample_episode_indices(&ds, 5, seed).unwrap();
            assert_eq!(idx.len(), 6);
            let mut sorted = idx.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 6, "seed {seed}: {idx:?}");
        }
        let ep = sample_episode(&ds, 5, 3).unwrap();
        assert_eq!(ep.shot_count(), 5);
        assert!(sample_episode(&tiny_dataset(2), 2, 0).is_err());
    }

    #[test]
    fn empty_masks_are_never_drawn() {
        let mut samples: Vec<Sample> = (0..4).map(|i| synth_crack(i, (64, 64), 1.0).unwrap()).collect();
        samples[1].mask = BinaryMask::filled(64, 64, false);
        let ds = CrackDataset::from_samples(samples, Split::Train).unwrap();
        for seed in 0..200 {
            assert!(!sample_episode_indices(&ds, 2, seed).unwrap().contains(&1));
        }
        assert!(sample_episode_indices(&ds, 3, 0).is_err());
    }

    #[test]
    fn load_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<(String, Sample)> = ["c", "a", "b"]
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), synth_crack(i as u64, (64, 64), 1.0).unwrap()))
            .collect();
        write_dataset(dir.path(), &items).unwrap();
        let ds = load_dataset(dir.path(), (64, 64), Split::Test).unwrap();
        let stems: Vec<_> = ds.items.iter().map(|i| i.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b", "c"]);
        assert_eq!(ds.items[0].sample.mask, items[1].1.mask);

        let big = load_dataset(dir.path(), (32, 40), Split::Test).unwrap();
        assert_eq!(big.items[0].sample.image.height(), 32);
        assert_eq!(big.items[0].sample.image.width(), 40);

        std::fs::remove_file(dir.path().join("masks/b.png")).unwrap();
        let err = load_dataset(dir.path(), (64, 64), Split::Test).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");

        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(empty.path().join("images")).unwrap();
        std::fs::create_dir_all(empty.path().join("masks")).unwrap();
        assert!(load_dataset(empty.path(), (64, 64), Split::Test).is_err());
    }
}
