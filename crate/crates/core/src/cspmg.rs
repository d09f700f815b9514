//! Cross-similarity prior mask generation.
//!
//! Every query pixel of the high-level features is compared by cosine
//! similarity with every foreground pixel of the masked support features;
//! the per-pixel average is min-max normalised into a map in `[0, 1)`.
//! Doing this for the four (query branch, support branch) pairs yields four
//! component maps, which a 1×1 convolution and a two-way softmax fuse into
//! the query prior mask.
//!
//! The average over support pixels factors as `q̂_i · mean_j ŝ_j`, so the
//! dense comparison costs `O(N·C)` rather than `O(N²·C)`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BinaryMask, FeatureMap};

/// Stabiliser of the min-max normalisation.
pub const MINMAX_MU: f64 = 1e-6;

/// Resized mask values above this count as foreground cells.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Order of the four component maps: `(query branch, support branch)`.
pub const COMPONENT_ORDER: [(crate::Branch, crate::Branch); 4] = {
    use crate::Branch::{Ref, Rgb};
    [(Rgb, Rgb), (Rgb, Ref), (Ref, Rgb), (Ref, Ref)]
};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorMask<T = f32> {
    /// `[H_h, W_h]` foreground probability.
    pub data: Tensor<T>,
    pub components: Option<[Tensor<T>; 4]>,
}

/// Mask resized to a feature grid, with its foreground cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMask<T> {
    /// `[1, h, w]` bilinear-resized mask.
    pub resized: Tensor<T>,
    pub foreground: Vec<usize>,
}

impl<T: Scalar> GridMask<T> {
    pub fn new(mask: &BinaryMask, h: usize, w: usize) -> Result<Self> {
        let resized = mask.resized::<T>(h, w)?.reshape(&[1, h, w])?;
        let thr = T::lit(MASK_THRESHOLD);
        let foreground: Vec<usize> = resized
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > thr)
            .map(|(i, _)| i)
            .collect();
        if foreground.is_empty() {
            return Err(Error::EmptyForeground { height: h, width: w });
        }
        Ok(Self { resized, foreground })
    }

    /// Indicator weights of the foreground cells.
    pub fn indicator(&self) -> Vec<T> {
        let mut w = vec![T::zero(); self.resized.len()];
        for &i in &self.foreground {
            w[i] = T::one();
        }
        w
    }
}

/// `h_s ⊙ δ(M^s)` as a graph node plus the foreground cells.
pub fn mask_high_features_var<T: Scalar>(g: &mut Graph<T>, high: Var, mask: &BinaryMask) -> Result<(Var, GridMask<T>)> {
    let (_, h, w) = g.value(high).chw()?;
    let grid = GridMask::new(mask, h, w)?;
    let m = g.constant(grid.resized.clone());
    let masked = g.scale_spatial(high, m)?;
    Ok((masked, grid))
}

/// Mean normalised support vector over the foreground cells: `[C, 1, 1]`.
pub fn support_direction<T: Scalar>(g: &mut Graph<T>, masked_support: Var, grid: &GridMask<T>) -> Result<Var> {
    let n = g.normalize(masked_support)?;
    g.weighted_mean(n, &grid.indicator())
}

/// Per-query-pixel average cosine similarity against the support foreground:
/// a `[1, H, W]` node.
pub fn cross_similarity_var<T: Scalar>(
    g: &mut Graph<T>,
    query: Var,
    masked_support: Var,
    grid: &GridMask<T>,
) -> Result<Var> {
    if g.value(query).shape() != g.value(masked_support).shape() {
        return Err(Error::shape(format!(
            "query {:?} vs support {:?}",
            g.value(query).shape(),
            g.value(masked_support).shape()
        )));
    }
    let dir = support_direction(g, masked_support, grid)?;
    let q = g.normalize(query)?;
    g.dot_map(dir, q)
}

pub fn mask_high_features<T: Scalar>(high: &FeatureMap<T>, mask: &BinaryMask) -> Result<(FeatureMap<T>, Vec<usize>)> {
    let mut g = Graph::new();
    let x = g.constant(high.data.clone());
    let (m, grid) = mask_high_features_var(&mut g, x, mask)?;
    let fm = FeatureMap::new(g.value(m).clone(), high.level, high.branch)?;
    Ok((fm, grid.foreground))
}

pub fn cross_similarity<T: Scalar>(
    query: &FeatureMap<T>,
    masked_support: &FeatureMap<T>,
    foreground: &[usize],
) -> Result<Vec<T>> {
    if foreground.is_empty() {
        return Err(Error::EmptyForeground {
            height: masked_support.height(),
            width: masked_support.width(),
        });
    }
    let n = masked_support.height() * masked_support.width();
    if let Some(&bad) = foreground.iter().find(|&&i| i >= n) {
        return Err(Error::arg(format!("foreground index {bad} outside grid of {n}")));
    }
    let mut indicator = vec![T::zero(); n];
    for &i in foreground {
        indicator[i] = T::one();
    }
    let grid = GridMask {
        resized: Tensor::zeros(&[1, masked_support.height(), masked_support.width()]),
        foreground: foreground.to_vec(),
    };
    let mut g = Graph::new();
    let q = g.constant(query.data.clone());
    let s = g.constant(masked_support.data.clone());
    let v = cross_similarity_var(&mut g, q, s, &grid)?;
    Ok(g.value(v).data().to_vec())
}

/// `(V - min V) / (max V - min V + mu)`.
pub fn normalize_minmax<T: Scalar>(v: &Tensor<T>, mu: T) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(v.clone());
    let y = g.minmax(x, mu);
    g.value(y).clone()
}

/// 1×1 convolution from the four component maps to foreground/background
/// logits, followed by a softmax over those two channels.
#[derive(Clone, Copy, Debug)]
pub struct PriorFusion {
    pub conv: Conv2d,
}

impl PriorFusion {
    /// Initialised so the foreground logit is the mean component and the
    /// background logit is zero.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let conv = Conv2d::pointwise(store, "cspmg.fusion", 4, 2, rng);
        let mut w = vec![T::zero(); 8];
        w[..4].fill(T::lit(0.25));
        store.set(conv.weight, Tensor::new(&[2, 4, 1, 1], w).unwrap()).unwrap();
        Self { conv }
    }

    /// Returns the `[1, H, W]` foreground probability node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, components: &[Var; 4]) -> Result<Var> {
        let probs = self.probabilities(g, store, components)?;
        g.slice_channels(probs, 0, 1)
    }

    /// `[2, H, W]` foreground/background probabilities.
    pub fn probabilities<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        components: &[Var; 4],
    ) -> Result<Var> {
        let cat = g.concat(components)?;
        let logits = self.conv.forward(g, store, cat)?;
        g.softmax_channels(logits)
    }

    pub fn fuse<T: Scalar>(&self, store: &ParamStore<T>, components: [Tensor<T>; 4]) -> Result<PriorMask<T>> {
        let (h, w) = match components[0].shape() {
            &[h, w] | &[1, h, w] => (h, w),
            s => return Err(Error::shape(format!("component shape {s:?}"))),
        };
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(4);
        for c in &components {
            vars.push(g.constant(c.clone().reshape(&[1, h, w])?));
        }
        let vars: [Var; 4] = vars.try_into().unwrap();
        let fg = self.forward(&mut g, store, &vars)?;
        Ok(PriorMask {
            data: g.value(fg).clone().reshape(&[h, w])?,
            components: Some(components),
        })
    }
}

/// High-level features of one image, both branches.
#[derive(Clone, Copy, Debug)]
pub struct HighPair {
    pub rgb: Var,
    pub refl: Var,
}

impl HighPair {
    fn get(&self, b: crate::Branch) -> Var {
        match b {
            crate::Branch::Rgb => self.rgb,
            crate::Branch::Ref => self.refl,
        }
    }
}

/// Graph outputs of prior generation.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    /// `[1, H_h, W_h]` foreground probability.
    pub prior: Var,
    /// Shot-averaged component maps in [`COMPONENT_ORDER`].
    pub components: [Var; 4],
}

/// Builds the four shot-averaged component maps and fuses them.
pub fn generate_prior_var<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fusion: &PriorFusion,
    support: &[(HighPair, &BinaryMask)],
    query: HighPair,
) -> Result<PriorVars> {
    if support.is_empty() {
        return Err(Error::arg("prior generation needs at least one shot"));
    }
    let mu = T::lit(MINMAX_MU);
    let q_rgb = g.normalize(query.rgb)?;
    let q_ref = g.normalize(query.refl)?;
    let mut per_component: [Vec<Var>; 4] = Default::default();
    for (pair, mask) in support {
        let mut dirs = Vec::with_capacity(2);
        for b in [crate::Branch::Rgb, crate::Branch::Ref] {
            let (masked, grid) = mask_high_features_var(g, pair.get(b), mask)?;
            dirs.push((b, support_direction(g, masked, &grid)?));
        }
        for (k, &(qa, sb)) in COMPONENT_ORDER.iter().enumerate() {
            let q = if qa == crate::Branch::Rgb { q_rgb } else { q_ref };
            let dir = dirs.iter().find(|(b, _)| *b == sb).unwrap().1;
            if g.value(dir).len() != g.value(q).shape()[0] {
                return Err(Error::shape("support and query channel counts differ"));
            }
            let v = g.dot_map(dir, q)?;
            per_component[k].push(g.minmax(v, mu));
        }
    }
    let mut components = [query.rgb; 4];
    for (slot, maps) in components.iter_mut().zip(&per_component) {
        *slot = g.average(maps)?;
    }
    let prior = fusion.forward(g, store, &components)?;
    Ok(PriorVars { prior, components })
}
