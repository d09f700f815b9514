//! Prototype extraction, fusion, self-support refinement and cosine metric
//! prediction.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BinaryMask, FeatureMap, Polarity, Prototype};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypePair<T = f32> {
    pub foreground: Prototype<T>,
    pub background: Prototype<T>,
}

impl<T: Scalar> PrototypePair<T> {
    pub fn new(foreground: Prototype<T>, background: Prototype<T>) -> Result<Self> {
        if foreground.dim() != background.dim() {
            return Err(Error::shape(format!(
                "prototype dims {} vs {}",
                foreground.dim(),
                background.dim()
            )));
        }
        Ok(Self { foreground, background })
    }
}

/// Foreground and background prototypes as `[C, 1, 1]` nodes.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub fg: Var,
    pub bg: Var,
}

/// Self-support refinement constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfSupport {
    pub fg_threshold: f64,
    pub bg_threshold: f64,
    /// Weight of the support prototype in the blend.
    pub blend: f64,
    pub temperature: f64,
}

impl Default for SelfSupport {
    fn default() -> Self {
        Self {
            fg_threshold: 0.7,
            bg_threshold: 0.7,
            blend: 0.5,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Cells of the feature grid selected by a mask for one polarity.
pub fn grid_selection(mask: &BinaryMask, h: usize, w: usize, polarity: Polarity) -> Result<Vec<f64>> {
    let grid = mask.downsample(h, w)?;
    let want = matches!(polarity, Polarity::Foreground) as u8;
    let sel: Vec<f64> = grid.data().iter().map(|&v| if v == want { 1.0 } else { 0.0 }).collect();
    if sel.iter().all(|&v| v == 0.0) {
        return Err(match polarity {
            Polarity::Foreground => Error::EmptyForeground { height: h, width: w },
            Polarity::Background => Error::EmptyBackground { height: h, width: w },
        });
    }
    Ok(sel)
}

/// Masked average pooling as a graph node.
pub fn masked_average_pool_var<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    mask: &BinaryMask,
    polarity: Polarity,
) -> Result<Var> {
    let (_, h, w) = g.value(features).chw()?;
    let sel: Vec<T> = grid_selection(mask, h, w, polarity)?.into_iter().map(T::lit).collect();
    g.weighted_mean(features, &sel)
}

pub fn masked_average_pool<T: Scalar>(
    features: &FeatureMap<T>,
    mask: &BinaryMask,
    polarity: Polarity,
) -> Result<Prototype<T>> {
    let mut g = Graph::new();
    let x = g.constant(features.data.clone());
    let p = masked_average_pool_var(&mut g, x, mask, polarity)?;
    Prototype::new(g.value(p).data().to_vec(), polarity)
}

/// Gated per-channel convex combination of the RGB and reflectance prototypes.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeFusion {
    pub gate: Mlp,
}

impl PrototypeFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: Mlp::new(store, "prototype.fusion_gate", 2 * channels, channels, channels, rng),
        }
    }

    /// `σ(MLP([P_s, P_sr]))`.
    pub fn gate_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rgb: Var, refl: Var) -> Result<Var> {
        let cat = g.concat(&[rgb, refl])?;
        let logits = self.gate.forward(g, store, cat)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rgb: Var, refl: Var) -> Result<Var> {
        let gate = self.gate_var(g, store, rgb, refl)?;
        convex_combine(g, rgb, refl, gate)
    }

    pub fn fuse_prototypes<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rgb: &Prototype<T>,
        refl: &Prototype<T>,
    ) -> Result<Prototype<T>> {
        if rgb.dim() != refl.dim() {
            return Err(Error::shape("prototype dims differ"));
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(rgb.data.clone()));
        let b = g.constant(Tensor::vector(refl.data.clone()));
        let y = self.forward(&mut g, store, a, b)?;
        Prototype::new(g.value(y).data().to_vec(), rgb.polarity)
    }
}

/// `gate ⊙ a + (1 - gate) ⊙ b`.
pub fn convex_combine<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, gate: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let scaled = g.mul(gate, diff)?;
    g.add(b, scaled)
}

/// Per-channel convex combination with an explicit gate.
pub fn fuse_with_gate<T: Scalar>(rgb: &Prototype<T>, refl: &Prototype<T>, gate: &[T]) -> Result<Prototype<T>> {
    if rgb.dim() != refl.dim() || gate.len() != rgb.dim() {
        return Err(Error::shape("prototype/gate dims differ"));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(rgb.data.clone()));
    let b = g.constant(Tensor::vector(refl.data.clone()));
    let k = g.constant(Tensor::vector(gate.to_vec()));
    let y = convex_combine(&mut g, a, b, k)?;
    Prototype::new(g.value(y).data().to_vec(), rgb.polarity)
}

/// `[2, H, W]` class probabilities from temperature-scaled cosine logits;
/// channel 0 is foreground.
pub fn predict_var<T: Scalar>(g: &mut Graph<T>, protos: PairVars, features: Var, temperature: f64) -> Result<Var> {
    let f = g.normalize(features)?;
    let fg = g.normalize(protos.fg)?;
    let bg = g.normalize(protos.bg)?;
    let cf = g.dot_map(fg, f)?;
    let cb = g.dot_map(bg, f)?;
    let logits = g.concat(&[cf, cb])?;
    let logits = g.affine(logits, T::lit(temperature), T::zero());
    g.softmax_channels(logits)
}

/// Refines both prototypes with the confidently classified query cells.
pub fn self_support_var<T: Scalar>(
    g: &mut Graph<T>,
    protos: PairVars,
    features: Var,
    params: &SelfSupport,
) -> Result<PairVars> {
    let probs = predict_var(g, protos, features, params.temperature)?;
    let (_, h, w) = g.value(features).chw()?;
    let hw = h * w;
    let pv = g.value(probs).data().to_vec();
    let refine = |g: &mut Graph<T>, proto: Var, probs: &[T], threshold: f64| -> Result<Var> {
        let thr = T::lit(threshold);
        let sel: Vec<T> = probs
            .iter()
            .map(|&p| if p >= thr { T::one() } else { T::zero() })
            .collect();
        if sel.iter().all(|&v| v == T::zero()) {
            return Ok(proto);
        }
        let own = g.weighted_mean(features, &sel)?;
        let a = g.affine(proto, T::lit(params.blend), T::zero());
        let b = g.affine(own, T::lit(1.0 - params.blend), T::zero());
        g.add(a, b)
    };
    let fg = refine(g, protos.fg, &pv[..hw], params.fg_threshold)?;
    let bg = refine(g, protos.bg, &pv[hw..], params.bg_threshold)?;
    Ok(PairVars { fg, bg })
}

fn pair_vars<T: Scalar>(g: &mut Graph<T>, pair: &PrototypePair<T>) -> PairVars {
    PairVars {
        fg: g.constant(Tensor::vector(pair.foreground.data.clone())),
        bg: g.constant(Tensor::vector(pair.background.data.clone())),
    }
}

pub fn self_support_prototype<T: Scalar>(
    pair: &PrototypePair<T>,
    features: &FeatureMap<T>,
    params: &SelfSupport,
) -> Result<PrototypePair<T>> {
    let mut g = Graph::new();
    let p = pair_vars(&mut g, pair);
    let f = g.constant(features.data.clone());
    let out = self_support_var(&mut g, p, f, params)?;
    PrototypePair::new(
        Prototype::new(g.value(out.fg).data().to_vec(), Polarity::Foreground)?,
        Prototype::new(g.value(out.bg).data().to_vec(), Polarity::Background)?,
    )
}

/// Class probabilities `[2, H, W]`, optionally upsampled to `upsample`.
pub fn predict_mask<T: Scalar>(
    pair: &PrototypePair<T>,
    features: &FeatureMap<T>,
    temperature: f64,
    upsample: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    if pair.foreground.dim() != features.channels() {
        return Err(Error::shape(format!(
            "prototype dim {} vs {} feature channels",
            pair.foreground.dim(),
            features.channels()
        )));
    }
    let mut g = Graph::new();
    let p = pair_vars(&mut g, pair);
    let f = g.constant(features.data.clone());
    let mut probs = predict_var(&mut g, p, f, temperature)?;
    if let Some((h, w)) = upsample {
        probs = g.resize(probs, h, w)?;
    }
    Ok(g.value(probs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Branch, Level};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(data: Tensor<f64>) -> FeatureMap<f64> {
        FeatureMap::new(data, Level::Mid, Branch::Rgb).unwrap()
    }

    fn proto(v: &[f64], polarity: Polarity) -> Prototype<f64> {
        Prototype::new(v.to_vec(), polarity).unwrap()
    }

    #[test]
    fn constant_features_give_that_vector() {
        let u = [0.3, -1.2, 2.0];
        let f = fm(Tensor::from_fn(&[3, 4, 4], |i| u[i / 16]));
        let mask = BinaryMask::from_fn(16, 16, |y, _| y < 6);
        let p = masked_average_pool(&f, &mask, Polarity::Foreground).unwrap();
        for (a, b) in p.data.iter().zip(u) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_cell_selection() {
        let f = fm(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let mask = BinaryMask::new(2, 2, vec![0, 0, 1, 0]).unwrap();
        let p = masked_average_pool(&f, &mask, Polarity::Foreground).unwrap();
        assert_eq!(p.data, vec![2.0, 6.0]);
        let bg = masked_average_pool(&f, &mask, Polarity::Background).unwrap();
        assert_eq!(bg.data, vec![(0.0 + 1.0 + 3.0) / 3.0, (4.0 + 5.0 + 7.0) / 3.0]);
    }

    #[test]
    fn empty_selection_errors() {
        let f = fm(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(
            masked_average_pool(&f, &BinaryMask::filled(2, 2, false), Polarity::Foreground),
            Err(Error::EmptyForeground { .. })
        ));
        assert!(matches!(
            masked_average_pool(&f, &BinaryMask::filled(2, 2, true), Polarity::Background),
            Err(Error::EmptyBackground { .. })
        ));
    }

    #[test]
    fn fusion_of_equal_points_and_saturated_gate() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pfm = PrototypeFusion::new(&mut store, 4, &mut rng);
        let p = proto(&[1.0, -2.0, 0.5, 3.0], Polarity::Foreground);
        let fused = pfm.fuse_prototypes(&store, &p, &p).unwrap();
        for (a, b) in fused.data.iter().zip(&p.data) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = proto(&[0.0, 1.0, 1.0, -1.0], Polarity::Foreground);
        assert_eq!(fuse_with_gate(&p, &q, &[1.0; 4]).unwrap().data, p.data);
    }

    #[test]
    fn closed_form_probability() {
        // cosines (1, 0) at temperature 10
        let pair = PrototypePair::new(
            proto(&[1.0, 0.0], Polarity::Foreground),
            proto(&[0.0, 1.0], Polarity::Background),
        )
        .unwrap();
        let f = fm(Tensor::new(&[2, 1, 1], vec![2.0, 0.0]).unwrap());
        let p = predict_mask(&pair, &f, 10.0, None).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0] - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn equal_cosines_give_half() {
        let pair = PrototypePair::new(
            proto(&[1.0, 0.0], Polarity::Foreground),
            proto(&[0.0, 1.0], Polarity::Background),
        )
        .unwrap();
        let f = fm(Tensor::new(&[2, 1, 1], vec![1.0, 1.0]).unwrap());
        let p = predict_mask(&pair, &f, 10.0, Some((3, 3))).unwrap();
        assert_eq!(p.shape(), &[2, 3, 3]);
        assert!(p.plane(0).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn ssp_fallback_when_nothing_confident() {
        let pair = PrototypePair::new(
            proto(&[1.0, 0.0], Polarity::Foreground),
            proto(&[0.0, 1.0], Polarity::Background),
        )
        .unwrap();
        let f = fm(Tensor::full(&[2, 2, 2], 1.0));
        let out = self_support_prototype(&pair, &f, &SelfSupport::default()).unwrap();
        assert_eq!(out, pair);
    }

    #[test]
    fn ssp_with_perfect_query() {
        let pair = PrototypePair::new(
            proto(&[2.0, 0.0], Polarity::Foreground),
            proto(&[0.0, 1.0], Polarity::Background),
        )
        .unwrap();
        let f = fm(Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 2.0 } else { 0.0 }));
        let out = self_support_prototype(&pair, &f, &SelfSupport::default()).unwrap();
        assert_eq!(out.foreground, pair.foreground);
        assert_eq!(out.background, pair.background);
    }

    #[test]
    fn ssp_zero_threshold_averages_everything() {
        let pair = PrototypePair::new(
            proto(&[1.0, 0.5], Polarity::Foreground),
            proto(&[-0.5, 1.0], Polarity::Background),
        )
        .unwrap();
        let f = fm(Tensor::from_fn(&[2, 2, 2], |i| (i as f64 * 0.7).sin()));
        let params = SelfSupport {
            fg_threshold: 0.0,
            ..SelfSupport::default()
        };
        let out = self_support_prototype(&pair, &f, &params).unwrap();
        for c in 0..2 {
            let mean = f.data.plane(c).iter().sum::<f64>() / 4.0;
            let expected = 0.5 * pair.foreground.data[c] + 0.5 * mean;
            assert!((out.foreground.data[c] - expected).abs() < 1e-15);
        }
    }
}
