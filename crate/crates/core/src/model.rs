//! The full network: one episode in, class probabilities and losses out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::cspmg::{generate_prior_var, HighPair, PriorFusion};
use crate::encoder::{image_input, BackboneConfig, BundleVars, Encoder};
use crate::error::{Error, Result};
use crate::loss::{self, LossWeights};
use crate::msfe::Msfe;
use crate::nn::{Conv2d, ParamStore};
use crate::prototype::{
    masked_average_pool_var, predict_var, self_support_var, PairVars, PrototypeFusion, SelfSupport,
};
use crate::retinex::{Decomposer, GaussianRetinex};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BinaryMask, Episode, ImageTensor, Polarity};

/// Prior value used when the prior generator is switched off.
pub const UNIFORM_PRIOR: f64 = 0.5;

/// Ablation switches. Everything on is the full model; everything off is
/// the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub cspmg: bool,
    pub msfe: bool,
    pub pfm: bool,
    pub ssp: bool,
}

impl Toggles {
    pub const ALL: Self = Self {
        cspmg: true,
        msfe: true,
        pfm: true,
        ssp: true,
    };
    pub const NONE: Self = Self {
        cspmg: false,
        msfe: false,
        pfm: false,
        ssp: false,
    };

    /// Baseline plus the cumulative rows of the ablation table, in order:
    /// +cspmg, +msfe, +pfm, +ssp.
    pub fn ablation_ladder() -> [Self; 5] {
        let mut rows = [Self::NONE; 5];
        for i in 1..5 {
            let mut t = rows[i - 1];
            match i {
                1 => t.cspmg = true,
                2 => t.msfe = true,
                3 => t.pfm = true,
                _ => t.ssp = true,
            }
            rows[i] = t;
        }
        rows
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// An image with its reflectance.
#[derive(Clone, Debug, PartialEq)]
pub struct DualView {
    pub rgb: ImageTensor,
    pub reflectance: ImageTensor,
}

impl DualView {
    pub fn new(image: &ImageTensor, decomposer: &dyn Decomposer) -> Result<Self> {
        Ok(Self {
            rgb: image.clone(),
            reflectance: decomposer.decompose(image)?.reflectance,
        })
    }
}

/// An episode with every image decomposed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEpisode {
    pub support: Vec<(DualView, BinaryMask)>,
    pub query: DualView,
    pub query_mask: BinaryMask,
}

impl PreparedEpisode {
    pub fn new(episode: &Episode, decomposer: &dyn Decomposer) -> Result<Self> {
        let support = episode
            .support()
            .iter()
            .map(|s| Ok((DualView::new(&s.image, decomposer)?, s.mask.clone())))
            .collect::<Result<_>>()?;
        Ok(Self {
            support,
            query: DualView::new(&episode.query().image, decomposer)?,
            query_mask: episode.query().mask.clone(),
        })
    }

    pub fn with_default_retinex(episode: &Episode) -> Result<Self> {
        Self::new(episode, &GaussianRetinex::default())
    }

    pub fn height(&self) -> usize {
        self.query.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.query.rgb.width()
    }
}

/// Everything a forward pass exposes as graph nodes.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[2, H, W]`, channel 0 foreground.
    pub probabilities: Var,
    /// `[1, H_h, W_h]` foreground prior.
    pub prior: Var,
    pub prior_components: Option<[Var; 4]>,
    pub channel_attention: Option<Var>,
    pub spatial_attention: Option<Var>,
    /// Fused support prototypes before self-support.
    pub support_prototypes: PairVars,
    pub final_prototypes: PairVars,
    /// Per shot: support high features of both branches.
    pub support_high: Vec<(Var, Var)>,
}

/// Loss nodes of one episode.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub seg: Var,
    pub prior: Var,
    pub ssp: Var,
    pub total: Var,
}

/// Materialised output of [`Network::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Tensor<f32>,
    /// `[H_h, W_h]`.
    pub prior: Tensor<f32>,
    pub prior_components: Option<[Tensor<f32>; 4]>,
    pub channel_attention: Option<Tensor<f32>>,
    pub spatial_attention: Option<Tensor<f32>>,
}

impl Prediction {
    /// `[H, W]` foreground probability.
    pub fn foreground(&self) -> Tensor<f32> {
        let (_, h, w) = self.probabilities.chw().expect("probabilities are [2, H, W]");
        Tensor::new(&[h, w], self.probabilities.plane(0).to_vec()).expect("plane size")
    }

    /// Foreground where the probability is at least 0.5.
    pub fn mask(&self) -> BinaryMask {
        let fg = self.foreground();
        let (h, w) = (fg.shape()[0], fg.shape()[1]);
        BinaryMask::from_fn(h, w, |y, x| fg.data()[y * w + x] >= 0.5)
    }
}

/// Parameters and module layout of the network.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    /// 1×1 projection of high features onto the prototype width for the
    /// self-support loss.
    pub ssp_projection: Conv2d,
    pub prior_fusion: PriorFusion,
    pub msfe: Msfe,
    pub prototype_fusion: PrototypeFusion,
    pub self_support: SelfSupport,
}

impl<T: Scalar> Network<T> {
    /// Builds every module regardless of toggles so that checkpoints of all
    /// ablation variants share one layout.
    pub fn new(backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, backbone, &mut rng)?;
        let c_m = backbone.mid_channels;
        let c_h = backbone.block_channels[4];
        let ssp_projection = Conv2d::pointwise(&mut store, "ssp_projection", c_h, c_m, &mut rng);
        let prior_fusion = PriorFusion::new(&mut store, &mut rng);
        let msfe = Msfe::new(&mut store, c_m, &mut rng);
        let prototype_fusion = PrototypeFusion::new(&mut store, c_m, &mut rng);
        Ok(Self {
            store,
            encoder,
            ssp_projection,
            prior_fusion,
            msfe,
            prototype_fusion,
            self_support: SelfSupport::default(),
        })
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.encoder.config
    }

    fn features(&self, g: &mut Graph<T>, view: &DualView) -> Result<BundleVars> {
        let x_rgb = image_input(g, &view.rgb);
        let x_ref = image_input(g, &view.reflectance);
        let b_rgb = self.encoder.forward_blocks(g, &self.store, x_rgb)?;
        let b_ref = self.encoder.forward_blocks(g, &self.store, x_ref)?;
        self.encoder.bundle(g, &self.store, &b_rgb, &b_ref)
    }

    /// Fused prototype pair of one shot.
    fn shot_prototypes(
        &self,
        g: &mut Graph<T>,
        f: &BundleVars,
        mask: &BinaryMask,
        toggles: Toggles,
    ) -> Result<PairVars> {
        let mut out = [f.mid_rgb; 2];
        for (slot, polarity) in out.iter_mut().zip([Polarity::Foreground, Polarity::Background]) {
            let p_rgb = masked_average_pool_var(g, f.mid_rgb, mask, polarity)?;
            *slot = if toggles.pfm {
                let p_ref = masked_average_pool_var(g, f.mid_ref, mask, polarity)?;
                self.prototype_fusion.forward(g, &self.store, p_rgb, p_ref)?
            } else {
                p_rgb
            };
        }
        Ok(PairVars { fg: out[0], bg: out[1] })
    }

    pub fn forward(&self, g: &mut Graph<T>, episode: &PreparedEpisode, toggles: Toggles) -> Result<ForwardVars> {
        if episode.support.is_empty() {
            return Err(Error::arg("episode has no support shots"));
        }
        let (h, w) = (episode.height(), episode.width());
        let q = self.features(g, &episode.query)?;
        let mut shots = Vec::with_capacity(episode.support.len());
        for (view, mask) in &episode.support {
            if (view.rgb.height(), view.rgb.width()) != (h, w) {
                return Err(Error::shape("support and query sizes differ"));
            }
            shots.push((self.features(g, view)?, mask));
        }

        let mut fg = Vec::with_capacity(shots.len());
        let mut bg = Vec::with_capacity(shots.len());
        for (f, mask) in &shots {
            let p = self.shot_prototypes(g, f, mask, toggles)?;
            fg.push(p.fg);
            bg.push(p.bg);
        }
        let support_prototypes = PairVars {
            fg: g.average(&fg)?,
            bg: g.average(&bg)?,
        };

        let (_, hh, wh) = g.value(q.high_rgb).chw()?;
        let (prior, prior_components) = if toggles.cspmg {
            let pairs: Vec<(HighPair, &BinaryMask)> = shots
                .iter()
                .map(|(f, m)| {
                    (
                        HighPair {
                            rgb: f.high_rgb,
                            refl: f.high_ref,
                        },
                        *m,
                    )
                })
                .collect();
            let query = HighPair {
                rgb: q.high_rgb,
                refl: q.high_ref,
            };
            let pv = generate_prior_var(g, &self.store, &self.prior_fusion, &pairs, query)?;
            (pv.prior, Some(pv.components))
        } else {
            (g.constant(Tensor::full(&[1, hh, wh], T::lit(UNIFORM_PRIOR))), None)
        };

        let query_fused = self.msfe.fuse_modal(g, &self.store, q.mid_rgb, q.mid_ref)?;
        let (m_fuse, channel_attention, spatial_attention) = if toggles.msfe {
            let mut supports = Vec::with_capacity(shots.len());
            for (f, _) in &shots {
                supports.push(self.msfe.fuse_modal(g, &self.store, f.mid_rgb, f.mid_ref)?);
            }
            let mv = self.msfe.forward(g, &self.store, &supports, query_fused, prior)?;
            (mv.enhanced, Some(mv.channel_attention), Some(mv.spatial_attention))
        } else {
            (query_fused, None, None)
        };

        let final_prototypes = if toggles.ssp {
            self_support_var(g, support_prototypes, m_fuse, &self.self_support)?
        } else {
            support_prototypes
        };
        let grid_probs = predict_var(g, final_prototypes, m_fuse, self.self_support.temperature)?;
        let probabilities = g.resize(grid_probs, h, w)?;

        Ok(ForwardVars {
            probabilities,
            prior,
            prior_components,
            channel_attention,
            spatial_attention,
            support_prototypes,
            final_prototypes,
            support_high: shots.iter().map(|(f, _)| (f.high_rgb, f.high_ref)).collect(),
        })
    }

    /// Segmentation, prior and self-support losses and their weighted sum.
    /// The self-support loss is averaged over shots.
    pub fn losses(
        &self,
        g: &mut Graph<T>,
        fv: &ForwardVars,
        episode: &PreparedEpisode,
        weights: &LossWeights,
    ) -> Result<LossVars> {
        let fg = g.slice_channels(fv.probabilities, 0, 1)?;
        let seg = loss::seg_loss_var(g, fg, &episode.query_mask)?;
        let prior = loss::prior_loss_var(g, fv.prior, &episode.query_mask)?;
        let mut terms = Vec::with_capacity(fv.support_high.len());
        for (&(h_rgb, h_ref), (_, mask)) in fv.support_high.iter().zip(&episode.support) {
            let a = self.ssp_projection.forward(g, &self.store, h_rgb)?;
            let b = self.ssp_projection.forward(g, &self.store, h_ref)?;
            terms.push(loss::ssp_loss_var(g, fv.support_prototypes.fg, a, b, mask)?);
        }
        let ssp = g.average(&terms)?;
        let total = loss::total_loss_var(g, seg, prior, ssp, weights)?;
        Ok(LossVars { seg, prior, ssp, total })
    }
}

impl Network<f32> {
    /// Inference without losses.
    pub fn predict(&self, episode: &PreparedEpisode, toggles: Toggles) -> Result<Prediction> {
        let mut g = Graph::new();
        let fv = self.forward(&mut g, episode, toggles)?;
        let take = |v: Var| g.value(v).clone();
        let (_, hh, wh) = g.value(fv.prior).chw()?;
        let flat = |t: Tensor<f32>| t.reshape(&[hh, wh]);
        let prior_components = match fv.prior_components {
            Some(c) => Some([
                flat(take(c[0]))?,
                flat(take(c[1]))?,
                flat(take(c[2]))?,
                flat(take(c[3]))?,
            ]),
            None => None,
        };
        let out = Prediction {
            probabilities: take(fv.probabilities),
            prior: flat(take(fv.prior))?,
            prior_components,
            channel_attention: fv.channel_attention.map(take),
            spatial_attention: fv.spatial_attention.map(take),
        };
        if !out.probabilities.all_finite() {
            return Err(Error::NonFinite("probabilities".into()));
        }
        Ok(out)
    }
}
