//! Weight-shared dual-branch backbone and mid/high feature assembly.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::types::{Branch, FeatureMap, ImageTensor, Level};

pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Tiny,
    Residual50Like,
    Residual101Like,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Residual50Like => "residual50-like",
            BackboneKind::Residual101Like => "residual101-like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(BackboneKind::Tiny),
            "residual50-like" => Some(BackboneKind::Residual50Like),
            "residual101-like" => Some(BackboneKind::Residual101Like),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub block_channels: [usize; 5],
    pub mid_channels: usize,
    /// Keep blocks 4 and 5 at stride 8 by dilating instead of striding.
    pub dilate_late_blocks: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            kind: BackboneKind::Tiny,
            block_channels: [16, 32, 64, 128, 256],
            mid_channels: 64,
            dilate_late_blocks: true,
        }
    }

    pub fn residual50_like() -> Self {
        Self {
            kind: BackboneKind::Residual50Like,
            block_channels: [64, 256, 512, 1024, 2048],
            mid_channels: 256,
            dilate_late_blocks: true,
        }
    }

    pub fn residual101_like() -> Self {
        Self {
            kind: BackboneKind::Residual101Like,
            ..Self::residual50_like()
        }
    }

    pub fn for_kind(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::Tiny => Self::tiny(),
            BackboneKind::Residual50Like => Self::residual50_like(),
            BackboneKind::Residual101Like => Self::residual101_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mid_channels < 8 {
            return Err(Error::Config(format!(
                "mid_channels must be at least 8, got {}",
                self.mid_channels
            )));
        }
        if self.block_channels.contains(&0) {
            return Err(Error::Config("block channels must be positive".into()));
        }
        Ok(())
    }

    fn geometries(&self) -> [ConvGeom; 5] {
        let down = ConvGeom::new(2, 1, 1);
        if self.dilate_late_blocks {
            [down, down, down, ConvGeom::new(1, 2, 2), ConvGeom::new(1, 4, 4)]
        } else {
            [down; 5]
        }
    }

    /// Spatial size of each block output for an `h × w` input.
    pub fn block_sizes(&self, h: usize, w: usize) -> [(usize, usize); 5] {
        let mut out = [(0, 0); 5];
        let (mut ch, mut cw) = (h, w);
        for (o, g) in out.iter_mut().zip(self.geometries()) {
            ch = g.output_len(ch, 3).unwrap_or(0);
            cw = g.output_len(cw, 3).unwrap_or(0);
            *o = (ch, cw);
        }
        out
    }

    /// `(H_m, W_m)`: the block-3 grid where mid features live.
    pub fn mid_grid(&self, h: usize, w: usize) -> (usize, usize) {
        self.block_sizes(h, w)[2]
    }

    /// `(H_h, W_h)`: the block-5 grid where high features live.
    pub fn high_grid(&self, h: usize, w: usize) -> (usize, usize) {
        self.block_sizes(h, w)[4]
    }
}

/// Mid- and high-level features of both branches as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub mid_rgb: Var,
    pub mid_ref: Var,
    pub high_rgb: Var,
    pub high_ref: Var,
}

/// Materialised mid- and high-level features of both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T = f32> {
    pub mid_rgb: FeatureMap<T>,
    pub mid_ref: FeatureMap<T>,
    pub high_rgb: FeatureMap<T>,
    pub high_ref: FeatureMap<T>,
}

/// Five 3×3 conv+ReLU blocks plus the 1×1 mid-level fusion `D`. One
/// parameter set serves both branches.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: BackboneConfig,
    pub blocks: [Conv2d; 5],
    pub downsample: Conv2d,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let geoms = config.geometries();
        let mut in_c = 3;
        let blocks = std::array::from_fn(|i| {
            let out_c = config.block_channels[i];
            let conv = Conv2d::new(store, &format!("encoder.block{}", i + 1), in_c, out_c, 3, geoms[i], rng);
            in_c = out_c;
            conv
        });
        let [_, c2, c3, _, _] = config.block_channels;
        let downsample = Conv2d::pointwise(store, "encoder.mid_fusion", c2 + c3, config.mid_channels, rng);
        Ok(Self {
            config: config.clone(),
            blocks,
            downsample,
        })
    }

    /// Runs the five blocks on a `[3, H, W]` input node.
    pub fn forward_blocks<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<[Var; 5]> {
        let (_, h, w) = g.value(image).chw()?;
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::arg(format!(
                "backbone input must be at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}, got {h}x{w}"
            )));
        }
        let mut x = image;
        let mut out = [image; 5];
        for (slot, conv) in out.iter_mut().zip(&self.blocks) {
            let y = conv.forward(g, store, x)?;
            x = g.relu(y);
            *slot = x;
        }
        Ok(out)
    }

    /// `D(block2, block3)`: block2 is resized onto block3's grid, the two are
    /// concatenated along channels and projected by a 1×1 convolution.
    pub fn mid_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block2: Var,
        block3: Var,
    ) -> Result<Var> {
        let (_, h3, w3) = g.value(block3).chw()?;
        let b2 = g.resize(block2, h3, w3)?;
        let cat = g.concat(&[b2, block3])?;
        self.downsample.forward(g, store, cat)
    }

    pub fn bundle<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        blocks_rgb: &[Var; 5],
        blocks_ref: &[Var; 5],
    ) -> Result<BundleVars> {
        for (a, b) in blocks_rgb.iter().zip(blocks_ref) {
            if g.value(*a).shape() != g.value(*b).shape() {
                return Err(Error::shape(format!(
                    "rgb block {:?} vs ref block {:?}",
                    g.value(*a).shape(),
                    g.value(*b).shape()
                )));
            }
        }
        Ok(BundleVars {
            mid_rgb: self.mid_features(g, store, blocks_rgb[1], blocks_rgb[2])?,
            mid_ref: self.mid_features(g, store, blocks_ref[1], blocks_ref[2])?,
            high_rgb: blocks_rgb[4],
            high_ref: blocks_ref[4],
        })
    }

    /// Block outputs for one image. The branch only labels the result: both
    /// branches run the same parameters.
    pub fn extract_blocks(
        &self,
        store: &ParamStore<f32>,
        image: &ImageTensor,
        branch: Branch,
    ) -> Result<Vec<FeatureMap>> {
        let mut g = Graph::new();
        let x = g.constant(image.tensor().clone());
        let blocks = self.forward_blocks(&mut g, store, x)?;
        blocks
            .iter()
            .enumerate()
            .map(|(i, &v)| FeatureMap::new(g.value(v).clone(), Level::Block(i as u8 + 1), branch))
            .collect()
    }

    pub fn build_feature_bundle<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        blocks_rgb: &[FeatureMap<T>],
        blocks_ref: &[FeatureMap<T>],
    ) -> Result<FeatureBundle<T>> {
        if blocks_rgb.len() != 5 || blocks_ref.len() != 5 {
            return Err(Error::arg("feature bundle needs five blocks per branch"));
        }
        let mut g = Graph::new();
        let load = |g: &mut Graph<T>, fs: &[FeatureMap<T>]| -> [Var; 5] {
            std::array::from_fn(|i| g.constant(fs[i].data.clone()))
        };
        let rgb = load(&mut g, blocks_rgb);
        let refl = load(&mut g, blocks_ref);
        let b = self.bundle(&mut g, store, &rgb, &refl)?;
        let fm = |v: Var, level, branch| FeatureMap::new(g.value(v).clone(), level, branch);
        Ok(FeatureBundle {
            mid_rgb: fm(b.mid_rgb, Level::Mid, Branch::Rgb)?,
            mid_ref: fm(b.mid_ref, Level::Mid, Branch::Ref)?,
            high_rgb: fm(b.high_rgb, Level::High, Branch::Rgb)?,
            high_ref: fm(b.high_ref, Level::High, Branch::Ref)?,
        })
    }
}

/// Converts a `[3, H, W]` image into a graph constant of the requested precision.
pub fn image_input<T: Scalar>(g: &mut Graph<T>, image: &ImageTensor) -> Var {
    g.constant(image.tensor().cast::<T>())
}

/// Zeroes every parameter of a store-registered conv (used by tests and
/// ablations that need an isolated branch).
pub fn zero_conv<T: Scalar>(store: &mut ParamStore<T>, conv: &Conv2d) {
    let ws = store.get(conv.weight).shape().to_vec();
    let bs = store.get(conv.bias).shape().to_vec();
    *store.get_mut(conv.weight) = Tensor::zeros(&ws);
    *store.get_mut(conv.bias) = Tensor::zeros(&bs);
}
