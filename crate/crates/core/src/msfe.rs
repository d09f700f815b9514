//! Multi-scale feature enhancement of the query features.
//!
//! Support features drive a channel attention that recalibrates the query
//! features; a spatial attention map is computed from the recalibrated
//! features; and an atrous spatial pyramid pools the concatenation of the
//! recalibrated features, the prior mask and the spatial attention map.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Mlp, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const CHANNEL_REDUCTION: usize = 16;
pub const MIN_HIDDEN_UNITS: usize = 4;
pub const ASPP_RATES: [usize; 4] = [1, 6, 12, 18];

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T = f32> {
    /// `[C, 1, 1]` in `(0, 1)`.
    pub channel: Tensor<T>,
    /// `[1, H, W]` in `(0, 1)`.
    pub spatial: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub branches: [Conv2d; 4],
    pub image_pool: Conv2d,
    pub project: Conv2d,
    pub branch_channels: usize,
}

impl Aspp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let branch_channels = (out_channels / 4).max(1);
        let branches = std::array::from_fn(|i| {
            let r = ASPP_RATES[i];
            Conv2d::new(
                store,
                &format!("msfe.aspp.rate{r}"),
                in_channels,
                branch_channels,
                3,
                ConvGeom::new(1, r, r),
                rng,
            )
        });
        let image_pool = Conv2d::pointwise(store, "msfe.aspp.pool", in_channels, branch_channels, rng);
        let project = Conv2d::pointwise(store, "msfe.aspp.project", 5 * branch_channels, out_channels, rng);
        Self {
            branches,
            image_pool,
            project,
            branch_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).chw()?;
        let mut outs = Vec::with_capacity(5);
        for conv in &self.branches {
            let y = conv.forward(g, store, x)?;
            outs.push(g.relu(y));
        }
        let pooled = g.global_avg(x)?;
        let pooled = self.image_pool.forward(g, store, pooled)?;
        let pooled = g.relu(pooled);
        outs.push(g.broadcast(pooled, h, w)?);
        let cat = g.concat(&outs)?;
        self.project.forward(g, store, cat)
    }
}

/// Parameters of the enhancement stage.
#[derive(Clone, Debug)]
pub struct Msfe {
    pub channels: usize,
    pub modal_fusion: Conv2d,
    pub channel_mlp: Mlp,
    pub spatial_conv: Conv2d,
    pub aspp: Aspp,
}

/// Intermediate nodes of one enhancement pass.
#[derive(Clone, Copy, Debug)]
pub struct MsfeVars {
    pub channel_attention: Var,
    pub spatial_attention: Var,
    pub recalibrated: Var,
    pub enhanced: Var,
}

impl Msfe {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / CHANNEL_REDUCTION).max(MIN_HIDDEN_UNITS);
        Self {
            channels,
            modal_fusion: Conv2d::pointwise(store, "msfe.modal_fusion", 2 * channels, channels, rng),
            channel_mlp: Mlp::new(store, "msfe.channel_mlp", channels, hidden, channels, rng),
            spatial_conv: Conv2d::new(store, "msfe.spatial", 2, 1, 3, ConvGeom::new(1, 1, 1), rng),
            aspp: Aspp::new(store, channels + 2, channels, rng),
        }
    }

    /// 1×1 convolution over the channel concatenation of both branches.
    pub fn fuse_modal<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        m_rgb: Var,
        m_ref: Var,
    ) -> Result<Var> {
        if g.value(m_rgb).shape() != g.value(m_ref).shape() {
            return Err(Error::shape(format!(
                "fuse_modal {:?} vs {:?}",
                g.value(m_rgb).shape(),
                g.value(m_ref).shape()
            )));
        }
        let cat = g.concat(&[m_rgb, m_ref])?;
        self.modal_fusion.forward(g, store, cat)
    }

    /// `σ(MLP(GAP(m)) + MLP(GMP(m)))` with one shared MLP: `[C, 1, 1]`.
    pub fn channel_attention<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, support: Var) -> Result<Var> {
        let avg = g.global_avg(support)?;
        let max = g.global_max(support)?;
        let a = self.channel_mlp.forward(g, store, avg)?;
        let b = self.channel_mlp.forward(g, store, max)?;
        let s = g.add(a, b)?;
        Ok(g.sigmoid(s))
    }

    /// `(1 + A_c) ⊙ m`.
    pub fn recalibrate<T: Scalar>(&self, g: &mut Graph<T>, query: Var, attention: Var) -> Result<Var> {
        recalibrate(g, query, attention)
    }

    /// `σ(conv3×3([mean_c(m), max_c(m)]))`: `[1, H, W]`.
    pub fn spatial_attention<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let cat = g.concat(&[mean, max])?;
        let y = self.spatial_conv.forward(g, store, cat)?;
        Ok(g.sigmoid(y))
    }

    /// Atrous pyramid over `[m̃, prior, A_s]`; the prior is resized onto the
    /// feature grid when the grids differ.
    pub fn enhance<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        recalibrated: Var,
        prior: Var,
        spatial: Var,
    ) -> Result<Var> {
        let (_, h, w) = g.value(recalibrated).chw()?;
        let prior = g.resize(prior, h, w)?;
        let cat = g.concat(&[recalibrated, prior, spatial])?;
        self.aspp.forward(g, store, cat)
    }

    /// Full path from fused support/query features to `m_fuse`. `supports`
    /// holds the fused support features of every shot; their channel
    /// attentions are averaged.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        supports: &[Var],
        query: Var,
        prior: Var,
    ) -> Result<MsfeVars> {
        let mut atts = Vec::with_capacity(supports.len());
        for &s in supports {
            atts.push(self.channel_attention(g, store, s)?);
        }
        let channel_attention = g.average(&atts)?;
        let recalibrated = self.recalibrate(g, query, channel_attention)?;
        let spatial_attention = self.spatial_attention(g, store, recalibrated)?;
        let enhanced = self.enhance(g, store, recalibrated, prior, spatial_attention)?;
        Ok(MsfeVars {
            channel_attention,
            spatial_attention,
            recalibrated,
            enhanced,
        })
    }
}

pub fn recalibrate<T: Scalar>(g: &mut Graph<T>, query: Var, attention: Var) -> Result<Var> {
    let scale = g.affine(attention, T::one(), T::one());
    g.scale_channels(query, scale)
}

/// Tensor-level `(1 + A_c) ⊙ m` for a `[C, H, W]` map and `[C, 1, 1]` weights.
pub fn recalibrate_tensor<T: Scalar>(query: &Tensor<T>, attention: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let a = g.constant(attention.clone());
    let y = recalibrate(&mut g, q, a)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::zero_conv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParamStore<f64>, Msfe) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let msfe = Msfe::new(&mut store, c, &mut rng);
        (store, msfe)
    }

    fn rand_map(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn fuse_modal_zero_inputs_give_bias() {
        let (mut store, msfe) = setup(8);
        let bias = Tensor::from_fn(&[8], |i| i as f64 - 4.0);
        store.set(msfe.modal_fusion.bias, bias.clone()).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[8, 3, 3]));
        let y = msfe.fuse_modal(&mut g, &store, z, z).unwrap();
        for c in 0..8 {
            assert!(g.value(y).plane(c).iter().all(|&v| v == bias.data()[c]));
        }
    }

    #[test]
    fn fuse_modal_rejects_mismatch() {
        let (store, msfe) = setup(8);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[8, 3, 3]));
        let b = g.constant(Tensor::zeros(&[8, 3, 4]));
        assert!(msfe.fuse_modal(&mut g, &store, a, b).is_err());
    }

    #[test]
    fn zero_mlp_gives_half_attention() {
        let (mut store, msfe) = setup(8);
        zero_conv(&mut store, &msfe.channel_mlp.hidden);
        zero_conv(&mut store, &msfe.channel_mlp.out);
        let mut g = Graph::new();
        let x = g.constant(rand_map(1, &[8, 4, 4]));
        let a = msfe.channel_attention(&mut g, &store, x).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_attention_is_permutation_invariant() {
        let (store, msfe) = setup(8);
        let x = rand_map(2, &[8, 4, 4]);
        let perm: Vec<usize> = (0..16).map(|p| (p * 7 + 3) % 16).collect();
        let xp = Tensor::from_fn(&[8, 4, 4], |i| x.data()[(i / 16) * 16 + perm[i % 16]]);
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let a = msfe.channel_attention(&mut g, &store, v).unwrap();
            g.value(a).clone()
        };
        let (a, b) = (run(x), run(xp));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn recalibrate_limits() {
        let q = rand_map(3, &[4, 2, 2]);
        let zero = recalibrate_tensor(&q, &Tensor::zeros(&[4, 1, 1])).unwrap();
        assert_eq!(zero, q);
        let one = recalibrate_tensor(&q, &Tensor::full(&[4, 1, 1], 1.0)).unwrap();
        assert_eq!(one, q.scale(2.0));
    }

    #[test]
    fn zero_spatial_conv_gives_half() {
        let (mut store, msfe) = setup(8);
        zero_conv(&mut store, &msfe.spatial_conv);
        let mut g = Graph::new();
        let x = g.constant(rand_map(4, &[8, 5, 5]));
        let a = msfe.spatial_attention(&mut g, &store, x).unwrap();
        assert_eq!(g.value(a).shape(), &[1, 5, 5]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn enhance_shape_and_nullity() {
        let (mut store, msfe) = setup(8);
        let mut g = Graph::new();
        let x = g.constant(rand_map(5, &[8, 6, 6]));
        let p = g.constant(Tensor::full(&[1, 6, 6], 0.5));
        let s = g.constant(Tensor::full(&[1, 6, 6], 0.5));
        let y = msfe.enhance(&mut g, &store, x, p, s).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 6, 6]);

        for conv in msfe
            .aspp
            .branches
            .iter()
            .chain([&msfe.aspp.image_pool, &msfe.aspp.project])
        {
            let b = store.get(conv.bias).shape().to_vec();
            store.set(conv.bias, Tensor::zeros(&b)).unwrap();
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[8, 6, 6]));
        let z1 = g.constant(Tensor::zeros(&[1, 6, 6]));
        let y = msfe.enhance(&mut g, &store, z, z1, z1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
