//! Segmentation, prior-consistency and self-support losses.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::types::BinaryMask;

pub use crate::autograd::BCE_EPS;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Segmentation loss weight.
    pub lambda1: f64,
    /// Prior consistency loss weight.
    pub lambda2: f64,
    /// Self-support loss weight.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.5,
            lambda3: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|&l| !(l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy; predictions are clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::arg(format!(
            "bce shapes {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.bce(p, target)?;
    Ok(g.value(l).data()[0])
}

/// BCE of the image-resolution foreground probability against the query mask.
pub fn seg_loss<T: Scalar>(y_hat: &Tensor<T>, query_mask: &BinaryMask) -> Result<T> {
    let target = query_mask.to_tensor::<T>();
    let pred = match y_hat.shape() {
        &[1, h, w] => y_hat.clone().reshape(&[h, w])?,
        _ => y_hat.clone(),
    };
    bce(&pred, &target)
}

pub fn seg_loss_var<T: Scalar>(g: &mut Graph<T>, y_hat: Var, query_mask: &BinaryMask) -> Result<Var> {
    let (_, h, w) = g.value(y_hat).chw()?;
    if (h, w) != (query_mask.height(), query_mask.width()) {
        return Err(Error::arg(format!(
            "prediction {h}x{w} vs mask {}x{}",
            query_mask.height(),
            query_mask.width()
        )));
    }
    g.bce(y_hat, &query_mask.to_tensor::<T>())
}

/// Query mask brought to an `h × w` grid by bilinear resize and the 0.5 threshold.
pub fn grid_target<T: Scalar>(mask: &BinaryMask, h: usize, w: usize) -> Result<Tensor<T>> {
    Ok(mask.downsample(h, w)?.to_tensor::<T>())
}

/// BCE of the prior mask against the query mask at prior resolution.
pub fn prior_loss_var<T: Scalar>(g: &mut Graph<T>, prior: Var, query_mask: &BinaryMask) -> Result<Var> {
    let (_, h, w) = g.value(prior).chw()?;
    let target = grid_target::<T>(query_mask, h, w)?;
    g.bce(prior, &target)
}

pub fn prior_loss<T: Scalar>(prior: &Tensor<T>, query_mask: &BinaryMask) -> Result<T> {
    let (h, w) = match prior.shape() {
        &[h, w] | &[1, h, w] => (h, w),
        s => return Err(Error::shape(format!("prior shape {s:?}"))),
    };
    let target = grid_target::<T>(query_mask, h, w)?;
    bce(&prior.clone().reshape(&[h, w])?, &target)
}

/// `(1 + cos(P, e_i)) / 2` at every cell of `features`.
pub fn cosine_probability_var<T: Scalar>(g: &mut Graph<T>, proto: Var, features: Var) -> Result<Var> {
    let p = g.normalize(proto)?;
    let f = g.normalize(features)?;
    let s = g.dot_map(p, f)?;
    let half = T::lit(0.5);
    Ok(g.affine(s, half, half))
}

/// Self-support loss: BCE of the cosine-probability maps of both support
/// branches against the support mask at feature resolution.
pub fn ssp_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    proto: Var,
    high_rgb: Var,
    high_ref: Var,
    support_mask: &BinaryMask,
) -> Result<Var> {
    let (_, h, w) = g.value(high_rgb).chw()?;
    let target = grid_target::<T>(support_mask, h, w)?;
    let mut terms = Vec::with_capacity(2);
    for feats in [high_rgb, high_ref] {
        let p = cosine_probability_var(g, proto, feats)?;
        terms.push(g.bce(p, &target)?);
    }
    g.add(terms[0], terms[1])
}

pub fn ssp_loss<T: Scalar>(
    proto: &[T],
    high_rgb: &Tensor<T>,
    high_ref: &Tensor<T>,
    support_mask: &BinaryMask,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(proto.to_vec()));
    let a = g.constant(high_rgb.clone());
    let b = g.constant(high_ref.clone());
    let l = ssp_loss_var(&mut g, p, a, b, support_mask)?;
    Ok(g.value(l).data()[0])
}

/// `λ1·seg + λ2·prior + λ3·ssp`.
pub fn total_loss(seg: f64, prior: f64, ssp: f64, w: &LossWeights) -> Result<f64> {
    if [seg, prior, ssp].iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::arg(format!(
            "loss terms must be non-negative: ({seg}, {prior}, {ssp})"
        )));
    }
    Ok(w.lambda1 * seg + w.lambda2 * prior + w.lambda3 * ssp)
}

pub fn total_loss_var<T: Scalar>(g: &mut Graph<T>, seg: Var, prior: Var, ssp: Var, w: &LossWeights) -> Result<Var> {
    let a = g.affine(seg, T::lit(w.lambda1), T::zero());
    let b = g.affine(prior, T::lit(w.lambda2), T::zero());
    let c = g.affine(ssp, T::lit(w.lambda3), T::zero());
    g.sum_all(&[a, b, c])
}
