//! Reverse-mode automatic differentiation over `[C, H, W]` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to run its adjoint. Nodes are topologically ordered
//! by construction, so [`Graph::backward`] is a single reverse sweep.
//! Parameters enter through [`Graph::param`] and are memoised per graph, so
//! a weight used several times (for example by both backbone branches) is a
//! single leaf whose gradient accumulates every use.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::primitives::{resize_planes, resize_planes_adjoint, ResizeAxis, COSINE_NORM_EPS};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct ConvSaved<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    in_shape: (usize, usize, usize),
    kernel: (usize, usize),
    out_hw: (usize, usize),
    /// `None` for 1×1 unit-stride convolutions, whose column matrix is the input itself.
    cols: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Conv(Box<ConvSaved<T>>),
    ScaleChannels(Var, Var),
    ScaleSpatial(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Resize { x: Var, ry: ResizeAxis, rx: ResizeAxis },
    GlobalAvg(Var),
    GlobalMax { x: Var, arg: Vec<usize> },
    ChannelMean(Var),
    ChannelMax { x: Var, arg: Vec<usize> },
    Broadcast(Var),
    Normalize { x: Var, norms: Vec<T> },
    DotMap(Var, Var),
    WeightedMean { x: Var, weights: Vec<T>, total: T },
    MinMax { x: Var, imin: usize, imax: usize, denom: T },
    Softmax(Var),
    Bce { p: Var, target: Vec<T> },
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter that was touched by the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Clamp into `[lo, hi]` that lets NaN through.
fn pin<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Logistic function kept strictly inside (0, 1): saturated values are pinned
/// one machine epsilon away from the bounds.
fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let eps = T::epsilon();
    pin(s, eps, T::one() - eps)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + tb.data()[i]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] - tb.data()[i]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * tb.data()[i]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(&[x]);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, kh, kw]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let (o, kc, kh, kw) = match self.value(w).shape() {
            &[o, kc, kh, kw] => (o, kc, kh, kw),
            s => return Err(Error::shape(format!("conv weight shape {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape(format!("conv expects {kc} input channels, got {c}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::shape("conv bias length".to_string()));
            }
        }
        let (ho, wo) = match (geom.output_len(h, kh), geom.output_len(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape(format!("conv {kh}x{kw} {geom:?} does not fit {h}x{wd}"))),
        };
        let unit = kh == 1 && kw == 1 && geom == ConvGeom::UNIT;
        let cols = if unit {
            None
        } else {
            Some(im2col(self.value(x).data(), (c, h, wd), (kh, kw), geom, (ho, wo)))
        };
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let mut out = vec![T::zero(); o * hw];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (oc, chunk) in out.chunks_exact_mut(hw).enumerate() {
                chunk.fill(bd[oc]);
            }
        }
        let colref: &[T] = cols.as_deref().unwrap_or_else(|| self.value(x).data());
        T::gemm(
            o,
            ckk,
            hw,
            T::one(),
            self.value(w).data(),
            ckk as isize,
            1,
            colref,
            hw as isize,
            1,
            T::one(),
            &mut out,
            hw as isize,
            1,
        );
        let value = Tensor::new(&[o, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        let saved = ConvSaved {
            x,
            w,
            b,
            geom,
            in_shape: (c, h, wd),
            kernel: (kh, kw),
            out_hw: (ho, wo),
            cols,
        };
        Ok(self.push(value, Op::Conv(Box::new(saved)), ng))
    }

    /// `x[c, :, :] * s[c]` for `x: [C, H, W]`, `s: [C, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(s).shape() != [c, 1, 1] {
            return Err(Error::shape(format!(
                "channel scale {:?} for {c} channels",
                self.value(s).shape()
            )));
        }
        let (tx, ts) = (self.value(x), self.value(s));
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| tx.data()[i] * ts.data()[i / hw]);
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels(x, s), ng))
    }

    /// `x[c, y, x] * s[0, y, x]` for `s: [1, H, W]`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(s).shape() != [1, h, w] {
            return Err(Error::shape(format!(
                "spatial scale {:?} for {h}x{w} map",
                self.value(s).shape()
            )));
        }
        let (tx, ts) = (self.value(x), self.value(s));
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| tx.data()[i] * ts.data()[i % hw]);
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::ScaleSpatial(x, s), ng))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let (_, h, w) = self.value(*first).chw()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &v in xs {
            let (c, vh, vw) = self.value(v).chw()?;
            if (vh, vw) != (h, w) {
                return Err(Error::shape(format!("concat of {h}x{w} with {vh}x{vw}")));
            }
            channels += c;
            data.extend_from_slice(self.value(v).data());
        }
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(&[channels, h, w], data)?, Op::Concat(xs.to_vec()), ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let data = self.value(x).data()[start * hw..(start + len) * hw].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[len, h, w], data)?, Op::Slice { x, start }, ng))
    }

    pub fn resize(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::arg("resize target must be positive"));
        }
        let (c, h, w) = self.value(x).chw()?;
        if (h, w) == (target_h, target_w) {
            return Ok(x);
        }
        let ry = ResizeAxis::new(h, target_h);
        let rx = ResizeAxis::new(w, target_w);
        let out = resize_planes(self.value(x).data(), c, h, w, &ry, &rx);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&[c, target_h, target_w], out)?,
            Op::Resize { x, ry, rx },
            ng,
        ))
    }

    /// Spatial mean per channel: `[C, H, W] -> [C, 1, 1]`. Each plane is
    /// summed in ascending order, so the result depends only on the multiset
    /// of values and not on their positions.
    pub fn global_avg(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = T::from_usize(h * w).unwrap();
        let t = self.value(x);
        let mut buf = Vec::with_capacity(h * w);
        let out: Vec<T> = (0..c)
            .map(|ch| {
                buf.clear();
                buf.extend_from_slice(t.plane(ch));
                buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                buf.iter().copied().sum::<T>() / n
            })
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvg(x), ng))
    }

    /// Spatial max per channel: `[C, H, W] -> [C, 1, 1]`.
    pub fn global_max(&mut self, x: Var) -> Result<Var> {
        let (c, _, _) = self.value(x).chw()?;
        let t = self.value(x);
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let (i, v) = argmax(t.plane(ch));
            arg.push(i);
            out.push(v);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::GlobalMax { x, arg }, ng))
    }

    /// Mean over channels: `[C, H, W] -> [1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let t = self.value(x);
        let hw = h * w;
        let n = T::from_usize(c).unwrap();
        let out = Tensor::from_fn(&[1, h, w], |p| (0..c).map(|ch| t.data()[ch * hw + p]).sum::<T>() / n);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::ChannelMean(x), ng))
    }

    /// Max over channels: `[C, H, W] -> [1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let t = self.value(x);
        let hw = h * w;
        let mut arg = Vec::with_capacity(hw);
        let mut out = Vec::with_capacity(hw);
        for p in 0..hw {
            let mut best = 0;
            let mut bv = t.data()[p];
            for ch in 1..c {
                let v = t.data()[ch * hw + p];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            arg.push(best);
            out.push(bv);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[1, h, w], out)?, Op::ChannelMax { x, arg }, ng))
    }

    /// Repeats a `[C, 1, 1]` vector over an `h × w` grid.
    pub fn broadcast(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, one_h, one_w) = self.value(x).chw()?;
        if (one_h, one_w) != (1, 1) {
            return Err(Error::shape("broadcast expects a [C, 1, 1] vector"));
        }
        let t = self.value(x);
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| t.data()[i / hw]);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Broadcast(x), ng))
    }

    /// L2-normalises the channel vector at every pixel. Vectors with norm
    /// below the cosine guard map to zero.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let t = self.value(x);
        let hw = h * w;
        let eps = T::lit(COSINE_NORM_EPS);
        let mut norms = vec![T::zero(); hw];
        for ch in 0..c {
            for (n, &v) in norms.iter_mut().zip(t.plane(ch)) {
                *n += v * v;
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        let out = Tensor::from_fn(&[c, h, w], |i| {
            let n = norms[i % hw];
            if n < eps {
                T::zero()
            } else {
                t.data()[i] / n
            }
        });
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Normalize { x, norms }, ng))
    }

    /// Per-pixel dot product of a `[C, 1, 1]` vector with `x: [C, H, W]`.
    pub fn dot_map(&mut self, v: Var, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(v).shape() != [c, 1, 1] {
            return Err(Error::shape(format!(
                "dot_map vector {:?} against {c} channels",
                self.value(v).shape()
            )));
        }
        let (tv, tx) = (self.value(v), self.value(x));
        let hw = h * w;
        let mut out = vec![T::zero(); hw];
        for ch in 0..c {
            let k = tv.data()[ch];
            for (o, &xv) in out.iter_mut().zip(tx.plane(ch)) {
                *o += k * xv;
            }
        }
        let ng = self.ng(&[v, x]);
        Ok(self.push(Tensor::new(&[1, h, w], out)?, Op::DotMap(v, x), ng))
    }

    /// `Σ_p w_p x[:, p] / Σ_p w_p` with constant non-negative weights over the
    /// spatial grid. Errors when the weights sum to zero.
    pub fn weighted_mean(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if weights.len() != h * w {
            return Err(Error::shape(format!("{} weights for a {h}x{w} grid", weights.len())));
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::arg("weighted mean with zero total weight"));
        }
        let t = self.value(x);
        let out: Vec<T> = (0..c)
            .map(|ch| t.plane(ch).iter().zip(weights).map(|(&v, &wt)| v * wt).sum::<T>() / total)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::WeightedMean {
                x,
                weights: weights.to_vec(),
                total,
            },
            ng,
        ))
    }

    /// `(x - min x) / (max x - min x + mu)` over all elements.
    pub fn minmax(&mut self, x: Var, mu: T) -> Var {
        let t = self.value(x);
        let (imax, vmax) = argmax(t.data());
        let (imin, vmin) = argmin(t.data());
        let denom = vmax - vmin + mu;
        let out = t.map(|v| (v - vmin) / denom);
        let ng = self.ng(&[x]);
        self.push(out, Op::MinMax { x, imin, imax, denom }, ng)
    }

    /// Softmax across channels at every pixel, each value kept within `[ε, 1-ε]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let t = self.value(x);
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        for p in 0..hw {
            let m = (0..c).map(|ch| t.data()[ch * hw + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (t.data()[ch * hw + p] - m).exp();
                out[ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                let v = out[ch * hw + p] / z;
                out[ch * hw + p] = pin(v, T::epsilon(), T::one() - T::epsilon());
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Softmax(x), ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target of the same element count; `p` is clamped to `[ε, 1-ε]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let tp = self.value(p);
        if tp.len() != target.len() {
            return Err(Error::shape(format!(
                "bce prediction {:?} vs target {:?}",
                tp.shape(),
                target.shape()
            )));
        }
        let eps = T::lit(BCE_EPS);
        let n = T::from_usize(tp.len()).unwrap();
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = pin(p, eps, T::one() - eps);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum::<T>()
            / n;
        let ng = self.ng(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::from_usize(t.len()).unwrap();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Sum of several same-shaped nodes.
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::arg("sum of nothing"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Arithmetic mean of several same-shaped nodes.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let s = self.sum_all(xs)?;
        if xs.len() == 1 {
            return Ok(s);
        }
        Ok(self.affine(s, T::one() / T::from_usize(xs.len()).unwrap(), T::zero()))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_fn(ta.shape(), |i| gd[i] * tb.data()[i]);
                let gb = Tensor::from_fn(tb.shape(), |i| gd[i] * ta.data()[i]);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Affine(x, s) => self.acc(grads, *x, g.scale(*s)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let gx = Tensor::from_fn(tx.shape(), |i| if tx.data()[i] > T::zero() { gd[i] } else { T::zero() });
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    gd[i] * s * (T::one() - s)
                });
                self.acc(grads, *x, gx);
            }
            Op::Conv(saved) => self.conv_backward(saved, gd, grads),
            Op::ScaleChannels(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (c, h, w) = tx.chw().unwrap();
                let hw = h * w;
                let gx = Tensor::from_fn(tx.shape(), |i| gd[i] * ts.data()[i / hw]);
                let gs: Vec<T> = (0..c)
                    .map(|ch| (ch * hw..(ch + 1) * hw).map(|i| gd[i] * tx.data()[i]).sum())
                    .collect();
                self.acc(grads, *x, gx);
                self.acc(grads, *s, Tensor::vector(gs));
            }
            Op::ScaleSpatial(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (c, h, w) = tx.chw().unwrap();
                let hw = h * w;
                let gx = Tensor::from_fn(tx.shape(), |i| gd[i] * ts.data()[i % hw]);
                let gs = Tensor::from_fn(ts.shape(), |p| {
                    (0..c).map(|ch| gd[ch * hw + p] * tx.data()[ch * hw + p]).sum()
                });
                self.acc(grads, *x, gx);
                self.acc(grads, *s, gs);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    let part = Tensor::new(self.value(v).shape(), gd[off..off + n].to_vec()).expect("concat slice");
                    self.acc(grads, v, part);
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let (_, h, w) = self.value(*x).chw().unwrap();
                let off = start * h * w;
                self.acc_with(grads, *x, |dst| {
                    for (d, &v) in dst[off..off + gd.len()].iter_mut().zip(gd) {
                        *d += v;
                    }
                });
            }
            Op::Resize { x, ry, rx } => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let back = resize_planes_adjoint(gd, c, h, w, ry, rx);
                self.acc(grads, *x, Tensor::new(&[c, h, w], back).unwrap());
            }
            Op::GlobalAvg(x) => {
                let (_, h, w) = self.value(*x).chw().unwrap();
                let hw = h * w;
                let n = T::from_usize(hw).unwrap();
                let gx = Tensor::from_fn(self.value(*x).shape(), |i| gd[i / hw] / n);
                self.acc(grads, *x, gx);
            }
            Op::GlobalMax { x, arg } => {
                let (_, h, w) = self.value(*x).chw().unwrap();
                let hw = h * w;
                self.acc_with(grads, *x, |dst| {
                    for (ch, &p) in arg.iter().enumerate() {
                        dst[ch * hw + p] += gd[ch];
                    }
                });
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let hw = h * w;
                let n = T::from_usize(c).unwrap();
                let gx = Tensor::from_fn(&[c, h, w], |i| gd[i % hw] / n);
                self.acc(grads, *x, gx);
            }
            Op::ChannelMax { x, arg } => {
                let (_, h, w) = self.value(*x).chw().unwrap();
                let hw = h * w;
                self.acc_with(grads, *x, |dst| {
                    for (p, &ch) in arg.iter().enumerate() {
                        dst[ch * hw + p] += gd[p];
                    }
                });
            }
            Op::Broadcast(x) => {
                let (c, h, w) = node.value.chw().unwrap();
                let hw = h * w;
                let gx: Vec<T> = (0..c)
                    .map(|ch| gd[ch * hw..(ch + 1) * hw].iter().copied().sum())
                    .collect();
                self.acc(grads, *x, Tensor::vector(gx));
            }
            Op::Normalize { x, norms } => {
                let y = &node.value;
                let (c, h, w) = y.chw().unwrap();
                let hw = h * w;
                let eps = T::lit(COSINE_NORM_EPS);
                let mut proj = vec![T::zero(); hw];
                for ch in 0..c {
                    for p in 0..hw {
                        proj[p] += y.data()[ch * hw + p] * gd[ch * hw + p];
                    }
                }
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let p = i % hw;
                    let n = norms[p];
                    if n < eps {
                        T::zero()
                    } else {
                        (gd[i] - y.data()[i] * proj[p]) / n
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::DotMap(v, x) => {
                let (tv, tx) = (self.value(*v), self.value(*x));
                let (c, h, w) = tx.chw().unwrap();
                let hw = h * w;
                if self.nodes[v.0].needs_grad {
                    let gv: Vec<T> = (0..c)
                        .map(|ch| tx.plane(ch).iter().zip(gd).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.acc(grads, *v, Tensor::vector(gv));
                }
                let gx = Tensor::from_fn(&[c, h, w], |i| tv.data()[i / hw] * gd[i % hw]);
                self.acc(grads, *x, gx);
            }
            Op::WeightedMean { x, weights, total } => {
                let (c, h, w) = self.value(*x).chw().unwrap();
                let hw = h * w;
                let gx = Tensor::from_fn(&[c, h, w], |i| gd[i / hw] * weights[i % hw] / *total);
                self.acc(grads, *x, gx);
            }
            Op::MinMax { x, imin, imax, denom } => {
                let y = &node.value;
                let mut gx: Vec<T> = gd.iter().map(|&v| v / *denom).collect();
                // y_i = (x_i - m) / d with d = M - m + mu
                let mut dmin = T::zero();
                let mut dmax = T::zero();
                for (&gi, &yi) in gd.iter().zip(y.data()) {
                    dmin += gi * (-T::one() + yi) / *denom;
                    dmax += gi * (-yi) / *denom;
                }
                gx[*imin] += dmin;
                gx[*imax] += dmax;
                self.acc(grads, *x, Tensor::new(y.shape(), gx).unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (c, h, w) = y.chw().unwrap();
                let hw = h * w;
                let mut dots = vec![T::zero(); hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dots[p] += y.data()[ch * hw + p] * gd[ch * hw + p];
                    }
                }
                let gx = Tensor::from_fn(&[c, h, w], |i| y.data()[i] * (gd[i] - dots[i % hw]));
                self.acc(grads, *x, gx);
            }
            Op::Bce { p, target } => {
                let tp = self.value(*p);
                let eps = T::lit(BCE_EPS);
                let n = T::from_usize(tp.len()).unwrap();
                let g0 = gd[0];
                let gx = Tensor::from_fn(tp.shape(), |i| {
                    let pv = tp.data()[i];
                    if pv < eps || pv > T::one() - eps {
                        return T::zero();
                    }
                    let t = target[i];
                    g0 * (pv - t) / (pv * (T::one() - pv)) / n
                });
                self.acc(grads, *p, gx);
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let n = T::from_usize(tx.len()).unwrap();
                self.acc(grads, *x, Tensor::full(tx.shape(), gd[0] / n));
            }
        }
    }

    fn conv_backward(&self, s: &ConvSaved<T>, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (c, h, w) = s.in_shape;
        let (kh, kw) = s.kernel;
        let (ho, wo) = s.out_hw;
        let o = self.value(s.w).shape()[0];
        let ckk = c * kh * kw;
        let hw = ho * wo;
        if let Some(b) = s.b {
            if self.nodes[b.0].needs_grad {
                let gb: Vec<T> = gd.chunks_exact(hw).map(|r| r.iter().copied().sum()).collect();
                self.acc(grads, b, Tensor::new(&[o], gb).unwrap());
            }
        }
        let cols: &[T] = s.cols.as_deref().unwrap_or_else(|| self.value(s.x).data());
        if self.nodes[s.w.0].needs_grad {
            self.acc_with(grads, s.w, |dw| {
                T::gemm(
                    o,
                    hw,
                    ckk,
                    T::one(),
                    gd,
                    hw as isize,
                    1,
                    cols,
                    1,
                    hw as isize,
                    T::one(),
                    dw,
                    ckk as isize,
                    1,
                );
            });
        }
        if self.nodes[s.x.0].needs_grad {
            let mut dcols = vec![T::zero(); ckk * hw];
            T::gemm(
                ckk,
                o,
                hw,
                T::one(),
                self.value(s.w).data(),
                1,
                ckk as isize,
                gd,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            if s.cols.is_none() {
                self.acc(grads, s.x, Tensor::new(&[c, h, w], dcols).unwrap());
            } else {
                self.acc_with(grads, s.x, |dx| {
                    col2im(&dcols, dx, (c, h, w), (kh, kw), s.geom, (ho, wo));
                });
            }
        }
    }
}

/// First NaN wins, so it propagates.
fn argmax<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v.is_nan() {
            return (i, v);
        }
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn argmin<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v.is_nan() {
            return (i, v);
        }
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Unfolds `x: [C, H, W]` into a `[C·kh·kw, Ho·Wo]` column matrix.
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let hw = ho * wo;
    let mut cols = vec![T::zero(); c * kh * kw * hw];
    let (s, p, d) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize * d;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
) {
    let hw = ho * wo;
    let (s, p, d) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kx as isize * d;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
