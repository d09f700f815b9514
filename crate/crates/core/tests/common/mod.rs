//! Independent 64-bit references and the oracle/gradient suites shared by
//! the integration tests and the acceptance harness.
#![allow(dead_code)]

use cfss_core::autograd::{ConvGeom, Graph, Var};
use cfss_core::cspmg::{self, generate_prior_var, HighPair, PriorFusion};
use cfss_core::encoder::{BackboneConfig, Encoder};
use cfss_core::loss::{self, LossWeights};
use cfss_core::msfe::Msfe;
use cfss_core::nn::{Conv2d, ParamId, ParamStore};
use cfss_core::prototype::{self, PairVars};
use cfss_core::types::{BinaryMask, Branch, FeatureMap, Level, Polarity};
use cfss_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_mask(rng: &mut Rng64, h: usize, w: usize, p: f64) -> BinaryMask {
    let bits: Vec<u8> = (0..h * w).map(|_| rng.random_bool(p) as u8).collect();
    BinaryMask::new(h, w, bits).unwrap()
}

/// One measured quantity against its limit.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
        }
    }

    pub fn ok(&self) -> bool {
        self.value <= self.limit
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, worse)
}

/// Larger of two errors; NaN counts as worst.
pub fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

// ---------------------------------------------------------------- references

/// Half-pixel bilinear sample position: `(lo, hi, frac)`.
fn ref_taps(dst: usize, src: usize, i: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let lo = (x.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, x - lo as f64)
}

pub fn ref_resize(x: &[f64], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        for y in 0..th {
            let (y0, y1, fy) = ref_taps(th, h, y);
            for xx in 0..tw {
                let (x0, x1, fx) = ref_taps(tw, w, xx);
                let at = |yy: usize, xq: usize| x[ch * h * w + yy * w + xq];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * th * tw + y * tw + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Direct convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn ref_conv(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[o];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky * dil) as isize - pad as isize;
                            let ix = (xx * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c + ci) * k + ky) * k + kx]
                                * x[ci * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[o * oh * ow + y * ow + xx] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn pixel(x: &[f64], c: usize, hw: usize, i: usize) -> Vec<f64> {
    (0..c).map(|ch| x[ch * hw + i]).collect()
}

/// Resize-then-threshold selection of a mask on an `h × w` grid.
pub fn ref_selection(mask: &BinaryMask, h: usize, w: usize, fg: bool) -> Vec<bool> {
    let m: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    ref_resize(&m, 1, mask.height(), mask.width(), h, w)
        .into_iter()
        .map(|v| (v > 0.5) == fg)
        .collect()
}

pub fn ref_bce(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

fn conv_params(store: &ParamStore<f64>, conv: &Conv2d) -> (Vec<f64>, Vec<f64>) {
    (
        store.get(conv.weight).data().to_vec(),
        store.get(conv.bias).data().to_vec(),
    )
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng64, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn run(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Vec<f64> {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).data().to_vec()
}

// ------------------------------------------------------------ oracle suite

pub const ORACLE_INSTANCES: u64 = 20;

pub fn oracle_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let mut worst = |name: &str, f: &dyn Fn(u64) -> f64| {
        let v = (0..ORACLE_INSTANCES).map(f).fold(0.0, worse);
        out.push(Check::new(name, v, 1e-6));
    };
    worst("masked_average_pool", &oracle_map);
    worst("cross_similarity", &oracle_cross_similarity);
    worst("normalize_minmax", &oracle_minmax);
    worst("bce", &oracle_bce);
    worst("encoder block conv (stride 2)", &|s| oracle_block_conv(s, 0));
    worst("encoder block conv (dilation 2)", &|s| oracle_block_conv(s, 3));
    worst("encoder block conv (dilation 4)", &|s| oracle_block_conv(s, 4));
    worst("mid-level fusion D", &oracle_mid_fusion);
    worst("modal fusion conv", &oracle_fuse_modal);
    worst("spatial attention conv", &oracle_spatial);
    worst("aspp isolated branches", &oracle_aspp);
    worst("prior fusion conv + softmax", &oracle_prior_fusion);
    out
}

fn grid_dims(rng: &mut Rng64) -> (usize, usize, usize) {
    (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9))
}

pub fn oracle_map(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = grid_dims(&mut r);
    let x = random_tensor(&mut r, &[c, h, w], -2.0, 2.0);
    let mask = loop {
        let m = random_mask(&mut r, 2 * h, 2 * w, 0.5);
        let s = ref_selection(&m, h, w, true);
        if s.iter().any(|&b| b) && s.iter().any(|&b| !b) {
            break m;
        }
    };
    let fm = FeatureMap::new(x.clone(), Level::Mid, Branch::Rgb).unwrap();
    let mut worst: f64 = 0.0;
    for (pol, fg) in [(Polarity::Foreground, true), (Polarity::Background, false)] {
        let got = prototype::masked_average_pool(&fm, &mask, pol).unwrap();
        let sel = ref_selection(&mask, h, w, fg);
        let n = sel.iter().filter(|&&b| b).count() as f64;
        let want: Vec<f64> = (0..c)
            .map(|ch| {
                (0..h * w)
                    .filter(|&i| sel[i])
                    .map(|i| x.data()[ch * h * w + i])
                    .sum::<f64>()
                    / n
            })
            .collect();
        worst = worst.max(max_diff(&got.data, &want));
    }
    worst
}

pub fn oracle_cross_similarity(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = grid_dims(&mut r);
    let c = c + 1;
    let q = random_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let s = random_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let hw = h * w;
    let k = r.random_range(1..=hw);
    let fg: Vec<usize> = rand::seq::index::sample(&mut r, hw, k).into_vec();
    let qf = FeatureMap::new(q.clone(), Level::High, Branch::Rgb).unwrap();
    let sf = FeatureMap::new(s.clone(), Level::High, Branch::Rgb).unwrap();
    let got = cspmg::cross_similarity(&qf, &sf, &fg).unwrap();
    let want: Vec<f64> = (0..hw)
        .map(|i| {
            let qi = pixel(q.data(), c, hw, i);
            fg.iter()
                .map(|&j| ref_cosine(&qi, &pixel(s.data(), c, hw, j)))
                .sum::<f64>()
                / fg.len() as f64
        })
        .collect();
    max_diff(&got, &want)
}

pub fn oracle_minmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (_, h, w) = grid_dims(&mut r);
    let v = random_tensor(&mut r, &[1, h, w], -3.0, 3.0);
    let got = cspmg::normalize_minmax(&v, 1e-6);
    let lo = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let want: Vec<f64> = v.data().iter().map(|x| (x - lo) / (hi - lo + 1e-6)).collect();
    max_diff(got.data(), &want)
}

pub fn oracle_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (_, h, w) = grid_dims(&mut r);
    let p = random_tensor(&mut r, &[h, w], 0.0, 1.0);
    let t = Tensor::from_fn(&[h, w], |_| r.random_bool(0.3) as u8 as f64);
    (loss::bce(&p, &t).unwrap() - ref_bce(p.data(), t.data())).abs()
}

/// Encoder block `i` run in isolation on a random input.
pub fn oracle_block_conv(seed: u64, block: usize) -> f64 {
    let mut r = rng(seed);
    let cfg = BackboneConfig {
        block_channels: [3, 4, 5, 4, 3],
        mid_channels: 8,
        ..BackboneConfig::tiny()
    };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, &cfg, &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let conv = enc.blocks[block];
    let (c, h, w) = (conv.in_channels, r.random_range(3..9), r.random_range(3..9));
    let x = random_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let got = run(|g| {
        let v = g.constant(x.clone());
        conv.forward(g, &store, v)
    });
    let (wt, b) = conv_params(&store, &conv);
    let geom = conv.geom;
    let (want, _, _) = ref_conv(
        x.data(),
        c,
        h,
        w,
        &wt,
        &b,
        conv.out_channels,
        3,
        geom.stride,
        geom.padding,
        geom.dilation,
    );
    max_diff(&got, &want)
}

/// `D(F2, F3)` against resize, concat and a per-pixel affine map.
pub fn oracle_mid_fusion(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = BackboneConfig {
        block_channels: [3, 4, 5, 4, 3],
        mid_channels: 8,
        ..BackboneConfig::tiny()
    };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, &cfg, &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let (h3, w3) = (r.random_range(2..5), r.random_range(2..5));
    let (h2, w2) = (2 * h3, 2 * w3);
    let f2 = random_tensor(&mut r, &[4, h2, w2], 0.0, 1.0);
    let f3 = random_tensor(&mut r, &[5, h3, w3], 0.0, 1.0);
    let got = run(|g| {
        let a = g.constant(f2.clone());
        let b = g.constant(f3.clone());
        enc.mid_features(g, &store, a, b)
    });
    let mut cat = ref_resize(f2.data(), 4, h2, w2, h3, w3);
    cat.extend_from_slice(f3.data());
    let (wt, b) = conv_params(&store, &enc.downsample);
    let hw = h3 * w3;
    let want: Vec<f64> = (0..8 * hw)
        .map(|i| {
            let (o, p) = (i / hw, i % hw);
            b[o] + (0..9).map(|ci| wt[o * 9 + ci] * cat[ci * hw + p]).sum::<f64>()
        })
        .collect();
    max_diff(&got, &want)
}

fn msfe_fixture(seed: u64, c: usize) -> (ParamStore<f64>, Msfe, Rng64) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let m = Msfe::new(&mut store, c, &mut r);
    randomize(&mut store, &mut r, 0.5);
    (store, m, r)
}

pub fn oracle_fuse_modal(seed: u64) -> f64 {
    let (store, m, mut r) = msfe_fixture(seed, 8);
    let (h, w) = (r.random_range(2..9), r.random_range(2..9));
    let a = random_tensor(&mut r, &[8, h, w], -1.0, 1.0);
    let b = random_tensor(&mut r, &[8, h, w], -1.0, 1.0);
    let got = run(|g| {
        let x = g.constant(a.clone());
        let y = g.constant(b.clone());
        m.fuse_modal(g, &store, x, y)
    });
    let mut cat = a.data().to_vec();
    cat.extend_from_slice(b.data());
    let (wt, bias) = conv_params(&store, &m.modal_fusion);
    let (want, _, _) = ref_conv(&cat, 16, h, w, &wt, &bias, 8, 1, 1, 0, 1);
    max_diff(&got, &want)
}

pub fn oracle_spatial(seed: u64) -> f64 {
    let (store, m, mut r) = msfe_fixture(seed, 8);
    let (h, w) = (r.random_range(2..9), r.random_range(2..9));
    let x = random_tensor(&mut r, &[8, h, w], -1.0, 1.0);
    let got = run(|g| {
        let v = g.constant(x.clone());
        m.spatial_attention(g, &store, v)
    });
    let hw = h * w;
    let mut planes = vec![0.0; 2 * hw];
    for p in 0..hw {
        let px = pixel(x.data(), 8, hw, p);
        planes[p] = px.iter().sum::<f64>() / 8.0;
        planes[hw + p] = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let (wt, b) = conv_params(&store, &m.spatial_conv);
    let (pre, _, _) = ref_conv(&planes, 2, h, w, &wt, &b, 1, 3, 1, 1, 1);
    let want: Vec<f64> = pre.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    max_diff(&got, &want)
}

/// One dilation branch at a time with every other branch zeroed.
pub fn oracle_aspp(seed: u64) -> f64 {
    let (mut store, m, mut r) = msfe_fixture(seed, 8);
    let aspp = &m.aspp;
    let which = (seed % 4) as usize;
    for (i, conv) in aspp.branches.iter().enumerate() {
        if i != which {
            for id in [conv.weight, conv.bias] {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    for id in [aspp.image_pool.weight, aspp.image_pool.bias] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (h, w) = (5, 5);
    let cin = 10;
    let x = random_tensor(&mut r, &[cin, h, w], -1.0, 1.0);
    let got = run(|g| {
        let v = g.constant(x.clone());
        aspp.forward(g, &store, v)
    });
    let conv = aspp.branches[which];
    let (wt, b) = conv_params(&store, &conv);
    let rate = conv.geom.dilation;
    let (branch, _, _) = ref_conv(x.data(), cin, h, w, &wt, &b, aspp.branch_channels, 3, 1, rate, rate);
    let bc = aspp.branch_channels;
    let mut cat = vec![0.0; 5 * bc * h * w];
    for (i, v) in branch.iter().enumerate() {
        cat[which * bc * h * w + i] = v.max(0.0);
    }
    let (pw, pb) = conv_params(&store, &aspp.project);
    let (want, _, _) = ref_conv(&cat, 5 * bc, h, w, &pw, &pb, 8, 1, 1, 0, 1);
    max_diff(&got, &want)
}

pub fn oracle_prior_fusion(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let fusion = PriorFusion::new(&mut store, &mut r);
    randomize(&mut store, &mut r, 1.0);
    let (h, w) = (r.random_range(2..9), r.random_range(2..9));
    let comps: [Tensor<f64>; 4] = std::array::from_fn(|_| random_tensor(&mut r, &[h, w], 0.0, 1.0));
    let got = fusion.fuse(&store, comps.clone()).unwrap();
    let (wt, b) = conv_params(&store, &fusion.conv);
    let want: Vec<f64> = (0..h * w)
        .map(|p| {
            let logit = |o: usize| b[o] + (0..4).map(|i| wt[o * 4 + i] * comps[i].data()[p]).sum::<f64>();
            let (f, g) = (logit(0), logit(1));
            1.0 / (1.0 + (g - f).exp())
        })
        .collect();
    max_diff(got.data.data(), &want)
}

// ---------------------------------------------------------- gradient suite

pub const PROBE: [usize; 3] = [8, 6, 6];
pub const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` over every parameter of `store` and every entry of `inputs`.
pub fn gradient_check(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, store, &vars).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, store, &vars).unwrap();
    assert_eq!(g.value(out).len(), 1, "gradient probe must be scalar");
    let grads = g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let param_grads: Vec<(ParamId, Tensor<f64>)> = grads.params().map(|(id, t)| (id, t.clone())).collect();
    for (id, analytic) in param_grads {
        for j in 0..analytic.len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(store, inputs);
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(store, inputs);
            store.get_mut(id).data_mut()[j] = orig;
            worst = worse(worst, rel_err(analytic.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut probe = inputs.to_vec();
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(store, &probe);
            probe[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(store, &probe);
            probe[k].data_mut()[j] = orig;
            worst = worse(worst, rel_err(analytic.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Scalar read-out `mean(x ⊙ r)` with fixed random `r`.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(random_tensor(&mut r, &shape, -1.0, 1.0));
    let y = g.mul(x, w)?;
    Ok(g.mean(y))
}

fn probe_mask(seed: u64) -> BinaryMask {
    let mut r = rng(seed);
    loop {
        let m = random_mask(&mut r, 12, 12, 0.4);
        let s = ref_selection(&m, PROBE[1], PROBE[2], true);
        if s.iter().any(|&b| b) && s.iter().any(|&b| !b) {
            return m;
        }
    }
}

pub fn gradient_suite() -> Vec<Check> {
    let limit = 1e-3;
    vec![
        Check::new("cspmg fusion conv and prior path", grad_cspmg(), limit),
        Check::new("full msfe path", grad_msfe(), limit),
        Check::new("predict_mask wrt prototypes and features", grad_predict(), limit),
        Check::new("segmentation loss", grad_seg_loss(), limit),
        Check::new("prior loss", grad_prior_loss(), limit),
        Check::new("self-support loss", grad_ssp_loss(), limit),
        Check::new("weighted total loss", grad_total_loss(), limit),
    ]
}

pub fn grad_cspmg() -> f64 {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let fusion = PriorFusion::new(&mut store, &mut r);
    randomize(&mut store, &mut r, 1.0);
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut r, &PROBE, -1.0, 1.0)).collect();
    let mask = probe_mask(12);
    gradient_check(&mut store, &inputs, &|g, store, v| {
        let support = [(HighPair { rgb: v[0], refl: v[1] }, &mask)];
        let query = HighPair { rgb: v[2], refl: v[3] };
        let pv = generate_prior_var(g, store, &fusion, &support, query)?;
        readout(g, pv.prior, 13)
    })
}

pub fn grad_msfe() -> f64 {
    let (mut store, m, mut r) = msfe_fixture(21, PROBE[0]);
    let mut inputs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut r, &PROBE, -1.0, 1.0)).collect();
    inputs.push(random_tensor(&mut r, &[1, PROBE[1], PROBE[2]], 0.05, 0.95));
    gradient_check(&mut store, &inputs, &|g, store, v| {
        let s = m.fuse_modal(g, store, v[0], v[1])?;
        let q = m.fuse_modal(g, store, v[2], v[3])?;
        let out = m.forward(g, store, &[s], q, v[4])?;
        readout(g, out.enhanced, 22)
    })
}

pub fn grad_predict() -> f64 {
    let mut r = rng(31);
    let inputs = vec![
        random_tensor(&mut r, &[PROBE[0], 1, 1], -1.0, 1.0),
        random_tensor(&mut r, &[PROBE[0], 1, 1], -1.0, 1.0),
        random_tensor(&mut r, &PROBE, -1.0, 1.0),
    ];
    let mut store = ParamStore::new();
    gradient_check(&mut store, &inputs, &|g, _, v| {
        let probs = prototype::predict_var(g, PairVars { fg: v[0], bg: v[1] }, v[2], 10.0)?;
        let up = g.resize(probs, 12, 12)?;
        readout(g, up, 32)
    })
}

pub fn grad_seg_loss() -> f64 {
    let mut r = rng(41);
    let inputs = vec![random_tensor(&mut r, &[1, 12, 12], 0.02, 0.98)];
    let mask = probe_mask(42);
    let mut store = ParamStore::new();
    gradient_check(&mut store, &inputs, &|g, _, v| loss::seg_loss_var(g, v[0], &mask))
}

pub fn grad_prior_loss() -> f64 {
    let mut r = rng(51);
    let inputs = vec![random_tensor(&mut r, &[1, PROBE[1], PROBE[2]], 0.02, 0.98)];
    let mask = probe_mask(52);
    let mut store = ParamStore::new();
    gradient_check(&mut store, &inputs, &|g, _, v| loss::prior_loss_var(g, v[0], &mask))
}

pub fn grad_ssp_loss() -> f64 {
    let mut r = rng(61);
    let inputs = vec![
        random_tensor(&mut r, &[PROBE[0], 1, 1], -1.0, 1.0),
        random_tensor(&mut r, &PROBE, -1.0, 1.0),
        random_tensor(&mut r, &PROBE, -1.0, 1.0),
    ];
    let mask = probe_mask(62);
    let mut store = ParamStore::new();
    gradient_check(&mut store, &inputs, &|g, _, v| {
        loss::ssp_loss_var(g, v[0], v[1], v[2], &mask)
    })
}

pub fn grad_total_loss() -> f64 {
    let mut r = rng(71);
    let inputs = vec![
        random_tensor(&mut r, &[1, 12, 12], 0.02, 0.98),
        random_tensor(&mut r, &[1, PROBE[1], PROBE[2]], 0.02, 0.98),
        random_tensor(&mut r, &[PROBE[0], 1, 1], -1.0, 1.0),
        random_tensor(&mut r, &PROBE, -1.0, 1.0),
    ];
    let mask = probe_mask(72);
    let mut store = ParamStore::new();
    gradient_check(&mut store, &inputs, &|g, _, v| {
        let seg = loss::seg_loss_var(g, v[0], &mask)?;
        let prior = loss::prior_loss_var(g, v[1], &mask)?;
        let ssp = loss::ssp_loss_var(g, v[2], v[3], v[3], &mask)?;
        loss::total_loss_var(g, seg, prior, ssp, &LossWeights::default())
    })
}

pub fn geom(stride: usize, pad: usize, dil: usize) -> ConvGeom {
    ConvGeom::new(stride, pad, dil)
}
