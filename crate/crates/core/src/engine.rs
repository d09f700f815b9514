//! Episodic training, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::data::{augment_flip, sample_episode_indices, CrackDataset};
use crate::encoder::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::imageio::write_bytes_atomic;
use crate::loss::LossWeights;
use crate::model::{Network, PreparedEpisode, Toggles};
use crate::nn::ParamStore;
use crate::retinex::GaussianRetinex;
use crate::tensor::Tensor;
use crate::types::{BinaryMask, Episode};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CFSS1";

/// Attempts at drawing a training episode whose support masks survive the
/// trip to feature resolution.
pub const MAX_EPISODE_DRAWS: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_episodes: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub shots: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub loss_weights: LossWeights,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            batch_episodes: 4,
            lr0: 1e-3,
            lr_decay_every: 2000,
            lr_decay_factor: 0.1,
            shots: 1,
            seed: 0,
            toggles: Toggles::ALL,
            loss_weights: LossWeights::default(),
            backbone: BackboneConfig::tiny(),
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for key '{key}'"))),
    }
}

impl TrainConfig {
    /// Keys understood by [`TrainConfig::set`], in canonical order.
    pub const KEYS: [&'static str; 17] = [
        "iterations",
        "batch_episodes",
        "lr0",
        "lr_decay_every",
        "lr_decay_factor",
        "shots",
        "seed",
        "toggle.cspmg",
        "toggle.msfe",
        "toggle.pfm",
        "toggle.ssp",
        "lambda1",
        "lambda2",
        "lambda3",
        "backbone",
        "backbone.block_channels",
        "backbone.mid_channels",
    ];
    const EXTRA_KEYS: [&'static str; 1] = ["backbone.dilate_late_blocks"];

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_episodes < 1 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.lr_decay_every < 1 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        if self.shots < 1 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        self.loss_weights.validate()?;
        self.backbone.validate()
    }

    /// Whether `key` is a training key.
    pub fn knows(key: &str) -> bool {
        Self::KEYS.contains(&key) || Self::EXTRA_KEYS.contains(&key)
    }

    /// Sets one field from its textual form. `backbone` resets the channel
    /// layout to the named preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_episodes" => self.batch_episodes = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, value)?,
            "shots" => self.shots = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "toggle.cspmg" => self.toggles.cspmg = parse_bool(key, value)?,
            "toggle.msfe" => self.toggles.msfe = parse_bool(key, value)?,
            "toggle.pfm" => self.toggles.pfm = parse_bool(key, value)?,
            "toggle.ssp" => self.toggles.ssp = parse_bool(key, value)?,
            "lambda1" => self.loss_weights.lambda1 = parse_value(key, value)?,
            "lambda2" => self.loss_weights.lambda2 = parse_value(key, value)?,
            "lambda3" => self.loss_weights.lambda3 = parse_value(key, value)?,
            "backbone" => {
                let kind = BackboneKind::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown backbone '{value}'")))?;
                self.backbone = BackboneConfig::for_kind(kind);
            }
            "backbone.block_channels" => {
                let parts: Vec<usize> = value.split(',').map(|p| parse_value(key, p)).collect::<Result<_>>()?;
                self.backbone.block_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config("backbone.block_channels needs five values".into()))?;
            }
            "backbone.mid_channels" => self.backbone.mid_channels = parse_value(key, value)?,
            "backbone.dilate_late_blocks" => self.backbone.dilate_late_blocks = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` pairs; `backbone` goes first so explicit channel
    /// overrides survive it.
    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort_by_key(|(k, _)| *k != "backbone");
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Canonical `key = value` text covering every field.
    pub fn to_kv(&self) -> String {
        let b = &self.backbone;
        let channels = b
            .block_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let t = self.toggles;
        let w = self.loss_weights;
        let mut out = String::new();
        let rows: [(&str, String); 18] = [
            ("iterations", self.iterations.to_string()),
            ("batch_episodes", self.batch_episodes.to_string()),
            ("lr0", self.lr0.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("shots", self.shots.to_string()),
            ("seed", self.seed.to_string()),
            ("toggle.cspmg", t.cspmg.to_string()),
            ("toggle.msfe", t.msfe.to_string()),
            ("toggle.pfm", t.pfm.to_string()),
            ("toggle.ssp", t.ssp.to_string()),
            ("lambda1", w.lambda1.to_string()),
            ("lambda2", w.lambda2.to_string()),
            ("lambda3", w.lambda3.to_string()),
            ("backbone", b.kind.as_str().to_string()),
            ("backbone.block_channels", channels),
            ("backbone.mid_channels", b.mid_channels.to_string()),
            ("backbone.dilate_late_blocks", b.dilate_late_blocks.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses text produced by [`TrainConfig::to_kv`] (or any subset of it).
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mut cfg = Self::default();
        cfg.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_kv().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits `key = value` lines; `#` starts a comment. Duplicate keys are
/// rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), n + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// `lr0 · factor^⌊iteration / every⌋`, applied one drop at a time so that
/// decimal rates such as 1e-3 · 0.1 · 0.1 land on 1e-5 exactly.
pub fn learning_rate(iteration: usize, cfg: &TrainConfig) -> f64 {
    (0..lr_drops(iteration, cfg)).fold(cfg.lr0, |lr, _| lr * cfg.lr_decay_factor)
}

/// Number of decay steps applied by `iteration`. Past a few hundred drops
/// the rate itself underflows to zero, this count does not.
pub fn lr_drops(iteration: usize, cfg: &TrainConfig) -> usize {
    iteration / cfg.lr_decay_every.max(1)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads` is indexed like the store; absent entries are
    /// treated as zero gradients.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads.get(i).and_then(|g| g.as_ref());
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Losses of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub seg: f64,
    pub prior: f64,
    pub ssp: f64,
}

/// Mixes a base seed with a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        x = x
            .wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9))
            .wrapping_add(0x94d0_49bb_1331_11eb);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Whether a mask keeps both classes at the given grid.
pub fn survives_grid(mask: &BinaryMask, h: usize, w: usize) -> Result<bool> {
    let n = mask.downsample(h, w)?.count_foreground();
    Ok(n > 0 && n < h * w)
}

pub struct Trainer {
    pub network: Network<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub iteration: usize,
    decomposer: GaussianRetinex,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::new(&config.backbone, config.seed)?;
        Ok(Self::from_network(network, config))
    }

    pub fn from_network(network: Network<f32>, config: TrainConfig) -> Self {
        let optimizer = AdamW::new(&network.store);
        Self {
            network,
            config,
            optimizer,
            iteration: 0,
            decomposer: GaussianRetinex::default(),
        }
    }

    /// Seeded, flip-augmented training episode. Episodes whose support masks
    /// vanish at feature resolution are redrawn.
    pub fn draw_episode(&self, dataset: &CrackDataset, iteration: usize, slot: usize) -> Result<PreparedEpisode> {
        let (h, w) = dataset.resolution;
        let (gh, gw) = self.config.backbone.mid_grid(h, w);
        for attempt in 0..MAX_EPISODE_DRAWS {
            let seed = derive_seed(self.config.seed, &[iteration as u64, slot as u64, attempt]);
            let idx = sample_episode_indices(dataset, self.config.shots, seed)?;
            let mut samples: Vec<_> = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| augment_flip(dataset.sample(i), derive_seed(seed, &[k as u64])))
                .collect();
            let query = samples.pop().expect("episode has a query");
            let mut ok = true;
            for s in &samples {
                ok &= survives_grid(&s.mask, gh, gw)?;
            }
            if !ok {
                debug!("iteration {iteration} slot {slot}: redrawing degenerate episode");
                continue;
            }
            let episode = Episode::new(samples, query)?;
            return PreparedEpisode::new(&episode, &self.decomposer);
        }
        Err(Error::EmptyForeground { height: gh, width: gw })
    }

    pub fn draw_batch(&self, dataset: &CrackDataset, iteration: usize) -> Result<Vec<PreparedEpisode>> {
        (0..self.config.batch_episodes)
            .map(|slot| self.draw_episode(dataset, iteration, slot))
            .collect()
    }

    /// Forward and backward over a batch at the scheduled learning rate.
    pub fn train_step(&mut self, batch: &[PreparedEpisode]) -> Result<StepReport> {
        let lr = learning_rate(self.iteration, &self.config);
        self.train_step_with_lr(batch, lr)
    }

    pub fn train_step_with_lr(&mut self, batch: &[PreparedEpisode], lr: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let (grads, report) = self.batch_gradients(batch)?;
        self.optimizer.step(&mut self.network.store, &grads, lr);
        let report = StepReport {
            iteration: self.iteration,
            lr,
            ..report
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Batch-averaged loss and parameter gradients, summed in batch order.
    pub fn batch_gradients(&self, batch: &[PreparedEpisode]) -> Result<(Vec<Option<Tensor<f32>>>, StepReport)> {
        let net = &self.network;
        let scale = 1.0 / batch.len() as f32;
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; net.store.len()];
        let mut sums = [0.0f64; 4];
        for (e, episode) in batch.iter().enumerate() {
            let mut g = Graph::new();
            let fv = net.forward(&mut g, episode, self.config.toggles)?;
            let l = net.losses(&mut g, &fv, episode, &self.config.loss_weights)?;
            let named = [
                ("probabilities", fv.probabilities),
                ("prior mask", fv.prior),
                ("segmentation loss", l.seg),
                ("prior loss", l.prior),
                ("self-support loss", l.ssp),
                ("total loss", l.total),
            ];
            for (name, v) in named {
                if !g.value(v).all_finite() {
                    return Err(Error::NonFinite(format!("{name} (episode {e})")));
                }
            }
            for (slot, v) in sums.iter_mut().zip([l.total, l.seg, l.prior, l.ssp]) {
                *slot += g.value(v).data()[0] as f64;
            }
            let back = g.backward(l.total)?;
            for (id, grad) in back.params() {
                if !grad.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} (episode {e})",
                        net.store.name(id)
                    )));
                }
                let slot = &mut grads[id.index()];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b * scale;
                        }
                    }
                    None => *slot = Some(grad.map(|b| b * scale)),
                }
            }
        }
        let n = batch.len() as f64;
        Ok((
            grads,
            StepReport {
                iteration: self.iteration,
                lr: 0.0,
                total: sums[0] / n,
                seg: sums[1] / n,
                prior: sums[2] / n,
                ssp: sums[3] / n,
            },
        ))
    }

    /// Runs the remaining iterations, calling `on_step` after each.
    pub fn train(&mut self, dataset: &CrackDataset, mut on_step: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        let mut log = Vec::with_capacity(self.config.iterations.saturating_sub(self.iteration));
        while self.iteration < self.config.iterations {
            let batch = self.draw_batch(dataset, self.iteration)?;
            let r = self.train_step(&batch)?;
            if r.iteration % 50 == 0 {
                info!("iter {} lr {:.1e} loss {:.4}", r.iteration, r.lr, r.total);
            }
            on_step(&r);
            log.push(r);
        }
        Ok(log)
    }
}

/// Mean of foreground and background IoU. A class absent from both masks
/// scores 1.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::arg(format!(
            "miou of {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        for (c, want) in [1u8, 0u8].into_iter().enumerate() {
            let (a, b) = (p == want, t == want);
            inter[c] += (a && b) as usize;
            union[c] += (a || b) as usize;
        }
    }
    let iou = |c: usize| {
        if union[c] == 0 {
            1.0
        } else {
            inter[c] as f64 / union[c] as f64
        }
    };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Foreground IoU alone; 1 when neither mask has foreground.
pub fn foreground_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::arg("foreground_iou of masks with different sizes"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        inter += (p == 1 && t == 1) as usize;
        union += (p == 1 || t == 1) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_episode_iou: Vec<f64>,
    pub shots: usize,
    pub episode_count: usize,
    pub skipped: usize,
    pub config_digest: String,
}

impl EvalReport {
    /// The one-line metrics record.
    pub fn json_line(&self) -> String {
        serde_json::json!({
            "miou": self.miou,
            "shots": self.shots,
            "episodes": self.episode_count,
            "skipped": self.skipped,
            "config_digest": self.config_digest,
        })
        .to_string()
    }
}

/// Mean mIoU over seeded episodes. Episodes whose masks vanish at feature
/// resolution are skipped, logged and counted.
pub fn evaluate(
    network: &Network<f32>,
    cfg: &TrainConfig,
    dataset: &CrackDataset,
    shots: usize,
    episode_count: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episode_count == 0 {
        return Err(Error::arg("episode count must be at least 1"));
    }
    let decomposer = GaussianRetinex::default();
    let mut per_episode_iou = Vec::with_capacity(episode_count);
    let mut skipped = 0;
    for i in 0..episode_count {
        let idx = sample_episode_indices(dataset, shots, derive_seed(seed, &[i as u64]))?;
        let support = idx[..shots].iter().map(|&j| dataset.sample(j).clone()).collect();
        let episode = Episode::new(support, dataset.sample(idx[shots]).clone())?;
        let prepared = PreparedEpisode::new(&episode, &decomposer)?;
        match network.predict(&prepared, cfg.toggles) {
            Ok(p) => per_episode_iou.push(miou(&p.mask(), &prepared.query_mask)?),
            Err(e) if e.is_degenerate_mask() => {
                warn!("episode {i} skipped: {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if per_episode_iou.is_empty() {
        return Err(Error::arg(format!(
            "all {episode_count} episodes were degenerate at feature resolution"
        )));
    }
    let miou = per_episode_iou.iter().sum::<f64>() / per_episode_iou.len() as f64;
    Ok(EvalReport {
        miou,
        per_episode_iou,
        shots,
        episode_count,
        skipped,
        config_digest: cfg.digest(),
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serialises parameters with their config.
pub fn checkpoint_bytes(store: &ParamStore<f32>, cfg: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let text = cfg.to_kv();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(cfg.digest().as_bytes());
    put_u32(&mut out, store.len());
    for (_, name, t) in store.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(store: &ParamStore<f32>, cfg: &TrainConfig, path: &Path) -> Result<()> {
    write_bytes_atomic(path, &checkpoint_bytes(store, cfg))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

/// Parsed checkpoint contents.
pub struct CheckpointData {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor<f32>)>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CFSS1 checkpoint".into()));
    }
    let n = r.u32()?;
    let text = r.str(n)?;
    let config = TrainConfig::from_kv(text)?;
    let digest = r.str(64)?;
    if digest != config.digest() {
        return Err(Error::Checkpoint("config digest does not match config text".into()));
    }
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = r.str(n)?.to_string();
        let ndim = r.u32()?;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(CheckpointData { config, params })
}

/// Copies named parameters into `store`; every parameter must be present
/// with a matching shape.
pub fn restore_params(store: &mut ParamStore<f32>, params: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in params {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, t)?;
    }
    Ok(())
}

/// Loads a checkpoint with the network layout it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, TrainConfig)> {
    let data = parse_checkpoint(&std::fs::read(path)?)?;
    let mut network = Network::new(&data.config.backbone, 0)?;
    restore_params(&mut network.store, data.params)?;
    Ok((network, data.config))
}

/// Loads parameters into a network built for `expected`; a layout
/// mismatch is an error.
pub fn load_checkpoint_as(path: &Path, expected: &TrainConfig) -> Result<Network<f32>> {
    let data = parse_checkpoint(&std::fs::read(path)?)?;
    let mut network = Network::new(&expected.backbone, 0)?;
    restore_params(&mut network.store, data.params)?;
    Ok(network)
}
