//! Contrastive training of the embedding head: two cosine triplet losses,
//! a temperature-annealed KL anchor to the frozen head, AdamW updates and
//! finite-difference gradient checks.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{normalize_or_e1, Embedding, EmbeddingHead, PatchFeatures, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::rng::{mix, stream, CounterRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub margin1: f64,
    pub margin2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_kl: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub embed_dim: usize,
    pub patch_size: usize,
    /// Checkpoints retained in the ring.
    pub keep_checkpoints: usize,
    /// Use `d(a,n) − d(a,p) + m` instead of the standard `d(a,p) − d(a,n) + m`.
    pub printed_triplet_order: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            margin1: 0.3,
            margin2: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_kl: 0.05,
            t_start: 0.01,
            t_end: 1.0,
            epochs: 80,
            batch_size: 16,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            embed_dim: 64,
            patch_size: 14,
            keep_checkpoints: 10,
            printed_triplet_order: false,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Desk-scale preset: same losses, larger step size, fewer epochs.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.margin1 < 0.0 || self.margin2 < 0.0 {
            return Err(Error::Config("margins must be ≥ 0".into()));
        }
        if !(self.t_start > 0.0 && self.t_start <= self.t_end) {
            return Err(Error::Config("temperatures must satisfy 0 < t_start ≤ t_end".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda_kl < 0.0 {
            return Err(Error::Config("loss weights must be ≥ 0".into()));
        }
        if self.embed_dim == 0 || self.patch_size < 2 {
            return Err(Error::Config("embed_dim ≥ 1 and patch_size ≥ 2 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet1: f64,
    pub triplet2: f64,
    pub kl: f64,
    pub total: f64,
    pub temperature: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit_input(e: &Embedding) -> Result<Vec<f64>> {
    let v = e.to_f64();
    if v.is_empty() || dot(&v, &v) == 0.0 {
        return Err(Error::Degenerate("zero vector in cosine distance".into()));
    }
    Ok(v)
}

pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch("embedding dimensions differ".into()));
    }
    let (a, b) = (check_unit_input(a)?, check_unit_input(b)?);
    Ok(1.0 - dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt()))
}

pub fn triplet_margin_loss(a: &Embedding, p: &Embedding, n: &Embedding, m: f64) -> Result<f64> {
    if m < 0.0 {
        return Err(Error::InvalidArgument("margin must be ≥ 0".into()));
    }
    Ok((cosine_distance(a, p)? - cosine_distance(a, n)? + m).max(0.0))
}

/// Returns (log p, log q) for p = softmax(e/T), q = softmax(f/T).
fn log_softmaxes(e: &[f64], f: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let ls = |v: &[f64]| {
        let z: Vec<f64> = v.iter().map(|x| x / t).collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        z.into_iter().map(|x| x - lse).collect::<Vec<_>>()
    };
    (ls(e), ls(f))
}

fn kl_f64(e: &[f64], f: &[f64], t: f64) -> f64 {
    let (lp, lq) = log_softmaxes(e, f, t);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

/// KL and its gradient with respect to `e`.
fn kl_grad(e: &[f64], f: &[f64], t: f64) -> (f64, Vec<f64>) {
    let (lp, lq) = log_softmaxes(e, f, t);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let g = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b - kl) / t)
        .collect();
    (kl.max(0.0), g)
}

pub fn kl_regularizer(e: &Embedding, e_frozen: &Embedding, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")));
    }
    if e.dim() != e_frozen.dim() {
        return Err(Error::DimensionMismatch("embedding dimensions differ".into()));
    }
    Ok(kl_f64(&e.to_f64(), &e_frozen.to_f64(), t))
}

pub fn temperature_schedule(epoch: usize, total_epochs: usize, t_start: f64, t_end: f64) -> f64 {
    if total_epochs <= 1 {
        return t_end;
    }
    if epoch + 1 >= total_epochs {
        return t_end;
    }
    t_start + (t_end - t_start) * epoch as f64 / (total_epochs - 1) as f64
}

/// Embeddings of one record under the current and frozen heads.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEmbeddings {
    pub id: String,
    pub key: u64,
    pub target: Vec<f64>,
    pub reference: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub frozen_target: Vec<f64>,
}

/// Fair coins for one record and epoch: (anchor is target, negative2 is pos).
pub fn record_coins(key: u64, epoch: usize) -> (bool, bool) {
    let c = CounterRng::new(mix(&[key, epoch as u64]));
    (c.uniform(0, 0) < 0.5, c.uniform(0, 1) < 0.5)
}

#[derive(Debug, Clone, Default)]
struct RecordGrads {
    // target, reference, pos, neg
    g: [Vec<f64>; 4],
    triplet1: f64,
    triplet2: f64,
    kl: f64,
    hinge_args: [f64; 2],
}

fn record_loss(r: &RecordEmbeddings, cfg: &TrainerConfig, epoch: usize, t: f64) -> RecordGrads {
    let d = r.target.len();
    let mut g: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d]);
    let (anchor_target, neg2_pos) = record_coins(r.key, epoch);
    let dist = |a: &[f64], b: &[f64]| 1.0 - dot(a, b);
    let sign = if cfg.printed_triplet_order { -1.0 } else { 1.0 };

    // Triplet 1: anchor f_i or f_r, positive f_d^p, negative f_d^n.
    let ai = if anchor_target { 0 } else { 1 };
    let a1 = if anchor_target { &r.target } else { &r.reference };
    let arg1 = sign * (dist(a1, &r.pos) - dist(a1, &r.neg)) + cfg.margin1;
    let t1 = arg1.max(0.0);
    if arg1 > 0.0 {
        // ∂(−a·p + a·n) = (n − p) on a, −a on p, a on n.
        let w = cfg.lambda1 * sign;
        for k in 0..d {
            g[ai][k] += w * (r.neg[k] - r.pos[k]);
            g[2][k] -= w * a1[k];
            g[3][k] += w * a1[k];
        }
    }

    // Triplet 2: anchor f_r, positive f_i, negative f_d^p or f_d^n.
    let ni = if neg2_pos { 2 } else { 3 };
    let n2 = if neg2_pos { &r.pos } else { &r.neg };
    let arg2 = sign * (dist(&r.reference, &r.target) - dist(&r.reference, n2)) + cfg.margin2;
    let t2 = arg2.max(0.0);
    if arg2 > 0.0 {
        let w = cfg.lambda2 * sign;
        for k in 0..d {
            g[1][k] += w * (n2[k] - r.target[k]);
            g[0][k] -= w * r.reference[k];
            g[ni][k] += w * r.reference[k];
        }
    }

    let (kl, gk) = kl_grad(&r.target, &r.frozen_target, t);
    for k in 0..d {
        g[0][k] += cfg.lambda_kl * gk[k];
    }
    RecordGrads {
        g,
        triplet1: t1,
        triplet2: t2,
        kl,
        hinge_args: [arg1, arg2],
    }
}

fn breakdown(parts: impl Iterator<Item = (f64, f64, f64)>, n: usize, cfg: &TrainerConfig, t: f64) -> LossBreakdown {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (x, y, z) in parts {
        a += x;
        b += y;
        c += z;
    }
    let n = n as f64;
    let (triplet1, triplet2, kl) = (a / n, b / n, c / n);
    LossBreakdown {
        triplet1,
        triplet2,
        kl,
        total: cfg.lambda1 * triplet1 + cfg.lambda2 * triplet2 + cfg.lambda_kl * kl,
        temperature: t,
    }
}

/// Batch-mean losses combined with the configured weights.
pub fn total_loss(batch: &[RecordEmbeddings], cfg: &TrainerConfig, epoch: usize) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::NoSamples);
    }
    let t = temperature_schedule(epoch, cfg.epochs, cfg.t_start, cfg.t_end);
    let parts = batch.iter().map(|r| {
        let g = record_loss(r, cfg, epoch, t);
        (g.triplet1, g.triplet2, g.kl)
    });
    Ok(breakdown(parts, batch.len(), cfg, t))
}

// ---------------------------------------------------------------------------
// Head forward/backward in f64

/// Patch features of the four images of a record, plus its coin key.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub key: u64,
    /// target, reference, pos, neg
    pub feats: [PatchFeatures; 4],
}

struct ForwardCache {
    /// Per patch: raw projection norm and unit vector (None when degenerate).
    patches: Vec<(f64, Option<Vec<f64>>)>,
    mean_norm: f64,
    e: Vec<f64>,
}

fn forward(w: &[f64], b: &[f64], d: usize, feat: &PatchFeatures) -> ForwardCache {
    let f = FEATURE_DIM;
    let p = feat.len();
    let mut mean = vec![0f64; d];
    let mut patches = Vec::with_capacity(p);
    for x in feat.data.chunks_exact(f) {
        let mut y = b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wv) in y.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                *o += xi * wv;
            }
        }
        let n = normalize_or_e1(&mut y);
        for (m, v) in mean.iter_mut().zip(&y) {
            *m += v;
        }
        let live = n >= crate::embed::DEGENERATE_NORM;
        patches.push((n, live.then_some(y)));
    }
    mean.iter_mut().for_each(|m| *m /= p as f64);
    let mean_norm = normalize_or_e1(&mut mean);
    ForwardCache {
        patches,
        mean_norm,
        e: mean,
    }
}

fn backward(cache: &ForwardCache, feat: &PatchFeatures, g_e: &[f64], grad: &mut [f64], d: usize) {
    if cache.mean_norm < crate::embed::DEGENERATE_NORM {
        return;
    }
    let f = FEATURE_DIM;
    let p = cache.patches.len() as f64;
    let ge = dot(&cache.e, g_e);
    let g_m: Vec<f64> = (0..d)
        .map(|k| (g_e[k] - cache.e[k] * ge) / cache.mean_norm / p)
        .collect();
    let (gw, gb) = grad.split_at_mut(f * d);
    for ((n, u), x) in cache.patches.iter().zip(feat.data.chunks_exact(f)) {
        let Some(u) = u else { continue };
        let gu = dot(u, &g_m);
        let gy: Vec<f64> = (0..d).map(|k| (g_m[k] - u[k] * gu) / n).collect();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &g) in gw[i * d..(i + 1) * d].iter_mut().zip(&gy) {
                *o += xi * g;
            }
        }
        for (o, g) in gb.iter_mut().zip(&gy) {
            *o += g;
        }
    }
}

/// Image-level embedding of features under raw parameters.
pub fn embed_features(w: &[f64], b: &[f64], d: usize, feat: &PatchFeatures) -> Vec<f64> {
    forward(w, b, d, feat).e
}

fn param_len(head: &EmbeddingHead) -> usize {
    head.input_dim() * head.output_dim() + head.output_dim()
}

struct BatchEval {
    loss: LossBreakdown,
    grad: Vec<f64>,
    hinge_args: Vec<f64>,
}

/// Loss and parameter gradient for a batch; `frozen` holds the frozen
/// target embedding of each sample.
fn batch_gradient(
    w: &[f64],
    b: &[f64],
    d: usize,
    batch: &[&TrainSample],
    frozen: &[&Vec<f64>],
    cfg: &TrainerConfig,
    epoch: usize,
) -> Result<BatchEval> {
    let t = temperature_schedule(epoch, cfg.epochs, cfg.t_start, cfg.t_end);
    let n = batch.len() as f64;
    let plen = FEATURE_DIM * d + d;
    let per: Vec<(RecordGrads, Vec<f64>)> = batch
        .par_iter()
        .zip(frozen.par_iter())
        .map(|(s, fz)| {
            let caches: Vec<ForwardCache> = s.feats.iter().map(|f| forward(w, b, d, f)).collect();
            let rec = RecordEmbeddings {
                id: s.id.clone(),
                key: s.key,
                target: caches[0].e.clone(),
                reference: caches[1].e.clone(),
                pos: caches[2].e.clone(),
                neg: caches[3].e.clone(),
                frozen_target: (*fz).clone(),
            };
            let rg = record_loss(&rec, cfg, epoch, t);
            let mut grad = vec![0f64; plen];
            for (i, c) in caches.iter().enumerate() {
                let ge: Vec<f64> = rg.g[i].iter().map(|v| v / n).collect();
                backward(c, &s.feats[i], &ge, &mut grad, d);
            }
            (rg, grad)
        })
        .collect();
    let mut grad = vec![0f64; plen];
    let mut hinge_args = Vec::with_capacity(2 * per.len());
    for ((rg, g), s) in per.iter().zip(batch) {
        let finite = rg.triplet1.is_finite()
            && rg.triplet2.is_finite()
            && rg.kl.is_finite()
            && g.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(s.id.clone()));
        }
        for (o, v) in grad.iter_mut().zip(g) {
            *o += v;
        }
        hinge_args.extend(rg.hinge_args);
    }
    let loss = breakdown(per.iter().map(|(r, _)| (r.triplet1, r.triplet2, r.kl)), batch.len(), cfg, t);
    Ok(BatchEval {
        loss,
        grad,
        hinge_args,
    })
}

// ---------------------------------------------------------------------------
// Optimizer state and loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub head: EmbeddingHead,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub epoch: usize,
}

impl TrainerState {
    pub fn new(head: EmbeddingHead) -> Self {
        let n = param_len(&head);
        Self {
            head,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            epoch: 0,
        }
    }

    pub fn init(cfg: &TrainerConfig) -> Result<Self> {
        Ok(Self::new(EmbeddingHead::random(
            FEATURE_DIM,
            cfg.embed_dim,
            mix(&[cfg.seed, 0x696e_6974]),
        )?))
    }
}

/// Frozen-head target embeddings, one per sample.
pub fn frozen_targets(head: &EmbeddingHead, samples: &[TrainSample]) -> Vec<Vec<f64>> {
    let d = head.output_dim();
    samples
        .par_iter()
        .map(|s| embed_features(head.frozen_weights(), head.frozen_bias(), d, &s.feats[0]))
        .collect()
}

fn adamw(state: &mut TrainerState, grad: &[f64], cfg: &TrainerConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let TrainerState { head, m, v, .. } = state;
    let (w, b) = head.params_mut();
    let params = w.iter_mut().chain(b.iter_mut());
    for (((p, g), mi), vi) in params.zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let mh = *mi / bc1;
        let vh = *vi / bc2;
        *p = *p * (1.0 - cfg.learning_rate * cfg.weight_decay) - cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
    }
}

/// One optimizer update on `batch`. `frozen` holds the frozen target
/// embedding of each batch entry.
pub fn train_step(
    state: &mut TrainerState,
    batch: &[&TrainSample],
    frozen: &[&Vec<f64>],
    cfg: &TrainerConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() || batch.len() != frozen.len() {
        return Err(Error::InvalidArgument("batch and frozen targets must be nonempty and aligned".into()));
    }
    let d = state.head.output_dim();
    let eval = batch_gradient(
        state.head.weights(),
        state.head.bias(),
        d,
        batch,
        frozen,
        cfg,
        state.epoch,
    )?;
    adamw(state, &eval.grad, cfg);
    Ok(eval.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: u64,
    pub epoch: usize,
    pub triplet1: f64,
    pub triplet2: f64,
    pub kl: f64,
    pub total: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub head: EmbeddingHead,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Checkpoint {
    fn of(state: &TrainerState) -> Self {
        Self {
            epoch: state.epoch,
            step: state.step,
            head: state.head.clone(),
            m: state.m.clone(),
            v: state.v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// The last `keep_checkpoints` per-epoch checkpoints, oldest first.
    pub checkpoints: VecDeque<Checkpoint>,
    pub log: Vec<LossLogRow>,
    pub state: TrainerState,
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(&[seed, 0x7368_7566, epoch as u64]);
    idx.shuffle(&mut rng);
    idx
}

/// Trains for `cfg.epochs`, calling `on_epoch` with every checkpoint.
pub fn train_loop_with(
    samples: &[TrainSample],
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let mut state = TrainerState::init(cfg)?;
    let frozen = frozen_targets(&state.head, samples);
    let mut ring = VecDeque::new();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let fz: Vec<&Vec<f64>> = chunk.iter().map(|&i| &frozen[i]).collect();
            let l = train_step(&mut state, &batch, &fz, cfg)?;
            log.push(LossLogRow {
                step: state.step,
                epoch,
                triplet1: l.triplet1,
                triplet2: l.triplet2,
                kl: l.kl,
                total: l.total,
                temperature: l.temperature,
            });
        }
        let ck = Checkpoint::of(&state);
        on_epoch(&ck)?;
        ring.push_back(ck);
        while ring.len() > cfg.keep_checkpoints.max(1) {
            ring.pop_front();
        }
    }
    Ok(TrainOutput {
        checkpoints: ring,
        log,
        state,
    })
}

pub fn train_loop(samples: &[TrainSample], cfg: &TrainerConfig) -> Result<TrainOutput> {
    train_loop_with(samples, cfg, |_| Ok(()))
}

pub fn write_loss_log(rows: &[LossLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// NVCK checkpoints
//
// magic "NVCK", u16 version, u32 F, u32 D, u32 epoch, u64 step, then f32
// little-endian arrays: W (F×D row-major), b (D), m, v (F×D + D each),
// frozen W, frozen b.

pub const NVCK_MAGIC: &[u8; 4] = b"NVCK";
pub const NVCK_VERSION: u16 = 1;

fn round32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

impl Checkpoint {
    /// The checkpoint as stored on disk (parameters rounded to f32).
    pub fn stored(&self) -> Result<Self> {
        let h = &self.head;
        Ok(Self {
            epoch: self.epoch,
            step: self.step,
            head: EmbeddingHead::with_frozen(
                h.input_dim(),
                h.output_dim(),
                round32(h.weights()),
                round32(h.bias()),
                round32(h.frozen_weights()),
                round32(h.frozen_bias()),
            )?,
            m: round32(&self.m),
            v: round32(&self.v),
        })
    }
}

pub fn write_checkpoint_to(ck: &Checkpoint, w: &mut impl Write) -> Result<()> {
    let h = &ck.head;
    let (f, d) = (h.input_dim(), h.output_dim());
    let mut buf = Vec::new();
    buf.extend_from_slice(NVCK_MAGIC);
    buf.extend_from_slice(&NVCK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(ck.epoch as u32).to_le_bytes());
    buf.extend_from_slice(&ck.step.to_le_bytes());
    for arr in [h.weights(), h.bias(), &ck.m, &ck.v, h.frozen_weights(), h.frozen_bias()] {
        for &x in arr {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<stream>", e))
}

pub fn read_checkpoint_from(r: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<stream>", e))?;
    if bytes.len() < 26 || &bytes[..4] != NVCK_MAGIC {
        return Err(Error::Format("bad magic, expected NVCK".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != NVCK_VERSION {
        return Err(Error::Format(format!("unsupported NVCK version {version}")));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (f, d, epoch) = (u32_at(6), u32_at(10), u32_at(14));
    let step = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    let p = f * d + d;
    let expected = 26 + 4 * (f * d + d + 2 * p + f * d + d);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint has {} bytes, expected {expected} for F={f}, D={d}",
            bytes.len()
        )));
    }
    let mut floats = bytes[26..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f64>>();
    let w = take(f * d);
    let b = take(d);
    let m = take(p);
    let v = take(p);
    let fw = take(f * d);
    let fb = take(d);
    Ok(Checkpoint {
        epoch,
        step,
        head: EmbeddingHead::with_frozen(f, d, w, b, fw, fb)?,
        m,
        v,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint_to(ck, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(&mut f)
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub compared: usize,
    pub batches: usize,
    pub skipped_batches: usize,
}

pub const GRAD_CHECK_H: f64 = 1e-4;
const KINK_BAND: f64 = 1e-3;

fn random_features(rng: &mut impl Rng, patches: usize) -> PatchFeatures {
    PatchFeatures {
        grid_h: 1,
        grid_w: patches,
        data: (0..patches * FEATURE_DIM)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
    }
}

/// Compares analytic gradients with central differences on random heads
/// and batches. `corrupt` scales the first compared analytic entry by 1.01.
pub fn check_gradients(cfg: &TrainerConfig, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    const BATCHES: usize = 10;
    const PER_BATCH: usize = 24;
    const RECORDS: usize = 4;
    const PATCHES: usize = 3;
    let d = cfg.embed_dim.min(16);
    let mut rng = stream(&[seed, 0x6772_6164]);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        compared: 0,
        batches: 0,
        skipped_batches: 0,
    };
    let mut corrupted = !corrupt;
    let mut attempt = 0usize;
    while report.batches < BATCHES || report.compared < 200 {
        attempt += 1;
        if attempt > 1000 {
            return Err(Error::Degenerate("gradient check could not find kink-free batches".into()));
        }
        let head = EmbeddingHead::random(FEATURE_DIM, d, rng.random())?;
        // Perturb away from the frozen snapshot so KL is active.
        let w0: Vec<f64> = head.weights().iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect();
        let b0: Vec<f64> = (0..d).map(|_| 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let samples: Vec<TrainSample> = (0..RECORDS)
            .map(|i| TrainSample {
                id: format!("g{attempt}-{i}"),
                key: rng.random(),
                feats: std::array::from_fn(|_| random_features(&mut rng, PATCHES)),
            })
            .collect();
        let frozen = frozen_targets(&head, &samples);
        let batch: Vec<&TrainSample> = samples.iter().collect();
        let fz: Vec<&Vec<f64>> = frozen.iter().collect();
        let epoch = attempt % cfg.epochs.max(1);
        let eval = batch_gradient(&w0, &b0, d, &batch, &fz, cfg, epoch)?;
        if eval.hinge_args.iter().any(|a| a.abs() < KINK_BAND) {
            report.skipped_batches += 1;
            continue;
        }
        let mut analytic = eval.grad;
        let loss_at = |w: &[f64], b: &[f64]| -> Result<f64> {
            Ok(batch_gradient(w, b, d, &batch, &fz, cfg, epoch)?.loss.total)
        };
        let plen = analytic.len();
        for _ in 0..PER_BATCH {
            let j = rng.random_range(0..plen);
            let (mut wp, mut bp) = (w0.clone(), b0.clone());
            let (mut wm, mut bm) = (w0.clone(), b0.clone());
            if j < w0.len() {
                wp[j] += GRAD_CHECK_H;
                wm[j] -= GRAD_CHECK_H;
            } else {
                bp[j - w0.len()] += GRAD_CHECK_H;
                bm[j - w0.len()] -= GRAD_CHECK_H;
            }
            let numeric = (loss_at(&wp, &bp)? - loss_at(&wm, &bm)?) / (2.0 * GRAD_CHECK_H);
            if !corrupted && analytic[j].abs() + numeric.abs() > 1e-8 {
                analytic[j] *= 1.01;
                corrupted = true;
            }
            let a = analytic[j];
            if a.abs() + numeric.abs() <= 1e-8 {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            report.compared += 1;
        }
        report.batches += 1;
    }
    Ok(report)
}
