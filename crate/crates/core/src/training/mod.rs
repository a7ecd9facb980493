//! Pole-ID splits, batch construction and the epoch loop for the
//! contrastive (CL) and supervised siamese (SL) regimes.

pub mod loss;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{backward, forward, AdamState, EncoderParams, Tensor, DEFAULT_EMB_DIM};
use crate::error::{Error, Result};
use crate::eval::{embed_all, evaluate_descriptors};
use crate::image::PoleImage;
use crate::rng::{derive, purpose, SplitMix64};

pub use loss::{nt_xent_loss, sl_bce_loss, SlCalibration, SlLoss};

/// Name of the checkpoint tensor holding `[alpha, beta]` after SL training.
pub const SL_CALIBRATION_TENSOR: &str = "sl.calibration";

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub pole_id: u64,
    pub session_id: u32,
    pub image: PoleImage,
}

/// Observations with unique `(pole_id, session_id)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    items: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(items: Vec<Observation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for o in &items {
            if !seen.insert((o.pole_id, o.session_id)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate observation (pole {}, session {})",
                    o.pole_id, o.session_id
                )));
            }
        }
        Ok(Self { items })
    }

    /// Builds a set from images carrying pole ids.
    pub fn from_images(images: Vec<PoleImage>) -> Result<Self> {
        let items = images
            .into_iter()
            .map(|image| {
                let pole_id = image
                    .pole_id
                    .ok_or_else(|| Error::InvalidArgument("training images need pole ids".into()))?;
                Ok(Observation { pole_id, session_id: image.session_id, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn items(&self) -> &[Observation] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pole_ids(&self) -> Vec<u64> {
        self.items.iter().map(|o| o.pole_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Observation indices per pole id, in set order.
    pub fn groups(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut g: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, o) in self.items.iter().enumerate() {
            g.entry(o.pole_id).or_default().push(i);
        }
        g
    }

    /// Observations whose pole id is in `ids`, order preserved.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> Self {
        Self { items: self.items.iter().filter(|o| ids.contains(&o.pole_id)).cloned().collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Cl,
    Sl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub batch_pole_ids: usize,
    pub sl_batch_pairs: usize,
    pub split_ratio: f64,
    pub augment_shift: bool,
    pub emb_dim: usize,
    /// Validation queries come from this session.
    pub val_query_session: u32,
    /// Validation database session.
    pub val_db_session: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Cl,
            epochs: 30,
            lr: 1e-3,
            temperature: 0.07,
            batch_pole_ids: 32,
            sl_batch_pairs: 64,
            split_ratio: 0.8,
            augment_shift: false,
            emb_dim: DEFAULT_EMB_DIM,
            val_query_session: 0,
            val_db_session: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        if self.batch_pole_ids < 2 {
            return bad(format!("batch_pole_ids must be at least 2, got {}", self.batch_pole_ids));
        }
        if self.sl_batch_pairs == 0 {
            return bad("sl_batch_pairs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.emb_dim == 0 {
            return bad("emb_dim must be positive".into());
        }
        if self.val_query_session == self.val_db_session {
            return bad("val_query_session and val_db_session must differ".into());
        }
        Ok(())
    }
}

/// Shuffles the distinct pole ids and assigns the first `round(ratio · n)`
/// (kept within `[1, n − 1]`) to the training side.
pub fn split_by_pole(obs: &ObservationSet, ratio: f64, seed: u64) -> Result<(ObservationSet, ObservationSet)> {
    let mut ids = obs.pole_ids();
    if ids.len() < 2 {
        return Err(Error::Split(format!("need at least 2 distinct pole ids, found {}", ids.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    SplitMix64::stream(seed, purpose::SPLIT, 0).shuffle(&mut ids);
    let n_train = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train: BTreeSet<u64> = ids[..n_train].iter().copied().collect();
    let val: BTreeSet<u64> = ids[n_train..].iter().copied().collect();
    Ok((obs.subset(&train), obs.subset(&val)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    /// Index into the training set.
    pub obs: usize,
    /// Circular column shift applied before encoding.
    pub shift: i64,
}

/// `2N` views laid out as `(a_1..a_N, b_1..b_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClBatch {
    pub views: Vec<View>,
}

impl ClBatch {
    pub fn n(&self) -> usize {
        self.views.len() / 2
    }

    pub fn positive(&self, i: usize) -> usize {
        (i + self.n()) % self.views.len()
    }
}

/// Picks two distinct observations per chosen pole id, preferring a pair
/// from different sessions.
pub fn build_cl_batch(train: &ObservationSet, ids: &[u64], seed: u64, augment_shift: bool) -> Result<ClBatch> {
    let groups = train.groups();
    let mut rng = SplitMix64::stream(seed, purpose::CL_BATCH, 0);
    let mut a = Vec::with_capacity(ids.len());
    let mut b = Vec::with_capacity(ids.len());
    for id in ids {
        let members = groups.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() < 2 {
            return Err(Error::Batch(format!("pole {id} has {} observation(s), need at least 2", members.len())));
        }
        let first = members[rng.below(members.len() as u64) as usize];
        let session = train.items[first].session_id;
        let others: Vec<usize> = members.iter().copied().filter(|&m| train.items[m].session_id != session).collect();
        let pool: Vec<usize> =
            if others.is_empty() { members.iter().copied().filter(|&m| m != first).collect() } else { others };
        let second = pool[rng.below(pool.len() as u64) as usize];
        a.push(first);
        b.push(second);
    }
    let cols = train.items.first().map_or(1, |o| o.image.cols()) as u64;
    let views = a
        .into_iter()
        .chain(b)
        .map(|obs| View { obs, shift: if augment_shift { rng.below(cols) as i64 } else { 0 } })
        .collect();
    Ok(ClBatch { views })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlPair {
    pub i: usize,
    pub j: usize,
    pub label: u8,
}

const PAIR_ATTEMPTS: usize = 10_000;

/// `⌈count/2⌉` positive then `⌊count/2⌋` negative pairs, never repeating an
/// unordered observation pair.
pub fn build_sl_pairs(train: &ObservationSet, count: usize, seed: u64) -> Result<Vec<SlPair>> {
    let groups = train.groups();
    if groups.len() < 2 {
        return Err(Error::Pairing(format!("need at least 2 pole ids, found {}", groups.len())));
    }
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::Pairing("no pole id has two observations, cannot form a positive pair".into()));
    }
    let mut rng = SplitMix64::stream(seed, purpose::SL_PAIRS, 0);
    let mut used = HashSet::new();
    let mut pairs = Vec::with_capacity(count);
    let n_pos = count.div_ceil(2);
    let n_obs = train.len() as u64;

    let mut attempts = 0;
    while pairs.len() < n_pos {
        let g = multi[rng.below(multi.len() as u64) as usize];
        let x = g[rng.below(g.len() as u64) as usize];
        let y = g[rng.below(g.len() as u64) as usize];
        if x != y && used.insert((x.min(y), x.max(y))) {
            pairs.push(SlPair { i: x, j: y, label: 1 });
        } else {
            attempts += 1;
            if attempts > PAIR_ATTEMPTS {
                return Err(Error::Pairing(format!("could not form {n_pos} distinct positive pairs")));
            }
        }
    }
    attempts = 0;
    while pairs.len() < count {
        let x = rng.below(n_obs) as usize;
        let y = rng.below(n_obs) as usize;
        if train.items[x].pole_id != train.items[y].pole_id && used.insert((x.min(y), x.max(y))) {
            pairs.push(SlPair { i: x, j: y, label: 0 });
        } else {
            attempts += 1;
            if attempts > PAIR_ATTEMPTS {
                return Err(Error::Pairing(format!("could not form {} distinct negative pairs", count - n_pos)));
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall_at_1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Validation Recall@1 of the initial parameters.
    pub initial_val_recall_at_1: f64,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

/// Cross-session Recall@1 on `val`, restricted to queries whose pole has a
/// database observation.
pub fn val_recall_at_1(params: &EncoderParams, val: &ObservationSet, query_session: u32, db_session: u32) -> Result<f64> {
    let db_poles: BTreeSet<u64> =
        val.items.iter().filter(|o| o.session_id == db_session).map(|o| o.pole_id).collect();
    let queries: Vec<&Observation> =
        val.items.iter().filter(|o| o.session_id == query_session && db_poles.contains(&o.pole_id)).collect();
    if queries.is_empty() {
        return Ok(0.0);
    }
    let q = embed_all(params, queries.iter().map(|o| (o.pole_id, &o.image)))?;
    let db = embed_all(
        params,
        val.items.iter().filter(|o| o.session_id == db_session).map(|o| (o.pole_id, &o.image)),
    )?;
    Ok(evaluate_descriptors(&q, &db)?.recall(1))
}

fn input_of(obs: &Observation, shift: i64) -> Vec<f64> {
    if shift == 0 {
        obs.image.to_f64()
    } else {
        obs.image.shifted(shift).to_f64()
    }
}

fn step_context(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Training(format!("epoch {epoch}, step {step}: {e}"))
}

fn cl_step(params: &mut EncoderParams, adam: &mut AdamState, train: &ObservationSet, batch: &ClBatch, tau: f64) -> Result<f64> {
    let inputs: Vec<Vec<f64>> = batch.views.iter().map(|v| input_of(&train.items[v.obs], v.shift)).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let (desc, cache) = forward(params, &refs)?;
    let emb: Vec<Vec<f64>> = desc.into_iter().map(|d| d.0).collect();
    let (loss, grads) = nt_xent_loss(&emb, tau)?;
    let g = backward(params, &cache, &grads)?;
    adam.step(&mut params.tensors, &g)?;
    Ok(loss)
}

fn sl_step(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    calib: &mut [Tensor],
    calib_adam: &mut AdamState,
    train: &ObservationSet,
    pairs: &[SlPair],
) -> Result<f64> {
    // Each observation is encoded once per step even when it appears in
    // several pairs.
    let unique: Vec<usize> = pairs.iter().flat_map(|p| [p.i, p.j]).collect::<BTreeSet<_>>().into_iter().collect();
    let slot: BTreeMap<usize, usize> = unique.iter().enumerate().map(|(s, &o)| (o, s)).collect();
    let inputs: Vec<Vec<f64>> = unique.iter().map(|&o| train.items[o].image.to_f64()).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let (desc, cache) = forward(params, &refs)?;

    let c = SlCalibration { alpha: calib[0].data[0], beta: calib[0].data[1] };
    let scale = 1.0 / pairs.len() as f64;
    let mut grads = vec![vec![0.0; params.emb_dim]; unique.len()];
    let mut g_calib = [0.0; 2];
    let mut total = 0.0;
    for p in pairs {
        let (si, sj) = (slot[&p.i], slot[&p.j]);
        let r = sl_bce_loss(&desc[si].0, &desc[sj].0, p.label, c)?;
        total += r.loss;
        for (g, v) in grads[si].iter_mut().zip(&r.grad_i) {
            *g += scale * v;
        }
        for (g, v) in grads[sj].iter_mut().zip(&r.grad_j) {
            *g += scale * v;
        }
        g_calib[0] += scale * r.grad_alpha;
        g_calib[1] += scale * r.grad_beta;
    }
    let g = backward(params, &cache, &grads)?;
    adam.step(&mut params.tensors, &g)?;
    let gc = [Tensor { name: SL_CALIBRATION_TENSOR.into(), shape: vec![2], data: g_calib.to_vec() }];
    calib_adam.step(calib, &gc)?;
    Ok(total * scale)
}

/// Splits by pole id and trains for `config.epochs` epochs from a seeded
/// initialization.
pub fn train(obs: &ObservationSet, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(obs, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_progress(
    obs: &ObservationSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = obs.items.first().ok_or_else(|| Error::Split("empty observation set".into()))?;
    let input_shape = (first.image.rows(), first.image.cols());
    let (train_set, val_set) = split_by_pole(obs, config.split_ratio, config.seed)?;
    let train_ids = train_set.pole_ids();
    let val_ids = val_set.pole_ids();
    if train_ids.iter().any(|id| val_ids.binary_search(id).is_ok()) {
        return Err(Error::Split("train and validation pole ids overlap".into()));
    }

    let mut params = EncoderParams::init(input_shape, config.emb_dim, config.seed)?;
    let mut adam = AdamState::new(&params.tensors, config.lr);
    let calib0 = SlCalibration::default();
    let mut calib = vec![Tensor { name: SL_CALIBRATION_TENSOR.into(), shape: vec![2], data: vec![calib0.alpha, calib0.beta] }];
    let mut calib_adam = AdamState::new(&calib, config.lr);

    let (qs, ds) = (config.val_query_session, config.val_db_session);
    let initial_val_recall_at_1 = val_recall_at_1(&params, &val_set, qs, ds)?;

    let cl_ids: Vec<u64> = train_set.groups().into_iter().filter(|(_, g)| g.len() >= 2).map(|(id, _)| id).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        match config.regime {
            Regime::Cl => {
                let n = config.batch_pole_ids;
                let n_batches = cl_ids.len() / n;
                if n_batches == 0 {
                    return Err(Error::Batch(format!(
                        "{} training pole ids with two observations, fewer than batch_pole_ids = {n}",
                        cl_ids.len()
                    )));
                }
                let mut perm = cl_ids.clone();
                SplitMix64::stream(config.seed, purpose::CL_EPOCH, epoch as u64).shuffle(&mut perm);
                for b in 0..n_batches {
                    let ctx = step_context(epoch, b);
                    let seed = derive(config.seed, ((epoch as u64) << 32) | b as u64);
                    let batch = build_cl_batch(&train_set, &perm[b * n..(b + 1) * n], seed, config.augment_shift)
                        .map_err(&ctx)?;
                    losses.push(cl_step(&mut params, &mut adam, &train_set, &batch, config.temperature).map_err(&ctx)?);
                }
            }
            Regime::Sl => {
                let steps = (train_set.len() / config.sl_batch_pairs).max(1);
                for s in 0..steps {
                    let ctx = step_context(epoch, s);
                    let seed = derive(config.seed, ((epoch as u64) << 32) | s as u64);
                    let pairs = build_sl_pairs(&train_set, config.sl_batch_pairs, seed).map_err(&ctx)?;
                    losses.push(
                        sl_step(&mut params, &mut adam, &mut calib, &mut calib_adam, &train_set, &pairs).map_err(&ctx)?,
                    );
                }
            }
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_recall_at_1 = val_recall_at_1(&params, &val_set, qs, ds)?;
        let stats = EpochStats { epoch, train_loss, val_recall_at_1 };
        on_epoch(&stats);
        history.push(stats);
    }

    let mut extra = adam.m;
    extra.extend(adam.v);
    if config.regime == Regime::Sl {
        extra.extend(calib);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { params, extra },
        history,
        initial_val_recall_at_1,
        train_ids,
        val_ids,
    })
}

/// Writes `epoch<TAB>train_loss<TAB>val_recall_at_1` rows under a header.
pub fn write_history(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch\ttrain_loss\tval_recall_at_1\n");
    for h in history {
        text.push_str(&format!("{}\t{}\t{}\n", h.epoch, h.train_loss, h.val_recall_at_1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochStats>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = (f.len() == 3)
            .then(|| Some(EpochStats { epoch: f[0].parse().ok()?, train_loss: f[1].parse().ok()?, val_recall_at_1: f[2].parse().ok()? }))
            .flatten();
        out.push(parsed.ok_or_else(|| Error::parse(path, i + 1, format!("malformed history row `{line}`")))?);
    }
    Ok(out)
}
