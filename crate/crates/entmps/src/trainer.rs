//! Sweep optimizer for the unitary MPS classifier.
//!
//! Each sweep draws a seeded sample batch, walks the chain (alternating
//! right-to-left and left-to-right), and at every site replaces the core with
//! the nearest isometry to its running environment tensor
//! `E \[l\] <- E\[l\] + delta * fresh`, where `fresh` is the batch-averaged
//! gradient of the mean log-overlap. Because the polar update returns an
//! isometry of the same shape, the classifier stays in full right canonical
//! form throughout; no gauge factors ever need to move.
//!
//! Per-sample partial contractions are cached: building a cache costs
//! `O(L d chi^2)` once per sweep, after which each site update touches only
//! the two partials that meet at that site.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::feature::EncodedSample;
use crate::linalg::closest_isometry;
use crate::model::{CanonicalForm, ModelError, MpsClassifier};
use crate::par;
use crate::tensor::{DenseTensor, TensorError};

/// Overlaps with magnitude at or below this floor are excluded from
/// gradients and clamped inside logarithms.
pub const OVERLAP_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {sample} has label {label}, model has {label_dim} classes")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        label_dim: usize,
    },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("contraction cache inconsistent: {0}")]
    CacheInconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Samples drawn per sweep (without replacement when the dataset is
    /// large enough).
    pub batch_size: usize,
    /// Mixing constant for the running environment.
    pub delta: f64,
    pub sweeps_max: usize,
    /// Stop when the relative NLL change across a sweep falls below this.
    pub conv_tol: f64,
    pub seed: u64,
    /// Reduce batch contributions in a fixed order so runs are bit-for-bit
    /// reproducible. The fast mode lets the reduction happen in any order.
    pub deterministic: bool,
    /// Draw a fresh batch for every site update instead of once per sweep.
    /// Costs `O(L)` more cache building; off by default.
    pub resample_per_site: bool,
    /// Multiplier applied to the accumulated environment before mixing in a
    /// fresh one. `1.0` keeps the literal running sum.
    pub env_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            delta: 1.0,
            sweeps_max: 20,
            conv_tol: 1e-4,
            seed: 0,
            deterministic: true,
            resample_per_site: false,
            env_decay: 1.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(TrainError::BadConfig("delta must be > 0".into()));
        }
        if self.sweeps_max < 1 {
            return Err(TrainError::BadConfig("sweeps_max must be >= 1".into()));
        }
        if !(self.conv_tol >= 0.0) {
            return Err(TrainError::BadConfig("conv_tol must be >= 0".into()));
        }
        if !(self.env_decay > 0.0 && self.env_decay <= 1.0) {
            return Err(TrainError::BadConfig("env_decay must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub nll: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
    /// Samples excluded from gradients because their overlap sat at the floor.
    pub skipped_samples: usize,
    /// Site updates skipped because the accumulated environment was zero.
    pub zero_environments: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<SweepRecord>,
}

impl TrainHistory {
    pub fn final_nll(&self) -> Option<f64> {
        self.records.last().map(|r| r.nll)
    }
}

/// Per-site running environment tensors, shaped like their cores. A slot is
/// empty until its site is first visited, at which point it starts as that
/// visit's fresh environment.
#[derive(Debug, Clone)]
pub struct EnvAccumulator {
    envs: Vec<Option<DenseTensor>>,
}

impl EnvAccumulator {
    pub fn new(l_sites: usize) -> Self {
        Self {
            envs: vec![None; l_sites],
        }
    }

    pub fn env(&self, l: usize) -> Option<&DenseTensor> {
        self.envs[l].as_ref()
    }
}

/// Cached left/right partial contractions of one sample against the current
/// cores.
///
/// `left[l]` carries the one-hot label vector through cores `0..l` (so
/// `left[0]` is the label vector itself); `right[l]` carries the closing
/// boundary through cores `l..L` (so `right[L] = [1]`).
///
/// Partials are stored as unit vectors with their accumulated magnitudes kept
/// separately. On long chains the raw partials shrink like `2^(-L/2)` and the
/// raw overlap underflows any fixed floor, but the gradient ratio
/// `env / (B . u)` is invariant under per-sample rescaling, so all gradient
/// arithmetic runs on the normalized vectors and stays O(1).
#[derive(Debug, Clone)]
pub struct ContractionCache {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    left_scale: Vec<f64>,
    right_scale: Vec<f64>,
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

impl ContractionCache {
    pub fn new(mps: &MpsClassifier, sample: &EncodedSample) -> Result<Self, TrainError> {
        check_sample(mps, 0, sample)?;
        let l_sites = mps.sites();
        let mut cache = Self {
            left: Vec::with_capacity(l_sites),
            right: vec![Vec::new(); l_sites + 1],
            left_scale: Vec::with_capacity(l_sites),
            right_scale: vec![0.0; l_sites + 1],
        };
        cache.left.push(one_hot(sample.label, mps.label_dim()));
        cache.left_scale.push(1.0);
        for l in 1..l_sites {
            cache.left.push(Vec::new());
            cache.left_scale.push(0.0);
            cache.refresh_left(mps, sample, l);
        }
        cache.right[l_sites] = vec![1.0];
        cache.right_scale[l_sites] = 1.0;
        for l in (0..l_sites).rev() {
            cache.refresh_right(mps, sample, l);
        }
        Ok(cache)
    }

    /// Normalized left partial at site `l`.
    pub fn left(&self, l: usize) -> &[f64] {
        &self.left[l]
    }

    /// Normalized partial contraction of everything right of site `l`.
    pub fn right_after(&self, l: usize) -> &[f64] {
        &self.right[l + 1]
    }

    /// Accumulated magnitude of the raw left partial at site `l`.
    pub fn left_scale(&self, l: usize) -> f64 {
        self.left_scale[l]
    }

    /// Accumulated magnitude of the raw right partial after site `l`.
    pub fn right_scale_after(&self, l: usize) -> f64 {
        self.right_scale[l + 1]
    }

    /// Recompute `right[l]` from `right[l + 1]` and the current core.
    pub fn refresh_right(&mut self, mps: &MpsClassifier, sample: &EncodedSample, l: usize) {
        let mut v = mps.apply_core_right(l, sample.site_vector(l), &self.right[l + 1]);
        let norm = normalize_in_place(&mut v);
        self.right[l] = v;
        self.right_scale[l] = norm * self.right_scale[l + 1];
    }

    /// Recompute `left[l]` from `left[l - 1]` and the current core.
    pub fn refresh_left(&mut self, mps: &MpsClassifier, sample: &EncodedSample, l: usize) {
        let mut v = mps.apply_core_left(l - 1, sample.site_vector(l - 1), &self.left[l - 1]);
        let norm = normalize_in_place(&mut v);
        self.left[l] = v;
        self.left_scale[l] = norm * self.left_scale[l - 1];
    }

    fn check_site(&self, mps: &MpsClassifier, l: usize) -> Result<(), TrainError> {
        let dims = mps.core(l).dims();
        if self.left[l].len() != dims[1] || self.right[l + 1].len() != dims[2] {
            return Err(TrainError::CacheInconsistent(format!(
                "site {l}: cached partials ({}, {}) vs core bonds ({}, {})",
                self.left[l].len(),
                self.right[l + 1].len(),
                dims[1],
                dims[2]
            )));
        }
        Ok(())
    }

    /// Overlap of the normalized partials at site `l`; the raw overlap is
    /// this times `left_scale(l) * right_scale_after(l)`.
    pub fn normalized_overlap(&self, mps: &MpsClassifier, sample: &EncodedSample, l: usize) -> f64 {
        let t = mps.apply_core_right(l, sample.site_vector(l), &self.right[l + 1]);
        dot(&self.left[l], &t)
    }

    /// Raw overlap `B . u` evaluated through the cached partials at site `l`.
    /// Underflows to zero on long chains with untrained models.
    pub fn overlap(&self, mps: &MpsClassifier, sample: &EncodedSample, l: usize) -> f64 {
        self.normalized_overlap(mps, sample, l) * self.left_scale[l] * self.right_scale[l + 1]
    }
}

/// Gradient of the overlap `B . u` with respect to core `l`: the outer
/// product of the cached left partial, the site's feature vector, and the
/// cached right partial, shaped like the core.
pub fn sample_environment(
    mps: &MpsClassifier,
    sample: &EncodedSample,
    l: usize,
    cache: &ContractionCache,
) -> Result<DenseTensor, TrainError> {
    check_sample(mps, l, sample)?;
    cache.check_site(mps, l)?;
    let dims = mps.core(l).dims().to_vec();
    let (d, left, right) = (dims[0], dims[1], dims[2]);
    let v = sample.site_vector(l);
    let lv = cache.left(l);
    let rv = cache.right_after(l);
    let scale = cache.left_scale(l) * cache.right_scale_after(l);
    let mut data = vec![0.0f64; d * left * right];
    accumulate_outer(&mut data, v, lv, rv, scale);
    Ok(DenseTensor::new(dims, data)?)
}

/// Batch-averaged gradient of the mean log-overlap with respect to core `l`:
/// `(1/N) sum_n env_n / (B . u)_n`. Samples whose overlap magnitude is at the
/// floor are skipped; the second return value counts them.
pub fn batch_environment(
    mps: &MpsClassifier,
    batch: &[EncodedSample],
    l: usize,
) -> Result<(DenseTensor, usize), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let caches: Vec<Result<ContractionCache, TrainError>> =
        par::map_collect(batch, |s| ContractionCache::new(mps, s));
    let mut ok = Vec::with_capacity(batch.len());
    for c in caches {
        ok.push(c?);
    }
    let refs: Vec<&EncodedSample> = batch.iter().collect();
    Ok(batch_env_from_caches(mps, &refs, &ok, l, true))
}

/// Core of the batch gradient: per-chunk accumulation over cached partials,
/// then a reduction. In deterministic mode chunk results are combined in
/// index order; the fast mode reduces in whatever order chunks finish.
fn batch_env_from_caches(
    mps: &MpsClassifier,
    samples: &[&EncodedSample],
    caches: &[ContractionCache],
    l: usize,
    deterministic: bool,
) -> (DenseTensor, usize) {
    let dims = mps.core(l).dims().to_vec();
    let (d, left, right) = (dims[0], dims[1], dims[2]);
    let n = samples.len();
    let inv_n = 1.0 / n as f64;
    let chunk_of = |range: std::ops::Range<usize>| -> (Vec<f64>, usize) {
        let mut acc = vec![0.0f64; d * left * right];
        let mut skipped = 0usize;
        for i in range {
            let cache = &caches[i];
            let v = samples[i].site_vector(l);
            let lv = cache.left(l);
            let rv = cache.right_after(l);
            // env / overlap is invariant under the per-sample normalization
            // of the cached partials, so everything here stays O(1)
            let t = mps.apply_core_right(l, v, rv);
            let overlap = dot(lv, &t);
            if overlap.abs() <= OVERLAP_FLOOR {
                skipped += 1;
                continue;
            }
            accumulate_outer(&mut acc, v, lv, rv, inv_n / overlap);
        }
        (acc, skipped)
    };

    let (total, skipped) = if deterministic {
        let parts = par::chunk_map(n, chunk_of);
        let mut total = vec![0.0f64; d * left * right];
        let mut skipped = 0usize;
        for (part, sk) in parts {
            for (t, p) in total.iter_mut().zip(&part) {
                *t += p;
            }
            skipped += sk;
        }
        (total, skipped)
    } else {
        reduce_unordered(n, d * left * right, chunk_of)
    };
    let env = DenseTensor::new(dims, total).expect("environment entries are finite");
    (env, skipped)
}

#[cfg(feature = "parallel")]
fn reduce_unordered(
    n: usize,
    len: usize,
    chunk_of: impl Fn(std::ops::Range<usize>) -> (Vec<f64>, usize) + Sync,
) -> (Vec<f64>, usize) {
    use rayon::prelude::*;
    let starts: Vec<usize> = (0..n).step_by(par::CHUNK).collect();
    starts
        .par_iter()
        .map(|&s| chunk_of(s..(s + par::CHUNK).min(n)))
        .reduce(
            || (vec![0.0f64; len], 0usize),
            |(mut a, ka), (b, kb)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                (a, ka + kb)
            },
        )
}

#[cfg(not(feature = "parallel"))]
fn reduce_unordered(
    n: usize,
    len: usize,
    chunk_of: impl Fn(std::ops::Range<usize>) -> (Vec<f64>, usize),
) -> (Vec<f64>, usize) {
    let mut total = vec![0.0f64; len];
    let mut skipped = 0usize;
    for s in (0..n).step_by(par::CHUNK) {
        let (part, sk) = chunk_of(s..(s + par::CHUNK).min(n));
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p;
        }
        skipped += sk;
    }
    (total, skipped)
}

/// `acc[s, a, b] += w * v[s] * lv[a] * rv[b]` over the core-shaped buffer.
fn accumulate_outer(acc: &mut [f64], v: &[f64], lv: &[f64], rv: &[f64], w: f64) {
    let left = lv.len();
    let right = rv.len();
    for (s, &vs) in v.iter().enumerate() {
        let ws = w * vs;
        if ws == 0.0 {
            continue;
        }
        for (a, &la) in lv.iter().enumerate() {
            let wa = ws * la;
            if wa == 0.0 {
                continue;
            }
            let row = &mut acc[(s * left + a) * right..(s * left + a + 1) * right];
            for (x, &rb) in row.iter_mut().zip(rv) {
                *x += wa * rb;
            }
        }
    }
}

/// Mix a fresh environment into the running accumulator for site `l` and
/// replace the core with the nearest isometry to the accumulated tensor
/// (matricized left bond against physical x right, so the right-orthogonal
/// condition holds by construction). Returns `false` when the accumulated
/// environment is zero and the core was left unchanged.
pub fn accumulate_and_update(
    acc: &mut EnvAccumulator,
    fresh: DenseTensor,
    mps: &mut MpsClassifier,
    l: usize,
    delta: f64,
    decay: f64,
) -> Result<bool, TrainError> {
    let dims = mps.core(l).dims();
    if fresh.dims() != dims {
        return Err(TrainError::CacheInconsistent(format!(
            "environment shape {:?} vs core shape {:?}",
            fresh.dims(),
            dims
        )));
    }
    let env = match &mut acc.envs[l] {
        Some(e) => {
            if decay != 1.0 {
                for x in e.data_mut() {
                    *x *= decay;
                }
            }
            e.axpy(delta, &fresh);
            e
        }
        slot @ None => slot.insert(fresh),
    };
    if env.frobenius_norm() == 0.0 {
        return Ok(false);
    }
    let (d, left, right) = (env.dims()[0], env.dims()[1], env.dims()[2]);
    let m = env
        .permute(&[1, 0, 2])?
        .into_reshape(vec![left, d * right])?;
    let w = closest_isometry(&m)?;
    mps.set_core(l, MpsClassifier::core_from_left_matrix(w, d, right));
    Ok(true)
}

/// Mean negative log overlap `-(1/N) sum_n ln |B . u|`, with the floor
/// applied inside the logarithm.
pub fn nll(mps: &MpsClassifier, data: &[EncodedSample]) -> Result<f64, TrainError> {
    Ok(evaluate(mps, data)?.0)
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(mps: &MpsClassifier, data: &[EncodedSample]) -> Result<f64, TrainError> {
    Ok(evaluate(mps, data)?.1)
}

/// One forward pass over the dataset: `(nll, accuracy)`.
pub fn evaluate(mps: &MpsClassifier, data: &[EncodedSample]) -> Result<(f64, f64), TrainError> {
    check_dataset(mps, data)?;
    let parts = par::chunk_map(data.len(), |range| {
        let mut log_sum = 0.0f64;
        let mut correct = 0usize;
        for sample in &data[range] {
            let u = mps
                .forward(sample)
                .expect("shapes were validated for the whole dataset");
            let overlap = u[sample.label];
            log_sum += overlap.abs().max(OVERLAP_FLOOR).ln();
            if crate::model::argmax_abs(&u) == sample.label {
                correct += 1;
            }
        }
        (log_sum, correct)
    });
    let (mut log_sum, mut correct) = (0.0f64, 0usize);
    for (ls, c) in parts {
        log_sum += ls;
        correct += c;
    }
    let n = data.len() as f64;
    Ok((-log_sum / n, correct as f64 / n))
}

/// Sweep training. Alternates right-to-left and left-to-right passes,
/// drawing one seeded batch per sweep (or per site with
/// `resample_per_site`), and stops at `sweeps_max` or when the relative NLL
/// change over the full dataset falls below `conv_tol`.
pub fn train(
    mps: &mut MpsClassifier,
    data: &[EncodedSample],
    eval_set: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    check_dataset(mps, data)?;
    if let Some(e) = eval_set {
        check_dataset(mps, e)?;
    }
    if mps.canonical() != CanonicalForm::FullRight {
        mps.right_orthogonalize()?;
    }

    let l_sites = mps.sites();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = EnvAccumulator::new(l_sites);
    let mut history = TrainHistory::default();
    let mut prev_nll: Option<f64> = None;

    for sweep in 0..cfg.sweeps_max {
        let t0 = Instant::now();
        let right_to_left = sweep % 2 == 0;
        let mut skipped = 0usize;
        let mut zero_envs = 0usize;

        let site_order: Vec<usize> = if right_to_left {
            (0..l_sites).rev().collect()
        } else {
            (0..l_sites).collect()
        };

        if cfg.resample_per_site {
            for &l in &site_order {
                let batch = draw_batch(&mut rng, data, cfg.batch_size);
                let caches = build_caches(mps, &batch)?;
                let (fresh, sk) = batch_env_from_caches(mps, &batch, &caches, l, cfg.deterministic);
                skipped += sk;
                if !accumulate_and_update(&mut acc, fresh, mps, l, cfg.delta, cfg.env_decay)? {
                    zero_envs += 1;
                }
            }
        } else {
            let batch = draw_batch(&mut rng, data, cfg.batch_size);
            let mut caches = build_caches(mps, &batch)?;
            for &l in &site_order {
                let (fresh, sk) = batch_env_from_caches(mps, &batch, &caches, l, cfg.deterministic);
                skipped += sk;
                if !accumulate_and_update(&mut acc, fresh, mps, l, cfg.delta, cfg.env_decay)? {
                    zero_envs += 1;
                }
                // advance the cache front with the updated core so the next
                // site sees fresh partials
                if right_to_left {
                    if l > 0 {
                        let mps_ref = &*mps;
                        par::for_each_mut_indexed(&mut caches, |i, c| {
                            c.refresh_right(mps_ref, batch[i], l);
                        });
                    }
                } else if l + 1 < l_sites {
                    let mps_ref = &*mps;
                    par::for_each_mut_indexed(&mut caches, |i, c| {
                        c.refresh_left(mps_ref, batch[i], l + 1);
                    });
                }
            }
        }

        let (nll_now, train_acc) = evaluate(mps, data)?;
        let test_acc = match eval_set {
            Some(e) => Some(evaluate(mps, e)?.1),
            None => None,
        };
        history.records.push(SweepRecord {
            sweep,
            nll: nll_now,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
            wall_seconds: t0.elapsed().as_secs_f64(),
            skipped_samples: skipped,
            zero_environments: zero_envs,
        });

        // while overlaps are still pinned at the floor the clamped NLL is a
        // constant and says nothing about convergence
        let saturated = -OVERLAP_FLOOR.ln();
        if let Some(prev) = prev_nll {
            let rel = (prev - nll_now).abs() / prev.abs().max(1e-12);
            if rel < cfg.conv_tol && nll_now < 0.99 * saturated {
                break;
            }
        }
        prev_nll = Some(nll_now);
    }
    Ok(history)
}

fn build_caches<'a>(
    mps: &MpsClassifier,
    batch: &[&'a EncodedSample],
) -> Result<Vec<ContractionCache>, TrainError> {
    let results: Vec<Result<ContractionCache, TrainError>> =
        par::map_collect(batch, |s| ContractionCache::new(mps, s));
    let mut caches = Vec::with_capacity(batch.len());
    for r in results {
        caches.push(r?);
    }
    Ok(caches)
}

fn draw_batch<'a>(
    rng: &mut ChaCha8Rng,
    data: &'a [EncodedSample],
    batch_size: usize,
) -> Vec<&'a EncodedSample> {
    if batch_size >= data.len() {
        return data.iter().collect();
    }
    rand::seq::index::sample(rng, data.len(), batch_size)
        .into_iter()
        .map(|i| &data[i])
        .collect()
}

fn check_dataset(mps: &MpsClassifier, data: &[EncodedSample]) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, s) in data.iter().enumerate() {
        check_sample(mps, i, s)?;
    }
    Ok(())
}

fn check_sample(mps: &MpsClassifier, index: usize, s: &EncodedSample) -> Result<(), TrainError> {
    if s.sites() != mps.sites() || s.phys_dim() != mps.phys_dim() {
        return Err(TrainError::Model(ModelError::SampleMismatch {
            want_sites: mps.sites(),
            want_d: mps.phys_dim(),
            got_sites: s.sites(),
            got_d: s.phys_dim(),
        }));
    }
    if s.label >= mps.label_dim() {
        return Err(TrainError::LabelOutOfRange {
            sample: index,
            label: s.label,
            label_dim: mps.label_dim(),
        });
    }
    Ok(())
}

fn one_hot(label: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[label] = 1.0;
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SitePath;
    use crate::feature::{encode_value, FeatureConfig};
    use crate::linalg::lq;
    use crate::tensor::contract;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_samples(l_sites: usize, n: usize, label_dim: usize, seed: u64) -> Vec<EncodedSample> {
        let cfg = FeatureConfig::default();
        let mut rng = lcg(seed);
        (0..n)
            .map(|i| {
                let mut vectors = Vec::new();
                for _ in 0..l_sites {
                    vectors.extend(encode_value(rng() * 0.5 + 0.5, &cfg));
                }
                EncodedSample::new(vectors, 2, i % label_dim)
            })
            .collect()
    }

    /// Dense-contraction overlap oracle.
    fn dense_overlap(mps: &MpsClassifier, sample: &EncodedSample) -> f64 {
        let u = {
            let psi = mps.to_dense().unwrap();
            let mut acc = psi;
            for l in (0..mps.sites()).rev() {
                let v = DenseTensor::new(vec![2], sample.site_vector(l).to_vec()).unwrap();
                acc = contract(&acc, &v, &[l + 1], &[0]).unwrap();
            }
            acc
        };
        u.get(&[sample.label])
    }

    #[test]
    fn cache_overlap_is_site_independent_and_matches_forward() {
        let mps = MpsClassifier::init_random(SitePath::identity(6), 2, 4, 2, 3).unwrap();
        let sample = &random_samples(6, 1, 2, 5)[0];
        let cache = ContractionCache::new(&mps, sample).unwrap();
        let want = mps.forward(sample).unwrap()[sample.label];
        for l in 0..6 {
            assert!(
                (cache.overlap(&mps, sample, l) - want).abs() < 1e-12,
                "site {l}"
            );
        }
    }

    #[test]
    fn cache_refresh_after_core_update_matches_rebuild() {
        let mut mps = MpsClassifier::init_random(SitePath::identity(5), 2, 4, 2, 11).unwrap();
        let sample = &random_samples(5, 1, 2, 7)[0];
        let mut cache = ContractionCache::new(&mps, sample).unwrap();
        // overwrite core 3 with a fresh isometry, as a sweep update would
        let other = MpsClassifier::init_random(SitePath::identity(5), 2, 4, 2, 99).unwrap();
        mps.set_core(3, other.core(3).clone());
        for l in (0..=3).rev() {
            cache.refresh_right(&mps, sample, l);
        }
        for l in 1..5 {
            cache.refresh_left(&mps, sample, l);
        }
        let rebuilt = ContractionCache::new(&mps, sample).unwrap();
        for l in 0..5 {
            let dl: f64 = cache.left[l]
                .iter()
                .zip(&rebuilt.left[l])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let dr: f64 = cache.right[l]
                .iter()
                .zip(&rebuilt.right[l])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dl < 1e-12 && dr < 1e-12, "site {l}: {dl} {dr}");
            let ds = (cache.left_scale[l] - rebuilt.left_scale[l]).abs()
                + (cache.right_scale[l] - rebuilt.right_scale[l]).abs();
            assert!(ds < 1e-12, "site {l} scales differ by {ds}");
        }
    }

    #[test]
    fn sample_environment_matches_finite_differences_of_overlap() {
        let mps = MpsClassifier::init_random(SitePath::identity(2), 2, 2, 2, 21).unwrap();
        let sample = &random_samples(2, 1, 2, 31)[0];
        let cache = ContractionCache::new(&mps, sample).unwrap();
        for l in 0..2 {
            let env = sample_environment(&mps, sample, l, &cache).unwrap();
            let core = mps.core(l).clone();
            let h = 1e-6;
            for flat in 0..core.len() {
                let mut plus = mps.clone();
                let mut c = core.clone();
                c.data_mut()[flat] += h;
                plus.set_core(l, c);
                let mut minus = mps.clone();
                let mut c = core.clone();
                c.data_mut()[flat] -= h;
                minus.set_core(l, c);
                let fd = (dense_overlap(&plus, sample) - dense_overlap(&minus, sample)) / (2.0 * h);
                assert!(
                    (env.data()[flat] - fd).abs() < 1e-5,
                    "site {l} flat {flat}: env {} fd {fd}",
                    env.data()[flat]
                );
            }
        }
    }

    #[test]
    fn environment_contracted_with_core_gives_overlap() {
        let mps = MpsClassifier::init_random(SitePath::identity(6), 2, 4, 2, 13).unwrap();
        let sample = &random_samples(6, 1, 2, 17)[0];
        let cache = ContractionCache::new(&mps, sample).unwrap();
        let want = cache.overlap(&mps, sample, 0);
        for l in 0..6 {
            let env = sample_environment(&mps, sample, l, &cache).unwrap();
            let got = contract(&env, mps.core(l), &[0, 1, 2], &[0, 1, 2])
                .unwrap()
                .as_scalar();
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_overlap_sample_contracts_to_zero() {
        // orthogonal product state against a product-state classifier
        let cfg = FeatureConfig::default();
        let mut psi = DenseTensor::zeros(vec![2, 2, 2]);
        psi.set(&[0, 0, 0], 1.0); // class 0 captures |00>
        psi.set(&[1, 1, 1], 1.0); // class 1 captures |11>
        let mut mps = MpsClassifier::from_dense(&psi, SitePath::identity(2), 1e-12).unwrap();
        mps.right_orthogonalize().unwrap();
        let mut vectors = Vec::new();
        vectors.extend(encode_value(1.0, &cfg)); // |1>
        vectors.extend(encode_value(0.0, &cfg)); // |0>
        let sample = EncodedSample::new(vectors, 2, 0); // <00|10> = 0
        let cache = ContractionCache::new(&mps, &sample).unwrap();
        let env = sample_environment(&mps, &sample, 1, &cache).unwrap();
        let got = contract(&env, mps.core(1), &[0, 1, 2], &[0, 1, 2])
            .unwrap()
            .as_scalar();
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn batch_environment_reductions() {
        let mps = MpsClassifier::init_random(SitePath::identity(4), 2, 3, 2, 41).unwrap();
        let samples = random_samples(4, 1, 2, 43);
        let one = &samples[0];
        let cache = ContractionCache::new(&mps, one).unwrap();
        let (env1, sk) = batch_environment(&mps, &samples, 2).unwrap();
        assert_eq!(sk, 0);
        let direct = sample_environment(&mps, one, 2, &cache).unwrap();
        let overlap = cache.overlap(&mps, one, 2);
        let want = direct.scale(1.0 / overlap);
        assert!(env1.max_abs_diff(&want) < 1e-12);

        // two identical samples average to the single-sample value
        let two = vec![one.clone(), one.clone()];
        let (env2, _) = batch_environment(&mps, &two, 2).unwrap();
        assert!(env2.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn batch_environment_matches_nll_finite_differences() {
        let mps = MpsClassifier::init_random(SitePath::identity(4), 2, 3, 2, 61).unwrap();
        let batch = random_samples(4, 8, 2, 67);
        // keep overlaps healthy so the finite differences are clean
        for s in &batch {
            let u = mps.forward(s).unwrap();
            assert!(u[s.label].abs() > 1e-3, "fixture has a degenerate overlap");
        }
        let h = 1e-6;
        for l in 0..4 {
            let (env, sk) = batch_environment(&mps, &batch, l).unwrap();
            assert_eq!(sk, 0);
            let core = mps.core(l).clone();
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for flat in 0..core.len() {
                let mut plus = mps.clone();
                let mut c = core.clone();
                c.data_mut()[flat] += h;
                plus.set_core(l, c);
                let mut minus = mps.clone();
                let mut c = core.clone();
                c.data_mut()[flat] -= h;
                minus.set_core(l, c);
                // batch env is the gradient of the mean log overlap, i.e.
                // minus the nll gradient
                let fd = -(nll(&plus, &batch).unwrap() - nll(&minus, &batch).unwrap()) / (2.0 * h);
                worst = worst.max((env.data()[flat] - fd).abs());
                scale = scale.max(fd.abs());
            }
            assert!(worst / scale.max(1e-12) < 1e-4, "site {l}: rel err {}", worst / scale);
        }
    }

    #[test]
    fn accumulate_returns_polar_factor_of_diagonal_times_isometry() {
        let mut mps = MpsClassifier::init_random(SitePath::identity(4), 2, 3, 2, 71).unwrap();
        let l = 1;
        let dims = mps.core(l).dims().to_vec();
        let (d, left, right) = (dims[0], dims[1], dims[2]);
        // row-orthonormal q from a random wide matrix
        let mut rng = lcg(73);
        let raw = DenseTensor::from_fn(vec![left, d * right], |_| rng());
        let (_, q) = lq(&raw).unwrap();
        let mut scaled = q.clone();
        for i in 0..left {
            for j in 0..d * right {
                let v = scaled.get(&[i, j]) * (i + 1) as f64; // positive diagonal factor
                scaled.set(&[i, j], v);
            }
        }
        let env = MpsClassifier::core_from_left_matrix(scaled, d, right);
        let mut acc = EnvAccumulator::new(4);
        assert!(accumulate_and_update(&mut acc, env, &mut mps, l, 1.0, 1.0).unwrap());
        let want = MpsClassifier::core_from_left_matrix(q, d, right);
        assert!(mps.core(l).max_abs_diff(&want) < 1e-10);
        // and the right-orthogonal condition holds
        assert!(mps.orthogonality_residual() < 1e-10);
    }

    #[test]
    fn accumulate_skips_zero_environment() {
        let mut mps = MpsClassifier::init_random(SitePath::identity(3), 2, 2, 2, 81).unwrap();
        let before = mps.core(1).clone();
        let zero = DenseTensor::zeros(mps.core(1).dims().to_vec());
        let mut acc = EnvAccumulator::new(3);
        assert!(!accumulate_and_update(&mut acc, zero, &mut mps, 1, 1.0, 1.0).unwrap());
        assert_eq!(mps.core(1), &before);
    }

    #[test]
    fn one_frozen_sweep_does_not_decrease_log_likelihood() {
        // fixed L=6 toy problem, single frozen batch
        let mut mps = MpsClassifier::init_random(SitePath::identity(6), 2, 4, 2, 91).unwrap();
        let batch = random_samples(6, 16, 2, 97);
        let mean_log = |m: &MpsClassifier| -nll(m, &batch).unwrap();
        let before = mean_log(&mps);
        let mut acc = EnvAccumulator::new(6);
        for l in (0..6).rev() {
            let (fresh, _) = batch_environment(&mps, &batch, l).unwrap();
            accumulate_and_update(&mut acc, fresh, &mut mps, l, 1.0, 1.0).unwrap();
        }
        let after = mean_log(&mps);
        assert!(
            after >= before - 1e-12,
            "log likelihood decreased: {before} -> {after}"
        );
    }

    #[test]
    fn nll_trivial_values() {
        // perfect classifier: |00> -> class 0, |11> -> class 1
        let mut psi = DenseTensor::zeros(vec![2, 2, 2]);
        psi.set(&[0, 0, 0], 1.0);
        psi.set(&[1, 1, 1], 1.0);
        let mps = MpsClassifier::from_dense(&psi, SitePath::identity(2), 1e-12).unwrap();
        let cfg = FeatureConfig::default();
        let mk = |t0: f64, t1: f64, label: usize| {
            let mut v = Vec::new();
            v.extend(encode_value(t0, &cfg));
            v.extend(encode_value(t1, &cfg));
            EncodedSample::new(v, 2, label)
        };
        let data = vec![mk(0.0, 0.0, 0), mk(1.0, 1.0, 1)];
        assert!(nll(&mps, &data).unwrap().abs() < 1e-12);

        // overlap e^{-1} for every sample -> nll = 1
        let scaled = psi.scale((-1.0f64).exp());
        let mps = MpsClassifier::from_dense(&scaled, SitePath::identity(2), 1e-12).unwrap();
        assert!((nll(&mps, &data).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_dense_oracle() {
        let mps = MpsClassifier::init_random(SitePath::identity(4), 2, 3, 2, 101).unwrap();
        let data = random_samples(4, 12, 2, 103);
        let got = nll(&mps, &data).unwrap();
        let want = -data
            .iter()
            .map(|s| dense_overlap(&mps, s).abs().max(OVERLAP_FLOOR).ln())
            .sum::<f64>()
            / data.len() as f64;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn train_separates_orthogonal_product_classes() {
        let cfg = FeatureConfig::default();
        let l_sites = 5;
        let mk = |theta: f64, label: usize| {
            let mut v = Vec::new();
            for _ in 0..l_sites {
                v.extend(encode_value(theta, &cfg));
            }
            EncodedSample::new(v, 2, label)
        };
        let mut data = Vec::new();
        for _ in 0..10 {
            data.push(mk(0.0, 0));
            data.push(mk(1.0, 1));
        }
        let mut mps =
            MpsClassifier::init_random(SitePath::identity(l_sites), 2, 4, 2, 7).unwrap();
        let cfg = TrainConfig {
            batch_size: 20,
            sweeps_max: 2,
            conv_tol: 0.0,
            seed: 9,
            ..TrainConfig::default()
        };
        let history = train(&mut mps, &data, None, &cfg).unwrap();
        let last = history.records.last().unwrap();
        assert_eq!(last.train_accuracy, 1.0, "history: {:?}", history.records);
        assert!(mps.orthogonality_residual() < 1e-8);
    }

    #[test]
    fn train_is_deterministic_given_seed() {
        let data = random_samples(6, 40, 2, 113);
        let cfg = TrainConfig {
            batch_size: 16,
            sweeps_max: 3,
            conv_tol: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut a = MpsClassifier::init_random(SitePath::identity(6), 2, 4, 2, 1).unwrap();
        let ha = train(&mut a, &data, None, &cfg).unwrap();
        let mut b = MpsClassifier::init_random(SitePath::identity(6), 2, 4, 2, 1).unwrap();
        let hb = train(&mut b, &data, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.records.len(), hb.records.len());
        for (ra, rb) in ha.records.iter().zip(&hb.records) {
            // everything except wall time must agree to the bit
            assert_eq!(ra.nll.to_bits(), rb.nll.to_bits());
            assert_eq!(ra.train_accuracy.to_bits(), rb.train_accuracy.to_bits());
            assert_eq!(ra.skipped_samples, rb.skipped_samples);
        }
    }

    #[test]
    fn train_variants_resample_and_decay() {
        let data = random_samples(5, 30, 2, 201);
        for cfg in [
            TrainConfig {
                batch_size: 10,
                sweeps_max: 2,
                conv_tol: 0.0,
                seed: 3,
                resample_per_site: true,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 10,
                sweeps_max: 2,
                conv_tol: 0.0,
                seed: 3,
                env_decay: 0.5,
                deterministic: false,
                ..TrainConfig::default()
            },
        ] {
            let mut mps = MpsClassifier::init_random(SitePath::identity(5), 2, 3, 2, 17).unwrap();
            let history = train(&mut mps, &data, None, &cfg).unwrap();
            assert_eq!(history.records.len(), 2);
            assert!(mps.orthogonality_residual() < 1e-8);
        }
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let mut mps = MpsClassifier::init_random(SitePath::identity(4), 2, 3, 2, 1).unwrap();
        let empty: Vec<EncodedSample> = vec![];
        assert!(matches!(
            train(&mut mps, &empty, None, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
        let wrong_len = random_samples(3, 4, 2, 1);
        assert!(train(&mut mps, &wrong_len, None, &TrainConfig::default()).is_err());
        let mut bad_label = random_samples(4, 4, 2, 1);
        bad_label[2].label = 5;
        assert!(matches!(
            train(&mut mps, &bad_label, None, &TrainConfig::default()),
            Err(TrainError::LabelOutOfRange { sample: 2, .. })
        ));
        let zero_sweeps = TrainConfig {
            sweeps_max: 0,
            ..TrainConfig::default()
        };
        let data = random_samples(4, 4, 2, 1);
        assert!(matches!(
            train(&mut mps, &data, None, &zero_sweeps),
            Err(TrainError::BadConfig(_))
        ));
    }
}
