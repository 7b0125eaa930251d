//! Two-level updatable learned index over byte-string keys.
//!
//! A root router binary-searches leaf boundary keys; each leaf holds a sorted
//! key array served by a linear model with a bounded search window, plus an
//! append-ordered insert buffer for keys not yet trained.
//!
//! Readers load an immutable [`LeafVersion`] through an atomic pointer and
//! never block on training. Writers serialize per leaf on a short critical
//! section. A retrain freezes the current buffer prefix, builds a successor
//! version off-lock, and publishes it with one pointer swap; writes that hit
//! the frozen state while the job runs are logged and replayed at publish.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use arc_swap::ArcSwap;
use parking_lot::{ArcMutexGuard, Mutex, RawMutex, RwLock};

use crate::clock::Instant;
use crate::error::{Error, Result};
use crate::iqrd::{default_chunk_rows, xty_accumulate, MemoizedFactor, TsqrAccumulator};
use crate::keycodec::{encode_into, feature_dim, matricize_raw};
use crate::linalg::{solve_beta, solve_beta_ridge, RFactor, Vector};
use crate::model::LinearModel;
use crate::trainer::RetrainReason;
use crate::Value;

/// Relative ridge weight used when a leaf's key matrix is rank deficient.
const RIDGE_REL: f64 = 1e-10;

/// Above this many matrix entries a cold build streams rows through the
/// TSQR accumulator instead of materializing `X`.
const MATERIALIZE_LIMIT: usize = 1 << 23;

/// Sampled rows used to estimate MAE when the exact refit is skipped.
const MAE_SAMPLE: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexConfig {
    /// Key bytes fed to the model; the model has `key_len + 1` features.
    pub key_len: usize,
    /// MAE (in positions) above which a leaf is split.
    pub split_threshold: f64,
    /// MAE below which two adjacent leaves may merge.
    pub merge_threshold: f64,
    /// Untrained buffer length that triggers a retrain request.
    pub max_buffer: usize,
    /// Leaf size used by bulk loading and as the cap for merges.
    pub target_leaf_size: usize,
    /// Row chunk for the tall-and-skinny factorization; 0 means `4·(key_len+1)`.
    pub chunk_rows: usize,
    /// Search windows wider than this force a cold retrain; 0 means
    /// `64 × split_threshold`.
    pub max_window: usize,
    /// Retrain by absorbing only new keys into the memoized factor. When
    /// false every retrain is a full cold retrain.
    pub incremental: bool,
    /// With no trainer attached, retrain on the inserting thread.
    pub inline_retrain: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            key_len: 16,
            split_threshold: 64.0,
            merge_threshold: 8.0,
            max_buffer: 1024,
            target_leaf_size: 65_536,
            chunk_rows: 0,
            max_window: 0,
            incremental: true,
            inline_retrain: false,
        }
    }
}

impl IndexConfig {
    pub fn with_key_len(key_len: usize) -> Self {
        Self { key_len, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_len == 0 {
            return Err(Error::Config("key_len must be at least 1".into()));
        }
        if !(self.merge_threshold > 0.0 && self.split_threshold > self.merge_threshold) {
            return Err(Error::Config(format!(
                "need split_threshold > merge_threshold > 0, got {} and {}",
                self.split_threshold, self.merge_threshold
            )));
        }
        if self.max_buffer == 0 {
            return Err(Error::Config("max_buffer must be at least 1".into()));
        }
        if self.target_leaf_size == 0 {
            return Err(Error::Config("target_leaf_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.key_len)
    }

    fn chunk(&self) -> usize {
        if self.chunk_rows == 0 {
            default_chunk_rows(self.feature_dim())
        } else {
            self.chunk_rows
        }
    }

    fn window_limit(&self) -> u64 {
        if self.max_window == 0 {
            (64.0 * self.split_threshold).ceil() as u64
        } else {
            self.max_window as u64
        }
    }
}

/// Receives retrain requests raised by serving threads.
pub trait RetrainSink: Send + Sync {
    /// Returns false if the request could not be accepted.
    fn request(&self, model_id: u64, reason: RetrainReason) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Updated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeleteOutcome {
    Deleted,
    NotFound,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanEntry {
    pub key: Vec<u8>,
    pub value: Value,
}

/// Per-phase time spent in one lookup.
#[derive(Clone, Copy, Debug, Default)]
pub struct LookupProfile {
    pub traverse: Duration,
    pub ml_inference: Duration,
    pub local_search: Duration,
    pub buffer_search: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JobKind {
    Incremental,
    Cold,
    Split,
    Merge,
}

/// One published training job.
#[derive(Clone, Debug)]
pub struct RetrainEvent {
    /// Offset from index creation.
    pub start: Duration,
    pub duration: Duration,
    /// Part of `duration` spent building rows, factorizing and solving.
    /// The rest is merging keys, refitting bounds and publishing.
    pub train: Duration,
    pub total_keys: usize,
    pub delta_keys: usize,
    pub model_id: u64,
    pub kind: JobKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryUsage {
    pub model: usize,
    pub memo: usize,
    pub buffer: usize,
    pub structure: usize,
}

impl MemoryUsage {
    pub fn total(&self) -> usize {
        self.model + self.memo + self.buffer + self.structure
    }
}

#[derive(Clone, Debug)]
pub struct LeafStats {
    pub model_id: u64,
    pub keys: usize,
    pub deleted: usize,
    pub buffered: usize,
    pub mean_abs_err: f64,
    pub err_min: i64,
    pub err_max: i64,
    pub model_epoch: u64,
    pub memo_epoch: u64,
    pub memo_rows: usize,
    pub memory: MemoryUsage,
}

#[derive(Clone, Debug)]
pub struct IndexStats {
    pub leaves: Vec<LeafStats>,
    pub memory: MemoryUsage,
    /// Times two jobs ran on the same leaf at once; always 0.
    pub job_overlaps: u64,
}

impl IndexStats {
    pub fn live_keys(&self) -> usize {
        self.leaves.iter().map(|l| l.keys - l.deleted + l.buffered).sum()
    }
}

// ---------------------------------------------------------------------------
// Leaf storage

#[derive(Default, Clone)]
struct KeyArena {
    bytes: Vec<u8>,
    ends: Vec<u32>,
}

impl KeyArena {
    fn with_capacity(keys: usize, bytes: usize) -> Self {
        Self { bytes: Vec::with_capacity(bytes), ends: Vec::with_capacity(keys) }
    }

    fn push(&mut self, key: &[u8]) {
        self.bytes.extend_from_slice(key);
        let end = u32::try_from(self.bytes.len()).expect("leaf key arena exceeds 4 GiB");
        self.ends.push(end);
    }

    #[inline]
    fn len(&self) -> usize {
        self.ends.len()
    }

    #[inline]
    fn get(&self, i: usize) -> &[u8] {
        let start = if i == 0 { 0 } else { self.ends[i - 1] as usize };
        &self.bytes[start..self.ends[i] as usize]
    }

    fn iter(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// First index in `lo..hi` whose key is `>= key`.
    #[inline]
    fn lower_bound(&self, key: &[u8], mut lo: usize, mut hi: usize) -> usize {
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.get(mid) < key {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// An immutable trained leaf. Only value cells and delete flags mutate, and
/// only under the owning slot's write lock.
pub(crate) struct LeafVersion {
    keys: KeyArena,
    values: Box<[AtomicU64]>,
    deleted: Box<[AtomicBool]>,
    deleted_count: AtomicUsize,
    memo: MemoizedFactor,
    xty: Vector,
    model: LinearModel,
    /// Some trained key moved after its row entered the factor, so `xty`
    /// holds outdated positions. Cleared by cold training.
    stale: bool,
}

struct Entry {
    key: Box<[u8]>,
    value: Value,
    deleted: bool,
}

impl LeafVersion {
    fn empty(cfg: &IndexConfig) -> Self {
        Self {
            keys: KeyArena::default(),
            values: Box::new([]),
            deleted: Box::new([]),
            deleted_count: AtomicUsize::new(0),
            memo: MemoizedFactor::empty(cfg.feature_dim()),
            xty: Vector::zeros(cfg.feature_dim()),
            model: LinearModel::constant(cfg.key_len, 0.0, 0),
            stale: false,
        }
    }

    #[inline]
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn live(&self) -> usize {
        self.len() - self.deleted_count.load(Ordering::Relaxed)
    }

    #[inline]
    fn is_deleted(&self, i: usize) -> bool {
        self.deleted[i].load(Ordering::SeqCst)
    }

    /// Bounded search: only the model's window is examined.
    #[inline]
    fn find(&self, key: &[u8]) -> Option<usize> {
        let n = self.len();
        if n == 0 {
            return None;
        }
        let (lo, hi) = self.model.window(key, n);
        self.search_window(key, lo, hi)
    }

    #[inline]
    fn search_window(&self, key: &[u8], lo: usize, hi: usize) -> Option<usize> {
        let i = self.keys.lower_bound(key, lo, hi + 1);
        (i <= hi && self.keys.get(i) == key).then_some(i)
    }

    /// Reads a slot; `None` if it is flagged deleted.
    #[inline]
    fn read(&self, i: usize) -> Option<Value> {
        let v = self.values[i].load(Ordering::SeqCst);
        (!self.is_deleted(i)).then_some(v)
    }

    fn mark_deleted(&self, i: usize) {
        if !self.deleted[i].swap(true, Ordering::SeqCst) {
            // Payload is erased as soon as the key is flagged.
            self.values[i].store(0, Ordering::SeqCst);
            self.deleted_count.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn entries(&self) -> impl Iterator<Item = Entry> + '_ {
        (0..self.len()).map(move |i| Entry {
            key: self.keys.get(i).into(),
            value: self.values[i].load(Ordering::SeqCst),
            deleted: self.is_deleted(i),
        })
    }

    fn from_parts(
        keys: KeyArena,
        values: Vec<Value>,
        deleted: Vec<bool>,
        memo: MemoizedFactor,
        xty: Vector,
        model: LinearModel,
    ) -> Self {
        let count = deleted.iter().filter(|&&d| d).count();
        Self {
            keys,
            values: values.into_iter().map(AtomicU64::new).collect(),
            deleted: deleted.into_iter().map(AtomicBool::new).collect(),
            deleted_count: AtomicUsize::new(count),
            memo,
            xty,
            model,
            stale: false,
        }
    }

    fn from_entries(entries: Vec<Entry>, memo: MemoizedFactor, xty: Vector, model: LinearModel) -> Self {
        let bytes = entries.iter().map(|e| e.key.len()).sum();
        let mut keys = KeyArena::with_capacity(entries.len(), bytes);
        let mut values = Vec::with_capacity(entries.len());
        let mut deleted = Vec::with_capacity(entries.len());
        let mut count = 0;
        for e in entries {
            keys.push(&e.key);
            values.push(AtomicU64::new(if e.deleted { 0 } else { e.value }));
            deleted.push(AtomicBool::new(e.deleted));
            count += usize::from(e.deleted);
        }
        Self {
            keys,
            values: values.into_boxed_slice(),
            deleted: deleted.into_boxed_slice(),
            deleted_count: AtomicUsize::new(count),
            memo,
            xty,
            model,
            stale: false,
        }
    }

    fn memory(&self) -> MemoryUsage {
        let f = std::mem::size_of::<f64>();
        MemoryUsage {
            model: (self.model.beta().len() + self.xty.len()) * f + 3 * 8,
            memo: self.memo.footprint_bytes(),
            buffer: 0,
            structure: self.len() * (std::mem::size_of::<u32>() + std::mem::size_of::<AtomicBool>())
                + std::mem::size_of::<Self>(),
        }
    }
}

enum Mutation {
    Put(Box<[u8]>, Value),
    Delete(Box<[u8]>),
}

/// Untrained keys in arrival order. Lookups scan a parallel array of key
/// fingerprints and compare bytes only on a fingerprint match.
#[derive(Default)]
struct InsertBuffer {
    entries: Vec<(Box<[u8]>, Value)>,
    tags: Vec<u64>,
}

#[inline]
fn fingerprint(key: &[u8]) -> u64 {
    key.chunks(8).fold(key.len() as u64, |h, c| {
        let mut w = [0u8; 8];
        w[..c.len()].copy_from_slice(c);
        (h ^ u64::from_le_bytes(w)).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29)
    })
}

impl InsertBuffer {
    fn from_vec(entries: Vec<(Box<[u8]>, Value)>) -> Self {
        let tags = entries.iter().map(|(k, _)| fingerprint(k)).collect();
        Self { entries, tags }
    }

    #[inline]
    fn find(&self, key: &[u8]) -> Option<usize> {
        let tag = fingerprint(key);
        self.tags.iter().enumerate().filter(|&(_, &t)| t == tag).map(|(j, _)| j).find(|&j| &*self.entries[j].0 == key)
    }

    fn set_value(&mut self, j: usize, value: Value) {
        self.entries[j].1 = value;
    }

    fn push(&mut self, key: Box<[u8]>, value: Value) {
        self.tags.push(fingerprint(&key));
        self.entries.push((key, value));
    }

    fn remove(&mut self, j: usize) {
        self.tags.remove(j);
        self.entries.remove(j);
    }

    /// Drops the first `n` entries.
    fn drain_front(&mut self, n: usize) {
        self.tags.drain(..n);
        self.entries.drain(..n);
    }

    fn take(&mut self) -> Vec<(Box<[u8]>, Value)> {
        self.tags.clear();
        std::mem::take(&mut self.entries)
    }

    fn footprint_bytes(&self) -> usize {
        self.entries.len() * (std::mem::size_of::<(Box<[u8]>, Value)>() + std::mem::size_of::<u64>())
    }
}

impl std::ops::Deref for InsertBuffer {
    type Target = [(Box<[u8]>, Value)];

    fn deref(&self) -> &Self::Target {
        &self.entries
    }
}

#[derive(Default)]
struct WriteState {
    buffer: InsertBuffer,
    /// Leading buffer entries captured by the in-flight job.
    frozen: usize,
    /// Writes against frozen state, present while a job is in flight.
    log: Option<Vec<Mutation>>,
    retired: bool,
    request_pending: bool,
}

impl WriteState {
    #[inline]
    fn find(&self, key: &[u8]) -> Option<usize> {
        self.buffer.find(key)
    }

    fn unfrozen(&self) -> usize {
        self.buffer.len() - self.frozen
    }

    fn record(&mut self, m: Mutation) {
        if let Some(log) = &mut self.log {
            log.push(m);
        }
    }
}

struct LeafSlot {
    id: u64,
    version: ArcSwap<LeafVersion>,
    state: RwLock<WriteState>,
    train: Arc<Mutex<()>>,
    active_jobs: AtomicUsize,
}

impl LeafSlot {
    fn new(id: u64, version: LeafVersion, buffer: Vec<(Box<[u8]>, Value)>) -> Arc<Self> {
        Arc::new(Self {
            id,
            version: ArcSwap::from_pointee(version),
            state: RwLock::new(WriteState { buffer: InsertBuffer::from_vec(buffer), ..WriteState::default() }),
            train: Arc::new(Mutex::new(())),
            active_jobs: AtomicUsize::new(0),
        })
    }
}

struct Router {
    /// `pivots[i]` is the smallest key owned by `leaves[i + 1]`.
    pivots: Vec<Box<[u8]>>,
    leaves: Vec<Arc<LeafSlot>>,
}

impl Router {
    #[inline]
    fn route(&self, key: &[u8]) -> usize {
        self.pivots.partition_point(|p| &**p <= key)
    }

    fn position_of(&self, id: u64) -> Option<usize> {
        self.leaves.iter().position(|l| l.id == id)
    }

    fn memory(&self) -> usize {
        self.pivots.len() * std::mem::size_of::<Box<[u8]>>() + self.leaves.len() * std::mem::size_of::<usize>()
    }
}

// ---------------------------------------------------------------------------
// Training kernels

fn solve_model(memo: &MemoizedFactor, xty: &Vector, key_len: usize, n: usize) -> LinearModel {
    let epoch = memo.epoch();
    if memo.trained_rows() == 0 || n == 0 {
        return LinearModel::constant(key_len, 0.0, epoch);
    }
    let solved = match solve_beta(memo.r(), xty) {
        Err(Error::Singular { .. }) => solve_beta_ridge(memo.r(), xty, RIDGE_REL),
        other => other,
    };
    match solved {
        Ok(beta) => LinearModel::new(beta, epoch),
        Err(e) => {
            log::debug!("falling back to a constant model: {e}");
            LinearModel::constant(key_len, (n - 1) as f64 / 2.0, epoch)
        }
    }
}

fn exact_refit(model: &LinearModel, keys: &KeyArena) -> LinearModel {
    model.refit(keys.iter().enumerate().map(|(i, k)| (k, i)), keys.len())
}

/// Cold build from sorted live entries: fresh factor, positions `0..n`.
fn build_cold(entries: Vec<Entry>, cfg: &IndexConfig, prev_epoch: u64, train: &mut Duration) -> Result<LeafVersion> {
    let t = Instant::now();
    let p = cfg.feature_dim();
    let n = entries.len();
    let mut xty = vec![0.0; p];
    let r = if n == 0 {
        RFactor::zeros(p)
    } else if n * p <= MATERIALIZE_LIMIT {
        let x = matricize_raw(entries.iter().map(|e| &*e.key), cfg.key_len);
        for i in 0..n {
            let y = i as f64;
            for (o, v) in xty.iter_mut().zip(x.row(i)) {
                *o += v * y;
            }
        }
        crate::iqrd::parallel_qrd(&x, cfg.chunk())?
    } else {
        let mut acc = TsqrAccumulator::new(p, cfg.chunk());
        let mut row = vec![0.0; p];
        for (i, e) in entries.iter().enumerate() {
            encode_into(&e.key, &mut row);
            let y = i as f64;
            for (o, v) in xty.iter_mut().zip(&row) {
                *o += v * y;
            }
            acc.push_row(&row)?;
        }
        acc.finish()?
    };
    let memo = MemoizedFactor::from_parts(r, n, prev_epoch + 1);
    let xty = Vector::new(xty)?;
    let model = solve_model(&memo, &xty, cfg.key_len, n);
    *train += t.elapsed();
    let mut version = LeafVersion::from_entries(entries, memo, xty, model);
    version.model = exact_refit(&version.model, &version.keys);
    Ok(version)
}

/// Sorted live entries of `base` merged with the frozen buffer prefix.
fn live_entries(base: &LeafVersion, frozen: &[(Box<[u8]>, Value)]) -> Vec<Entry> {
    let mut fresh: Vec<&(Box<[u8]>, Value)> = frozen.iter().collect();
    fresh.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::with_capacity(base.live() + fresh.len());
    let mut j = 0;
    for e in base.entries() {
        while j < fresh.len() && *fresh[j].0 < *e.key {
            out.push(Entry { key: fresh[j].0.clone(), value: fresh[j].1, deleted: false });
            j += 1;
        }
        if j < fresh.len() && *fresh[j].0 == *e.key {
            // Re-inserted after deletion; the buffered copy wins.
            out.push(Entry { key: e.key, value: fresh[j].1, deleted: false });
            j += 1;
        } else if !e.deleted {
            out.push(e);
        }
    }
    for f in &fresh[j..] {
        out.push(Entry { key: f.0.clone(), value: f.1, deleted: false });
    }
    out
}

/// Incremental build: absorbs only the keys new to this leaf.
fn build_incremental(
    base: &LeafVersion,
    frozen: &[(Box<[u8]>, Value)],
    cfg: &IndexConfig,
    train: &mut Duration,
) -> Result<(LeafVersion, usize)> {
    let mut fresh: Vec<&(Box<[u8]>, Value)> = frozen.iter().collect();
    fresh.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let total = base.len() + fresh.len();
    let fresh_bytes: usize = fresh.iter().map(|f| f.0.len()).sum();
    let mut keys = KeyArena::with_capacity(total, base.keys.bytes.len() + fresh_bytes);
    let mut values = Vec::with_capacity(total);
    let mut deleted = Vec::with_capacity(total);
    let mut new_positions = Vec::with_capacity(fresh.len());
    // New keys placed before some trained key; each shifts the keys after it.
    let mut shifted = 0;
    let mut j = 0;
    for i in 0..base.len() {
        let key = base.keys.get(i);
        while j < fresh.len() && *fresh[j].0 < *key {
            shifted += 1;
            new_positions.push(keys.len());
            keys.push(&fresh[j].0);
            values.push(fresh[j].1);
            deleted.push(false);
            j += 1;
        }
        keys.push(key);
        if j < fresh.len() && *fresh[j].0 == *key {
            // Revive a flagged key in place; its row is already in R.
            values.push(fresh[j].1);
            deleted.push(false);
            j += 1;
        } else {
            let gone = base.is_deleted(i);
            values.push(if gone { 0 } else { base.values[i].load(Ordering::SeqCst) });
            deleted.push(gone);
        }
    }
    for f in &fresh[j..] {
        new_positions.push(keys.len());
        keys.push(&f.0);
        values.push(f.1);
        deleted.push(false);
    }
    let t = Instant::now();
    let delta = new_positions.len();
    let x_delta = matricize_raw(new_positions.iter().map(|&i| keys.get(i)), cfg.key_len);
    let y_delta: Vec<f64> = new_positions.iter().map(|&i| i as f64).collect();
    let memo = base.memo.absorb_chunked(&x_delta, cfg.chunk())?;
    let xty = xty_accumulate(&base.xty, &x_delta, &y_delta)?;
    let n = keys.len();
    let model = if delta == 0 {
        LinearModel::new(Vector::new(base.model.beta().to_vec())?, memo.epoch())
    } else {
        solve_model(&memo, &xty, cfg.key_len, n)
    };
    *train += t.elapsed();
    let mut version = LeafVersion::from_parts(keys, values, deleted, memo, xty, model);
    version.stale = base.stale || shifted > 0;

    version.model = if n <= 64 * delta.max(1) {
        exact_refit(&version.model, &version.keys)
    } else {
        let widened = widen_bounds(base, &version, &new_positions, shifted);
        if widened.window_width() > cfg.window_limit() {
            exact_refit(&version.model, &version.keys)
        } else {
            widened
        }
    };
    Ok((version, delta))
}

/// Bound refit that touches only the new keys.
///
/// An old key moved right by at most `shifted` slots. Its prediction moved
/// by at most `max_x |x·(β_new − β_old)|` plus one for rounding, and its
/// clamped slot can grow by up to `Δ` with the larger array. Widening the
/// old window by those amounts keeps every old key covered without
/// visiting it.
fn widen_bounds(base: &LeafVersion, next: &LeafVersion, new_positions: &[usize], shifted: usize) -> LinearModel {
    let n = next.len();
    let delta = new_positions.len() as i64;
    let shifted = shifted as i64;
    let old = &base.model;
    let new = &next.model;
    let key_len = new.key_len();
    let drift: f64 = old
        .beta()
        .iter()
        .zip(new.beta())
        .enumerate()
        .map(|(i, (a, b))| (a - b).abs() * if i < key_len { 255.0 } else { 1.0 })
        .sum();
    let slack = if drift == 0.0 {
        0
    } else if drift.is_finite() && drift < n as f64 {
        drift.ceil() as i64 + 1
    } else {
        n as i64
    };
    let mut lo = (old.err_min() - slack - delta).max(-(n as i64));
    let mut hi = (old.err_max() + shifted + slack).min(n as i64);
    for &pos in new_positions {
        let err = pos as i64 - new.slot(next.keys.get(pos), n) as i64;
        lo = lo.min(err);
        hi = hi.max(err);
    }
    let stride = (n / MAE_SAMPLE).max(1);
    let sample = (0..n).step_by(stride).map(|i| (next.keys.get(i), i));
    let mae = new.refit(sample, n).mean_abs_err();
    new.clone().with_bounds(lo.min(0), hi.max(0), mae)
}

/// Merge of two adjacent leaves through their factors.
fn build_merged(a: &LeafVersion, b: &LeafVersion, cfg: &IndexConfig, train: &mut Duration) -> Result<LeafVersion> {
    let t = Instant::now();
    let p = cfg.feature_dim();
    let memo = MemoizedFactor::merge(&a.memo, &b.memo)?;
    // Every row of `b` gains `offset` in position. Because the last feature
    // is the constant 1, Σx over b's rows is the last column of RᵀR.
    let offset = a.len() as f64;
    let rb = b.memo.r();
    let mut xty: Vec<f64> = a.xty.iter().zip(b.xty.iter()).map(|(x, y)| x + y).collect();
    for (j, o) in xty.iter_mut().enumerate() {
        let col_sum: f64 = (0..=j.min(p - 1)).map(|k| rb.get(k, j) * rb.get(k, p - 1)).sum();
        *o += offset * col_sum;
    }
    let xty = Vector::new(xty)?;
    let n = a.len() + b.len();
    let model = solve_model(&memo, &xty, cfg.key_len, n);
    *train += t.elapsed();
    let entries: Vec<Entry> = a.entries().chain(b.entries()).collect();
    let mut version = LeafVersion::from_entries(entries, memo, xty, model);
    version.stale = a.stale || b.stale;
    version.model = exact_refit(&version.model, &version.keys);
    Ok(version)
}

// ---------------------------------------------------------------------------
// Jobs

type TrainGuard = ArcMutexGuard<RawMutex, ()>;

struct ActiveJob {
    slots: Vec<Arc<LeafSlot>>,
}

impl ActiveJob {
    fn enter(index: &Index, slots: Vec<Arc<LeafSlot>>) -> Self {
        for s in &slots {
            if s.active_jobs.fetch_add(1, Ordering::SeqCst) != 0 {
                index.overlaps.fetch_add(1, Ordering::SeqCst);
            }
        }
        Self { slots }
    }
}

impl Drop for ActiveJob {
    fn drop(&mut self) {
        for s in &self.slots {
            s.active_jobs.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

#[allow(clippy::large_enum_variant)]
enum Built {
    Single(LeafVersion),
    Split { left: LeafVersion, right: LeafVersion, pivot: Box<[u8]> },
}

/// A training job whose successor state is computed but not yet visible.
pub struct PreparedJob {
    kind: JobKind,
    slots: Vec<Arc<LeafSlot>>,
    built: Built,
    started: Instant,
    train: Duration,
    delta_keys: usize,
    _active: ActiveJob,
    _train: Vec<TrainGuard>,
    _structure: Option<TrainGuard>,
}

impl PreparedJob {
    pub fn kind(&self) -> JobKind {
        self.kind
    }

    pub fn model_id(&self) -> u64 {
        self.slots[0].id
    }

    /// Time since the job took its snapshot.
    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }
}

/// Outcome of a published job.
#[derive(Clone, Debug)]
pub struct JobReport {
    pub kind: JobKind,
    /// Leaves created or updated by the job.
    pub model_ids: Vec<u64>,
    pub delta_keys: usize,
    pub total_keys: usize,
}

/// Structural follow-up suggested after a job.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FollowUp {
    Split(u64),
    Cold(u64),
    Merge { left: u64, right: u64 },
}

// ---------------------------------------------------------------------------
// Index

pub struct Index {
    config: IndexConfig,
    router: ArcSwap<Router>,
    structure: Arc<Mutex<()>>,
    next_id: AtomicU64,
    sink: OnceLock<Arc<dyn RetrainSink>>,
    events: Mutex<Vec<RetrainEvent>>,
    created: Instant,
    overlaps: AtomicU64,
}

impl std::fmt::Debug for Index {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Index")
            .field("config", &self.config)
            .field("leaves", &self.router.load().leaves.len())
            .finish_non_exhaustive()
    }
}

impl Index {
    /// An empty index with a single empty leaf.
    pub fn new(config: IndexConfig) -> Result<Self> {
        config.validate()?;
        let leaf = LeafSlot::new(0, LeafVersion::empty(&config), Vec::new());
        Ok(Self::with_router(config, Router { pivots: Vec::new(), leaves: vec![leaf] }, 1))
    }

    fn with_router(config: IndexConfig, router: Router, next_id: u64) -> Self {
        Self {
            config,
            router: ArcSwap::from_pointee(router),
            structure: Arc::new(Mutex::new(())),
            next_id: AtomicU64::new(next_id),
            sink: OnceLock::new(),
            events: Mutex::new(Vec::new()),
            created: Instant::now(),
            overlaps: AtomicU64::new(0),
        }
    }

    /// Builds leaves of `target_leaf_size` keys from strictly sorted pairs and
    /// cold-trains each.
    pub fn bulk_load<K: AsRef<[u8]> + Sync>(config: IndexConfig, pairs: &[(K, Value)]) -> Result<Self> {
        config.validate()?;
        for (i, w) in pairs.windows(2).enumerate() {
            let (a, b) = (w[0].0.as_ref(), w[1].0.as_ref());
            if a == b {
                return Err(Error::DuplicateKey(i + 1));
            }
            if a > b {
                return Err(Error::UnsortedInput(i + 1));
            }
        }
        if pairs.iter().any(|(k, _)| k.as_ref().is_empty()) {
            return Err(Error::EmptyKey);
        }
        if pairs.is_empty() {
            return Self::new(config);
        }
        use rayon::prelude::*;
        let versions = pairs
            .par_chunks(config.target_leaf_size)
            .map(|chunk| {
                let entries =
                    chunk.iter().map(|(k, v)| Entry { key: k.as_ref().into(), value: *v, deleted: false }).collect();
                build_cold(entries, &config, 0, &mut Duration::default())
            })
            .collect::<Result<Vec<_>>>()?;
        let pivots = pairs.chunks(config.target_leaf_size).skip(1).map(|c| c[0].0.as_ref().into()).collect();
        let leaves: Vec<_> =
            versions.into_iter().enumerate().map(|(i, v)| LeafSlot::new(i as u64, v, Vec::new())).collect();
        let n = leaves.len() as u64;
        Ok(Self::with_router(config, Router { pivots, leaves }, n))
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    /// Routes buffer-full requests to `sink` instead of handling them inline.
    pub fn attach_sink(&self, sink: Arc<dyn RetrainSink>) -> bool {
        self.sink.set(sink).is_ok()
    }

    pub fn leaf_ids(&self) -> Vec<u64> {
        self.router.load().leaves.iter().map(|l| l.id).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.router.load().leaves.len()
    }

    /// Time since the index was created; retrain event starts are relative
    /// to the same origin.
    pub fn age(&self) -> Duration {
        self.created.elapsed()
    }

    pub fn job_overlaps(&self) -> u64 {
        self.overlaps.load(Ordering::SeqCst)
    }

    pub fn retrain_log(&self) -> Vec<RetrainEvent> {
        self.events.lock().clone()
    }

    pub fn lookup(&self, key: &[u8]) -> Option<Value> {
        loop {
            let router = self.router.load();
            let slot = &router.leaves[router.route(key)];
            let version = slot.version.load();
            if let Some(i) = version.find(key) {
                if let Some(v) = version.read(i) {
                    return Some(v);
                }
            }
            let state = slot.state.read();
            if state.retired || !Arc::ptr_eq(&slot.version.load(), &*version) {
                continue;
            }
            return state.find(key).map(|j| state.buffer[j].1);
        }
    }

    /// [`lookup`](Self::lookup) with per-phase timings.
    pub fn lookup_profiled(&self, key: &[u8], profile: &mut LookupProfile) -> Option<Value> {
        loop {
            let t0 = Instant::now();
            let router = self.router.load();
            let slot = &router.leaves[router.route(key)];
            let version = slot.version.load();
            let t1 = Instant::now();
            let n = version.len();
            let window = (n > 0).then(|| version.model.window(key, n));
            let t2 = Instant::now();
            let hit = window.and_then(|(lo, hi)| version.search_window(key, lo, hi));
            let found = hit.and_then(|i| version.read(i));
            let t3 = Instant::now();
            profile.traverse += t1.duration_since(t0);
            profile.ml_inference += t2.duration_since(t1);
            profile.local_search += t3.duration_since(t2);
            if found.is_some() {
                return found;
            }
            let state = slot.state.read();
            if state.retired || !Arc::ptr_eq(&slot.version.load(), &*version) {
                continue;
            }
            let out = state.find(key).map(|j| state.buffer[j].1);
            profile.buffer_search += t3.elapsed();
            return out;
        }
    }

    pub fn insert(&self, key: &[u8], value: Value) -> Result<InsertOutcome> {
        if key.is_empty() {
            return Err(Error::EmptyKey);
        }
        loop {
            let router = self.router.load();
            let slot = &router.leaves[router.route(key)];
            let mut state = slot.state.write();
            if state.retired {
                continue;
            }
            let version = slot.version.load();
            if let Some(i) = version.find(key) {
                if !version.is_deleted(i) {
                    version.values[i].store(value, Ordering::SeqCst);
                    state.record(Mutation::Put(key.into(), value));
                    return Ok(InsertOutcome::Updated);
                }
            }
            if let Some(j) = state.find(key) {
                state.buffer.set_value(j, value);
                if j < state.frozen {
                    state.record(Mutation::Put(key.into(), value));
                }
                return Ok(InsertOutcome::Updated);
            }
            state.buffer.push(key.into(), value);
            let trigger = state.unfrozen() >= self.config.max_buffer && !state.request_pending;
            if trigger {
                state.request_pending = true;
            }
            let id = slot.id;
            drop(state);
            if trigger {
                self.on_buffer_full(id);
            }
            return Ok(InsertOutcome::Inserted);
        }
    }

    fn on_buffer_full(&self, id: u64) {
        if let Some(sink) = self.sink.get() {
            if sink.request(id, RetrainReason::BufferFull) {
                return;
            }
        } else if self.config.inline_retrain {
            if let Err(e) = self.service(id, RetrainReason::BufferFull) {
                log::warn!("inline retrain of leaf {id} failed: {e}");
            }
            return;
        }
        // Nobody will drain this leaf; allow a later insert to ask again.
        if let Some(slot) = self.slot(id) {
            slot.state.write().request_pending = false;
        }
    }

    pub fn delete(&self, key: &[u8]) -> DeleteOutcome {
        loop {
            let router = self.router.load();
            let slot = &router.leaves[router.route(key)];
            let mut state = slot.state.write();
            if state.retired {
                continue;
            }
            let version = slot.version.load();
            if let Some(i) = version.find(key) {
                if !version.is_deleted(i) {
                    version.mark_deleted(i);
                    state.record(Mutation::Delete(key.into()));
                    return DeleteOutcome::Deleted;
                }
            }
            if let Some(j) = state.find(key) {
                state.buffer.remove(j);
                if j < state.frozen {
                    state.frozen -= 1;
                    state.record(Mutation::Delete(key.into()));
                }
                return DeleteOutcome::Deleted;
            }
            return DeleteOutcome::NotFound;
        }
    }

    /// The first `limit` live keys `>= start`, in byte order.
    pub fn range_scan(&self, start: &[u8], limit: usize) -> Vec<ScanEntry> {
        let mut out = Vec::with_capacity(limit.min(1024));
        'restart: loop {
            out.clear();
            let router = self.router.load_full();
            let mut li = router.route(start);
            while li < router.leaves.len() && out.len() < limit {
                let slot = &router.leaves[li];
                let (version, mut buffered) = loop {
                    let version = slot.version.load_full();
                    let state = slot.state.read();
                    if state.retired {
                        continue 'restart;
                    }
                    if !Arc::ptr_eq(&slot.version.load(), &version) {
                        continue;
                    }
                    let buffered: Vec<(Box<[u8]>, Value)> =
                        state.buffer.iter().filter(|(k, _)| &**k >= start).cloned().collect();
                    break (version, buffered);
                };
                buffered.sort_unstable_by(|a, b| a.0.cmp(&b.0));
                let mut i = version.keys.lower_bound(start, 0, version.len());
                let mut j = 0;
                while out.len() < limit && (i < version.len() || j < buffered.len()) {
                    let take_trained =
                        j >= buffered.len() || (i < version.len() && version.keys.get(i) < &*buffered[j].0);
                    if take_trained {
                        if let Some(v) = version.read(i) {
                            out.push(ScanEntry { key: version.keys.get(i).to_vec(), value: v });
                        }
                        i += 1;
                    } else {
                        out.push(ScanEntry { key: buffered[j].0.to_vec(), value: buffered[j].1 });
                        j += 1;
                    }
                }
                li += 1;
            }
            return out;
        }
    }

    fn slot(&self, id: u64) -> Option<Arc<LeafSlot>> {
        let router = self.router.load();
        router.position_of(id).map(|i| router.leaves[i].clone())
    }

    /// The job a request of `reason` turns into for leaf `id`.
    pub fn job_for(&self, id: u64, reason: RetrainReason) -> Option<JobKind> {
        let slot = self.slot(id)?;
        Some(match reason {
            RetrainReason::BufferFull | RetrainReason::Forced => {
                if self.config.incremental {
                    JobKind::Incremental
                } else {
                    JobKind::Cold
                }
            }
            RetrainReason::ColdSweep => JobKind::Cold,
            RetrainReason::AccuracyDrop => {
                let v = slot.version.load();
                if v.live() >= 2 && v.model.mean_abs_err() > self.config.split_threshold {
                    JobKind::Split
                } else {
                    JobKind::Cold
                }
            }
        })
    }

    /// Computes the successor state for a job on leaf `id` (for merges, `id`
    /// is the left leaf). Returns `None` if the leaf no longer exists.
    pub fn prepare(&self, id: u64, kind: JobKind) -> Result<Option<PreparedJob>> {
        let structure = matches!(kind, JobKind::Split | JobKind::Merge).then(|| self.structure.lock_arc());
        let router = self.router.load_full();
        let Some(pos) = router.position_of(id) else {
            return Ok(None);
        };
        let slots: Vec<Arc<LeafSlot>> = match kind {
            JobKind::Merge => match router.leaves.get(pos + 1) {
                Some(right) => vec![router.leaves[pos].clone(), right.clone()],
                None => return Ok(None),
            },
            _ => vec![router.leaves[pos].clone()],
        };
        let train: Vec<TrainGuard> = slots.iter().map(|s| s.train.lock_arc()).collect();
        let active = ActiveJob::enter(self, slots.clone());
        let started = Instant::now();

        // Snapshot under the write lock; building happens outside it.
        let mut bases = Vec::with_capacity(slots.len());
        let mut frozen = Vec::new();
        for (k, s) in slots.iter().enumerate() {
            let mut state = s.state.write();
            if state.retired {
                drop(state);
                abandon(&slots[..k]);
                return Ok(None);
            }
            if kind != JobKind::Merge {
                state.frozen = state.buffer.len();
                frozen = state.buffer.to_vec();
                state.request_pending = false;
            }
            state.log = Some(Vec::new());
            bases.push(s.version.load_full());
        }

        let mut fit = Duration::ZERO;
        let result = build_job(kind, &bases, &frozen, &self.config, &mut fit);
        let (built, delta_keys) = match result {
            Ok(b) => b,
            Err(e) => {
                abandon(&slots);
                return Err(e);
            }
        };
        Ok(Some(PreparedJob {
            kind,
            slots,
            built,
            started,
            train: fit,
            delta_keys,
            _active: active,
            _train: train,
            _structure: structure,
        }))
    }

    /// Makes a prepared job visible to readers and writers.
    pub fn publish(&self, job: PreparedJob) -> Result<JobReport> {
        let PreparedJob { kind, slots, built, started, train, delta_keys, .. } = job;
        let mut states: Vec<_> = slots.iter().map(|s| s.state.write()).collect();
        let report = match built {
            Built::Single(version) if kind != JobKind::Merge => {
                let state = &mut states[0];
                replay(&version, state.log.take().unwrap_or_default());
                let frozen = state.frozen;
                state.buffer.drain_front(frozen);
                state.frozen = 0;
                let total = version.len();
                slots[0].version.store(Arc::new(version));
                JobReport { kind, model_ids: vec![slots[0].id], delta_keys, total_keys: total }
            }
            Built::Single(version) => {
                for state in states.iter_mut() {
                    replay(&version, state.log.take().unwrap_or_default());
                }
                let buffer: Vec<_> = states.iter_mut().flat_map(|s| s.buffer.take()).collect();
                let total = version.len();
                let id = self.next_id.fetch_add(1, Ordering::SeqCst);
                let merged = LeafSlot::new(id, version, buffer);
                self.replace_leaves(&slots, vec![merged], None);
                JobReport { kind, model_ids: vec![id], delta_keys, total_keys: total }
            }
            Built::Split { left, right, pivot } => {
                let state = &mut states[0];
                for m in state.log.take().unwrap_or_default() {
                    let target = match &m {
                        Mutation::Put(k, _) | Mutation::Delete(k) => {
                            if **k < *pivot {
                                &left
                            } else {
                                &right
                            }
                        }
                    };
                    replay(target, vec![m]);
                }
                let frozen = state.frozen;
                let rest = state.buffer.take().split_off(frozen);
                state.frozen = 0;
                let (lbuf, rbuf): (Vec<_>, Vec<_>) = rest.into_iter().partition(|(k, _)| **k < *pivot);
                let total = left.len() + right.len();
                let lid = self.next_id.fetch_add(1, Ordering::SeqCst);
                let rid = self.next_id.fetch_add(1, Ordering::SeqCst);
                let new = vec![LeafSlot::new(lid, left, lbuf), LeafSlot::new(rid, right, rbuf)];
                self.replace_leaves(&slots, new, Some(pivot));
                JobReport { kind, model_ids: vec![lid, rid], delta_keys, total_keys: total }
            }
        };
        if report.model_ids.iter().all(|&m| m != slots[0].id) {
            for state in states.iter_mut() {
                state.retired = true;
            }
        }
        drop(states);
        if let Some(sink) = self.sink.get() {
            // Inserts that arrived while the job ran may already fill a buffer.
            for &id in &report.model_ids {
                if let Some(slot) = self.slot(id) {
                    let mut state = slot.state.write();
                    if state.buffer.len() >= self.config.max_buffer && !state.request_pending {
                        state.request_pending = true;
                        drop(state);
                        if !sink.request(id, RetrainReason::BufferFull) {
                            slot.state.write().request_pending = false;
                        }
                    }
                }
            }
        }
        self.events.lock().push(RetrainEvent {
            start: started.duration_since(self.created),
            duration: started.elapsed(),
            train,
            total_keys: report.total_keys,
            delta_keys: report.delta_keys,
            model_id: report.model_ids[0],
            kind,
        });
        Ok(report)
    }

    /// Swaps `old` (adjacent leaves) for `new` in a fresh router.
    fn replace_leaves(&self, old: &[Arc<LeafSlot>], new: Vec<Arc<LeafSlot>>, split_pivot: Option<Box<[u8]>>) {
        let current = self.router.load_full();
        let pos = current.position_of(old[0].id).expect("replaced leaf is routed");
        let mut leaves = current.leaves.clone();
        let mut pivots = current.pivots.clone();
        leaves.splice(pos..pos + old.len(), new);
        match split_pivot {
            Some(p) => pivots.insert(pos, p),
            None => {
                pivots.drain(pos..pos + old.len() - 1);
            }
        }
        self.router.store(Arc::new(Router { pivots, leaves }));
    }

    /// Suggested structural change for a leaf after `last` ran on it.
    pub fn follow_up(&self, id: u64, last: JobKind) -> Option<FollowUp> {
        let router = self.router.load();
        let pos = router.position_of(id)?;
        let v = router.leaves[pos].version.load();
        let cfg = &self.config;
        if v.live() >= 2 && v.model.mean_abs_err() > cfg.split_threshold {
            return Some(FollowUp::Split(id));
        }
        if last == JobKind::Incremental && v.stale && v.model.window_width() > cfg.window_limit() {
            return Some(FollowUp::Cold(id));
        }
        if matches!(last, JobKind::Incremental | JobKind::Cold) && v.model.mean_abs_err() < cfg.merge_threshold {
            let right = router.leaves.get(pos + 1)?;
            let rv = right.version.load();
            if rv.model.mean_abs_err() < cfg.merge_threshold && v.len() + rv.len() <= cfg.target_leaf_size {
                return Some(FollowUp::Merge { left: id, right: right.id });
            }
        }
        None
    }

    fn run(&self, id: u64, kind: JobKind) -> Result<Option<JobReport>> {
        self.run_gated(id, kind, &|_| {})
    }

    fn run_gated(&self, id: u64, kind: JobKind, gate: &dyn Fn(&PreparedJob)) -> Result<Option<JobReport>> {
        match self.prepare(id, kind)? {
            Some(job) => {
                gate(&job);
                self.publish(job).map(Some)
            }
            None => Ok(None),
        }
    }

    /// Runs the job for `reason` and every follow-up on the calling thread.
    pub fn service(&self, id: u64, reason: RetrainReason) -> Result<Vec<JobReport>> {
        self.service_gated(id, reason, &|_| {})
    }

    /// Like [`service`](Self::service), but `gate` runs between computing
    /// each job and publishing it.
    pub fn service_gated(&self, id: u64, reason: RetrainReason, gate: &dyn Fn(&PreparedJob)) -> Result<Vec<JobReport>> {
        let Some(kind) = self.job_for(id, reason) else {
            return Ok(Vec::new());
        };
        let mut reports = Vec::new();
        let mut todo = vec![(id, kind)];
        while let Some((id, kind)) = todo.pop() {
            let report = match self.run_gated(id, kind, gate) {
                Ok(Some(r)) => r,
                Ok(None) => continue,
                Err(e) if kind == JobKind::Incremental => {
                    log::warn!("incremental retrain of leaf {id} failed ({e}); retraining cold");
                    match self.run_gated(id, JobKind::Cold, gate)? {
                        Some(r) => r,
                        None => continue,
                    }
                }
                Err(e) => return Err(e),
            };
            if reports.len() < 64 {
                for &nid in &report.model_ids {
                    match self.follow_up(nid, report.kind) {
                        Some(FollowUp::Split(x)) => todo.push((x, JobKind::Split)),
                        Some(FollowUp::Cold(x)) => todo.push((x, JobKind::Cold)),
                        Some(FollowUp::Merge { left, .. }) => todo.push((left, JobKind::Merge)),
                        None => {}
                    }
                }
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// Incremental retrain of one leaf (cold if the index is configured for
    /// full retraining). Buffered keys become trained keys.
    pub fn retrain_leaf(&self, id: u64) -> Result<Option<JobReport>> {
        let kind = if self.config.incremental { JobKind::Incremental } else { JobKind::Cold };
        self.run(id, kind)
    }

    /// Rebuilds a leaf from its live keys, purging lazily deleted entries.
    pub fn cold_train_leaf(&self, id: u64) -> Result<Option<JobReport>> {
        self.run(id, JobKind::Cold)
    }

    /// Splits a leaf at its median live key; both halves are cold-trained.
    pub fn split_leaf(&self, id: u64) -> Result<Option<JobReport>> {
        self.run(id, JobKind::Split)
    }

    /// Merges leaf `left` with its right neighbour by merging their factors.
    pub fn merge_leaves(&self, left: u64) -> Result<Option<JobReport>> {
        self.run(left, JobKind::Merge)
    }

    /// Retrains every leaf that has buffered keys.
    pub fn retrain_all(&self) -> Result<usize> {
        let mut n = 0;
        for id in self.leaf_ids() {
            let buffered = self.slot(id).map_or(0, |s| s.state.read().buffer.len());
            if buffered > 0 && self.retrain_leaf(id)?.is_some() {
                n += 1;
            }
        }
        Ok(n)
    }

    /// Leaves whose deleted fraction exceeds `threshold`.
    pub fn sweep_candidates(&self, threshold: f64) -> Vec<u64> {
        let router = self.router.load();
        router
            .leaves
            .iter()
            .filter(|s| {
                let v = s.version.load();
                let deleted = v.deleted_count.load(Ordering::Relaxed);
                deleted > 0 && deleted as f64 > threshold * v.len() as f64
            })
            .map(|s| s.id)
            .collect()
    }

    /// Cold-trains every leaf whose deleted fraction exceeds `threshold`.
    pub fn cold_sweep(&self, threshold: f64) -> Result<usize> {
        let mut swept = 0;
        for id in self.sweep_candidates(threshold) {
            if !self.service(id, RetrainReason::ColdSweep)?.is_empty() {
                swept += 1;
            }
        }
        Ok(swept)
    }

    pub fn leaf_stats(&self, id: u64) -> Option<LeafStats> {
        self.slot(id).map(|s| self.stats_of(&s))
    }

    fn stats_of(&self, slot: &LeafSlot) -> LeafStats {
        let (version, buffered) = {
            let state = slot.state.read();
            (slot.version.load_full(), (state.buffer.len(), state.buffer.footprint_bytes()))
        };
        let (buffered, buffer_bytes) = buffered;
        let mut memory = version.memory();
        memory.buffer = buffer_bytes;
        LeafStats {
            model_id: slot.id,
            keys: version.len(),
            deleted: version.deleted_count.load(Ordering::Relaxed),
            buffered,
            mean_abs_err: version.model.mean_abs_err(),
            err_min: version.model.err_min(),
            err_max: version.model.err_max(),
            model_epoch: version.model.epoch(),
            memo_epoch: version.memo.epoch(),
            memo_rows: version.memo.trained_rows(),
            memory,
        }
    }

    pub fn stats(&self) -> IndexStats {
        let router = self.router.load_full();
        let leaves: Vec<LeafStats> = router.leaves.iter().map(|s| self.stats_of(s)).collect();
        let mut memory = MemoryUsage { structure: router.memory(), ..MemoryUsage::default() };
        for l in &leaves {
            memory.model += l.memory.model;
            memory.memo += l.memory.memo;
            memory.buffer += l.memory.buffer;
            memory.structure += l.memory.structure;
        }
        IndexStats { leaves, memory, job_overlaps: self.job_overlaps() }
    }

    /// Memoized factor of a leaf, for inspection.
    pub fn leaf_factor(&self, id: u64) -> Option<MemoizedFactor> {
        self.slot(id).map(|s| s.version.load().memo.clone())
    }

    /// Model of a leaf, for inspection.
    pub fn leaf_model(&self, id: u64) -> Option<LinearModel> {
        self.slot(id).map(|s| s.version.load().model.clone())
    }

    /// Running `XᵀY` of a leaf, for inspection.
    pub fn leaf_xty(&self, id: u64) -> Option<Vector> {
        self.slot(id).map(|s| s.version.load().xty.clone())
    }

    /// Trained keys of a leaf with their delete flags.
    pub fn leaf_keys(&self, id: u64) -> Option<Vec<(Vec<u8>, bool)>> {
        self.slot(id).map(|s| {
            let v = s.version.load();
            (0..v.len()).map(|i| (v.keys.get(i).to_vec(), v.is_deleted(i))).collect()
        })
    }

    /// Where a trained key sits in its leaf: `(position, window)`.
    pub fn locate(&self, key: &[u8]) -> Option<(u64, usize, (usize, usize))> {
        let router = self.router.load();
        let slot = &router.leaves[router.route(key)];
        let v = slot.version.load();
        let n = v.len();
        if n == 0 {
            return None;
        }
        let pos = v.keys.lower_bound(key, 0, n);
        (pos < n && v.keys.get(pos) == key).then(|| (slot.id, pos, v.model.window(key, n)))
    }
}

fn build_job(
    kind: JobKind,
    bases: &[Arc<LeafVersion>],
    frozen: &[(Box<[u8]>, Value)],
    cfg: &IndexConfig,
    train_time: &mut Duration,
) -> Result<(Built, usize)> {
    Ok(match kind {
        JobKind::Incremental => {
            let (v, delta) = build_incremental(&bases[0], frozen, cfg, train_time)?;
            (Built::Single(v), delta)
        }
        JobKind::Cold => {
            let entries = live_entries(&bases[0], frozen);
            let delta = frozen.len();
            (Built::Single(build_cold(entries, cfg, bases[0].memo.epoch(), train_time)?), delta)
        }
        JobKind::Split => {
            let mut entries = live_entries(&bases[0], frozen);
            let delta = frozen.len();
            if entries.len() < 2 {
                (Built::Single(build_cold(entries, cfg, bases[0].memo.epoch(), train_time)?), delta)
            } else {
                let right_entries = entries.split_off(entries.len() / 2);
                let pivot = right_entries[0].key.clone();
                let epoch = bases[0].memo.epoch();
                let left = build_cold(entries, cfg, epoch, train_time)?;
                let right = build_cold(right_entries, cfg, epoch, train_time)?;
                (Built::Split { left, right, pivot }, delta)
            }
        }
        JobKind::Merge => (Built::Single(build_merged(&bases[0], &bases[1], cfg, train_time)?), 0),
    })
}

/// Undoes the freeze of a job that will not be published.
fn abandon(slots: &[Arc<LeafSlot>]) {
    for s in slots {
        let mut state = s.state.write();
        state.frozen = 0;
        state.log = None;
    }
}

fn replay(version: &LeafVersion, log: Vec<Mutation>) {
    for m in log {
        let (key, value) = match &m {
            Mutation::Put(k, v) => (k, Some(*v)),
            Mutation::Delete(k) => (k, None),
        };
        let i = version.keys.lower_bound(key, 0, version.len());
        if i >= version.len() || version.keys.get(i) != &**key {
            // The build saw a delete that was logged while it ran and left
            // the key out. Anything logged for it before that is moot.
            continue;
        }
        match value {
            Some(v) => version.values[i].store(v, Ordering::SeqCst),
            None => version.mark_deleted(i),
        }
    }
}
