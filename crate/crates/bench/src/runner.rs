//! Runs a workload against one target and collects a [`RunReport`].

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::ValueEnum;
use memoindex::index::{DeleteOutcome, LookupProfile, MemoryUsage};
use memoindex::trainer::TrainerStats;
use memoindex::{EngineBackend, Index, IndexConfig, Trainer, TrainerConfig};

use crate::baseline::OrderedMapBaseline;
use crate::dataset::KeySet;
use crate::error::{BenchError, Result};
use crate::workload::{Op, QueryStream, Stop, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetKind {
    /// Memoized incremental retraining on a background trainer.
    Learned,
    /// Full cold retrain on the inserting thread.
    LearnedNoMemo,
    /// Ordered map under a reader-writer lock.
    Btree,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

/// Latency breakdown categories, in report order.
pub const CATEGORIES: [&str; 6] =
    ["traverse", "ml_inference", "local_search", "buffer_search", "range_scan", "buffer_insert"];

const TRAVERSE: usize = 0;
const INFERENCE: usize = 1;
const LOCAL: usize = 2;
const BUFFER: usize = 3;
const SCAN: usize = 4;
const INSERT: usize = 5;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub spec: WorkloadSpec,
    pub target: TargetKind,
    pub backend: EngineBackend,
    /// Index settings; `key_len` is taken from the workload.
    pub index: IndexConfig,
    pub cold_interval: Option<Duration>,
    pub delete_threshold: f64,
    /// Every n-th operation is timed per phase; 0 disables timing.
    pub profile_every: u64,
}

impl RunConfig {
    pub fn new(spec: WorkloadSpec, target: TargetKind) -> Self {
        Self {
            spec,
            target,
            backend: EngineBackend::Inline,
            index: IndexConfig::default(),
            cold_interval: None,
            delete_threshold: 0.25,
            profile_every: 16,
        }
    }

    fn index_config(&self) -> IndexConfig {
        let mut cfg = IndexConfig { key_len: self.spec.key_len, ..self.index.clone() };
        if self.target == TargetKind::LearnedNoMemo {
            cfg.incremental = false;
            cfg.inline_retrain = true;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryLatency {
    pub category: &'static str,
    pub mean_ns: f64,
    pub p99_ns: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainRow {
    /// Milliseconds from the start of the measured run; negative if the job
    /// started during loading.
    pub start_ms: f64,
    pub duration_ms: f64,
    pub total_keys: usize,
    pub delta_keys: usize,
    pub model_id: u64,
    /// Share of `duration_ms` spent factorizing and solving.
    pub train_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub target: TargetKind,
    pub backend: String,
    pub workload: String,
    pub distribution: String,
    pub threads: usize,
    pub initial_keys: usize,
    pub key_len: usize,
    pub ops: u64,
    pub elapsed: Duration,
    pub throughput: f64,
    pub latency: Vec<CategoryLatency>,
    pub memory: MemoryUsage,
    pub retrain_log: Vec<RetrainRow>,
    pub reads: u64,
    pub read_hits: u64,
    /// Order-insensitive digest of every read and scan result.
    pub checksum: u64,
    pub trainer: Option<TrainerStats>,
}

impl RunReport {
    pub fn category(&self, name: &str) -> Option<&CategoryLatency> {
        self.latency.iter().find(|c| c.category == name)
    }
}

enum Engine {
    Learned { index: Arc<Index>, trainer: Option<Trainer> },
    Btree(OrderedMapBaseline),
}

#[derive(Default)]
struct ThreadResult {
    ops: u64,
    reads: u64,
    read_hits: u64,
    checksum: u64,
    samples: [Vec<u64>; 6],
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    // splitmix64 finalizer over the running state
    let mut z = h.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_bytes(bytes: &[u8]) -> u64 {
    bytes.chunks(8).fold(bytes.len() as u64, |h, c| {
        let mut w = [0u8; 8];
        w[..c.len()].copy_from_slice(c);
        mix(h, u64::from_le_bytes(w))
    })
}

impl Engine {
    fn build(cfg: &RunConfig, corpus: &KeySet) -> Result<Self> {
        let pairs = corpus.pairs();
        match cfg.target {
            TargetKind::Btree => Ok(Engine::Btree(OrderedMapBaseline::bulk_load(&pairs))),
            TargetKind::Learned | TargetKind::LearnedNoMemo => {
                let index = Arc::new(Index::bulk_load(cfg.index_config(), &pairs)?);
                let trainer = match cfg.target {
                    TargetKind::Learned => Some(Trainer::start(
                        index.clone(),
                        TrainerConfig {
                            backend: cfg.backend,
                            cold_interval: cfg.cold_interval,
                            delete_threshold: cfg.delete_threshold,
                        },
                    )?),
                    _ => None,
                };
                Ok(Engine::Learned { index, trainer })
            }
        }
    }

    fn serve(&self, stream: &mut QueryStream<'_>, quota: Option<u64>, deadline: Option<Instant>, every: u64) -> Result<ThreadResult> {
        let mut r = ThreadResult::default();
        loop {
            if quota.is_some_and(|q| r.ops >= q) {
                break;
            }
            if r.ops % 64 == 0 && deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            let profile = every > 0 && r.ops % every == 0;
            let op = stream.next_op();
            match op {
                Op::Read(k) => {
                    let key = stream.key(k);
                    let found = match self {
                        Engine::Learned { index, .. } if profile => {
                            let mut p = LookupProfile::default();
                            let v = index.lookup_profiled(key, &mut p);
                            r.samples[TRAVERSE].push(p.traverse.as_nanos() as u64);
                            r.samples[INFERENCE].push(p.ml_inference.as_nanos() as u64);
                            r.samples[LOCAL].push(p.local_search.as_nanos() as u64);
                            r.samples[BUFFER].push(p.buffer_search.as_nanos() as u64);
                            v
                        }
                        Engine::Learned { index, .. } => index.lookup(key),
                        Engine::Btree(map) if profile => {
                            let t = Instant::now();
                            let v = map.lookup(key);
                            r.samples[TRAVERSE].push(t.elapsed().as_nanos() as u64);
                            v
                        }
                        Engine::Btree(map) => map.lookup(key),
                    };
                    r.reads += 1;
                    r.read_hits += u64::from(found.is_some());
                    r.checksum = r.checksum.wrapping_add(mix(hash_bytes(key), found.map_or(u64::MAX, |v| v)));
                }
                Op::Insert(k, value) => {
                    let key = stream.key(k);
                    let t = profile.then(Instant::now);
                    match self {
                        Engine::Learned { index, .. } => {
                            index.insert(key, value)?;
                        }
                        Engine::Btree(map) => {
                            map.insert(key, value);
                        }
                    }
                    if let Some(t) = t {
                        r.samples[INSERT].push(t.elapsed().as_nanos() as u64);
                    }
                }
                Op::Delete(k) => {
                    let key = stream.key(k);
                    let hit = match self {
                        Engine::Learned { index, .. } => index.delete(key) == DeleteOutcome::Deleted,
                        Engine::Btree(map) => map.delete(key),
                    };
                    r.checksum = r.checksum.wrapping_add(mix(hash_bytes(key), u64::from(hit)));
                }
                Op::Scan(k, n) => {
                    let start = stream.key(k);
                    let t = profile.then(Instant::now);
                    let entries = match self {
                        Engine::Learned { index, .. } => index.range_scan(start, n),
                        Engine::Btree(map) => map.range_scan(start, n),
                    };
                    if let Some(t) = t {
                        r.samples[SCAN].push(t.elapsed().as_nanos() as u64);
                    }
                    let digest = entries.iter().fold(entries.len() as u64, |h, e| mix(mix(h, hash_bytes(&e.key)), e.value));
                    r.checksum = r.checksum.wrapping_add(mix(hash_bytes(start), digest));
                }
            }
            r.ops += 1;
        }
        Ok(r)
    }
}

fn summarize(category: &'static str, mut samples: Vec<u64>) -> CategoryLatency {
    if samples.is_empty() {
        return CategoryLatency { category, mean_ns: 0.0, p99_ns: 0.0, samples: 0 };
    }
    samples.sort_unstable();
    let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64;
    let idx = ((samples.len() as f64 * 0.99).ceil() as usize).clamp(1, samples.len()) - 1;
    CategoryLatency { category, mean_ns: mean, p99_ns: samples[idx] as f64, samples: samples.len() }
}

/// Bulk-loads `corpus` into the target, runs the workload on
/// `spec.threads` serving threads and reports.
pub fn run(cfg: &RunConfig, corpus: &KeySet) -> Result<RunReport> {
    cfg.spec.validate()?;
    cfg.index_config().validate()?;
    if corpus.is_empty() {
        return Err(BenchError::Config("cannot run on an empty corpus".into()));
    }
    if corpus.len() > u32::MAX as usize {
        return Err(BenchError::Config("corpus exceeds 2^32 keys".into()));
    }
    let engine = Engine::build(cfg, corpus)?;
    let spec = &cfg.spec;
    let threads = spec.threads;
    let origin = match &engine {
        Engine::Learned { index, .. } => index.age(),
        Engine::Btree(_) => Duration::ZERO,
    };

    let started = Instant::now();
    let deadline = match spec.stop {
        Stop::Duration(d) => Some(started + d),
        Stop::Ops(_) => None,
    };
    let results: Vec<Result<ThreadResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let engine = &engine;
                let quota = match spec.stop {
                    Stop::Ops(n) => Some(n / threads as u64 + u64::from((t as u64) < n % threads as u64)),
                    Stop::Duration(_) => None,
                };
                s.spawn(move || {
                    let mut stream = QueryStream::new(spec, corpus, t);
                    engine.serve(&mut stream, quota, deadline, cfg.profile_every)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("serving thread panicked")).collect()
    });
    let elapsed = started.elapsed();

    let mut total = ThreadResult::default();
    for r in results {
        let r = r?;
        total.ops += r.ops;
        total.reads += r.reads;
        total.read_hits += r.read_hits;
        total.checksum = total.checksum.wrapping_add(r.checksum);
        for (all, mine) in total.samples.iter_mut().zip(r.samples) {
            all.extend(mine);
        }
    }
    let latency = CATEGORIES.iter().zip(total.samples).map(|(c, s)| summarize(c, s)).collect();

    let (memory, retrain_log, trainer) = match engine {
        Engine::Btree(map) => (map.memory(), Vec::new(), None),
        Engine::Learned { index, trainer } => {
            let trainer = trainer.map(Trainer::abort);
            let mut log: Vec<RetrainRow> = index
                .retrain_log()
                .into_iter()
                .map(|e| RetrainRow {
                    start_ms: (e.start.as_secs_f64() - origin.as_secs_f64()) * 1e3,
                    duration_ms: e.duration.as_secs_f64() * 1e3,
                    train_ms: e.train.as_secs_f64() * 1e3,
                    total_keys: e.total_keys,
                    delta_keys: e.delta_keys,
                    model_id: e.model_id,
                })
                .collect();
            log.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
            (index.stats().memory, log, trainer)
        }
    };

    Ok(RunReport {
        target: cfg.target,
        backend: match cfg.target {
            TargetKind::Learned => cfg.backend.to_string(),
            TargetKind::LearnedNoMemo => "blocking".into(),
            TargetKind::Btree => "none".into(),
        },
        workload: spec.name.clone(),
        distribution: format!("{:?}", spec.distribution).to_lowercase(),
        threads,
        initial_keys: corpus.len(),
        key_len: spec.key_len,
        ops: total.ops,
        elapsed,
        throughput: total.ops as f64 / elapsed.as_secs_f64(),
        latency,
        memory,
        retrain_log,
        reads: total.reads,
        read_hits: total.read_hits,
        checksum: total.checksum,
        trainer,
    })
}
