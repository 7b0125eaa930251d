//! Background training thread.
//!
//! Serving threads only enqueue requests. One training thread drains the
//! queue in FIFO order and hands each job to a backend: run it in place,
//! run up to `K` leaves at once, or publish after a fixed delay.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::clock::Instant;
use crate::error::{Error, Result};
use crate::index::{Index, RetrainSink};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RetrainReason {
    BufferFull,
    AccuracyDrop,
    ColdSweep,
    Forced,
}

#[derive(Clone, Copy, Debug)]
pub struct RetrainRequest {
    pub model_id: u64,
    pub reason: RetrainReason,
    pub enqueue_time: Instant,
}

impl RetrainRequest {
    pub fn new(model_id: u64, reason: RetrainReason) -> Self {
        Self { model_id, reason, enqueue_time: Instant::now() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted,
    Coalesced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineBackend {
    /// Jobs run one at a time on the training thread.
    Inline,
    /// Up to `K` leaves train at once.
    Parallel(usize),
    /// Each job publishes exactly this long after it starts, however long
    /// the computation itself took.
    FixedDelay(Duration),
}

impl EngineBackend {
    pub fn validate(&self) -> Result<()> {
        match self {
            EngineBackend::Parallel(0) => Err(Error::Config("parallel backend needs at least one engine".into())),
            _ => Ok(()),
        }
    }

    fn batch(&self) -> usize {
        match self {
            EngineBackend::Parallel(k) => *k,
            _ => 1,
        }
    }
}

impl fmt::Display for EngineBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineBackend::Inline => f.write_str("inline"),
            EngineBackend::Parallel(k) => write!(f, "parallel:{k}"),
            EngineBackend::FixedDelay(d) => write!(f, "delay:{}", d.as_millis()),
        }
    }
}

/// Parses `inline`, `parallel:K` or `delay:MS`.
impl FromStr for EngineBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown backend {s:?}; expected inline, parallel:K or delay:MS"));
        let backend = match s.split_once(':') {
            None if s == "inline" => EngineBackend::Inline,
            Some(("parallel", k)) => EngineBackend::Parallel(k.parse().map_err(|_| bad())?),
            Some(("delay", ms)) => EngineBackend::FixedDelay(Duration::from_millis(ms.parse().map_err(|_| bad())?)),
            _ => return Err(bad()),
        };
        backend.validate()?;
        Ok(backend)
    }
}

#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub backend: EngineBackend,
    /// Period of the lazy-delete sweep; `None` disables it.
    pub cold_interval: Option<Duration>,
    /// Deleted fraction above which the sweep cold-trains a leaf.
    pub delete_threshold: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { backend: EngineBackend::Inline, cold_interval: None, delete_threshold: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainerStats {
    pub submitted: u64,
    pub coalesced: u64,
    pub jobs_completed: u64,
    pub failures: u64,
    pub sweeps: u64,
    pub leaves_swept: u64,
    pub training_time: Duration,
}

#[derive(Default)]
struct QueueState {
    fifo: VecDeque<RetrainRequest>,
    pending: HashSet<u64>,
    running: usize,
    shutdown: bool,
    stats: TrainerStats,
}

#[derive(Default)]
struct Queue {
    state: Mutex<QueueState>,
    wake: Condvar,
    idle: Condvar,
}

impl Queue {
    fn submit(&self, req: RetrainRequest) -> Result<SubmitOutcome> {
        let mut q = self.state.lock();
        if q.shutdown {
            return Err(Error::Shutdown);
        }
        q.stats.submitted += 1;
        if !q.pending.insert(req.model_id) {
            q.stats.coalesced += 1;
            return Ok(SubmitOutcome::Coalesced);
        }
        q.fifo.push_back(req);
        drop(q);
        self.wake.notify_one();
        Ok(SubmitOutcome::Accepted)
    }
}

impl RetrainSink for Queue {
    fn request(&self, model_id: u64, reason: RetrainReason) -> bool {
        self.submit(RetrainRequest::new(model_id, reason)).is_ok()
    }
}

/// Owns the training thread of one index.
pub struct Trainer {
    index: Arc<Index>,
    queue: Arc<Queue>,
    config: TrainerConfig,
    handle: Option<JoinHandle<()>>,
}

impl Trainer {
    /// Attaches to `index` and starts the training thread. An index accepts
    /// only one trainer.
    pub fn start(index: Arc<Index>, config: TrainerConfig) -> Result<Self> {
        config.backend.validate()?;
        let queue = Arc::new(Queue::default());
        if !index.attach_sink(queue.clone()) {
            return Err(Error::Config("index already has a trainer".into()));
        }
        let handle = {
            let index = index.clone();
            let queue = queue.clone();
            let config = config.clone();
            std::thread::Builder::new()
                .name("memoindex-trainer".into())
                .spawn(move || training_loop(&index, &queue, &config))
                .map_err(|e| Error::Config(format!("cannot spawn training thread: {e}")))?
        };
        Ok(Self { index, queue, config, handle: Some(handle) })
    }

    pub fn index(&self) -> &Arc<Index> {
        &self.index
    }

    pub fn backend(&self) -> EngineBackend {
        self.config.backend
    }

    pub fn submit(&self, req: RetrainRequest) -> Result<SubmitOutcome> {
        self.queue.submit(req)
    }

    pub fn stats(&self) -> TrainerStats {
        self.queue.state.lock().stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.state.lock().fifo.len()
    }

    /// Blocks until the queue is empty and no job is running.
    pub fn wait_idle(&self) {
        let mut q = self.queue.state.lock();
        while !q.fifo.is_empty() || q.running > 0 {
            self.queue.idle.wait(&mut q);
        }
    }

    /// Like [`wait_idle`](Self::wait_idle) with a deadline; false on timeout.
    pub fn wait_idle_for(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut q = self.queue.state.lock();
        while !q.fifo.is_empty() || q.running > 0 {
            if self.queue.idle.wait_until(&mut q, deadline).timed_out() {
                return false;
            }
        }
        true
    }

    /// Cold-trains the leaves over the delete threshold on the calling thread.
    pub fn cold_sweep_tick(&self) -> Result<usize> {
        sweep(&self.index, &self.queue, self.config.delete_threshold)
    }

    /// Finishes queued work, then stops the thread. Later submits fail.
    pub fn shutdown(mut self) -> TrainerStats {
        self.stop();
        self.stats()
    }

    /// Drops queued requests, waits for the running job, then stops.
    pub fn abort(mut self) -> TrainerStats {
        {
            let mut q = self.queue.state.lock();
            q.fifo.clear();
            q.pending.clear();
        }
        self.stop();
        self.stats()
    }

    fn stop(&mut self) {
        self.queue.state.lock().shutdown = true;
        self.queue.wake.notify_all();
        if let Some(h) = self.handle.take() {
            if h.join().is_err() {
                log::error!("training thread panicked");
            }
        }
    }
}

impl Drop for Trainer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn sweep(index: &Index, queue: &Queue, threshold: f64) -> Result<usize> {
    let swept = index.cold_sweep(threshold)?;
    let mut q = queue.state.lock();
    q.stats.sweeps += 1;
    q.stats.leaves_swept += swept as u64;
    Ok(swept)
}

fn training_loop(index: &Index, queue: &Queue, config: &TrainerConfig) {
    let mut next_sweep = config.cold_interval.map(|d| std::time::Instant::now() + d);
    loop {
        let batch = {
            let mut q = queue.state.lock();
            loop {
                if !q.fifo.is_empty() {
                    break;
                }
                if q.shutdown {
                    return;
                }
                match next_sweep {
                    Some(at) if std::time::Instant::now() >= at => break,
                    Some(at) => {
                        queue.wake.wait_until(&mut q, at);
                    }
                    None => queue.wake.wait(&mut q),
                }
            }
            let n = q.fifo.len().min(config.backend.batch());
            let batch: Vec<RetrainRequest> = q.fifo.drain(..n).collect();
            for r in &batch {
                q.pending.remove(&r.model_id);
            }
            q.running += batch.len();
            batch
        };

        if let Some(at) = next_sweep {
            if std::time::Instant::now() >= at {
                if let Err(e) = sweep(index, queue, config.delete_threshold) {
                    log::warn!("cold sweep failed: {e}");
                }
                next_sweep = config.cold_interval.map(|d| std::time::Instant::now() + d);
            }
        }

        let started = Instant::now();
        let results: Vec<bool> = match config.backend {
            EngineBackend::Inline => batch.iter().map(|r| execute(index, r, None)).collect(),
            EngineBackend::FixedDelay(d) => batch.iter().map(|r| execute(index, r, Some(d))).collect(),
            EngineBackend::Parallel(_) if batch.len() == 1 => vec![execute(index, &batch[0], None)],
            EngineBackend::Parallel(_) => std::thread::scope(|s| {
                let handles: Vec<_> = batch.iter().map(|r| s.spawn(move || execute(index, r, None))).collect();
                handles.into_iter().map(|h| h.join().unwrap_or(false)).collect()
            }),
        };
        let elapsed = started.elapsed();

        let mut q = queue.state.lock();
        q.running -= batch.len();
        q.stats.training_time += elapsed;
        for ok in results {
            if ok {
                q.stats.jobs_completed += 1;
            } else {
                q.stats.failures += 1;
            }
        }
        if q.fifo.is_empty() && q.running == 0 {
            queue.idle.notify_all();
        }
    }
}

/// Runs one request; on failure falls back to a cold retrain. Never panics
/// the loop.
fn execute(index: &Index, req: &RetrainRequest, delay: Option<Duration>) -> bool {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_request(index, req, delay))).unwrap_or_else(|_| {
        log::error!("retrain of leaf {} panicked", req.model_id);
        false
    })
}

fn run_request(index: &Index, req: &RetrainRequest, delay: Option<Duration>) -> bool {
    let gate = |job: &crate::index::PreparedJob| {
        if let Some(d) = delay {
            let spent = job.elapsed();
            if spent < d {
                std::thread::sleep(d - spent);
            }
        }
    };
    match index.service_gated(req.model_id, req.reason, &gate) {
        Ok(_) => true,
        Err(e) => {
            log::warn!("retrain of leaf {} failed: {e}", req.model_id);
            match index.service_gated(req.model_id, RetrainReason::ColdSweep, &gate) {
                Ok(_) => true,
                Err(e) => {
                    log::error!("cold fallback for leaf {} failed: {e}", req.model_id);
                    false
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_parsing() {
        assert_eq!("inline".parse::<EngineBackend>().unwrap(), EngineBackend::Inline);
        assert_eq!("parallel:4".parse::<EngineBackend>().unwrap(), EngineBackend::Parallel(4));
        assert_eq!(
            "delay:250".parse::<EngineBackend>().unwrap(),
            EngineBackend::FixedDelay(Duration::from_millis(250))
        );
        assert!("parallel:0".parse::<EngineBackend>().is_err());
        assert!("gpu".parse::<EngineBackend>().is_err());
        for b in ["inline", "parallel:3", "delay:0"] {
            assert_eq!(b.parse::<EngineBackend>().unwrap().to_string(), b);
        }
    }

    #[test]
    fn queue_coalesces_and_rejects_after_shutdown() {
        let q = Queue::default();
        assert_eq!(q.submit(RetrainRequest::new(1, RetrainReason::Forced)).unwrap(), SubmitOutcome::Accepted);
        assert_eq!(q.submit(RetrainRequest::new(1, RetrainReason::Forced)).unwrap(), SubmitOutcome::Coalesced);
        assert_eq!(q.submit(RetrainRequest::new(2, RetrainReason::Forced)).unwrap(), SubmitOutcome::Accepted);
        assert_eq!(q.state.lock().fifo.len(), 2);
        q.state.lock().shutdown = true;
        assert_eq!(q.submit(RetrainRequest::new(3, RetrainReason::Forced)), Err(Error::Shutdown));
    }
}
