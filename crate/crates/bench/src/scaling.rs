//! Retraining cost as the model grows: full refactorization versus
//! absorbing a fixed-size delta into the memoized factor.
//!
//! Keys are generated from their rank, so ten million 96-byte keys never
//! have to exist at once. At each checkpoint `N` the model has already been
//! trained on `N - Δ` keys and `Δ` new keys arrive.

use std::time::{Duration, Instant};

use memoindex::iqrd::{default_chunk_rows, xty_accumulate, TsqrAccumulator};
use memoindex::keycodec::{encode_into, feature_dim, matricize_raw};
use memoindex::linalg::{solve_beta, solve_beta_ridge};
use memoindex::{Error as IndexError, MemoizedFactor, RFactor, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub key_len: usize,
    pub delta: usize,
    /// Total key counts after the retrain, ascending.
    pub checkpoints: Vec<usize>,
    /// Timed repetitions of the memoized retrain; the fastest is kept.
    pub repeats: usize,
    pub chunk_rows: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { key_len: 96, delta: 100_000, checkpoints: vec![1_000_000, 10_000_000], repeats: 3, chunk_rows: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub total_keys: usize,
    pub delta_keys: usize,
    pub key_len: usize,
    pub memo_ms: f64,
    pub full_ms: f64,
}

const KEY_SPREAD: u64 = 1_099_511_627_791;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key of rank `i`: an 8-byte big-endian prefix that grows with `i`, then
/// pseudo-random filler. Keys are sorted by rank.
pub fn scaling_key(i: u64, key_len: usize, out: &mut Vec<u8>) {
    assert!(i < 1 << 24, "rank {i} would overflow the key prefix");
    out.clear();
    out.extend_from_slice(&(i * KEY_SPREAD).to_be_bytes());
    let mut state = i;
    while out.len() < key_len {
        state = splitmix(state);
        out.extend_from_slice(&state.to_le_bytes());
    }
    out.truncate(key_len);
}

fn solve(r: &RFactor, xty: &[f64]) -> Result<Vector> {
    match solve_beta(r, xty) {
        Err(IndexError::Singular { .. }) => Ok(solve_beta_ridge(r, xty, 1e-10)?),
        other => Ok(other?),
    }
}

struct FullRun {
    elapsed: Duration,
    memo: MemoizedFactor,
    xty: Vector,
}

/// Factorizes ranks `0..total` from scratch. The state after `total - delta`
/// rows is captured off the clock.
fn full_retrain(cfg: &ScalingConfig, total: usize) -> Result<FullRun> {
    let p = feature_dim(cfg.key_len);
    let chunk = if cfg.chunk_rows == 0 { default_chunk_rows(p) } else { cfg.chunk_rows };
    let split = total - cfg.delta;
    let mut acc = TsqrAccumulator::new(p, chunk);
    let mut xty = vec![0.0; p];
    let mut row = vec![0.0; p];
    let mut key = Vec::with_capacity(cfg.key_len);
    let mut snapshot = None;
    let mut off_clock = Duration::ZERO;
    let started = Instant::now();
    for i in 0..total {
        if i == split {
            let t = Instant::now();
            let memo = MemoizedFactor::from_parts(acc.snapshot()?, split, 1);
            snapshot = Some((memo, Vector::new(xty.clone())?));
            off_clock += t.elapsed();
        }
        scaling_key(i as u64, cfg.key_len, &mut key);
        encode_into(&key, &mut row);
        let y = i as f64;
        for (o, v) in xty.iter_mut().zip(&row) {
            *o += v * y;
        }
        acc.push_row(&row)?;
    }
    let r = acc.finish()?;
    std::hint::black_box(solve(&r, &xty)?);
    let elapsed = started.elapsed() - off_clock;
    let (memo, xty) = snapshot.expect("delta is smaller than the checkpoint");
    Ok(FullRun { elapsed, memo, xty })
}

/// Absorbs ranks `total - delta .. total` into `memo` and solves.
fn memo_retrain(cfg: &ScalingConfig, total: usize, memo: &MemoizedFactor, xty: &Vector) -> Result<Duration> {
    let p = feature_dim(cfg.key_len);
    let chunk = if cfg.chunk_rows == 0 { default_chunk_rows(p) } else { cfg.chunk_rows };
    let split = total - cfg.delta;
    let mut best = Duration::MAX;
    for _ in 0..cfg.repeats.max(1) {
        let started = Instant::now();
        let mut keys = Vec::with_capacity(cfg.delta);
        let mut key = Vec::with_capacity(cfg.key_len);
        for i in split..total {
            scaling_key(i as u64, cfg.key_len, &mut key);
            keys.push(key.clone());
        }
        let x = matricize_raw(keys.iter().map(|k| &k[..]), cfg.key_len);
        let y: Vec<f64> = (split..total).map(|i| i as f64).collect();
        let next = memo.absorb_chunked(&x, chunk)?;
        let xty = xty_accumulate(xty, &x, &y)?;
        std::hint::black_box(solve(next.r(), &xty)?);
        best = best.min(started.elapsed());
    }
    Ok(best)
}

pub fn run_scaling(cfg: &ScalingConfig) -> Result<Vec<ScalingPoint>> {
    if cfg.delta == 0 || cfg.key_len == 0 {
        return Err(BenchError::Config("scaling needs delta >= 1 and key_len >= 1".into()));
    }
    if let Some(bad) = cfg.checkpoints.iter().find(|&&n| n <= cfg.delta || n >= 1 << 24) {
        return Err(BenchError::Config(format!("checkpoint {bad} must lie in ({}, 2^24)", cfg.delta)));
    }
    let mut points = Vec::with_capacity(cfg.checkpoints.len());
    for &total in &cfg.checkpoints {
        let full = full_retrain(cfg, total)?;
        let memo = memo_retrain(cfg, total, &full.memo, &full.xty)?;
        log::info!("{total} keys: full {:?}, memoized {:?}", full.elapsed, memo);
        points.push(ScalingPoint {
            total_keys: total,
            delta_keys: cfg.delta,
            key_len: cfg.key_len,
            memo_ms: memo.as_secs_f64() * 1e3,
            full_ms: full.elapsed.as_secs_f64() * 1e3,
        });
    }
    Ok(points)
}
