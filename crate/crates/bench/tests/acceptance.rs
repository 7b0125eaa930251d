//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use memoindex::index::{DeleteOutcome, InsertOutcome, JobKind};
use memoindex::iqrd::{parallel_qrd, xty_accumulate};
use memoindex::linalg::{householder_qrd, solve_beta, upper_tri_inverse};
use memoindex::{
    DenseMatrix, EngineBackend, Index, IndexConfig, MemoizedFactor, RFactor, Trainer, TrainerConfig,
};
use memoindex_bench::{
    run, run_scaling, synthetic_corpus, Distribution, Mix, RunConfig, ScalingConfig, Stop, TargetKind,
    WorkloadSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

// ---------------------------------------------------------------------------
// Oracles

fn to_na(x: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
}

fn r_to_na(r: &RFactor) -> DMatrix<f64> {
    DMatrix::from_row_slice(r.dim(), r.dim(), r.data())
}

/// `‖RᵀR − XᵀX‖_F / ‖XᵀX‖_F` with both Gram matrices formed by nalgebra.
fn gram_error(r: &RFactor, gram: &DMatrix<f64>) -> f64 {
    let rn = r_to_na(r);
    (rn.transpose() * rn - gram).norm() / gram.norm()
}

fn condition(x: &DMatrix<f64>) -> f64 {
    let s = x.clone().svd(false, false).singular_values;
    s.max() / s.min()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// A tall matrix with `κ < 1e6`: uniform entries, or key-like byte rows with
/// an intercept column.
fn random_case(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (DenseMatrix, DMatrix<f64>) {
    loop {
        let keylike = rng.gen_bool(0.3) && cols >= 2;
        let data: Vec<f64> = (0..rows)
            .flat_map(|_| {
                (0..cols)
                    .map(|j| {
                        if !keylike {
                            rng.gen_range(-1.0..1.0)
                        } else if j == cols - 1 {
                            1.0
                        } else {
                            rng.gen_range(0..=255u8) as f64
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let x = DenseMatrix::new(rows, cols, data).unwrap();
        let xn = to_na(&x);
        if condition(&xn) < 1e6 {
            return (x, xn);
        }
    }
}

fn random_y(rng: &mut ChaCha8Rng, rows: usize) -> Vec<f64> {
    (0..rows).map(|i| i as f64 + rng.gen_range(-0.5..0.5)).collect()
}

// ---------------------------------------------------------------------------
// 1. Memoized factorization equals the cold one

fn memoized_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_gram, mut worst_beta) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let rows = if rng.gen_bool(0.1) { 10_000 } else { rng.gen_range(10..=2_000) };
        let cols = rng.gen_range(2..=96.min(rows));
        let (x, xn) = random_case(&mut rng, rows, cols);
        let y = random_y(&mut rng, rows);

        let batches = rng.gen_range(1..=16.min(rows));
        let mut cuts: Vec<usize> = (0..batches - 1).map(|_| rng.gen_range(1..rows)).collect();
        cuts.push(0);
        cuts.push(rows);
        cuts.sort_unstable();
        let mut memo = MemoizedFactor::empty(cols);
        let mut xty = vec![0.0; cols];
        for w in cuts.windows(2) {
            let part = x.row_slice(w[0], w[1]);
            memo = memo.absorb(&part).unwrap();
            xty = xty_accumulate(&xty, &part, &y[w[0]..w[1]]).unwrap().into_inner();
        }
        assert_eq!(memo.trained_rows(), rows);

        let gram = xn.transpose() * &xn;
        worst_gram = worst_gram.max(gram_error(memo.r(), &gram));

        let cold = householder_qrd(&x).unwrap();
        let xty_cold: Vec<f64> = (xn.transpose() * DVector::from_column_slice(&y)).iter().copied().collect();
        let beta_inc = solve_beta(memo.r(), &xty).unwrap();
        let beta_cold = solve_beta(&cold, &xty_cold).unwrap();
        worst_beta = worst_beta.max(rel_diff(&beta_inc, &beta_cold));
    }
    outcome(
        worst_gram <= 1e-8 && worst_beta <= 1e-6,
        format!("200 matrices, worst Gram error {worst_gram:.2e} (limit 1e-8), worst beta difference {worst_beta:.2e} (limit 1e-6)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Retrain cost: memoized stays flat, full grows

fn scaling() -> Outcome {
    let points = run_scaling(&ScalingConfig::default()).unwrap();
    let (small, large) = (&points[0], &points[1]);
    let memo_growth = large.memo_ms / small.memo_ms;
    let full_growth = large.full_ms / small.full_ms;
    outcome(
        memo_growth <= 2.0 && full_growth >= 5.0,
        format!(
            "key_len 96, delta 1e5: memoized {:.0} -> {:.0} ms (x{memo_growth:.2}, limit 2), full {:.0} -> {:.0} ms (x{full_growth:.2}, need 5)",
            small.memo_ms, large.memo_ms, small.full_ms, large.full_ms
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Longer training delay, lower throughput

fn delay_ordering() -> Outcome {
    let corpus = synthetic_corpus(1_000_000, 16, 3).unwrap();
    // 5 s, 30 s, 100 s and 300 s scaled by 1/250.
    let delays = [20u64, 120, 400, 1_200];
    let mut throughput = Vec::new();
    for &ms in &delays {
        let mut spec = WorkloadSpec::ycsb_d(corpus.len(), 16);
        spec.stop = Stop::Duration(Duration::from_secs(3));
        let mut cfg = RunConfig::new(spec, TargetKind::Learned);
        cfg.backend = EngineBackend::FixedDelay(Duration::from_millis(ms));
        throughput.push(run(&cfg, &corpus).unwrap().throughput);
    }
    let decreasing = throughput.windows(2).all(|w| w[0] > w[1]);
    let shown: Vec<String> =
        delays.iter().zip(&throughput).map(|(d, t)| format!("{d} ms: {:.0} ops/s", t)).collect();
    outcome(decreasing, format!("ycsb-d, 5% appends; {}", shown.join(", ")))
}

// ---------------------------------------------------------------------------
// 4. Memoized background training beats blocking full retraining

fn background_benefit() -> Outcome {
    let corpus = synthetic_corpus(10_000_000, 16, 4).unwrap();
    let mut spec = WorkloadSpec::ycsb_d(corpus.len(), 16);
    spec.stop = Stop::Ops(2_000_000);
    let learned = run(&RunConfig::new(spec.clone(), TargetKind::Learned), &corpus).unwrap();
    let blocking = run(&RunConfig::new(spec, TargetKind::LearnedNoMemo), &corpus).unwrap();
    let ratio = learned.throughput / blocking.throughput;
    outcome(
        ratio >= 1.3,
        format!(
            "1e7 keys, 95/5 read/insert: memoized background {:.0} ops/s, blocking full retrain {:.0} ops/s (x{ratio:.2}, need 1.3)",
            learned.throughput, blocking.throughput
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Lazy deletes cost little

fn delete_overhead() -> Outcome {
    let corpus = synthetic_corpus(1_000_000, 16, 5).unwrap();
    let config = |delete: f64| {
        let mix = Mix { read: 1.0 - delete, insert: 0.0, delete, scan: 0.0 };
        let mut spec = WorkloadSpec::custom(mix, Distribution::Uniform, corpus.len(), 16);
        spec.stop = Stop::Ops(3_000_000);
        let mut cfg = RunConfig::new(spec, TargetKind::Learned);
        // Longest sweep interval: no sweep runs during the measurement.
        cfg.cold_interval = Some(Duration::from_secs(3_600));
        cfg
    };
    let (reads, deletes) = (config(0.0), config(0.15));
    let (mut best_read, mut best_delete) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        best_read = best_read.max(run(&reads, &corpus).unwrap().throughput);
        best_delete = best_delete.max(run(&deletes, &corpus).unwrap().throughput);
    }
    let degradation = 1.0 - best_delete / best_read;
    outcome(
        degradation <= 0.10,
        format!(
            "uniform, best of 3: 0% deletes {best_read:.0} ops/s, 15% deletes {best_delete:.0} ops/s, degradation {:.1}% (limit 10%)",
            degradation * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Memo footprint

fn memo_footprint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut wrong = Vec::new();
    for key_len in [1usize, 15, 16, 95] {
        let mut keys: Vec<Vec<u8>> = (0..6_000).map(|_| (0..key_len.max(4)).map(|_| rng.gen()).collect()).collect();
        keys.sort_unstable();
        keys.dedup();
        let pairs: Vec<(Vec<u8>, u64)> = keys.into_iter().zip(0..).collect();
        let cfg = IndexConfig { key_len, target_leaf_size: 1_000, max_buffer: 100_000, ..IndexConfig::default() };
        let index = Index::bulk_load(cfg, &pairs).unwrap();
        for _ in 0..500 {
            let k: Vec<u8> = (0..key_len.max(4)).map(|_| rng.gen()).collect();
            index.insert(&k, 1).unwrap();
        }
        index.retrain_all().unwrap();
        let ids = index.leaf_ids();
        index.split_leaf(ids[0]).unwrap();
        let ids = index.leaf_ids();
        index.merge_leaves(ids[ids.len() - 2]).unwrap();

        let expected = (key_len + 1) * (key_len + 1) * 8;
        for s in index.stats().leaves {
            checked += 1;
            let factor = index.leaf_factor(s.model_id).unwrap();
            if s.memory.memo != expected || factor.footprint_bytes() != expected {
                wrong.push(format!("key_len {key_len} leaf {}: {} bytes", s.model_id, s.memory.memo));
            }
        }
    }
    let p96 = MemoizedFactor::empty(96).footprint_bytes();
    outcome(
        wrong.is_empty() && p96 == 73_728,
        format!("{checked} leaves across key_len 1/15/16/95 after retrain, split and merge; key_len 95 gives {p96} bytes; mismatches: {wrong:?}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Shadow-map equivalence

fn shadow_key(id: u64) -> Vec<u8> {
    let h = id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut k = format!("{:016x}", h).into_bytes();
    k.truncate(4 + (id % 13) as usize);
    k.extend(std::iter::repeat(b'~').take((id % 5) as usize));
    k
}

fn full_contents(index: &Index) -> Vec<(Vec<u8>, u64)> {
    index.range_scan(&[0], usize::MAX).into_iter().map(|e| (e.key, e.value)).collect()
}

fn single_threaded_shadow(divergences: &mut Vec<String>) -> (u64, [usize; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = IndexConfig {
        key_len: 16,
        target_leaf_size: 2_048,
        max_buffer: 128,
        inline_retrain: true,
        ..IndexConfig::default()
    };
    let index = Index::new(cfg).unwrap();
    let mut shadow: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let space = 150_000;
    let mut report = |what: String| {
        if divergences.len() < 10 {
            divergences.push(what);
        }
    };
    let ops = 1_000_000u64;
    for op in 0..ops {
        let key = shadow_key(rng.gen_range(0..space));
        let r: f64 = rng.gen();
        if r < 0.35 {
            let got = index.lookup(&key);
            if got != shadow.get(&key).copied() {
                report(format!("op {op}: lookup {key:?} gave {got:?}"));
            }
        } else if r < 0.70 {
            let v = rng.gen::<u64>() >> 1;
            let was = shadow.insert(key.clone(), v).is_some();
            let out = index.insert(&key, v).unwrap();
            if (out == InsertOutcome::Updated) != was {
                report(format!("op {op}: insert {key:?} gave {out:?}"));
            }
        } else if r < 0.88 {
            let was = shadow.remove(&key).is_some();
            let out = index.delete(&key);
            if (out == DeleteOutcome::Deleted) != was {
                report(format!("op {op}: delete {key:?} gave {out:?}"));
            }
        } else {
            let limit = rng.gen_range(1..60);
            let got: Vec<(Vec<u8>, u64)> = index.range_scan(&key, limit).into_iter().map(|e| (e.key, e.value)).collect();
            let want: Vec<(Vec<u8>, u64)> = shadow.range(key.clone()..).take(limit).map(|(k, v)| (k.clone(), *v)).collect();
            if got != want {
                report(format!("op {op}: scan from {key:?} differs"));
            }
        }

        if op % 25_000 == 24_999 {
            let ids = index.leaf_ids();
            match (op / 25_000) % 4 {
                0 => {
                    index.retrain_all().unwrap();
                }
                1 => {
                    index.split_leaf(ids[rng.gen_range(0..ids.len())]).unwrap();
                }
                2 if ids.len() >= 2 => {
                    index.merge_leaves(ids[rng.gen_range(0..ids.len() - 1)]).unwrap();
                }
                _ => {
                    index.cold_sweep(0.0).unwrap();
                }
            }
            let want: Vec<(Vec<u8>, u64)> = shadow.iter().map(|(k, v)| (k.clone(), *v)).collect();
            if full_contents(&index) != want {
                report(format!("op {op}: full contents differ"));
            }
        }
    }
    let mut kinds = [0usize; 4];
    for e in index.retrain_log() {
        kinds[match e.kind {
            JobKind::Incremental => 0,
            JobKind::Cold => 1,
            JobKind::Split => 2,
            JobKind::Merge => 3,
        }] += 1;
    }
    (ops, kinds)
}

fn concurrent_shadow(divergences: &mut Vec<String>) -> (u64, usize) {
    const THREADS: usize = 8;
    const PHASES: usize = 5;
    const OPS: usize = 25_000;
    let cfg = IndexConfig { key_len: 16, target_leaf_size: 2_048, max_buffer: 128, ..IndexConfig::default() };
    let index = Arc::new(Index::new(cfg).unwrap());
    let trainer = Trainer::start(
        index.clone(),
        TrainerConfig {
            backend: EngineBackend::Parallel(2),
            cold_interval: Some(Duration::from_millis(50)),
            delete_threshold: 0.2,
        },
    )
    .unwrap();
    let shadows: Vec<Arc<Mutex<BTreeMap<Vec<u8>, u64>>>> = (0..THREADS).map(|_| Arc::default()).collect();
    let errors = Arc::new(Mutex::new(Vec::<String>::new()));
    let bad = Arc::new(AtomicUsize::new(0));
    let start = Arc::new(Barrier::new(THREADS + 1));
    let done = Arc::new(Barrier::new(THREADS + 1));
    let mut checks = 0;

    std::thread::scope(|s| {
        for t in 0..THREADS {
            let (index, shadow, errors, bad) = (&index, shadows[t].clone(), errors.clone(), bad.clone());
            let (start, done) = (start.clone(), done.clone());
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
                for _ in 0..PHASES {
                    start.wait();
                    let mut shadow = shadow.lock().unwrap();
                    for _ in 0..OPS {
                        let mut key = vec![b'A' + t as u8];
                        key.extend(shadow_key(rng.gen_range(0..20_000)));
                        let r: f64 = rng.gen();
                        let ok = if r < 0.4 {
                            index.lookup(&key) == shadow.get(&key).copied()
                        } else if r < 0.75 {
                            let v = rng.gen::<u64>() >> 1;
                            let was = shadow.insert(key.clone(), v).is_some();
                            (index.insert(&key, v).unwrap() == InsertOutcome::Updated) == was
                        } else if r < 0.9 {
                            let was = shadow.remove(&key).is_some();
                            (index.delete(&key) == DeleteOutcome::Deleted) == was
                        } else {
                            // Scans stay inside this thread's key range.
                            let got = index.range_scan(&key, 20);
                            let want: Vec<_> = shadow.range(key.clone()..).take(20).collect();
                            let own: Vec<_> = got.iter().take_while(|e| e.key[0] == key[0]).collect();
                            own.len() == want.len()
                                && own.iter().zip(&want).all(|(e, (k, v))| e.key == **k && e.value == **v)
                        };
                        if !ok {
                            bad.fetch_add(1, Ordering::SeqCst);
                            let mut errors = errors.lock().unwrap();
                            if errors.len() < 10 {
                                errors.push(format!("thread {t}: operation on {key:?} diverged"));
                            }
                        }
                    }
                    drop(shadow);
                    done.wait();
                }
            });
        }
        for _ in 0..PHASES {
            start.wait();
            done.wait();
            // Quiescent point: no client operation is in flight.
            let mut want: Vec<(Vec<u8>, u64)> = Vec::new();
            for sh in &shadows {
                want.extend(sh.lock().unwrap().iter().map(|(k, v)| (k.clone(), *v)));
            }
            want.sort_unstable();
            checks += 1;
            if full_contents(&index) != want {
                errors.lock().unwrap().push(format!("quiescent check {checks}: full contents differ"));
            }
            if want.iter().any(|(k, v)| index.lookup(k) != Some(*v)) {
                errors.lock().unwrap().push(format!("quiescent check {checks}: point lookups differ"));
            }
        }
    });
    trainer.shutdown();
    let want: usize = shadows.iter().map(|s| s.lock().unwrap().len()).sum();
    if index.stats().live_keys() != want {
        errors.lock().unwrap().push("live key count differs after shutdown".into());
    }
    divergences.extend(errors.lock().unwrap().drain(..));
    if bad.load(Ordering::SeqCst) > 0 && divergences.is_empty() {
        divergences.push("operation divergence".into());
    }
    ((THREADS * PHASES * OPS) as u64, checks)
}

fn functional_equivalence() -> Outcome {
    let mut divergences = Vec::new();
    let (single_ops, kinds) = single_threaded_shadow(&mut divergences);
    let (multi_ops, checks) = concurrent_shadow(&mut divergences);
    let all_kinds = kinds.iter().all(|&k| k > 0);
    outcome(
        divergences.is_empty() && all_kinds,
        format!(
            "{single_ops} single-threaded ops (jobs: {} incremental, {} cold, {} split, {} merge) and {multi_ops} ops on 8 threads with {checks} quiescent checks; divergences: {divergences:?}",
            kinds[0], kinds[1], kinds[2], kinds[3]
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Linear-algebra properties

fn linalg_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut gram, mut inverse, mut solve, mut chunks) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut solved = 0;
    for case in 0..1_000 {
        let (rows, cols) = if case % 100 == 0 {
            (10_000, 96)
        } else {
            let cols = rng.gen_range(2..=96);
            (rng.gen_range(cols..=cols * 8), cols)
        };
        let (x, xn) = random_case(&mut rng, rows, cols);
        let g = xn.transpose() * &xn;

        let r = householder_qrd(&x).unwrap();
        gram = gram.max(gram_error(&r, &g));

        let rinv = DMatrix::from_row_slice(cols, cols, upper_tri_inverse(&r).unwrap().data());
        let residual = (r_to_na(&r) * rinv - DMatrix::identity(cols, cols)).norm() / cols as f64;
        inverse = inverse.max(residual);

        // The normal-equation oracle is only accurate to about κ(XᵀX)·ε,
        // so it is compared where κ(XᵀX) < 1e6.
        let kappa = condition(&xn);
        if kappa * kappa < 1e6 {
            let y = random_y(&mut rng, rows);
            let yn = DVector::from_column_slice(&y);
            let xty: Vec<f64> = (xn.transpose() * &yn).iter().copied().collect();
            let oracle = g.clone().lu().solve(&(xn.transpose() * &yn)).unwrap();
            let beta = solve_beta(&r, &xty).unwrap();
            solve = solve.max(rel_diff(&beta, oracle.as_slice()));
            solved += 1;
        }

        let chunk = rng.gen_range(cols..=rows.max(cols));
        let split = parallel_qrd(&x, chunk).unwrap();
        chunks = chunks.max(gram_error(&split, &g));
    }
    let passed = gram <= 1e-9 && inverse <= 1e-10 && solve <= 1e-8 && chunks <= 1e-9 && solved >= 500;
    outcome(
        passed,
        format!(
            "1000 cases: Gram {gram:.2e} (1e-9), inverse residual per dim {inverse:.2e} (1e-10), solve vs normal equations {solve:.2e} over {solved} cases (1e-8), chunked Gram {chunks:.2e} (1e-9)"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("memoized factorization exactness", memoized_exactness),
        ("retrain scaling, memoized vs full", scaling),
        ("throughput falls as training delay grows", delay_ordering),
        ("background memoized vs blocking full retrain", background_benefit),
        ("lazy deletion overhead", delete_overhead),
        ("memo footprint", memo_footprint),
        ("shadow-map equivalence", functional_equivalence),
        ("linear-algebra properties", linalg_properties),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Main-thread panics are reported on the criterion's own line; panics on
    // any other thread (trainer, workers) still print.
    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(move |info| {
        if std::thread::current().name() != Some("main") {
            default_hook(info);
        }
    }));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.passed);
        println!(
            "{} criterion {n} ({name}): {} [{:.1} s]",
            if result.passed { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
