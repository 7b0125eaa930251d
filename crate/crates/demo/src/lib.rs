//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export returns JSON text so the page needs no generated glue beyond
//! what `wasm-bindgen` emits. The same functions are plain Rust and are
//! tested natively.

use memoindex::index::{DeleteOutcome, InsertOutcome};
use memoindex::iqrd::parallel_qrd;
use memoindex::keycodec::matricize_raw;
use memoindex::linalg::{householder_qrd, solve_beta};
use memoindex::{DenseMatrix, Index, IndexConfig, MemoizedFactor, RFactor};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;
use wasm_bindgen::prelude::*;

// Errors cross the boundary as strings; building a `JsError` would call
// into JavaScript and so could not run in native tests.
fn to_js(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain structs serialize")
}

fn random_keys(n: usize, key_len: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<Vec<u8>> = (0..n)
        .map(|_| {
            let mut k = vec![0u8; key_len];
            rng.fill_bytes(&mut k);
            // Printable lowercase so the page can show them.
            k.iter_mut().for_each(|b| *b = b'a' + *b % 26);
            k
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

#[derive(Serialize)]
struct LeafView {
    id: u64,
    keys: usize,
    deleted: usize,
    buffered: usize,
    err_min: i64,
    err_max: i64,
    mean_abs_err: f64,
    memo_rows: usize,
    memo_bytes: usize,
    model_epoch: u64,
}

#[derive(Serialize)]
struct OpResult {
    op: &'static str,
    key: String,
    value: Option<u64>,
    outcome: String,
    /// Leaf and search window the router picked.
    leaf: Option<u64>,
    window: Option<(usize, usize)>,
}

/// A small index to poke at: keys are typed in, leaves are listed with
/// their error windows and memo sizes.
#[wasm_bindgen]
pub struct Playground {
    index: Index,
}

#[wasm_bindgen]
impl Playground {
    /// Loads `initial` random lowercase keys of `key_len` bytes.
    #[wasm_bindgen(constructor)]
    pub fn new(initial: usize, key_len: usize, leaf_size: usize, max_buffer: usize) -> Result<Playground, String> {
        let keys = random_keys(initial, key_len, 7);
        let pairs: Vec<(Vec<u8>, u64)> = keys.into_iter().zip(0..).collect();
        let config = IndexConfig {
            key_len,
            target_leaf_size: leaf_size.max(2),
            max_buffer: max_buffer.max(1),
            inline_retrain: true,
            ..IndexConfig::default()
        };
        let index = Index::bulk_load(config, &pairs).map_err(to_js)?;
        Ok(Playground { index })
    }

    fn located(&self, op: &'static str, key: &str, value: Option<u64>, outcome: String) -> String {
        let found = self.index.locate(key.as_bytes());
        json(&OpResult {
            op,
            key: key.to_owned(),
            value,
            outcome,
            leaf: found.map(|f| f.0),
            window: found.map(|f| f.2),
        })
    }

    pub fn insert(&self, key: &str, value: u64) -> Result<String, String> {
        let outcome = match self.index.insert(key.as_bytes(), value).map_err(to_js)? {
            InsertOutcome::Inserted => "inserted",
            InsertOutcome::Updated => "updated",
        };
        Ok(self.located("insert", key, Some(value), outcome.into()))
    }

    pub fn lookup(&self, key: &str) -> String {
        let value = self.index.lookup(key.as_bytes());
        let outcome = if value.is_some() { "found" } else { "absent" };
        self.located("lookup", key, value, outcome.into())
    }

    pub fn delete(&self, key: &str) -> String {
        let outcome = match self.index.delete(key.as_bytes()) {
            DeleteOutcome::Deleted => "deleted",
            DeleteOutcome::NotFound => "absent",
        };
        self.located("delete", key, None, outcome.into())
    }

    /// Retrains every leaf with pending keys; returns how many ran.
    pub fn retrain(&self) -> Result<usize, String> {
        self.index.retrain_all().map_err(to_js)
    }

    /// Up to `limit` keys from `start`, as a JSON array of `[key, value]`.
    pub fn scan(&self, start: &str, limit: usize) -> String {
        let rows: Vec<(String, u64)> = self
            .index
            .range_scan(start.as_bytes(), limit)
            .into_iter()
            .map(|e| (String::from_utf8_lossy(&e.key).into_owned(), e.value))
            .collect();
        json(&rows)
    }

    pub fn leaves(&self) -> String {
        let views: Vec<LeafView> = self
            .index
            .stats()
            .leaves
            .into_iter()
            .map(|l| LeafView {
                id: l.model_id,
                keys: l.keys,
                deleted: l.deleted,
                buffered: l.buffered,
                err_min: l.err_min,
                err_max: l.err_max,
                mean_abs_err: l.mean_abs_err,
                memo_rows: l.memo_rows,
                memo_bytes: l.memory.memo,
                model_epoch: l.model_epoch,
            })
            .collect();
        json(&views)
    }
}

/// Full versus memoized retraining on the same keys. The page times
/// [`RetrainCost::full`] and [`RetrainCost::memoized`] itself.
#[wasm_bindgen]
pub struct RetrainCost {
    x: DenseMatrix,
    y: Vec<f64>,
    delta: usize,
    memo: MemoizedFactor,
    xty: Vec<f64>,
    chunk: usize,
}

#[derive(Serialize)]
struct Fit {
    rows_factorized: usize,
    beta_head: Vec<f64>,
}

#[wasm_bindgen]
impl RetrainCost {
    /// `total` sorted keys; the memo already covers the first `total - delta`.
    #[wasm_bindgen(constructor)]
    pub fn new(total: usize, delta: usize, key_len: usize) -> Result<RetrainCost, String> {
        if delta == 0 || delta >= total || key_len == 0 {
            return Err("need 0 < delta < total and key_len >= 1".into());
        }
        let keys = random_keys(total, key_len, 11);
        let x = matricize_raw(keys.iter().map(|k| &k[..]), key_len);
        let y: Vec<f64> = (0..x.rows()).map(|i| i as f64).collect();
        let split = x.rows().saturating_sub(delta);
        let chunk = 4 * x.cols();
        let memo = MemoizedFactor::from_parts(parallel_qrd(&x.row_slice(0, split), chunk).map_err(to_js)?, split, 1);
        let xty = xty(&x, &y, 0, split);
        Ok(RetrainCost { x, y, delta, memo, xty, chunk })
    }

    /// Refactorizes every key.
    pub fn full(&self) -> Result<String, String> {
        let r = parallel_qrd(&self.x, self.chunk).map_err(to_js)?;
        let xty = xty(&self.x, &self.y, 0, self.x.rows());
        fit(&r, &xty, self.x.rows())
    }

    /// Absorbs only the last `delta` keys into the memoized factor.
    pub fn memoized(&self) -> Result<String, String> {
        let (split, rows) = (self.x.rows() - self.delta, self.x.rows());
        let part = self.x.row_slice(split, rows);
        let next = self.memo.absorb_chunked(&part, self.chunk).map_err(to_js)?;
        let mut xty = self.xty.clone();
        for (o, v) in xty.iter_mut().zip(self::xty(&self.x, &self.y, split, rows)) {
            *o += v;
        }
        fit(next.r(), &xty, part.rows())
    }
}

fn xty(x: &DenseMatrix, y: &[f64], from: usize, to: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    for (i, &yi) in y.iter().enumerate().take(to).skip(from) {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v * yi;
        }
    }
    out
}

fn fit(r: &RFactor, xty: &[f64], rows: usize) -> Result<String, String> {
    let beta = solve_beta(r, xty).map_err(to_js)?;
    Ok(json(&Fit { rows_factorized: rows, beta_head: beta.iter().take(4).copied().collect() }))
}

#[derive(Serialize)]
struct Invariance {
    rows: usize,
    cols: usize,
    chunk_rows: usize,
    /// `‖R_cᵀR_c − R_1ᵀR_1‖_F / ‖R_1ᵀR_1‖_F` against a single-block factorization.
    gram_rel_diff: f64,
}

/// Factors one random matrix in row blocks of `chunk_rows` and compares the
/// result with an unchunked factorization.
#[wasm_bindgen]
pub fn chunk_invariance(rows: usize, cols: usize, chunk_rows: usize, seed: u64) -> Result<String, String> {
    if cols == 0 || rows < cols {
        return Err("need rows >= cols >= 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5).collect();
    let x = DenseMatrix::new(rows, cols, data).map_err(to_js)?;
    let whole = householder_qrd(&x).map_err(to_js)?.gram();
    let chunked = parallel_qrd(&x, chunk_rows).map_err(to_js)?.gram();
    let diff: f64 = chunked.data().iter().zip(whole.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(json(&Invariance { rows, cols, chunk_rows: chunk_rows.max(cols), gram_rel_diff: diff / whole.frobenius() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value as J;

    fn parse(s: &str) -> J {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn playground_round_trip() {
        let p = Playground::new(500, 6, 100, 8).unwrap();
        let before = parse(&p.leaves()).as_array().unwrap().len();
        assert!(before >= 5);
        assert_eq!(parse(&p.insert("zzzzzz!", 9).unwrap())["outcome"], "inserted");
        assert_eq!(parse(&p.insert("zzzzzz!", 10).unwrap())["outcome"], "updated");
        assert_eq!(parse(&p.lookup("zzzzzz!"))["value"], 10);
        assert_eq!(parse(&p.delete("zzzzzz!"))["outcome"], "deleted");
        assert_eq!(parse(&p.lookup("zzzzzz!"))["outcome"], "absent");
        let leaves = parse(&p.leaves());
        for l in leaves.as_array().unwrap() {
            assert_eq!(l["memo_bytes"], 7 * 7 * 8);
        }
    }

    #[test]
    fn playground_scan_is_sorted() {
        let p = Playground::new(300, 4, 64, 4).unwrap();
        for k in ["aaaa", "mmmm", "mmmn"] {
            p.insert(k, 1).unwrap();
        }
        p.retrain().unwrap();
        let rows = parse(&p.scan("m", 20));
        let keys: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r[0].as_str().unwrap()).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(keys.contains(&"mmmm") && keys.contains(&"mmmn"));
    }

    #[test]
    fn memoized_and_full_agree() {
        let c = RetrainCost::new(3_000, 200, 8).unwrap();
        let (full, memo) = (parse(&c.full().unwrap()), parse(&c.memoized().unwrap()));
        assert_eq!(full["rows_factorized"], 3_000);
        assert_eq!(memo["rows_factorized"], 200);
        for (a, b) in full["beta_head"].as_array().unwrap().iter().zip(memo["beta_head"].as_array().unwrap()) {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
        assert!(RetrainCost::new(10, 10, 4).is_err());
    }

    #[test]
    fn chunking_does_not_change_the_gram() {
        for chunk in [1, 17, 64, 5_000] {
            let out = parse(&chunk_invariance(2_000, 12, chunk, 3).unwrap());
            assert!(out["gram_rel_diff"].as_f64().unwrap() <= 1e-12);
            assert!(out["chunk_rows"].as_u64().unwrap() >= 12);
        }
        assert!(chunk_invariance(3, 5, 4, 0).is_err());
    }
}
