//! Seeded query streams in the style of YCSB.

use std::fmt;
use std::time::Duration;

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, Zipf};

use crate::dataset::{odd_chars, KeySet, ALPHABET};
use crate::error::{BenchError, Result};

pub const ZIPF_THETA: f64 = 0.99;
/// Leading byte of appended insert keys; above every corpus character.
pub const APPEND_PREFIX: u8 = 0xF0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Distribution {
    Sequential,
    Zipfian,
    Hotspot,
    Exponent,
    Uniform,
    Latest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InsertOrder {
    /// Each new key sorts after every earlier one.
    Append,
    /// New keys land anywhere in the key space.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mix {
    pub read: f64,
    pub insert: f64,
    pub delete: f64,
    pub scan: f64,
}

impl Mix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.read, self.insert, self.delete, self.scan];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(BenchError::Config(format!("ratios must lie in [0, 1]: {self}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(BenchError::Config(format!("ratios sum to {sum}, not 1: {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "read={} insert={} delete={} scan={}", self.read, self.insert, self.delete, self.scan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    Ops(u64),
    Duration(Duration),
}

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub name: String,
    pub mix: Mix,
    pub distribution: Distribution,
    pub insert_order: InsertOrder,
    pub key_len: usize,
    pub initial_keys: usize,
    pub stop: Stop,
    pub threads: usize,
    pub seed: u64,
    pub max_scan: usize,
}

impl WorkloadSpec {
    /// 95% reads of recently inserted keys, 5% appended inserts.
    pub fn ycsb_d(initial_keys: usize, key_len: usize) -> Self {
        Self {
            name: "ycsb-d".into(),
            mix: Mix { read: 0.95, insert: 0.05, delete: 0.0, scan: 0.0 },
            distribution: Distribution::Latest,
            insert_order: InsertOrder::Append,
            key_len,
            initial_keys,
            stop: Stop::Ops(1_000_000),
            threads: 1,
            seed: 42,
            max_scan: 100,
        }
    }

    /// 95% short scans from zipfian start keys, 5% inserts.
    pub fn ycsb_e(initial_keys: usize, key_len: usize) -> Self {
        Self {
            name: "ycsb-e".into(),
            mix: Mix { read: 0.0, insert: 0.05, delete: 0.0, scan: 0.95 },
            distribution: Distribution::Zipfian,
            insert_order: InsertOrder::Uniform,
            ..Self::ycsb_d(initial_keys, key_len)
        }
    }

    pub fn custom(mix: Mix, distribution: Distribution, initial_keys: usize, key_len: usize) -> Self {
        Self {
            name: "custom".into(),
            mix,
            distribution,
            insert_order: InsertOrder::Uniform,
            ..Self::ycsb_d(initial_keys, key_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.threads == 0 {
            return Err(BenchError::Config("need at least one serving thread".into()));
        }
        if self.threads > 255 {
            return Err(BenchError::Config("at most 255 serving threads".into()));
        }
        if self.key_len == 0 {
            return Err(BenchError::Config("key length must be at least 1".into()));
        }
        if self.mix.scan > 0.0 && self.max_scan == 0 {
            return Err(BenchError::Config("scans need max_scan >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyRef {
    Loaded(u32),
    Inserted(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Read(KeyRef),
    Insert(KeyRef, u64),
    Delete(KeyRef),
    Scan(KeyRef, usize),
}

/// Query stream of one serving thread. The same spec, corpus and thread id
/// always give the same sequence.
pub struct QueryStream<'a> {
    spec: &'a WorkloadSpec,
    corpus: &'a KeySet,
    inserted: KeySet,
    rng: ChaCha8Rng,
    thread: u8,
    issued: u64,
    zipf: Option<(u64, Zipf<f64>)>,
    exp: Option<(u64, Exp<f64>)>,
    odd: Vec<u8>,
}

impl<'a> QueryStream<'a> {
    pub fn new(spec: &'a WorkloadSpec, corpus: &'a KeySet, thread: usize) -> Self {
        let seed = spec.seed ^ (thread as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self {
            spec,
            corpus,
            inserted: KeySet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            thread: thread as u8,
            issued: 0,
            zipf: None,
            exp: None,
            odd: odd_chars(),
        }
    }

    pub fn key(&self, r: KeyRef) -> &[u8] {
        match r {
            KeyRef::Loaded(i) => self.corpus.get(i as usize),
            KeyRef::Inserted(i) => self.inserted.get(i as usize),
        }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    fn population(&self) -> usize {
        self.corpus.len() + self.inserted.len()
    }

    fn from_population(&self, i: usize) -> KeyRef {
        if i < self.corpus.len() {
            KeyRef::Loaded(i as u32)
        } else {
            KeyRef::Inserted((i - self.corpus.len()) as u32)
        }
    }

    fn zipf_rank(&mut self, n: u64) -> u64 {
        if self.zipf.as_ref().is_none_or(|(m, _)| *m != n) {
            self.zipf = Some((n, Zipf::new(n, ZIPF_THETA).expect("valid zipf parameters")));
        }
        let z = &self.zipf.as_ref().unwrap().1;
        (z.sample(&mut self.rng) as u64).clamp(1, n) - 1
    }

    fn choose(&mut self) -> Option<KeyRef> {
        let n = self.population();
        if n == 0 {
            return None;
        }
        let n64 = n as u64;
        let i = match self.spec.distribution {
            Distribution::Sequential => (self.issued % n64) as usize,
            Distribution::Uniform => self.rng.gen_range(0..n),
            Distribution::Zipfian => scramble(self.zipf_rank(n64), n64) as usize,
            Distribution::Latest => n - 1 - self.zipf_rank(n64) as usize,
            Distribution::Hotspot => {
                let hot = (n / 10).max(1);
                if self.rng.gen_bool(0.9) || hot == n {
                    self.rng.gen_range(0..hot)
                } else {
                    self.rng.gen_range(hot..n)
                }
            }
            Distribution::Exponent => {
                if self.exp.as_ref().is_none_or(|(m, _)| *m != n64) {
                    // 95% of the mass falls on the first 10% of ranks.
                    let lambda = -(0.05f64.ln()) / (0.1 * n as f64);
                    self.exp = Some((n64, Exp::new(lambda).expect("positive rate")));
                }
                let rank = loop {
                    let x = self.exp.as_ref().unwrap().1.sample(&mut self.rng);
                    if x < n as f64 {
                        break x as u64;
                    }
                };
                scramble(rank, n64) as usize
            }
        };
        Some(self.from_population(i))
    }

    fn new_key(&mut self) -> Vec<u8> {
        let len = self.spec.key_len;
        match self.spec.insert_order {
            InsertOrder::Append => {
                let mut k = Vec::with_capacity(len.max(10));
                k.push(APPEND_PREFIX);
                k.push(self.thread);
                k.extend_from_slice(&(self.inserted.len() as u64).to_be_bytes());
                if k.len() < len {
                    k.resize(len, 0);
                }
                k
            }
            InsertOrder::Uniform => {
                let mut k: Vec<u8> = (0..len.max(2)).map(|_| ALPHABET[self.rng.gen_range(0..64)]).collect();
                let last = k.len() - 1;
                k[last] = self.odd[self.rng.gen_range(0..self.odd.len())];
                k
            }
        }
    }

    pub fn next_op(&mut self) -> Op {
        let mix = self.spec.mix;
        let u: f64 = self.rng.gen();
        let op = if u < mix.insert || self.population() == 0 {
            let key = self.new_key();
            self.inserted.push(&key);
            Op::Insert(KeyRef::Inserted(self.inserted.len() as u32 - 1), self.issued)
        } else {
            let key = self.choose().expect("population is not empty");
            if u < mix.insert + mix.read {
                Op::Read(key)
            } else if u < mix.insert + mix.read + mix.delete {
                Op::Delete(key)
            } else {
                Op::Scan(key, self.rng.gen_range(1..=self.spec.max_scan))
            }
        };
        self.issued += 1;
        op
    }
}

/// Bijection on `0..n` that spreads popular ranks over the key space.
fn scramble(rank: u64, n: u64) -> u64 {
    const PRIMES: [u64; 3] = [1_000_000_007, 998_244_353, 2_147_483_647];
    let p = PRIMES.iter().copied().find(|p| n % p != 0).unwrap_or(1);
    ((rank as u128 * p as u128) % n as u128) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Query {
    Read(Vec<u8>),
    Insert(Vec<u8>, u64),
    Delete(Vec<u8>),
    Scan(Vec<u8>, usize),
}

/// The first `ops` queries of thread 0's stream with keys materialized.
pub fn generate_stream(spec: &WorkloadSpec, corpus: &KeySet, ops: usize) -> Result<Vec<Query>> {
    spec.validate()?;
    let mut stream = QueryStream::new(spec, corpus, 0);
    Ok((0..ops)
        .map(|_| match stream.next_op() {
            Op::Read(k) => Query::Read(stream.key(k).to_vec()),
            Op::Insert(k, v) => Query::Insert(stream.key(k).to_vec(), v),
            Op::Delete(k) => Query::Delete(stream.key(k).to_vec()),
            Op::Scan(k, n) => Query::Scan(stream.key(k).to_vec(), n),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_corpus;

    fn read_only(dist: Distribution, n: usize) -> (WorkloadSpec, KeySet) {
        let mix = Mix { read: 1.0, insert: 0.0, delete: 0.0, scan: 0.0 };
        (WorkloadSpec::custom(mix, dist, n, 8), synthetic_corpus(n, 8, 1).unwrap())
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let mut spec = WorkloadSpec::ycsb_d(10, 8);
        assert!(spec.validate().is_ok());
        spec.mix.read = 0.9;
        assert!(matches!(spec.validate(), Err(BenchError::Config(_))));
        spec.mix.read = 0.95;
        spec.threads = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn scramble_is_a_bijection() {
        for n in [1u64, 7, 1000, 1_000_000_007 * 2] {
            if n > 100_000 {
                continue;
            }
            let mut seen: Vec<u64> = (0..n).map(|r| scramble(r, n)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sequential_cycles_in_sorted_order() {
        let (spec, corpus) = read_only(Distribution::Sequential, 50);
        let stream = generate_stream(&spec, &corpus, 120).unwrap();
        for (i, q) in stream.iter().enumerate() {
            assert_eq!(q, &Query::Read(corpus.get(i % 50).to_vec()));
        }
    }

    #[test]
    fn hotspot_concentrates_on_first_tenth() {
        let (spec, corpus) = read_only(Distribution::Hotspot, 1_000);
        let hot_max = corpus.get(99).to_vec();
        let stream = generate_stream(&spec, &corpus, 100_000).unwrap();
        let hot = stream.iter().filter(|q| matches!(q, Query::Read(k) if *k <= hot_max)).count();
        assert!((hot as f64 / 1e5 - 0.9).abs() < 0.01);
    }

    #[test]
    fn exponent_and_zipfian_are_skewed() {
        for dist in [Distribution::Exponent, Distribution::Zipfian] {
            let (spec, corpus) = read_only(dist, 1_000);
            let stream = generate_stream(&spec, &corpus, 50_000).unwrap();
            let mut counts = std::collections::HashMap::new();
            for q in &stream {
                *counts.entry(q.clone()).or_insert(0usize) += 1;
            }
            let mut c: Vec<usize> = counts.into_values().collect();
            c.sort_unstable_by(|a, b| b.cmp(a));
            let top: usize = c.iter().take(100).sum();
            assert!(top as f64 > 0.5 * 50_000.0, "{dist:?}: top 10% of keys got {top}");
        }
    }

    #[test]
    fn latest_prefers_new_keys() {
        let mut spec = WorkloadSpec::ycsb_d(1_000, 8);
        spec.seed = 5;
        let corpus = synthetic_corpus(1_000, 8, 2).unwrap();
        let stream = generate_stream(&spec, &corpus, 40_000).unwrap();
        let reads_of_inserted = stream.iter().filter(|q| matches!(q, Query::Read(k) if k[0] == APPEND_PREFIX)).count();
        let reads = stream.iter().filter(|q| matches!(q, Query::Read(_))).count();
        assert!(reads_of_inserted as f64 > 0.3 * reads as f64);
    }

    #[test]
    fn append_inserts_are_increasing_and_uniform_ones_are_fresh() {
        let corpus = synthetic_corpus(1_000, 12, 2).unwrap();
        let spec = WorkloadSpec::ycsb_d(1_000, 12);
        let ins: Vec<_> = generate_stream(&spec, &corpus, 20_000)
            .unwrap()
            .into_iter()
            .filter_map(|q| if let Query::Insert(k, _) = q { Some(k) } else { None })
            .collect();
        assert!(ins.windows(2).all(|w| w[0] < w[1]));
        assert!(ins[0] > corpus.get(corpus.len() - 1).to_vec());

        let spec = WorkloadSpec::ycsb_e(1_000, 12);
        for q in generate_stream(&spec, &corpus, 20_000).unwrap() {
            if let Query::Insert(k, _) = q {
                assert_eq!(k.len(), 12);
                assert_eq!(k[11] % 2, 1);
            }
        }
    }
}
