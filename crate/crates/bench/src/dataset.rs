//! Key corpora: newline-delimited files and a seeded synthetic generator.
//!
//! Synthetic keys are fixed-length strings over a 64-character printable
//! alphabet whose last character has an even byte value. Workload inserts use
//! either an odd last byte or a leading `0xF0`, so they never collide with the
//! loaded corpus.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BenchError, Result};

/// Sorted-order alphabet: `-`, digits, upper case, `_`, lower case.
pub const ALPHABET: &[u8; 64] = b"-0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ_abcdefghijklmnopqrstuvwxyz";

/// Largest number of prefix characters folded into the 64-bit rank.
const PREFIX_CHARS: usize = 9;

fn even_chars() -> Vec<u8> {
    ALPHABET.iter().copied().filter(|c| c % 2 == 0).collect()
}

pub fn odd_chars() -> Vec<u8> {
    ALPHABET.iter().copied().filter(|c| c % 2 == 1).collect()
}

/// Compact list of byte-string keys.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeySet {
    bytes: Vec<u8>,
    ends: Vec<usize>,
}

impl KeySet {
    pub fn with_capacity(keys: usize, bytes: usize) -> Self {
        Self { bytes: Vec::with_capacity(bytes), ends: Vec::with_capacity(keys) }
    }

    pub fn push(&mut self, key: &[u8]) {
        self.bytes.extend_from_slice(key);
        self.ends.push(self.bytes.len());
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[u8] {
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        &self.bytes[start..self.ends[i]]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn is_sorted_unique(&self) -> bool {
        (1..self.len()).all(|i| self.get(i - 1) < self.get(i))
    }

    /// `(key, value)` pairs for bulk loading; key `i` gets value `i`.
    pub fn pairs(&self) -> Vec<(&[u8], u64)> {
        self.iter().enumerate().map(|(i, k)| (k, i as u64)).collect()
    }
}

impl<K: AsRef<[u8]>> FromIterator<K> for KeySet {
    fn from_iter<I: IntoIterator<Item = K>>(iter: I) -> Self {
        let mut set = KeySet::default();
        for k in iter {
            set.push(k.as_ref());
        }
        set
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub keys: KeySet,
    /// Keys longer than the limit that were cut to `key_len` bytes.
    pub truncated: usize,
}

/// Reads newline-delimited keys, truncating each to `key_len` bytes, then
/// sorts and deduplicates. Empty lines and a trailing `\r` are dropped.
pub fn load_dataset(path: &Path, key_len: usize) -> Result<Dataset> {
    let err = |reason: String| BenchError::Dataset { path: path.to_owned(), reason };
    if key_len == 0 {
        return Err(BenchError::Config("key length must be at least 1".into()));
    }
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut reader = BufReader::new(file);
    let mut keys: Vec<Vec<u8>> = Vec::new();
    let mut truncated = 0;
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line).map_err(|e| err(e.to_string()))? == 0 {
            break;
        }
        if line.last() == Some(&b'\n') {
            line.pop();
        }
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        if line.is_empty() {
            continue;
        }
        if line.len() > key_len {
            line.truncate(key_len);
            truncated += 1;
        }
        keys.push(line.clone());
    }
    if keys.is_empty() {
        return Err(err("no keys".into()));
    }
    keys.sort_unstable();
    keys.dedup();
    if truncated > 0 {
        log::warn!("{}: truncated {truncated} keys to {key_len} bytes", path.display());
    }
    Ok(Dataset { keys: keys.into_iter().collect(), truncated })
}

/// Writes keys one per line. Keys must not contain `\n`.
pub fn write_dataset(path: &Path, keys: &KeySet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for k in keys.iter() {
        if k.contains(&b'\n') {
            return Err(BenchError::Config("key contains a newline".into()));
        }
        out.write_all(k)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// `n` distinct sorted keys of exactly `key_len` characters drawn uniformly
/// from the synthetic key space.
pub fn synthetic_corpus(n: usize, key_len: usize, seed: u64) -> Result<KeySet> {
    if key_len < 2 {
        return Err(BenchError::Config("synthetic keys need key_len >= 2".into()));
    }
    let even = even_chars();
    let prefix = (key_len - 1).min(PREFIX_CHARS);
    // With a short key the last character is part of the rank; otherwise
    // the prefix alone makes keys unique.
    let rank_covers_last = prefix == key_len - 1;
    let space = 64u64.pow(prefix as u32) * if rank_covers_last { even.len() as u64 } else { 1 };
    if n as u64 > space / 2 {
        return Err(BenchError::Config(format!(
            "{n} keys requested but only {space} synthetic keys of length {key_len} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks: Vec<u64> = Vec::with_capacity(n);
    while ranks.len() < n {
        let missing = n - ranks.len();
        ranks.extend((0..missing).map(|_| rng.gen_range(0..space)));
        ranks.sort_unstable();
        ranks.dedup();
    }

    let mut set = KeySet::with_capacity(n, n * key_len);
    let mut key = vec![0u8; key_len];
    for r in ranks {
        let mut rest = r;
        if rank_covers_last {
            key[key_len - 1] = even[(rest % even.len() as u64) as usize];
            rest /= even.len() as u64;
        } else {
            for c in &mut key[prefix..key_len - 1] {
                *c = ALPHABET[rng.gen_range(0..64)];
            }
            key[key_len - 1] = even[rng.gen_range(0..even.len())];
        }
        for c in key[..prefix].iter_mut().rev() {
            *c = ALPHABET[(rest % 64) as usize];
            rest /= 64;
        }
        set.push(&key);
    }
    debug_assert!(set.is_sorted_unique());
    Ok(set)
}
