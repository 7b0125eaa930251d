//! Fixed-width numeric encoding of byte-string keys.
//!
//! A key becomes `key_len` byte values (zero padded or truncated) followed by
//! a constant `1.0` intercept feature. Ordering and equality always use the
//! raw bytes; features only feed the regression.

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Vector};

/// Number of model features for a given key length.
#[inline]
pub const fn feature_dim(key_len: usize) -> usize {
    key_len + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedKey {
    features: Vector,
    raw: Vec<u8>,
}

impl EncodedKey {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn key_len(&self) -> usize {
        self.features.len() - 1
    }
}

pub fn encode(key: &[u8], key_len: usize) -> Result<EncodedKey> {
    if key.is_empty() {
        return Err(Error::EmptyKey);
    }
    if key_len == 0 {
        return Err(Error::Config("key_len must be at least 1".into()));
    }
    let mut features = vec![0.0; feature_dim(key_len)];
    encode_into(key, &mut features);
    Ok(EncodedKey { features: Vector::from_raw(features), raw: key.to_vec() })
}

/// Writes the feature row of `key` into `out`, whose length is `key_len + 1`.
#[inline]
pub fn encode_into(key: &[u8], out: &mut [f64]) {
    let key_len = out.len() - 1;
    let n = key.len().min(key_len);
    for (o, b) in out[..n].iter_mut().zip(key) {
        *o = f64::from(*b);
    }
    out[n..key_len].fill(0.0);
    out[key_len] = 1.0;
}

/// Key matrix `X` (one feature row per key) and position vector `Y`.
pub fn matricize(keys: &[EncodedKey], positions: &[usize]) -> Result<(DenseMatrix, Vector)> {
    if keys.len() != positions.len() {
        return Err(Error::Shape(format!("{} keys but {} positions", keys.len(), positions.len())));
    }
    let cols = keys.first().map_or(0, |k| k.features.len());
    let mut data = Vec::with_capacity(keys.len() * cols);
    for k in keys {
        if k.features.len() != cols {
            return Err(Error::Shape("keys encoded with different key lengths".into()));
        }
        data.extend_from_slice(&k.features);
    }
    let x = DenseMatrix::new(keys.len(), cols, data)?;
    let y = Vector::from_raw(positions.iter().map(|&p| p as f64).collect());
    Ok((x, y))
}

/// Same as [`matricize`] but straight from raw keys, without the
/// intermediate [`EncodedKey`] values.
pub fn matricize_raw<'a, I>(keys: I, key_len: usize) -> DenseMatrix
where
    I: ExactSizeIterator<Item = &'a [u8]>,
{
    let p = feature_dim(key_len);
    let rows = keys.len();
    let mut data = vec![0.0; rows * p];
    for (row, key) in data.chunks_exact_mut(p).zip(keys) {
        encode_into(key, row);
    }
    DenseMatrix::from_raw(rows, p, data)
}
