//! Linear leaf model with a bounded search window.

use crate::error::{Error, Result};
use crate::keycodec::EncodedKey;
use crate::linalg::Vector;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    beta: Vector,
    err_min: i64,
    err_max: i64,
    mean_abs_err: f64,
    epoch: u64,
}

impl LinearModel {
    /// Model with the given coefficients and an empty error window.
    pub fn new(beta: Vector, epoch: u64) -> Self {
        Self { beta, err_min: 0, err_max: 0, mean_abs_err: 0.0, epoch }
    }

    /// Intercept-only model predicting `value` for every key.
    pub fn constant(key_len: usize, value: f64, epoch: u64) -> Self {
        let mut beta = vec![0.0; key_len + 1];
        beta[key_len] = value;
        Self::new(Vector::from_raw(beta), epoch)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn err_min(&self) -> i64 {
        self.err_min
    }

    pub fn err_max(&self) -> i64 {
        self.err_max
    }

    pub fn mean_abs_err(&self) -> f64 {
        self.mean_abs_err
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn key_len(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn window_width(&self) -> u64 {
        (self.err_max - self.err_min) as u64
    }

    pub(crate) fn with_bounds(mut self, err_min: i64, err_max: i64, mean_abs_err: f64) -> Self {
        debug_assert!(err_min <= 0 && err_max >= 0);
        self.err_min = err_min;
        self.err_max = err_max;
        self.mean_abs_err = mean_abs_err;
        self
    }

    pub fn predict(&self, key: &EncodedKey) -> Result<f64> {
        if key.features().len() != self.beta.len() {
            return Err(Error::Shape(format!(
                "key has {} features, model has {} coefficients",
                key.features().len(),
                self.beta.len()
            )));
        }
        Ok(crate::linalg::dot(key.features(), &self.beta))
    }

    /// Prediction straight from raw bytes; equal to [`predict`](Self::predict)
    /// on the encoded key.
    #[inline]
    pub fn predict_raw(&self, key: &[u8]) -> f64 {
        let key_len = self.key_len();
        let n = key.len().min(key_len);
        let mut acc = [0.0f64; 4];
        let body = &self.beta[..n];
        let mut chunks = key[..n].chunks_exact(4).zip(body.chunks_exact(4));
        for (k, b) in &mut chunks {
            acc[0] += f64::from(k[0]) * b[0];
            acc[1] += f64::from(k[1]) * b[1];
            acc[2] += f64::from(k[2]) * b[2];
            acc[3] += f64::from(k[3]) * b[3];
        }
        let done = n / 4 * 4;
        let mut tail = 0.0;
        for i in done..n {
            tail += f64::from(key[i]) * self.beta[i];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail + self.beta[key_len]
    }

    /// Predicted slot in an array of `len` entries.
    #[inline]
    pub fn slot(&self, key: &[u8], len: usize) -> usize {
        round_clamp(self.predict_raw(key), len)
    }

    /// Inclusive index range guaranteed to hold every trained key.
    #[inline]
    pub fn window(&self, key: &[u8], len: usize) -> (usize, usize) {
        if len == 0 {
            return (0, 0);
        }
        let s = self.slot(key, len) as i64;
        let lo = (s + self.err_min).max(0) as usize;
        let hi = ((s + self.err_max).max(0) as usize).min(len - 1);
        (lo, hi)
    }

    /// Refits the error window so every `(key, position)` pair lies inside it.
    pub fn fit_bounds(&self, keys: &[EncodedKey], positions: &[usize]) -> Result<LinearModel> {
        if keys.len() != positions.len() {
            return Err(Error::Shape(format!("{} keys but {} positions", keys.len(), positions.len())));
        }
        let len = positions.iter().max().map(|m| m + 1).ok_or(Error::EmptyTrainingSet)?;
        let pairs = keys.iter().map(|k| k.raw()).zip(positions.iter().copied());
        Ok(self.refit(pairs, len))
    }

    /// Exact refit over `(raw key, position)` pairs in an array of `len` slots.
    pub(crate) fn refit<'a, I>(&self, pairs: I, len: usize) -> LinearModel
    where
        I: Iterator<Item = (&'a [u8], usize)>,
    {
        let mut lo = 0i64;
        let mut hi = 0i64;
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for (key, pos) in pairs {
            let err = pos as i64 - self.slot(key, len) as i64;
            lo = lo.min(err);
            hi = hi.max(err);
            abs_sum += err.unsigned_abs() as f64;
            count += 1;
        }
        let mae = if count == 0 { 0.0 } else { abs_sum / count as f64 };
        self.clone().with_bounds(lo, hi, mae)
    }
}

/// Rounds half away from zero, then clamps to `[0, len - 1]`.
#[inline]
pub fn round_clamp(pred: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    let r = pred.round();
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= (len - 1) as f64 {
        len - 1
    } else {
        r as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keycodec::encode;

    #[test]
    fn constant_model_predicts_intercept() {
        let m = LinearModel::constant(4, 7.5, 0);
        assert_eq!(m.predict(&encode(b"zz", 4).unwrap()).unwrap(), 7.5);
        assert_eq!(m.predict_raw(b"anything"), 7.5);
    }

    #[test]
    fn predict_raw_agrees_with_predict() {
        let beta = Vector::new((0..10).map(|i| (i as f64 - 4.0) * 0.37).collect()).unwrap();
        let m = LinearModel::new(beta, 1);
        for key in [&b"a"[..], b"abcdefghi", b"abcdefghijklmn", b"\x00\xff\x10"] {
            let want = m.predict(&encode(key, 9).unwrap()).unwrap();
            assert!((m.predict_raw(key) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_key() {
        let m = LinearModel::constant(4, 0.0, 0);
        assert!(matches!(m.predict(&encode(b"a", 3).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn rounding_and_clamping() {
        assert_eq!(round_clamp(2.5, 10), 3);
        assert_eq!(round_clamp(2.49, 10), 2);
        assert_eq!(round_clamp(-0.5, 10), 0);
        assert_eq!(round_clamp(42.0, 10), 9);
        assert_eq!(round_clamp(f64::NAN, 10), 0);
    }

    #[test]
    fn singleton_bounds_include_zero() {
        let m = LinearModel::constant(2, 5.0, 0);
        let k = encode(b"a", 2).unwrap();
        let fitted = m.fit_bounds(std::slice::from_ref(&k), &[0]).unwrap();
        assert!(fitted.err_min() <= 0 && fitted.err_max() >= 0);
        assert_eq!(m.fit_bounds(&[], &[]), Err(Error::EmptyTrainingSet));
    }

    #[test]
    fn exact_fit_has_zero_bounds() {
        // position = first byte - 'a'
        let mut beta = vec![0.0; 3];
        beta[0] = 1.0;
        beta[2] = -97.0;
        let m = LinearModel::new(Vector::new(beta).unwrap(), 0);
        let keys: Vec<_> = (b'a'..=b'z').map(|c| encode(&[c], 2).unwrap()).collect();
        let pos: Vec<usize> = (0..26).collect();
        let fitted = m.fit_bounds(&keys, &pos).unwrap();
        assert_eq!((fitted.err_min(), fitted.err_max()), (0, 0));
        assert_eq!(fitted.mean_abs_err(), 0.0);
    }

    #[test]
    fn duplicate_features_widen_bounds() {
        // Keys that truncate to the same features must still all be covered.
        let m = LinearModel::constant(1, 2.0, 0);
        let keys: Vec<_> = [&b"aa"[..], b"ab", b"ac", b"ad", b"ae"].iter().map(|k| encode(k, 1).unwrap()).collect();
        let pos: Vec<usize> = (0..5).collect();
        let fitted = m.fit_bounds(&keys, &pos).unwrap();
        let errs: Vec<i64> = pos.iter().map(|&p| p as i64 - 2).collect();
        assert_eq!(fitted.err_min(), *errs.iter().min().unwrap());
        assert_eq!(fitted.err_max(), *errs.iter().max().unwrap());
        for (k, p) in keys.iter().zip(&pos) {
            let (lo, hi) = fitted.window(k.raw(), 5);
            assert!(lo <= *p && *p <= hi);
        }
    }
}
