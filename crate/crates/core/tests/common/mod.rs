#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memoindex::{DenseMatrix, RFactor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

pub fn gram_na(r: &RFactor) -> DMatrix<f64> {
    let d = DMatrix::from_row_slice(r.dim(), r.dim(), r.data());
    d.transpose() * d
}

/// ‖RᵀR − XᵀX‖_F / ‖XᵀX‖_F.
pub fn gram_error(r: &RFactor, x: &DenseMatrix) -> f64 {
    let xn = to_na(x);
    let xtx = xn.transpose() * &xn;
    (gram_na(r) - &xtx).norm() / xtx.norm().max(f64::MIN_POSITIVE)
}

/// Normal-equation least squares, solved by LU.
pub fn normal_equation_beta(x: &DenseMatrix, y: &[f64]) -> DVector<f64> {
    let xn = to_na(x);
    let yn = DVector::from_column_slice(y);
    let xtx = xn.transpose() * &xn;
    let xty = xn.transpose() * yn;
    xtx.lu().solve(&xty).expect("normal equations are singular")
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Sorted, distinct random keys of 4..=max_len bytes.
pub fn random_keys(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> Vec<Vec<u8>> {
    let mut set = std::collections::BTreeSet::new();
    while set.len() < n {
        let len = rng.gen_range(4..=max_len);
        let key: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        set.insert(key);
    }
    set.into_iter().collect()
}

/// Keys whose order follows `i`: a spread big-endian prefix plus random tail
/// bytes, so every feature column varies.
pub fn append_key(rng: &mut ChaCha8Rng, i: u64) -> Vec<u8> {
    assert!(i < 2000, "prefix would wrap");
    let mut k = ((i * 2_000_003) as u32).to_be_bytes().to_vec();
    k.extend((0..4).map(|_| rng.gen::<u8>()));
    k
}
