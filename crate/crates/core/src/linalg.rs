//! Dense real linear algebra for the least-squares training chain.
//!
//! Training a leaf model needs `R` from a QR decomposition of the key matrix
//! `X`, the triangular inverse `R⁻¹`, and the products `R⁻¹R⁻ᵀ` and
//! `(R⁻¹R⁻ᵀ)(XᵀY)`. `Q` is never formed.

use std::cell::Cell;
use std::fmt;
use std::ops::Deref;

use crate::error::{Error, Result};

/// Column norms below this are treated as already eliminated.
pub const ZERO_NORM: f64 = 1e-300;

/// Relative threshold on `|R[i][i]| / max|R[j][j]|` below which `R` is singular.
pub const SINGULAR_REL: f64 = 1e-12;

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of Householder factorizations run on the calling thread so far.
pub fn factorizations_on_current_thread() -> u64 {
    FACTORIZATIONS.with(Cell::get)
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        if !all_finite(&data) {
            return Err(Error::Numerical("matrix contains a non-finite entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != below.cols {
            return Err(Error::Shape(format!("cannot stack {} columns on {} columns", below.cols, self.cols)));
        }
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Ok(DenseMatrix { rows: self.rows + below.rows, cols: self.cols, data })
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> DenseMatrix {
        DenseMatrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `XᵀX`, accumulated row by row.
    pub fn gram(&self) -> DenseMatrix {
        let p = self.cols;
        let mut g = DenseMatrix::zeros(p, p);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..p {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                axpy(ra, r, &mut g.data[a * p..(a + 1) * p]);
            }
        }
        g
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }
}

/// Finite real vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if !all_finite(&data) {
            return Err(Error::Numerical("vector contains a non-finite entry".into()));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Self(data)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Square upper-triangular factor `R` with exact zeros below the diagonal.
#[derive(Clone, PartialEq)]
pub struct RFactor {
    dim: usize,
    data: Vec<f64>,
}

impl fmt::Debug for RFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RFactor").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl RFactor {
    /// The all-zero factor, i.e. the factor of an empty key matrix.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "RFactor dimension must be positive");
        Self { dim, data: vec![0.0; dim * dim] }
    }

    /// Wraps a square matrix, rejecting non-zero entries below the diagonal.
    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        if m.rows != m.cols || m.rows == 0 {
            return Err(Error::Shape(format!("R must be square and non-empty, got {}x{}", m.rows, m.cols)));
        }
        let p = m.rows;
        for i in 0..p {
            for j in 0..i {
                if m.get(i, j) != 0.0 {
                    return Err(Error::Shape(format!("entry ({i},{j}) below the diagonal is non-zero")));
                }
            }
        }
        Ok(Self { dim: p, data: m.data.clone() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Bytes of memoized state: `dim × dim × 8`.
    pub fn footprint_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_raw(self.dim, self.dim, self.data.clone())
    }

    /// `RᵀR`, which equals `XᵀX` for the matrix `X` that produced `R`.
    pub fn gram(&self) -> DenseMatrix {
        self.to_dense().gram()
    }

    pub fn diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim).map(move |i| self.get(i, i))
    }
}

/// Householder QR decomposition returning only `R`.
///
/// Each column is reflected onto its diagonal in turn and the reflector is
/// applied to every column to its right. Columns whose remaining norm is
/// below [`ZERO_NORM`] are left as they are, so rank-deficient input yields
/// a zero on the diagonal instead of an error.
pub fn householder_qrd(x: &DenseMatrix) -> Result<RFactor> {
    let (m, p) = (x.rows, x.cols);
    if p == 0 {
        return Err(Error::Shape("cannot factorize a matrix with no columns".into()));
    }
    if m < p {
        return Err(Error::Shape(format!("QRD needs rows >= cols, got {m}x{p}")));
    }
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));

    // Column-major working copy so every column operation is contiguous.
    let mut a = vec![0.0; m * p];
    for i in 0..m {
        let row = x.row(i);
        for (j, &v) in row.iter().enumerate() {
            a[j * m + i] = v;
        }
    }
    let mut r = vec![0.0; p * p];
    let mut v = vec![0.0; m];
    for i in 0..p {
        let len = m - i;
        let col = &a[i * m + i..(i + 1) * m];
        let d = dot(col, col).sqrt();
        if d >= ZERO_NORM && len > 1 {
            let v = &mut v[..len];
            v.copy_from_slice(col);
            // Reflect onto -sign(x0)·d·e1 so v0 never cancels.
            let target = if col[0] >= 0.0 { -d } else { d };
            v[0] -= target;
            // The reflector ignores the scale of v; normalizing keeps vv from
            // underflowing on columns that are tiny but not zero.
            let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            v.iter_mut().for_each(|x| *x /= scale);
            let vv = dot(v, v);
            if vv > 0.0 {
                let gamma = -2.0 / vv;
                for j in i..p {
                    let cj = &mut a[j * m + i..(j + 1) * m];
                    let alpha = gamma * dot(v, cj);
                    axpy(alpha, v, cj);
                }
                a[i * m + i] = target;
                for k in i + 1..m {
                    a[i * m + k] = 0.0;
                }
            }
        }
        for j in i..p {
            r[i * p + j] = a[j * m + i];
        }
    }
    if !all_finite(&r) {
        return Err(Error::Numerical("QRD produced a non-finite entry".into()));
    }
    Ok(RFactor { dim: p, data: r })
}

/// Inverse of an upper-triangular factor by back-substitution on each unit vector.
pub fn upper_tri_inverse(r: &RFactor) -> Result<DenseMatrix> {
    let p = r.dim;
    let max_diag = r.diagonal().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let threshold = SINGULAR_REL * max_diag;
    for (i, d) in r.diagonal().enumerate() {
        if !(d.abs() > threshold) {
            return Err(Error::Singular { index: i });
        }
    }
    let mut inv = vec![0.0; p * p];
    let mut x = vec![0.0; p];
    for k in 0..p {
        x[k] = 1.0 / r.get(k, k);
        for i in (0..k).rev() {
            let row = &r.data[i * p + i + 1..i * p + k + 1];
            let s = dot(row, &x[i + 1..=k]);
            x[i] = -s / r.get(i, i);
        }
        for i in 0..=k {
            inv[i * p + k] = x[i];
        }
    }
    if !all_finite(&inv) {
        return Err(Error::Numerical("triangular inverse overflowed".into()));
    }
    Ok(DenseMatrix::from_raw(p, p, inv))
}

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("cannot multiply {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let aik = a.data[i * k + t];
            if aik != 0.0 {
                axpy(aik, &b.data[t * m..(t + 1) * m], orow);
            }
        }
    }
    if !all_finite(&out) {
        return Err(Error::Numerical("matrix product overflowed".into()));
    }
    Ok(DenseMatrix::from_raw(n, m, out))
}

pub fn transpose(a: &DenseMatrix) -> DenseMatrix {
    let mut out = vec![0.0; a.data.len()];
    for i in 0..a.rows {
        for j in 0..a.cols {
            out[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    DenseMatrix::from_raw(a.cols, a.rows, out)
}

pub fn matvec(a: &DenseMatrix, v: &[f64]) -> Result<Vector> {
    if a.cols != v.len() {
        return Err(Error::Shape(format!("cannot multiply {}x{} by a vector of length {}", a.rows, a.cols, v.len())));
    }
    let out: Vec<f64> = (0..a.rows).map(|i| dot(a.row(i), v)).collect();
    Vector::new(out)
}

/// Least-squares coefficients `β = R⁻¹R⁻ᵀ(XᵀY)`.
pub fn solve_beta(r: &RFactor, xty: &[f64]) -> Result<Vector> {
    if xty.len() != r.dim {
        return Err(Error::Shape(format!("XᵀY has length {}, R has dimension {}", xty.len(), r.dim)));
    }
    let inv = upper_tri_inverse(r)?;
    let gram_inv = matmul(&inv, &transpose(&inv))?;
    matvec(&gram_inv, xty)
}

/// Ridge-regularized solve of `(XᵀX + λI)β = XᵀY` with `λ = rel_lambda · max(diag R)²`.
///
/// The regularized factor is the `R` of `[R; √λ·I]`, so this stays on the
/// same QR chain as [`solve_beta`]. Used when `R` is rank deficient.
pub fn solve_beta_ridge(r: &RFactor, xty: &[f64], rel_lambda: f64) -> Result<Vector> {
    let p = r.dim;
    let max_diag = r.diagonal().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let scale = if max_diag > 0.0 { max_diag } else { 1.0 };
    let shift = rel_lambda.sqrt() * scale;
    let mut stacked = Vec::with_capacity(2 * p * p);
    stacked.extend_from_slice(&r.data);
    for i in 0..p {
        for j in 0..p {
            stacked.push(if i == j { shift } else { 0.0 });
        }
    }
    let reg = householder_qrd(&DenseMatrix::from_raw(2 * p, p, stacked))?;
    solve_beta(&reg, xty)
}
