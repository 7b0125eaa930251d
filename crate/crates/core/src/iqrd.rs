//! Tall-and-skinny and memoized QR decomposition.
//!
//! `R` of a vertically stacked matrix `[A; B]` equals the `R` of
//! `[R_A; R_B]`, because `Q` is orthogonal and drops out of `XᵀX`. That single
//! identity gives three things here: a chunked, tree-reduced factorization of
//! a tall key matrix; incremental absorption of new key rows into a cached
//! factor; and merging the factors of two adjacent leaves.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{householder_qrd, DenseMatrix, RFactor, Vector};

/// Default number of rows per chunk for a factor of dimension `dim`.
pub fn default_chunk_rows(dim: usize) -> usize {
    4 * dim
}

/// QR of the stacked matrix `[top; bottom]`.
pub fn qr_stacked(top: &DenseMatrix, bottom: &DenseMatrix) -> Result<RFactor> {
    let stacked = top.vstack(bottom)?;
    if stacked.rows() < stacked.cols() {
        return householder_qrd(&pad_rows(stacked));
    }
    householder_qrd(&stacked)
}

/// QR of two stacked factors.
pub fn concat_qr(a: &RFactor, b: &RFactor) -> Result<RFactor> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("cannot concatenate R factors of dimension {} and {}", a.dim(), b.dim())));
    }
    qr_stacked(&a.to_dense(), &b.to_dense())
}

fn pad_rows(x: DenseMatrix) -> DenseMatrix {
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = x.into_data();
    data.resize(cols * cols, 0.0);
    debug_assert!(rows <= cols);
    DenseMatrix::from_raw(cols, cols, data)
}

/// Row ranges of at most `chunk_rows` rows; a trailing range shorter than
/// `min_rows` is folded into its predecessor.
fn chunk_ranges(rows: usize, chunk_rows: usize, min_rows: usize) -> Vec<(usize, usize)> {
    let mut ranges: Vec<(usize, usize)> =
        (0..rows).step_by(chunk_rows).map(|s| (s, (s + chunk_rows).min(rows))).collect();
    if ranges.len() > 1 {
        let (s, e) = ranges[ranges.len() - 1];
        if e - s < min_rows {
            ranges.pop();
            ranges.last_mut().unwrap().1 = e;
        }
    }
    ranges
}

/// Pairwise reduction of chunk factors, one tree level per round.
fn reduce_pairwise(mut level: Vec<RFactor>) -> Result<RFactor> {
    while level.len() > 1 {
        level = level
            .par_chunks(2)
            .map(|pair| match pair {
                [a, b] => concat_qr(a, b),
                [a] => Ok(a.clone()),
                _ => unreachable!(),
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(level.pop().expect("at least one chunk"))
}

/// Factorizes `x` by splitting it into row chunks, factoring the chunks in
/// parallel and reducing the chunk factors pairwise.
///
/// `chunk_rows` below `x.cols()` is raised to `x.cols()`, since every chunk
/// must be at least square. A matrix with fewer rows than columns is padded
/// with zero rows, which leaves `XᵀX` unchanged.
pub fn parallel_qrd(x: &DenseMatrix, chunk_rows: usize) -> Result<RFactor> {
    let p = x.cols();
    if p == 0 || x.rows() == 0 {
        return Err(Error::Shape(format!("cannot factorize a {}x{} matrix", x.rows(), p)));
    }
    if x.rows() < p {
        return householder_qrd(&pad_rows(x.clone()));
    }
    let chunk_rows = chunk_rows.max(p);
    if chunk_rows >= x.rows() {
        return householder_qrd(x);
    }
    let factors = chunk_ranges(x.rows(), chunk_rows, p)
        .into_par_iter()
        .map(|(s, e)| householder_qrd(&x.row_slice(s, e)))
        .collect::<Result<Vec<_>>>()?;
    reduce_pairwise(factors)
}

/// Streaming tall-and-skinny factorization.
///
/// Rows are pushed in any batch size; every full chunk is factored as soon as
/// it is complete and merged with its sibling like a binary counter, so the
/// reduction tree matches [`parallel_qrd`] for the same chunking while only
/// `O(log chunks)` factors are held at once.
#[derive(Clone, Debug)]
pub struct TsqrAccumulator {
    dim: usize,
    chunk_rows: usize,
    pending: Vec<f64>,
    stack: Vec<(u32, RFactor)>,
    rows: usize,
}

impl TsqrAccumulator {
    pub fn new(dim: usize, chunk_rows: usize) -> Self {
        assert!(dim > 0);
        let chunk_rows = chunk_rows.max(dim);
        Self { dim, chunk_rows, pending: Vec::with_capacity(chunk_rows * dim), stack: Vec::new(), rows: 0 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Appends one row of length `dim`.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape(format!("row has {} entries, expected {}", row.len(), self.dim)));
        }
        self.pending.extend_from_slice(row);
        self.rows += 1;
        if self.pending.len() == self.chunk_rows * self.dim {
            self.flush_chunk()?;
        }
        Ok(())
    }

    pub fn push_rows(&mut self, x: &DenseMatrix) -> Result<()> {
        for i in 0..x.rows() {
            self.push_row(x.row(i))?;
        }
        Ok(())
    }

    fn flush_chunk(&mut self) -> Result<()> {
        let rows = self.pending.len() / self.dim;
        let chunk = DenseMatrix::new(rows, self.dim, std::mem::take(&mut self.pending))?;
        self.pending = Vec::with_capacity(self.chunk_rows * self.dim);
        let mut level = 0u32;
        let mut r = householder_qrd(&chunk)?;
        while let Some((l, _)) = self.stack.last() {
            if *l != level {
                break;
            }
            let (_, left) = self.stack.pop().unwrap();
            r = concat_qr(&left, &r)?;
            level += 1;
        }
        self.stack.push((level, r));
        Ok(())
    }

    /// The factor of every row pushed so far.
    pub fn finish(mut self) -> Result<RFactor> {
        let mut acc: Option<RFactor> = None;
        if !self.pending.is_empty() {
            let rows = self.pending.len() / self.dim;
            let tail = DenseMatrix::new(rows, self.dim, std::mem::take(&mut self.pending))?;
            acc = Some(if rows >= self.dim {
                householder_qrd(&tail)?
            } else if let Some((_, top)) = self.stack.pop() {
                qr_stacked(&top.to_dense(), &tail)?
            } else {
                householder_qrd(&pad_rows(tail))?
            });
        }
        while let Some((_, left)) = self.stack.pop() {
            acc = Some(match acc {
                Some(right) => concat_qr(&left, &right)?,
                None => left,
            });
        }
        Ok(acc.unwrap_or_else(|| RFactor::zeros(self.dim)))
    }

    /// The factor so far, leaving the accumulator usable.
    pub fn snapshot(&self) -> Result<RFactor> {
        self.clone().finish()
    }
}

/// A memoized `R` factor plus the bookkeeping needed to keep absorbing rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoizedFactor {
    r: RFactor,
    trained_rows: usize,
    epoch: u64,
}

impl MemoizedFactor {
    /// The factor of zero rows: `R = 0`.
    pub fn empty(dim: usize) -> Self {
        Self { r: RFactor::zeros(dim), trained_rows: 0, epoch: 0 }
    }

    /// Cold factorization of `x`.
    pub fn from_matrix(x: &DenseMatrix, chunk_rows: usize) -> Result<Self> {
        if x.rows() == 0 {
            return Ok(Self::empty(x.cols().max(1)));
        }
        Ok(Self { r: parallel_qrd(x, chunk_rows)?, trained_rows: x.rows(), epoch: 1 })
    }

    pub fn from_parts(r: RFactor, trained_rows: usize, epoch: u64) -> Self {
        Self { r, trained_rows, epoch }
    }

    pub fn r(&self) -> &RFactor {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.r.dim()
    }

    pub fn trained_rows(&self) -> usize {
        self.trained_rows
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn footprint_bytes(&self) -> usize {
        self.r.footprint_bytes()
    }

    /// Absorbs new rows using the default chunking for `X_Δ`.
    pub fn absorb(&self, x_delta: &DenseMatrix) -> Result<Self> {
        self.absorb_chunked(x_delta, default_chunk_rows(self.dim()))
    }

    /// `R_new = QR([R_old; R_Δ])` with `R_Δ = QR(X_Δ)`.
    ///
    /// When `X_Δ` has fewer rows than `R` has columns its rows are stacked
    /// under `R_old` directly instead of being factored on their own.
    pub fn absorb_chunked(&self, x_delta: &DenseMatrix, chunk_rows: usize) -> Result<Self> {
        let p = self.dim();
        if x_delta.cols() != p {
            return Err(Error::Shape(format!("delta has {} columns, factor has dimension {p}", x_delta.cols())));
        }
        let r = if x_delta.rows() == 0 {
            self.r.clone()
        } else if x_delta.rows() < p {
            qr_stacked(&self.r.to_dense(), x_delta)?
        } else {
            let r_delta = parallel_qrd(x_delta, chunk_rows)?;
            concat_qr(&self.r, &r_delta)?
        };
        Ok(Self { r, trained_rows: self.trained_rows + x_delta.rows(), epoch: self.epoch + 1 })
    }

    /// Gram of the result equals `Gram(a) + Gram(b)`.
    pub fn merge(a: &Self, b: &Self) -> Result<Self> {
        let r = concat_qr(&a.r, &b.r)?;
        Ok(Self { r, trained_rows: a.trained_rows + b.trained_rows, epoch: a.epoch.max(b.epoch) + 1 })
    }
}

/// Free-function form of [`MemoizedFactor::absorb`].
pub fn absorb(memo: &MemoizedFactor, x_delta: &DenseMatrix) -> Result<MemoizedFactor> {
    memo.absorb(x_delta)
}

/// Free-function form of [`MemoizedFactor::merge`].
pub fn merge_factors(a: &MemoizedFactor, b: &MemoizedFactor) -> Result<MemoizedFactor> {
    MemoizedFactor::merge(a, b)
}

/// `prev + X_Δᵀ·Y_Δ`.
pub fn xty_accumulate(prev: &[f64], x_delta: &DenseMatrix, y_delta: &[f64]) -> Result<Vector> {
    if prev.len() != x_delta.cols() {
        return Err(Error::Shape(format!(
            "accumulator has length {}, delta has {} columns",
            prev.len(),
            x_delta.cols()
        )));
    }
    if y_delta.len() != x_delta.rows() {
        return Err(Error::Shape(format!("{} positions for {} rows", y_delta.len(), x_delta.rows())));
    }
    let mut out = prev.to_vec();
    for (i, &y) in y_delta.iter().enumerate() {
        if y != 0.0 {
            for (o, x) in out.iter_mut().zip(x_delta.row(i)) {
                *o += x * y;
            }
        }
    }
    Vector::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matvec, transpose};

    fn sample(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        // Small LCG keeps the unit tests free of extra dependencies.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        DenseMatrix::new(rows, cols, data).unwrap()
    }

    fn rel_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / b.frobenius()
    }

    #[test]
    fn chunk_ranges_fold_short_tail() {
        assert_eq!(chunk_ranges(10, 4, 3), vec![(0, 4), (4, 10)]);
        assert_eq!(chunk_ranges(11, 4, 3), vec![(0, 4), (4, 8), (8, 11)]);
        assert_eq!(chunk_ranges(3, 4, 3), vec![(0, 3)]);
    }

    #[test]
    fn single_chunk_matches_plain_qrd() {
        let x = sample(20, 4, 1);
        assert_eq!(parallel_qrd(&x, 100).unwrap(), householder_qrd(&x).unwrap());
    }

    #[test]
    fn four_chunks_match_full_gram() {
        let x = sample(64, 5, 2);
        let r = parallel_qrd(&x, 16).unwrap();
        assert!(rel_diff(&r.gram(), &x.gram()) < 1e-9);
    }

    #[test]
    fn short_matrix_is_padded() {
        let x = sample(2, 5, 3);
        let r = parallel_qrd(&x, 16).unwrap();
        assert!(rel_diff(&r.gram(), &x.gram()) < 1e-12);
    }

    #[test]
    fn accumulator_matches_parallel() {
        let x = sample(203, 6, 4);
        let mut acc = TsqrAccumulator::new(6, 24);
        acc.push_rows(&x).unwrap();
        let snap = acc.snapshot().unwrap();
        let r = acc.finish().unwrap();
        assert_eq!(snap, r);
        assert!(rel_diff(&r.gram(), &x.gram()) < 1e-10);
    }

    #[test]
    fn accumulator_short_tail_and_empty() {
        let x = sample(27, 6, 5);
        let mut acc = TsqrAccumulator::new(6, 12);
        acc.push_rows(&x).unwrap();
        assert!(rel_diff(&acc.finish().unwrap().gram(), &x.gram()) < 1e-10);
        assert_eq!(TsqrAccumulator::new(3, 3).finish().unwrap(), RFactor::zeros(3));
    }

    #[test]
    fn absorb_empty_delta() {
        let x = sample(8, 2, 6);
        let memo = MemoizedFactor::from_matrix(&x, 8).unwrap();
        let next = memo.absorb(&DenseMatrix::zeros(0, 2)).unwrap();
        assert_eq!(next.r(), memo.r());
        assert_eq!(next.epoch(), memo.epoch() + 1);
        assert_eq!(next.trained_rows(), 8);
    }

    #[test]
    fn absorb_halves() {
        let x = sample(8, 2, 7);
        let memo = MemoizedFactor::from_matrix(&x.row_slice(0, 4), 8).unwrap();
        let next = memo.absorb(&x.row_slice(4, 8)).unwrap();
        assert!(rel_diff(&next.r().gram(), &x.gram()) < 1e-10);
        assert_eq!(next.trained_rows(), 8);
    }

    #[test]
    fn absorb_rejects_column_mismatch() {
        let memo = MemoizedFactor::empty(3);
        assert!(matches!(memo.absorb(&DenseMatrix::zeros(2, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn footprint_is_p_squared_times_eight() {
        let memo = MemoizedFactor::empty(96);
        assert_eq!(memo.footprint_bytes(), 73_728);
        let grown = memo.absorb(&sample(500, 96, 8)).unwrap();
        assert_eq!(grown.footprint_bytes(), 73_728);
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let a = MemoizedFactor::from_matrix(&sample(30, 4, 9), 8).unwrap();
        let b = MemoizedFactor::from_matrix(&sample(25, 4, 10), 8).unwrap();
        let with_empty = merge_factors(&a, &MemoizedFactor::empty(4)).unwrap();
        assert!(rel_diff(&with_empty.r().gram(), &a.r().gram()) < 1e-12);
        let ab = merge_factors(&a, &b).unwrap();
        let ba = merge_factors(&b, &a).unwrap();
        assert!(rel_diff(&ab.r().gram(), &ba.r().gram()) < 1e-12);
        assert_eq!(ab.trained_rows(), 55);
        assert!(merge_factors(&a, &MemoizedFactor::empty(5)).is_err());
    }

    #[test]
    fn xty_accumulates() {
        let x = sample(10, 3, 11);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let full = matvec(&transpose(&x), &y).unwrap();
        let first = xty_accumulate(&[0.0; 3], &x.row_slice(0, 4), &y[..4]).unwrap();
        let both = xty_accumulate(&first, &x.row_slice(4, 10), &y[4..]).unwrap();
        for (a, b) in both.iter().zip(full.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let same = xty_accumulate(&both, &DenseMatrix::zeros(0, 3), &[]).unwrap();
        assert_eq!(same, both);
        assert!(xty_accumulate(&[0.0; 3], &x, &y[..3]).is_err());
    }
}
