//! Log-space numerics shared by every attention form.
//!
//! Nonnegative quantities are carried as their logarithms. The log of zero is
//! the [`NEG_INF`] sentinel, which is also the identity of [`logadd`]. All
//! reductions subtract the running maximum before exponentiating, so inputs of
//! magnitude up to several hundred never overflow.

use std::fmt;

use crate::error::{Error, Result};

/// Log-space zero.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Entries allowed in a log-space array: finite values or the [`NEG_INF`] sentinel.
#[inline]
pub fn is_log_value(x: f64) -> bool {
    x.is_finite() || x == NEG_INF
}

/// `log(exp(a) + exp(b))`.
///
/// Commutative bit-for-bit, and `NEG_INF` is an exact two-sided identity.
#[inline]
pub fn logadd(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp of a slice, reduced left to right after max-subtraction.
pub fn lse(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(lse_nonempty(xs.iter().copied()))
}

/// Two-pass lse over an iterator that can be replayed. The caller guarantees
/// at least one element.
#[inline]
pub(crate) fn lse_nonempty<I>(xs: I) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let max = xs.clone().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    let sum: f64 = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// A nonnegative real stored as its logarithm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogReal(f64);

impl LogReal {
    pub const ZERO: LogReal = LogReal(NEG_INF);
    pub const ONE: LogReal = LogReal(0.0);

    /// Wraps a log value, rejecting NaN and `+inf`.
    pub fn new(log_value: f64) -> Option<Self> {
        is_log_value(log_value).then_some(LogReal(log_value))
    }

    pub fn from_linear(x: f64) -> Option<Self> {
        if x.is_nan() || x < 0.0 {
            return None;
        }
        LogReal::new(x.ln())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn to_linear(self) -> f64 {
        self.0.exp()
    }

    pub fn is_zero(self) -> bool {
        self.0 == NEG_INF
    }

    pub fn logadd(self, other: LogReal) -> LogReal {
        LogReal(logadd(self.0, other.0))
    }
}

impl Default for LogReal {
    fn default() -> Self {
        LogReal::ZERO
    }
}

impl fmt::Display for LogReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "log({})", self.0)
    }
}

impl std::iter::Sum for LogReal {
    fn sum<I: Iterator<Item = LogReal>>(iter: I) -> Self {
        iter.fold(LogReal::ZERO, LogReal::logadd)
    }
}

/// Which direction a reduction or scan runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along the row index: one result per column.
    Rows,
    /// Along the column index: one result per row.
    Cols,
}

/// Dense row-major matrix of doubles.
///
/// Entries are finite or `NEG_INF`; NaN and `+inf` are rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix data",
                format!("{} entries ({rows}x{cols})", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &x)| !is_log_value(x)) {
            return Err(Error::InvalidEntry {
                what: "matrix",
                index,
                value,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        debug_assert!(is_log_value(value));
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, 0.0)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "matrix row",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
    }

    // Internal constructor for results the kernels have already checked.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|&x| is_log_value(x)), "non log-space entry");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    // Callers keep entries in the log domain.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(
            row < self.rows && col < self.cols,
            "index ({row}, {col}) out of bounds"
        );
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // zero-width matrices yield no rows
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        assert!(col < self.cols, "column {col} out of bounds");
        self.data.iter().skip(col).step_by(self.cols).copied()
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(
            start <= end && end <= self.rows,
            "row range {start}..{end} out of bounds"
        );
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Reorders rows so that row `i` of the result is row `order[i]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Matrix {
        assert_eq!(order.len(), self.rows, "permutation length");
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            data.extend(self.column(j));
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Elementwise `exp`, leaving the log domain.
    pub fn exp(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.exp()).collect()
    }

    /// Applies `f` to every entry. The result must stay in the log domain.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Largest absolute elementwise difference. Matching `NEG_INF` entries count as equal.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        max_abs_diff(&self.data, &other.data)
    }

    fn reduced_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        }
    }
}

/// Largest absolute elementwise difference of two slices. Equal infinities count as zero.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

/// Log-sum-exp along `axis`.
///
/// `Axis::Cols` collapses each row to one value; `Axis::Rows` collapses each column.
pub fn lse_over_axis(m: &Matrix, axis: Axis) -> Result<Vec<f64>> {
    if m.reduced_len(axis) == 0 {
        return Err(Error::EmptyReduction);
    }
    let out = match axis {
        Axis::Cols => m.iter_rows().map(|r| lse_nonempty(r.iter().copied())).collect(),
        Axis::Rows => (0..m.cols).map(|j| lse_nonempty(m.column(j))).collect(),
    };
    Ok(out)
}

/// Running log-sum-exp of one sequence.
///
/// Keeps the maximum seen so far and the sum of `exp(x - max)`, rescaling the
/// sum whenever the maximum grows. The first output is the first input exactly.
fn lcse_into(xs: impl Iterator<Item = f64>, out: &mut Vec<f64>) {
    let mut max = NEG_INF;
    let mut sum = 0.0_f64;
    for x in xs {
        if x > max {
            // max - x is -inf when nothing finite has been seen yet, so sum stays 0
            sum = sum * (max - x).exp() + 1.0;
            max = x;
        } else if x != NEG_INF {
            sum += (x - max).exp();
        }
        out.push(if max == NEG_INF { NEG_INF } else { max + sum.ln() });
    }
}

/// Log-cumulative-sum-exp along `axis`; the output has the input's shape.
pub fn lcse_over_axis(m: &Matrix, axis: Axis) -> Result<Matrix> {
    if m.reduced_len(axis) == 0 {
        return Err(Error::EmptyReduction);
    }
    match axis {
        Axis::Cols => {
            let mut data = Vec::with_capacity(m.data.len());
            for r in m.iter_rows() {
                lcse_into(r.iter().copied(), &mut data);
            }
            Ok(Matrix::from_vec_unchecked(m.rows, m.cols, data))
        }
        Axis::Rows => {
            let mut scanned = Vec::with_capacity(m.data.len());
            for j in 0..m.cols {
                lcse_into(m.column(j), &mut scanned);
            }
            // scanned is column-major; flip back
            let by_cols = Matrix::from_vec_unchecked(m.cols, m.rows, scanned);
            Ok(by_cols.transpose())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    // Direct evaluation without max-subtraction; only valid for small inputs.
    fn naive_lse(xs: &[f64]) -> f64 {
        xs.iter().map(|x| x.exp()).sum::<f64>().ln()
    }

    #[test]
    fn lse_two_equal_logits() {
        assert_eq!(lse(&[0.0, 0.0]).unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn lse_single_element_is_identity() {
        for x in [-700.0, -3.25, 0.0, 1e-300, 42.0, 699.9] {
            assert_eq!(lse(&[x]).unwrap(), x);
        }
    }

    #[test]
    fn lse_large_inputs_do_not_overflow() {
        let r = lse(&[1000.0, 1000.0]).unwrap();
        assert!(r.is_finite());
        assert!((r - (1000.0 + LN2)).abs() < 1e-12);
        assert!(naive_lse(&[1000.0, 1000.0]).is_infinite());
    }

    #[test]
    fn lse_all_neg_inf_is_neg_inf() {
        assert_eq!(lse(&[NEG_INF, NEG_INF]).unwrap(), NEG_INF);
        assert_eq!(lse(&[NEG_INF, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn lse_empty_is_error() {
        assert_eq!(lse(&[]), Err(Error::EmptyReduction));
        let m = Matrix::new(0, 3, vec![]).unwrap();
        assert_eq!(lse_over_axis(&m, Axis::Rows), Err(Error::EmptyReduction));
        assert_eq!(lse_over_axis(&m, Axis::Cols).unwrap(), Vec::<f64>::new());
        assert!(matches!(
            lcse_over_axis(&m, Axis::Rows),
            Err(Error::EmptyReduction)
        ));
    }

    #[test]
    fn lse_over_both_axes() {
        let m = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]).unwrap();
        let by_row = lse_over_axis(&m, Axis::Cols).unwrap();
        assert!((by_row[0] - 3f64.ln()).abs() < 1e-15);
        assert!((by_row[1] - naive_lse(&[1.0, 2.0, 3.0])).abs() < 1e-14);
        let by_col = lse_over_axis(&m, Axis::Rows).unwrap();
        assert_eq!(by_col.len(), 3);
        assert!((by_col[2] - naive_lse(&[0.0, 3.0])).abs() < 1e-14);
    }

    #[test]
    fn lcse_of_zeros() {
        let m = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let out = lcse_over_axis(&m, Axis::Cols).unwrap();
        let expect = [0.0, LN2, 3f64.ln()];
        assert_eq!(out.row(0)[0], 0.0);
        for (a, b) in out.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lcse_single_element() {
        let m = Matrix::from_rows(&[[-17.5]]).unwrap();
        assert_eq!(lcse_over_axis(&m, Axis::Cols).unwrap().row(0), &[-17.5]);
        assert_eq!(lcse_over_axis(&m, Axis::Rows).unwrap().row(0), &[-17.5]);
    }

    #[test]
    fn lcse_matches_prefix_oracle() {
        // Each prefix is checked against the naive sum of exponentials.
        let row = [-3.1163, 4.4209, 0.2766, -4.9021, 2.5112, 1.0937, -0.6604, 3.9875];
        let m = Matrix::from_rows(&[row]).unwrap();
        let out = lcse_over_axis(&m, Axis::Cols).unwrap();
        for k in 1..=row.len() {
            let oracle = naive_lse(&row[..k]);
            assert!((out.row(0)[k - 1] - oracle).abs() < 1e-13, "prefix {k}");
        }
        // the column scan of the transpose is the same computation
        let col = lcse_over_axis(&m.transpose(), Axis::Rows).unwrap();
        assert_eq!(col.transpose(), out);
    }

    #[test]
    fn lcse_handles_leading_and_interior_neg_inf() {
        let m = Matrix::from_rows(&[[NEG_INF, NEG_INF, 1.0, NEG_INF, 1.0]]).unwrap();
        let out = lcse_over_axis(&m, Axis::Cols).unwrap();
        assert_eq!(&out.row(0)[..4], &[NEG_INF, NEG_INF, 1.0, 1.0]);
        assert!((out.row(0)[4] - (1.0 + LN2)).abs() < 1e-15);
    }

    #[test]
    fn logadd_identity_and_basics() {
        assert_eq!(logadd(NEG_INF, 3.5), 3.5);
        assert_eq!(logadd(3.5, NEG_INF), 3.5);
        assert_eq!(logadd(NEG_INF, NEG_INF), NEG_INF);
        assert_eq!(logadd(0.0, 0.0), LN2);
        assert_eq!(LogReal::ZERO.logadd(LogReal::ONE), LogReal::ONE);
    }

    #[test]
    fn log_real_rejects_nan_and_pos_inf() {
        assert!(LogReal::new(f64::NAN).is_none());
        assert!(LogReal::new(f64::INFINITY).is_none());
        assert!(LogReal::new(NEG_INF).unwrap().is_zero());
        assert_eq!(LogReal::from_linear(0.0), Some(LogReal::ZERO));
        assert!(LogReal::from_linear(-1.0).is_none());
        let total: LogReal = [1.0, 2.0, 3.0]
            .into_iter()
            .map(|x| LogReal::from_linear(x).unwrap())
            .sum();
        assert!((total.to_linear() - 6.0).abs() < 1e-14);
    }

    #[test]
    fn matrix_rejects_bad_entries_and_shapes() {
        assert!(matches!(
            Matrix::new(2, 2, vec![0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::InvalidEntry { index: 1, .. })
        ));
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Matrix::new(1, 1, vec![NEG_INF]).is_ok());
        assert!(Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn matrix_row_helpers() {
        let m = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64).unwrap();
        assert_eq!(m.row(1), &[2.0, 3.0]);
        assert_eq!(m.column(1).collect::<Vec<_>>(), vec![1.0, 3.0, 5.0]);
        assert_eq!(m.slice_rows(1, 3).as_slice(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m.permute_rows(&[2, 0, 1]).row(0), &[4.0, 5.0]);
        assert_eq!(m.transpose().shape(), (2, 3));
        assert_eq!(m.iter_rows().count(), 3);
    }

    proptest! {
        #[test]
        fn logadd_is_associative(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
            let direct = naive_lse(&[a, b, c]);
            let left = logadd(logadd(a, b), c);
            let right = logadd(a, logadd(b, c));
            prop_assert!((left - direct).abs() <= 1e-12);
            prop_assert!((right - direct).abs() <= 1e-12);
        }

        #[test]
        fn logadd_monoid_laws(a in -50.0..50.0f64, b in -50.0..50.0f64, c in -50.0..50.0f64) {
            prop_assert_eq!(logadd(a, b), logadd(b, a));
            prop_assert!((logadd(logadd(a, b), c) - logadd(a, logadd(b, c))).abs() <= 1e-12);
            prop_assert_eq!(logadd(NEG_INF, a), a);
            prop_assert_eq!(logadd(a, NEG_INF), a);
        }

        #[test]
        fn lse_equals_logadd_fold(xs in prop::collection::vec(-50.0..50.0f64, 1..40)) {
            let folded = xs.iter().copied().fold(NEG_INF, logadd);
            prop_assert!((lse(&xs).unwrap() - folded).abs() <= 1e-12);
        }

        #[test]
        fn lse_shift_covariance(xs in prop::collection::vec(-50.0..50.0f64, 1..40), alpha in -100.0..100.0f64) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + alpha).collect();
            prop_assert!((lse(&shifted).unwrap() - (lse(&xs).unwrap() + alpha)).abs() <= 1e-12);
        }

        #[test]
        fn lcse_last_equals_lse(xs in prop::collection::vec(-50.0..50.0f64, 1..40)) {
            let m = Matrix::new(1, xs.len(), xs.clone()).unwrap();
            let scanned = lcse_over_axis(&m, Axis::Cols).unwrap();
            prop_assert_eq!(scanned.row(0)[0], xs[0]);
            prop_assert!((scanned.row(0)[xs.len() - 1] - lse(&xs).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn no_nan_or_pos_inf(xs in prop::collection::vec(prop_oneof![Just(NEG_INF), -700.0..700.0f64], 1..20)) {
            let m = Matrix::new(1, xs.len(), xs.clone()).unwrap();
            let r = lse(&xs).unwrap();
            prop_assert!(is_log_value(r));
            let scanned = lcse_over_axis(&m, Axis::Cols).unwrap();
            prop_assert!(scanned.as_slice().iter().all(|&x| is_log_value(x)));
            let folded = xs.iter().copied().fold(NEG_INF, logadd);
            prop_assert!(is_log_value(folded));
        }
    }
}
