//! Dense row-major matrices and the deterministic kernels built on them.
//!
//! All kernels are pure functions; each charges its FLOPs to
//! [`crate::flops`].

use std::fmt;

use crate::error::{Error, Result};
use crate::flops::charge;
use crate::scalar::Scalar;

/// Dense 2-D array, rows are tokens and columns are features.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.shape(),
                right: (start, end),
            });
        }
        Ok(Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Gathers rows by index, repeats allowed.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape {
                    op: "select_rows",
                    left: self.shape(),
                    right: (i, 0),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `+inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        if self.rows > 8 {
            writeln!(f, "  ... {} more rows", self.rows - 8)?;
        }
        write!(f, "]")
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let dst = &mut out.data[i * n..(i + 1) * n];
        for (p, &aip) in a.row(i).iter().enumerate() {
            for (d, &bpj) in dst.iter_mut().zip(b.row(p)) {
                *d = *d + aip * bpj;
            }
        }
    }
    charge(2 * (m * k * n) as u64);
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let out = Matrix::from_fn(m, n, |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    });
    charge(2 * (m * k * n) as u64);
    Ok(out)
}

/// Elementwise sum (residual connection).
pub fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add",
            left: a.shape(),
            right: b.shape(),
        });
    }
    charge(a.len() as u64);
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn scale<T: Scalar>(m: &Matrix<T>, s: T) -> Matrix<T> {
    charge(m.len() as u64);
    m.map(|v| v * s)
}

/// `exp(m[i,j] - max_i)` over the visible entries of each row; hidden
/// entries are exactly zero and never read, so their values cannot leak
/// into the result. The row max is taken over visible entries only.
///
/// Charges 2 FLOPs per entry (subtract, exp) whether visible or not.
pub fn row_exp_shifted<T: Scalar>(
    m: &Matrix<T>,
    visible: impl Fn(usize, usize) -> bool,
) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| visible(i, j))
            .map(|(_, &v)| v)
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))));
        let Some(max) = max else {
            return Err(Error::DegenerateMask { row: i });
        };
        let dst = out.row_mut(i);
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if visible(i, j) {
                *d = (v - max).exp();
            }
        }
    }
    charge(2 * m.len() as u64);
    Ok(out)
}

/// Divides each row by its sum. Charges 2 FLOPs per entry.
pub fn row_normalize<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let sum: T = m.row(i).iter().copied().sum();
        if !(sum > T::zero()) || !sum.is_finite() {
            return Err(Error::Degenerate {
                op: "row_normalize",
                row: i,
            });
        }
        for v in out.row_mut(i) {
            *v = *v / sum;
        }
    }
    charge(2 * m.len() as u64);
    Ok(out)
}

/// Numerically stable softmax over each row.
pub fn row_softmax<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let psi = row_exp_shifted(m, |_, _| true).expect("non-empty rows always have a max");
    // every row holds an exact 1.0 at its argmax, so the sum is >= 1
    row_normalize(&psi).expect("row sums are at least one")
}

/// `out[i,j] = psi[i,j]·g[j] / Σ_k psi[i,k]·g[k]`.
///
/// `psi` holds already-exponentiated scores; masked entries are zero.
/// Charges 3 FLOPs per entry (weight, accumulate, divide).
pub fn row_normalize_weighted<T: Scalar>(psi: &Matrix<T>, g: &[usize]) -> Result<Matrix<T>> {
    if g.len() != psi.cols {
        return Err(Error::Shape {
            op: "row_normalize_weighted",
            left: psi.shape(),
            right: (1, g.len()),
        });
    }
    if let Some(j) = g.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate {
            op: "row_normalize_weighted (zero repetition count)",
            row: j,
        });
    }
    let weights: Vec<T> = g.iter().map(|&c| T::from_count(c)).collect();
    let mut out = Matrix::zeros(psi.rows, psi.cols);
    for i in 0..psi.rows {
        let dst = out.row_mut(i);
        let mut sum = T::zero();
        for ((d, &p), &w) in dst.iter_mut().zip(psi.row(i)).zip(&weights) {
            *d = p * w;
            sum = sum + *d;
        }
        if !(sum > T::zero()) || !sum.is_finite() {
            return Err(Error::Degenerate {
                op: "row_normalize_weighted",
                row: i,
            });
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    charge(3 * psi.len() as u64);
    Ok(out)
}

/// Row-wise layer normalization. Charges `7·cols + 5` FLOPs per row.
pub fn layernorm<T: Scalar>(m: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::Shape {
            op: "layernorm",
            left: m.shape(),
            right: (gain.len(), bias.len()),
        });
    }
    let n = T::from_count(m.cols);
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<T>()
            / n;
        let inv = T::one() / (var + eps).sqrt();
        for (((d, &v), &gm), &b) in out.row_mut(i).iter_mut().zip(row).zip(gain).zip(bias) {
            *d = (v - mean) * inv * gm + b;
        }
    }
    charge((m.rows * (7 * m.cols + 5)) as u64);
    Ok(out)
}

/// Tanh-form GELU. Charges 9 FLOPs per entry.
pub fn gelu<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    charge(9 * m.len() as u64);
    m.map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
}

/// Stacks matrices vertically, preserving each part's row order.
pub fn concat_rows<T: Scalar>(parts: &[&Matrix<T>]) -> Result<Matrix<T>> {
    let cols = parts.first().map_or(0, |p| p.cols);
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    let mut rows = 0;
    for p in parts {
        if p.cols != cols {
            return Err(Error::Shape {
                op: "concat_rows",
                left: (rows, cols),
                right: p.shape(),
            });
        }
        data.extend_from_slice(&p.data);
        rows += p.rows;
    }
    Ok(Matrix { rows, cols, data })
}

/// Stacks matrices horizontally (per-head outputs into one row block).
pub fn concat_cols<T: Scalar>(parts: &[Matrix<T>]) -> Result<Matrix<T>> {
    let rows = parts.first().map_or(0, |p| p.rows);
    if let Some(p) = parts.iter().find(|p| p.rows != rows) {
        return Err(Error::Shape {
            op: "concat_cols",
            left: (rows, 0),
            right: p.shape(),
        });
    }
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Matrix { rows, cols, data })
}

/// Column-wise mean of rows `[start, end)`.
pub fn segment_row_mean<T: Scalar>(m: &Matrix<T>, start: usize, end: usize) -> Result<Vec<T>> {
    if start >= end || end > m.rows {
        return Err(Error::Shape {
            op: "segment_row_mean",
            left: m.shape(),
            right: (start, end),
        });
    }
    let mut acc = vec![T::zero(); m.cols];
    for i in start..end {
        for (a, &v) in acc.iter_mut().zip(m.row(i)) {
            *a = *a + v;
        }
    }
    let n = T::from_count(end - start);
    for a in acc.iter_mut() {
        *a = *a / n;
    }
    charge(((end - start) * m.cols + m.cols) as u64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(7, 5, 1);
        let b = random(5, 3, 2);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
        let bt = b.transpose();
        assert!(matmul_bt(&a, &bt).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&random(2, 3, 0), &random(2, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn matmul_is_associative() {
        let (a, b, c) = (random(4, 6, 3), random(6, 5, 4), random(5, 3, 5));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&m(&[&[0.0, 0.0, 0.0]]));
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = row_softmax(&m(&[&[1000.0, 1000.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        let s = row_softmax(&random(4, 6, 9));
        for i in 0..4 {
            assert!(s.row(i).iter().all(|&v| v >= 0.0));
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_equals_weighted_normalization_with_unit_counts() {
        let x = random(5, 7, 11);
        let max_shifted = Matrix::from_fn(5, 7, |i, j| {
            let mx = x.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (x.get(i, j) - mx).exp()
        });
        let via_weighted = row_normalize_weighted(&max_shifted, &[1; 7]).unwrap();
        assert!(row_softmax(&x).max_abs_diff(&via_weighted) <= 1e-12);
    }

    #[test]
    fn weighted_normalization_examples() {
        let e = std::f64::consts::E;
        let out = row_normalize_weighted(&m(&[&[e, e]]), &[3, 1]).unwrap();
        assert!((out.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.25).abs() < 1e-15);

        let psi = random(3, 4, 5).map(f64::exp);
        let plain = row_normalize(&psi).unwrap();
        assert!(
            row_normalize_weighted(&psi, &[1; 4])
                .unwrap()
                .max_abs_diff(&plain)
                <= 1e-15
        );
    }

    #[test]
    fn weighted_normalization_matches_duplicated_columns() {
        // oracle: physically duplicate column j g[j] times, normalize, merge back
        let psi = random(4, 5, 21).map(f64::exp);
        let g = [1usize, 4, 2, 1, 3];
        let mut expanded_rows = Vec::new();
        for i in 0..psi.rows() {
            let mut r = Vec::new();
            for (j, &c) in g.iter().enumerate() {
                r.extend(std::iter::repeat_n(psi.get(i, j), c));
            }
            expanded_rows.push(r);
        }
        let dup = row_normalize(&Matrix::from_rows(&expanded_rows).unwrap()).unwrap();
        let merged = Matrix::from_fn(psi.rows(), psi.cols(), |i, j| {
            let start: usize = g[..j].iter().sum();
            (start..start + g[j]).map(|c| dup.get(i, c)).sum()
        });
        let out = row_normalize_weighted(&psi, &g).unwrap();
        assert!(out.max_abs_diff(&merged) <= 1e-12);
    }

    #[test]
    fn weighted_normalization_errors() {
        let psi = Matrix::<f64>::zeros(1, 2);
        assert!(matches!(
            row_normalize_weighted(&psi, &[1, 1]),
            Err(Error::Degenerate { .. })
        ));
        assert!(matches!(
            row_normalize_weighted(&psi, &[1]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn masked_exp_ignores_hidden_values() {
        let a = m(&[&[0.0, 1.0, 5.0]]);
        let b = m(&[&[0.0, 1.0, f64::MAX]]);
        let vis = |_: usize, j: usize| j < 2;
        let ea = row_exp_shifted(&a, vis).unwrap();
        assert!(ea.bit_eq(&row_exp_shifted(&b, vis).unwrap()));
        assert_eq!(ea.get(0, 2), 0.0);
        assert!(matches!(
            row_exp_shifted(&a, |_, _| false),
            Err(Error::DegenerateMask { row: 0 })
        ));
    }

    #[test]
    fn layernorm_properties() {
        let c = m(&[&[3.0, 3.0, 3.0, 3.0]]);
        let out = layernorm(&c, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.row(0).iter().all(|&v| v == 0.0));

        let x = random(3, 8, 6);
        let out = layernorm(&x, &[1.0; 8], &[0.0; 8], 0.0).unwrap();
        for i in 0..3 {
            let mean = out.row(i).iter().sum::<f64>() / 8.0;
            let var = out.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_reference_points() {
        let out = gelu(&m(&[&[0.0, 1.0, -1.0, 10.0]]));
        assert_eq!(out.get(0, 0), 0.0);
        assert!((out.get(0, 1) - 0.841_191_990_607_477).abs() < 1e-12);
        assert!((out.get(0, 2) + 0.158_808_009_392_523).abs() < 1e-12);
        assert!((out.get(0, 3) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn concat_and_segment_mean() {
        let a = random(2, 3, 1);
        let b = random(1, 3, 2);
        let c = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (3, 3));
        assert_eq!(c.row(0), a.row(0));
        assert_eq!(c.row(2), b.row(0));

        let s = m(&[&[1.0, 1.0], &[3.0, 3.0]]);
        assert_eq!(segment_row_mean(&s, 0, 2).unwrap(), vec![2.0, 2.0]);
        assert!(segment_row_mean(&s, 1, 1).is_err());
        assert!(segment_row_mean(&s, 0, 3).is_err());
    }

    #[test]
    fn kernels_charge_documented_flops() {
        let a = random(3, 4, 1);
        let b = random(4, 5, 2);
        assert_eq!(flops::measure(|| matmul(&a, &b).unwrap()).1, 2 * 3 * 4 * 5);
        assert_eq!(flops::measure(|| row_softmax(&a)).1, 4 * 12);
        assert_eq!(
            flops::measure(|| layernorm(&a, &[1.0; 4], &[0.0; 4], 1e-5).unwrap()).1,
            3 * (7 * 4 + 5)
        );
        assert_eq!(flops::measure(|| gelu(&a)).1, 9 * 12);
    }

    #[test]
    fn kernels_are_bit_deterministic() {
        let a = random(6, 6, 3);
        let b = random(6, 6, 4);
        assert!(matmul(&a, &b).unwrap().bit_eq(&matmul(&a, &b).unwrap()));
        assert!(row_softmax(&a).bit_eq(&row_softmax(&a)));
    }
}
