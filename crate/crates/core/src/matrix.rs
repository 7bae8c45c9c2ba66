//! Lower-triangular matrices used by factorizations `A = B C`.
//!
//! Two representations are provided: [`LttMatrix`] stores a lower-triangular
//! Toeplitz matrix by its first column, [`LowerTriMatrix`] stores an arbitrary
//! lower-triangular matrix in packed row-major order. Both implement
//! [`LowerTriangular`], which is what the norm and sensitivity routines consume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{compensated_sum, l2_norm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("matrix order must be at least 1")]
    EmptyMatrix,
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("lambda must lie in [0, 1), got {0}")]
    LambdaOutOfRange(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("singular matrix: zero diagonal entry in column {0}")]
    Singular(usize),
    #[error("column {0} has zero norm")]
    ZeroColumn(usize),
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, MatrixError>;

/// Read access shared by every lower-triangular representation.
pub trait LowerTriangular {
    fn order(&self) -> usize;

    /// Entry `(i, j)`, zero above the diagonal.
    fn entry(&self, i: usize, j: usize) -> f64;

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.order()).map(|i| self.entry(i, j)).collect()
    }

    /// The stored part of row `i`, i.e. entries `0..=i`.
    fn row(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|j| self.entry(i, j)).collect()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.order();
        (0..n)
            .map(|i| (0..n).map(|j| self.entry(i, j)).collect())
            .collect()
    }

    fn min_entry(&self) -> f64 {
        let n = self.order();
        let mut m = f64::INFINITY;
        for i in 0..n {
            for j in 0..=i {
                m = m.min(self.entry(i, j));
            }
        }
        m
    }
}

/// Lower-triangular Toeplitz matrix: entry `(i, j)` is `first_col[i - j]` for `i >= j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LttRepr", into = "LttRepr")]
pub struct LttMatrix {
    first_col: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LttRepr {
    n: usize,
    first_col: Vec<f64>,
}

impl TryFrom<LttRepr> for LttMatrix {
    type Error = MatrixError;

    fn try_from(r: LttRepr) -> Result<Self> {
        if r.first_col.len() != r.n {
            return Err(MatrixError::DimensionMismatch {
                left: r.n,
                right: r.first_col.len(),
            });
        }
        LttMatrix::new(r.first_col)
    }
}

impl From<LttMatrix> for LttRepr {
    fn from(m: LttMatrix) -> Self {
        LttRepr {
            n: m.first_col.len(),
            first_col: m.first_col,
        }
    }
}

impl LttMatrix {
    pub fn new(first_col: Vec<f64>) -> Result<Self> {
        if first_col.is_empty() {
            return Err(MatrixError::EmptyMatrix);
        }
        if let Some(pos) = first_col.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite(pos));
        }
        Ok(Self { first_col })
    }

    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "matrix order must be at least 1");
        let mut first_col = vec![0.0; n];
        first_col[0] = 1.0;
        Self { first_col }
    }

    pub fn n(&self) -> usize {
        self.first_col.len()
    }

    pub fn first_col(&self) -> &[f64] {
        &self.first_col
    }

    /// True when `c_0 >= c_1 >= ... >= c_{n-1} >= 0`.
    pub fn is_monotone_nonnegative(&self) -> bool {
        self.first_col.iter().all(|&c| c >= 0.0)
            && self.first_col.windows(2).all(|w| w[0] >= w[1])
    }

    /// Multiply by a column vector.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n() {
            return Err(MatrixError::DimensionMismatch {
                left: self.n(),
                right: v.len(),
            });
        }
        Ok((0..self.n())
            .map(|i| (0..=i).map(|j| self.first_col[i - j] * v[j]).sum())
            .collect())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        LttMatrix::new(self.first_col.iter().map(|c| c * factor).collect())
    }

    pub fn to_lower_tri(&self) -> LowerTriMatrix {
        LowerTriMatrix::from_fn(self.n(), |i, j| self.first_col[i - j])
    }
}

impl LowerTriangular for LttMatrix {
    fn order(&self) -> usize {
        self.n()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.first_col[i - j]
        }
    }

    fn column(&self, j: usize) -> Vec<f64> {
        let n = self.n();
        let mut col = vec![0.0; n];
        col[j..].copy_from_slice(&self.first_col[..n - j]);
        col
    }

    fn min_entry(&self) -> f64 {
        self.first_col.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Dense lower-triangular matrix in packed row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RowsRepr", into = "RowsRepr")]
pub struct LowerTriMatrix {
    n: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RowsRepr {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<RowsRepr> for LowerTriMatrix {
    type Error = MatrixError;

    fn try_from(r: RowsRepr) -> Result<Self> {
        if r.rows.len() != r.n {
            return Err(MatrixError::DimensionMismatch {
                left: r.n,
                right: r.rows.len(),
            });
        }
        LowerTriMatrix::from_rows(r.rows)
    }
}

impl From<LowerTriMatrix> for RowsRepr {
    fn from(m: LowerTriMatrix) -> Self {
        RowsRepr {
            n: m.n,
            rows: (0..m.n).map(|i| m.row_slice(i).to_vec()).collect(),
        }
    }
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl LowerTriMatrix {
    /// Build from rows; row `i` holds either `i + 1` entries (the stored part)
    /// or `n` entries whose strictly-upper part must be zero.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(MatrixError::EmptyMatrix);
        }
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for (i, row) in rows.into_iter().enumerate() {
            let ok = row.len() == i + 1
                || (row.len() == n && row[i + 1..].iter().all(|&v| v == 0.0));
            if !ok {
                return Err(MatrixError::RaggedRow {
                    row: i,
                    got: row.len(),
                    expected: i + 1,
                });
            }
            data.extend_from_slice(&row[..=i]);
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite(pos));
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(n > 0, "matrix order must be at least 1");
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        if diag.is_empty() {
            return Err(MatrixError::EmptyMatrix);
        }
        if let Some(pos) = diag.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite(pos));
        }
        Ok(Self::from_fn(diag.len(), |i, j| if i == j { diag[i] } else { 0.0 }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[packed(i, j)]
        }
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[packed(i, 0)..packed(i, 0) + i + 1]
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.row_slice(i)[..i].iter().all(|&v| v == 0.0))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn multiply(&self, other: &LowerTriMatrix) -> Result<LowerTriMatrix> {
        if self.n != other.n {
            return Err(MatrixError::DimensionMismatch {
                left: self.n,
                right: other.n,
            });
        }
        Ok(LowerTriMatrix::from_fn(self.n, |i, j| {
            (j..=i).map(|m| self.get(i, m) * other.get(m, j)).sum()
        }))
    }

    /// Inverse by column-wise forward substitution.
    pub fn inverse(&self) -> Result<LowerTriMatrix> {
        let n = self.n;
        if let Some(j) = (0..n).find(|&j| self.get(j, j) == 0.0) {
            return Err(MatrixError::Singular(j));
        }
        let mut inv = LowerTriMatrix {
            n,
            data: vec![0.0; self.data.len()],
        };
        for j in 0..n {
            inv.data[packed(j, j)] = 1.0 / self.get(j, j);
            for i in j + 1..n {
                let row = self.row_slice(i);
                let mut acc = 0.0;
                for (m, &l) in row.iter().enumerate().take(i).skip(j) {
                    acc += l * inv.data[packed(m, j)];
                }
                inv.data[packed(i, j)] = -acc / row[i];
            }
        }
        Ok(inv)
    }

    /// `self * diag(factors)`.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<LowerTriMatrix> {
        if factors.len() != self.n {
            return Err(MatrixError::DimensionMismatch {
                left: self.n,
                right: factors.len(),
            });
        }
        Ok(LowerTriMatrix::from_fn(self.n, |i, j| self.get(i, j) * factors[j]))
    }

    pub fn scaled(&self, factor: f64) -> LowerTriMatrix {
        LowerTriMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

impl LowerTriangular for LowerTriMatrix {
    fn order(&self) -> usize {
        self.n
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.row_slice(i).to_vec()
    }

    fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Either representation, for places that hold a strategy or left factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TriMatrix {
    Toeplitz(LttMatrix),
    Dense(LowerTriMatrix),
}

impl TriMatrix {
    pub fn to_lower_tri(&self) -> LowerTriMatrix {
        match self {
            TriMatrix::Toeplitz(m) => m.to_lower_tri(),
            TriMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn as_toeplitz(&self) -> Option<&LttMatrix> {
        match self {
            TriMatrix::Toeplitz(m) => Some(m),
            TriMatrix::Dense(_) => None,
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<TriMatrix> {
        Ok(match self {
            TriMatrix::Toeplitz(m) => TriMatrix::Toeplitz(m.scaled(factor)?),
            TriMatrix::Dense(m) => TriMatrix::Dense(m.scaled(factor)),
        })
    }
}

impl LowerTriangular for TriMatrix {
    fn order(&self) -> usize {
        match self {
            TriMatrix::Toeplitz(m) => m.order(),
            TriMatrix::Dense(m) => m.order(),
        }
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            TriMatrix::Toeplitz(m) => m.entry(i, j),
            TriMatrix::Dense(m) => m.entry(i, j),
        }
    }

    fn column(&self, j: usize) -> Vec<f64> {
        match self {
            TriMatrix::Toeplitz(m) => m.column(j),
            TriMatrix::Dense(m) => m.column(j),
        }
    }

    fn row(&self, i: usize) -> Vec<f64> {
        match self {
            TriMatrix::Toeplitz(m) => m.row(i),
            TriMatrix::Dense(m) => m.row(i),
        }
    }

    fn min_entry(&self) -> f64 {
        match self {
            TriMatrix::Toeplitz(m) => m.min_entry(),
            TriMatrix::Dense(m) => m.min_entry(),
        }
    }
}

impl From<LttMatrix> for TriMatrix {
    fn from(m: LttMatrix) -> Self {
        TriMatrix::Toeplitz(m)
    }
}

impl From<LowerTriMatrix> for TriMatrix {
    fn from(m: LowerTriMatrix) -> Self {
        TriMatrix::Dense(m)
    }
}

/// Column norms `d_j` of a lower-triangular matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNorms(Vec<f64>);

impl ColumnNorms {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Closed form for `C_lambda`: `d_j^2 = (1 - lambda^{2(n-j)}) / (1 - lambda^2)`
    /// with zero-based `j`.
    pub fn c_lambda_closed(n: usize, lambda: f64) -> ColumnNorms {
        ColumnNorms(
            (0..n)
                .map(|j| {
                    let rows = (n - j) as f64;
                    if lambda == 0.0 {
                        1.0
                    } else {
                        (crate::numeric::one_minus_pow(lambda, 2.0 * rows)
                            / crate::numeric::one_minus_pow(lambda, 2.0))
                        .sqrt()
                    }
                })
                .collect(),
        )
    }
}

/// `C_lambda`, the LTT matrix with first column `(1, lambda, ..., lambda^{n-1})`.
pub fn make_c_lambda(n: usize, lambda: f64) -> Result<LttMatrix> {
    check_lambda(lambda)?;
    if n == 0 {
        return Err(MatrixError::EmptyMatrix);
    }
    let mut first_col = Vec::with_capacity(n);
    let mut p = 1.0;
    for _ in 0..n {
        first_col.push(p);
        p *= lambda;
    }
    LttMatrix::new(first_col)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(MatrixError::LambdaOutOfRange(lambda))
    }
}

/// The prefix-sum workload `A`: lower-triangular all-ones.
pub fn prefix_sum_matrix(n: usize) -> LttMatrix {
    assert!(n > 0, "matrix order must be at least 1");
    LttMatrix {
        first_col: vec![1.0; n],
    }
}

/// Inverse of an LTT matrix through the convolution recurrence
/// `r_0 = 1/c_0`, `r_t = -(1/c_0) sum_{s=1..t} c_s r_{t-s}`.
pub fn ltt_inverse(m: &LttMatrix) -> Result<LttMatrix> {
    let c = m.first_col();
    if c[0] == 0.0 {
        return Err(MatrixError::Singular(0));
    }
    let n = c.len();
    let mut r = vec![0.0; n];
    r[0] = 1.0 / c[0];
    for t in 1..n {
        let mut acc = 0.0;
        for s in 1..=t {
            acc += c[s] * r[t - s];
        }
        r[t] = -acc / c[0];
    }
    LttMatrix::new(r)
}

/// LTT product as the truncated convolution of first columns.
pub fn ltt_multiply(a: &LttMatrix, b: &LttMatrix) -> Result<LttMatrix> {
    if a.n() != b.n() {
        return Err(MatrixError::DimensionMismatch {
            left: a.n(),
            right: b.n(),
        });
    }
    let (x, y) = (a.first_col(), b.first_col());
    LttMatrix::new(
        (0..a.n())
            .map(|t| (0..=t).map(|s| x[s] * y[t - s]).sum())
            .collect(),
    )
}

pub fn column_norms<M: LowerTriangular + ?Sized>(m: &M) -> ColumnNorms {
    ColumnNorms((0..m.order()).map(|j| l2_norm(&m.column(j))).collect())
}

/// `m * D^{-1}` where `D` holds the column norms of `m`.
pub fn normalize_columns(m: &LttMatrix) -> Result<LowerTriMatrix> {
    let norms = column_norms(m);
    if let Some(j) = norms.as_slice().iter().position(|&d| d == 0.0) {
        return Err(MatrixError::ZeroColumn(j));
    }
    let inv: Vec<f64> = norms.as_slice().iter().map(|d| 1.0 / d).collect();
    m.to_lower_tri().scale_columns(&inv)
}

pub fn frobenius_norm<M: LowerTriangular + ?Sized>(m: &M) -> f64 {
    let n = m.order();
    compensated_sum((0..n).flat_map(|i| m.row(i)).map(|v| v * v)).sqrt()
}

/// `max_i ||row_i||_2`.
pub fn row_max_norm<M: LowerTriangular + ?Sized>(m: &M) -> f64 {
    (0..m.order())
        .map(|i| l2_norm(&m.row(i)))
        .fold(0.0, f64::max)
}

/// Left factor `B = A C^{-1}` of the prefix-sum workload for a strategy `C`.
pub fn b_factor(strategy: &TriMatrix) -> Result<TriMatrix> {
    match strategy {
        TriMatrix::Toeplitz(c) => {
            let inv = ltt_inverse(c)?;
            Ok(TriMatrix::Toeplitz(ltt_multiply(
                &prefix_sum_matrix(c.n()),
                &inv,
            )?))
        }
        TriMatrix::Dense(c) => {
            let inv = c.inverse()?;
            let n = c.n();
            // Row i of A C^{-1} is the running sum of rows 0..=i of C^{-1}.
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
            let mut running = vec![0.0; n];
            for i in 0..n {
                for (j, r) in running.iter_mut().enumerate().take(i + 1) {
                    *r += inv.get(i, j);
                }
                rows.push(running[..=i].to_vec());
            }
            Ok(TriMatrix::Dense(LowerTriMatrix::from_rows(rows)?))
        }
    }
}

/// Dense product `left * right` of two lower-triangular matrices.
pub fn tri_product<L, R>(left: &L, right: &R) -> Result<LowerTriMatrix>
where
    L: LowerTriangular + ?Sized,
    R: LowerTriangular + ?Sized,
{
    if left.order() != right.order() {
        return Err(MatrixError::DimensionMismatch {
            left: left.order(),
            right: right.order(),
        });
    }
    Ok(LowerTriMatrix::from_fn(left.order(), |i, j| {
        (j..=i).map(|m| left.entry(i, m) * right.entry(m, j)).sum()
    }))
}
