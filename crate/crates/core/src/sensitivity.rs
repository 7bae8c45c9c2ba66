//! Sensitivity of strategy matrices under (k, b)-min-separated participation.
//!
//! Three routes are provided and cross-checked in tests:
//! the structural leftmost-pattern formula ([`sens_min_sep`]), closed forms for
//! `C_lambda` and its column-normalized variant, and exhaustive enumeration
//! ([`sens_bruteforce`]) which is the oracle for the other two.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{
    check_lambda, ColumnNorms, LowerTriMatrix, LowerTriangular, LttMatrix, MatrixError,
    TriMatrix,
};
use crate::numeric::{l2_norm, one_minus_pow};

/// Default cap on the number of patterns [`sens_bruteforce`] will visit.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("invalid participation schema (n={n}, k={k}, b={b}): {reason}")]
    InvalidSchema {
        n: usize,
        k: usize,
        b: usize,
        reason: &'static str,
    },
    #[error("first column is not non-negative and non-increasing; use sens_bruteforce")]
    NotMonotone,
    #[error("matrix has negative entries; column-sum sensitivity does not apply")]
    NegativeEntries,
    #[error("pattern enumeration needs {count} patterns, budget is {budget}")]
    BudgetExceeded { count: u128, budget: u64 },
    #[error("matrix order {matrix} does not match schema n={schema}")]
    OrderMismatch { matrix: usize, schema: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

pub type Result<T> = std::result::Result<T, SensitivityError>;

/// `n` iterations, at most `k` participations per example, at least `b` steps apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr")]
pub struct ParticipationSchema {
    n: usize,
    k: usize,
    b: usize,
}

#[derive(Deserialize)]
struct SchemaRepr {
    n: usize,
    k: usize,
    b: usize,
}

impl TryFrom<SchemaRepr> for ParticipationSchema {
    type Error = SensitivityError;

    fn try_from(r: SchemaRepr) -> Result<Self> {
        ParticipationSchema::new(r.n, r.k, r.b)
    }
}

impl ParticipationSchema {
    pub fn new(n: usize, k: usize, b: usize) -> Result<Self> {
        let invalid = |reason| SensitivityError::InvalidSchema { n, k, b, reason };
        if n == 0 {
            return Err(invalid("n must be positive"));
        }
        if k == 0 || k > n {
            return Err(invalid("k must satisfy 1 <= k <= n"));
        }
        if b == 0 {
            return Err(invalid("b must be positive"));
        }
        if (k - 1).checked_mul(b).is_none_or(|v| v + 1 > n) {
            return Err(invalid("(k-1)*b + 1 must not exceed n"));
        }
        Ok(Self { n, k, b })
    }

    /// Single participation: `k = 1`, `b = n`.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(n, 1, n.max(1))
    }

    /// Full-batch training: every example in every step (`b = 1`, `k = n`).
    pub fn full_batch(n: usize) -> Result<Self> {
        Self::new(n, n, 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn b(&self) -> usize {
        self.b
    }

    /// The pattern `{1, 1+b, ..., 1+(k-1)b}`.
    pub fn leftmost_pattern(&self) -> ParticipationPattern {
        ParticipationPattern {
            indices: (0..self.k).map(|j| 1 + j * self.b).collect(),
        }
    }

    /// Number of b-separated index sets of size `1..=k` (saturating).
    pub fn pattern_count(&self) -> u128 {
        count_patterns(self.n, self.k, self.b)
    }
}

/// Strictly increasing one-based column indices with consecutive gaps `>= b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationPattern {
    indices: Vec<usize>,
}

impl ParticipationPattern {
    pub fn new(indices: Vec<usize>, schema: &ParticipationSchema) -> Option<Self> {
        let fits = !indices.is_empty()
            && indices.len() <= schema.k
            && indices.iter().all(|&i| (1..=schema.n).contains(&i))
            && indices.windows(2).all(|w| w[1] >= w[0] + schema.b);
        fits.then_some(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

fn check_order(m: &impl LowerTriangular, schema: &ParticipationSchema) -> Result<()> {
    if m.order() != schema.n {
        return Err(SensitivityError::OrderMismatch {
            matrix: m.order(),
            schema: schema.n,
        });
    }
    Ok(())
}

/// `|| sum_{j in pattern} M[:, j] ||_2` with one-based pattern indices.
pub fn column_sum_norm<M: LowerTriangular + ?Sized>(m: &M, pattern: &ParticipationPattern) -> f64 {
    let n = m.order();
    let mut acc = vec![0.0; n];
    for &j in pattern.indices() {
        for (i, a) in acc.iter_mut().enumerate().skip(j - 1) {
            *a += m.entry(i, j - 1);
        }
    }
    l2_norm(&acc)
}

/// Leftmost-pattern value, with no check that it is the supremum.
pub fn leftmost_column_sum_norm<M: LowerTriangular + ?Sized>(
    m: &M,
    schema: &ParticipationSchema,
) -> Result<f64> {
    if m.order() != schema.n {
        return Err(SensitivityError::OrderMismatch {
            matrix: m.order(),
            schema: schema.n,
        });
    }
    Ok(column_sum_norm(m, &schema.leftmost_pattern()))
}

/// Sensitivity of an LTT strategy with non-negative non-increasing first
/// column: the norm of the sum of the leftmost b-separated k columns.
pub fn sens_min_sep(c: &LttMatrix, schema: &ParticipationSchema) -> Result<f64> {
    check_order(c, schema)?;
    if !c.is_monotone_nonnegative() {
        return Err(SensitivityError::NotMonotone);
    }
    let col = c.first_col();
    let n = schema.n;
    let mut acc = vec![0.0; n];
    for j in 0..schema.k {
        let start = j * schema.b;
        for (i, a) in acc.iter_mut().enumerate().skip(start) {
            *a += col[i - start];
        }
    }
    Ok(l2_norm(&acc))
}

/// Exact finite-`n` closed form of `sens_{k,b}(C_lambda)`.
///
/// Rows of the leftmost column sum split into blocks of `b`; block `q` holds
/// `lambda^r (1 - lambda^{b(q+1)}) / (1 - lambda^b)`. Full blocks, a truncated
/// last block (when `n < kb`) and the geometric tail after the last
/// participation (when `n > kb`) are summed separately. For `n = kb` this is
/// `(1 - l^{2b}) / ((1 - l^2)(1 - l^b)^2) * sum_{j=1..k} (1 - l^{bj})^2`.
pub fn sens_c_lambda_closed(n: usize, k: usize, b: usize, lambda: f64) -> Result<f64> {
    let schema = ParticipationSchema::new(n, k, b)?;
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok((schema.k as f64).sqrt());
    }
    let bf = b as f64;
    let full = (n / b).min(k);
    let mut blocks: f64 = (1..=full)
        .map(|j| one_minus_pow(lambda, bf * j as f64).powi(2))
        .sum();
    blocks *= one_minus_pow(lambda, 2.0 * bf);
    if full < k {
        let rows = (n - full * b) as f64;
        blocks += one_minus_pow(lambda, 2.0 * rows)
            * one_minus_pow(lambda, bf * (full + 1) as f64).powi(2);
    } else if n > k * b {
        let tail = (n - k * b) as f64;
        blocks += lambda.powf(2.0 * bf)
            * one_minus_pow(lambda, 2.0 * tail)
            * one_minus_pow(lambda, bf * k as f64).powi(2);
    }
    let denom = one_minus_pow(lambda, 2.0) * one_minus_pow(lambda, bf).powi(2);
    Ok((blocks / denom).sqrt())
}

/// The full-block expression alone, which equals `sens_{k,b}(C_lambda)` exactly
/// when `n = k b` and ignores truncation or tail rows otherwise.
pub fn sens_c_lambda_full_blocks(k: usize, b: usize, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok((k as f64).sqrt());
    }
    let bf = b as f64;
    let sum: f64 = (1..=k)
        .map(|j| one_minus_pow(lambda, bf * j as f64).powi(2))
        .sum();
    let factor = one_minus_pow(lambda, 2.0 * bf)
        / (one_minus_pow(lambda, 2.0) * one_minus_pow(lambda, bf).powi(2));
    Ok((factor * sum).sqrt())
}

/// Sensitivity of the column-normalized strategy `C_lambda D^{-1}`, i.e. the
/// norm of the sum of its leftmost b-separated k columns.
pub fn sens_normalized(n: usize, k: usize, b: usize, lambda: f64) -> Result<f64> {
    let schema = ParticipationSchema::new(n, k, b)?;
    check_lambda(lambda)?;
    let d = ColumnNorms::c_lambda_closed(n, lambda);
    let d = d.as_slice();
    let mut acc = vec![0.0; n];
    for j in 0..schema.k {
        let start = j * b;
        let inv = 1.0 / d[start];
        let mut p = 1.0;
        for a in acc.iter_mut().skip(start) {
            *a += p * inv;
            p *= lambda;
        }
    }
    Ok(l2_norm(&acc))
}

/// Exact sensitivity of a non-negative diagonal strategy: the best
/// b-separated choice of at most `k` squared diagonal entries.
pub fn sens_diagonal(diag: &[f64], schema: &ParticipationSchema) -> Result<f64> {
    if diag.len() != schema.n {
        return Err(SensitivityError::OrderMismatch {
            matrix: diag.len(),
            schema: schema.n,
        });
    }
    if diag.iter().any(|&v| v < 0.0) {
        return Err(SensitivityError::NegativeEntries);
    }
    let (n, k, b) = (schema.n, schema.k, schema.b);
    // best[i][s]: max weight using at most s indices from i..n.
    // Row i depends on rows i+1 and i+b, so b+1 rows are kept.
    let width = b + 1;
    let mut rows = vec![vec![0.0f64; k + 1]; width];
    for i in (0..n).rev() {
        let w = diag[i] * diag[i];
        let mut cur = vec![0.0; k + 1];
        for s in 1..=k {
            let skip = if i + 1 < n { rows[(i + 1) % width][s] } else { 0.0 };
            let take = w + if i + b < n { rows[(i + b) % width][s - 1] } else { 0.0 };
            cur[s] = skip.max(take);
        }
        rows[i % width] = cur;
    }
    Ok(rows[0][k].sqrt())
}

/// Result of exhaustive pattern enumeration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceSens {
    pub sens: f64,
    pub argmax: ParticipationPattern,
    pub patterns_checked: u64,
}

fn count_patterns(n: usize, k: usize, b: usize) -> u128 {
    // cnt[i][s]: sets of size exactly s within i..n whose first element is >= i.
    let width = b + 1;
    let mut rows = vec![vec![0u128; k + 1]; width];
    for i in (0..n).rev() {
        let mut cur = vec![0u128; k + 1];
        cur[0] = 1;
        for s in 1..=k {
            let skip = if i + 1 < n { rows[(i + 1) % width][s] } else { 0 };
            let take = if i + b < n {
                rows[(i + b) % width][s - 1]
            } else {
                u128::from(s == 1)
            };
            cur[s] = skip.saturating_add(take);
        }
        rows[i % width] = cur;
    }
    rows[0][1..].iter().fold(0u128, |a, &c| a.saturating_add(c))
}

struct Enumerator<'a> {
    gram: &'a [Vec<f64>],
    n: usize,
    b: usize,
    kmax: usize,
    stack: Vec<usize>,
    visited: u64,
    // per exact size: (value, discovery index, pattern)
    best: Vec<Option<(f64, u64, Vec<usize>)>>,
}

impl Enumerator<'_> {
    fn visit(&mut self, start: usize, value: f64) {
        for j in start..self.n {
            let cross: f64 = self.stack.iter().map(|&i| self.gram[i][j]).sum();
            let v = value + self.gram[j][j] + 2.0 * cross;
            self.stack.push(j);
            let order = self.visited;
            self.visited += 1;
            let size = self.stack.len();
            let slot = &mut self.best[size - 1];
            if slot.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                *slot = Some((v, order, self.stack.clone()));
            }
            if size < self.kmax {
                self.visit(j + self.b, v);
            }
            self.stack.pop();
        }
    }
}

/// Exhaustive maximum of `|| sum_{i in pi} M[:, i] ||` over b-separated patterns
/// of size at most `k` (requires a non-negative matrix). Patterns are visited
/// in lexicographic order and ties keep the first pattern found.
pub fn sens_bruteforce<M: LowerTriangular + ?Sized>(
    m: &M,
    schema: &ParticipationSchema,
) -> Result<BruteForceSens> {
    sens_bruteforce_with_budget(m, schema, DEFAULT_ENUMERATION_BUDGET)
}

pub fn sens_bruteforce_with_budget<M: LowerTriangular + ?Sized>(
    m: &M,
    schema: &ParticipationSchema,
    budget: u64,
) -> Result<BruteForceSens> {
    let mut profile = bruteforce_profile(m, schema, budget)?;
    Ok(profile.pop().expect("k >= 1"))
}

/// Brute-force sensitivity for every participation cap `1..=schema.k` from a
/// single enumeration; entry `k - 1` equals `sens_bruteforce` for cap `k`.
pub fn bruteforce_profile<M: LowerTriangular + ?Sized>(
    m: &M,
    schema: &ParticipationSchema,
    budget: u64,
) -> Result<Vec<BruteForceSens>> {
    if m.order() != schema.n {
        return Err(SensitivityError::OrderMismatch {
            matrix: m.order(),
            schema: schema.n,
        });
    }
    let count = schema.pattern_count();
    if count > u128::from(budget) {
        return Err(SensitivityError::BudgetExceeded { count, budget });
    }
    if m.min_entry() < 0.0 {
        return Err(SensitivityError::NegativeEntries);
    }
    let n = schema.n;
    let columns: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            if i != j && schema.k == 1 {
                continue;
            }
            // Columns i <= j overlap only in rows >= j.
            let g: f64 = (j..n).map(|r| columns[i][r] * columns[j][r]).sum();
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let mut e = Enumerator {
        gram: &gram,
        n,
        b: schema.b,
        kmax: schema.k,
        stack: Vec::with_capacity(schema.k),
        visited: 0,
        best: vec![None; schema.k],
    };
    e.visit(0, 0.0);
    let visited = e.visited;

    let mut out = Vec::with_capacity(schema.k);
    let mut running: Option<(f64, u64, Vec<usize>)> = None;
    for slot in e.best {
        if let Some((v, order, pat)) = slot {
            let better = match &running {
                None => true,
                Some((rv, ro, _)) => v > *rv || (v == *rv && order < *ro),
            };
            if better {
                running = Some((v, order, pat));
            }
        }
        let (v, _, pat) = running.clone().expect("size-1 patterns always exist");
        out.push(BruteForceSens {
            sens: v.max(0.0).sqrt(),
            argmax: ParticipationPattern {
                indices: pat.iter().map(|i| i + 1).collect(),
            },
            patterns_checked: visited,
        });
    }
    Ok(out)
}

/// Sensitivity of a strategy using the cheapest route known to be exact for it:
/// the leftmost-pattern formula for monotone non-negative LTT matrices, the
/// interval program for diagonal matrices, enumeration otherwise.
pub fn sens_auto(m: &TriMatrix, schema: &ParticipationSchema) -> Result<f64> {
    match m {
        TriMatrix::Toeplitz(c) if c.is_monotone_nonnegative() => sens_min_sep(c, schema),
        TriMatrix::Dense(d) if d.is_diagonal() => sens_diagonal(&d.diag(), schema),
        other => Ok(sens_bruteforce(other, schema)?.sens),
    }
}

/// Column-normalized `C_lambda D^{-1}` as a dense matrix.
pub fn normalized_c_lambda(n: usize, lambda: f64) -> Result<LowerTriMatrix> {
    let c = crate::matrix::make_c_lambda(n, lambda)?;
    Ok(crate::matrix::normalize_columns(&c)?)
}
