//! RMSE and MaxSE of prefix-sum factorizations `A = B C`, the lambda search,
//! and the full-batch bounds.
//!
//! Reports omit the dimension, clipping norm and noise multiplier; those enter
//! only through [`crate::calibration`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{
    b_factor, check_lambda, frobenius_norm, ltt_multiply, make_c_lambda, prefix_sum_matrix,
    row_max_norm, tri_product, ColumnNorms, LowerTriMatrix, LowerTriangular, MatrixError,
    TriMatrix,
};
use crate::numeric::{compensated_sum, rel_diff};
use crate::sensitivity::{
    leftmost_column_sum_norm, sens_auto, sens_c_lambda_closed, sens_normalized,
    ParticipationSchema, SensitivityError,
};

/// Default number of uniform grid points for the lambda search.
pub const DEFAULT_GRID: usize = 512;

const FACTORIZATION_TOL: f64 = 1e-10;

/// Relative improvement a refined point must show over the grid winner;
/// smaller gains are rounding noise on flat objectives.
const REFINE_MARGIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("left * strategy differs from the prefix-sum matrix at ({row}, {col}): {value}")]
    NotAFactorization { row: usize, col: usize, value: f64 },
    #[error("grid resolution must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("sigma table must be non-empty, sorted by lambda and positive")]
    InvalidSigmaTable,
    #[error("n must be at least 1")]
    EmptyHorizon,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// How a factorization's sensitivity is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensRule {
    /// Leftmost pattern for monotone LTT strategies, interval DP for diagonal
    /// ones, enumeration otherwise.
    Auto,
    /// Leftmost b-separated pattern, known to be the maximizer for the strategy.
    Leftmost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorization {
    pub strategy: TriMatrix,
    pub left: TriMatrix,
    pub label: String,
    pub sens_rule: SensRule,
}

impl Factorization {
    /// Builds a factorization after checking `left * strategy == A`.
    pub fn new(
        strategy: TriMatrix,
        left: TriMatrix,
        label: impl Into<String>,
        sens_rule: SensRule,
    ) -> Result<Self> {
        let f = Self {
            strategy,
            left,
            label: label.into(),
            sens_rule,
        };
        f.check()?;
        Ok(f)
    }

    /// Strategy `C` with `B = A C^{-1}`.
    pub fn from_strategy(
        strategy: TriMatrix,
        label: impl Into<String>,
        sens_rule: SensRule,
    ) -> Result<Self> {
        let left = b_factor(&strategy)?;
        Ok(Self {
            strategy,
            left,
            label: label.into(),
            sens_rule,
        })
    }

    pub fn dp_sgd(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(MetricsError::EmptyHorizon);
        }
        Ok(Self {
            strategy: crate::matrix::LttMatrix::identity(n).into(),
            left: prefix_sum_matrix(n).into(),
            label: "dp-sgd".into(),
            sens_rule: SensRule::Auto,
        })
    }

    pub fn lambda(n: usize, lambda: f64) -> Result<Self> {
        Self::from_strategy(make_c_lambda(n, lambda)?.into(), "lambda", SensRule::Auto)
    }

    /// `C_lambda D^{-1}` with unit-norm columns, `B = A D C_lambda^{-1}`.
    pub fn lambda_normalized(n: usize, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if n == 0 {
            return Err(MetricsError::EmptyHorizon);
        }
        let d = ColumnNorms::c_lambda_closed(n, lambda).into_vec();
        let strategy = LowerTriMatrix::from_fn(n, |i, j| lambda.powi((i - j) as i32) / d[j]);
        let left = LowerTriMatrix::from_fn(n, |i, j| {
            if i == j {
                d[j]
            } else {
                d[j] - lambda * d[j + 1]
            }
        });
        Ok(Self {
            strategy: strategy.into(),
            left: left.into(),
            label: "lambda-normalized".into(),
            sens_rule: SensRule::Leftmost,
        })
    }

    /// `C = diag((n - j + 1)^{1/4})`, `j = 1..n`.
    pub fn diagonal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(MetricsError::EmptyHorizon);
        }
        let c: Vec<f64> = (0..n).map(|j| ((n - j) as f64).powf(0.25)).collect();
        let left = LowerTriMatrix::from_fn(n, |_, j| 1.0 / c[j]);
        Ok(Self {
            strategy: LowerTriMatrix::diagonal(&c)?.into(),
            left: left.into(),
            label: "diag-quarter".into(),
            sens_rule: SensRule::Auto,
        })
    }

    pub fn n(&self) -> usize {
        self.strategy.order()
    }

    /// Verifies `left * strategy == A` entrywise to relative tolerance 1e-10.
    pub fn check(&self) -> Result<()> {
        let n = self.strategy.order();
        if self.left.order() != n {
            return Err(MatrixError::DimensionMismatch {
                left: self.left.order(),
                right: n,
            }
            .into());
        }
        let product = match (&self.left, &self.strategy) {
            (TriMatrix::Toeplitz(l), TriMatrix::Toeplitz(s)) => ltt_multiply(l, s)?.to_lower_tri(),
            (l, s) => tri_product(l, s)?,
        };
        for i in 0..n {
            for (j, &v) in product.row_slice(i).iter().enumerate() {
                if rel_diff(v, 1.0) > FACTORIZATION_TOL {
                    return Err(MetricsError::NotAFactorization {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn sensitivity(&self, schema: &ParticipationSchema) -> Result<f64> {
        Ok(match self.sens_rule {
            SensRule::Auto => sens_auto(&self.strategy, schema)?,
            SensRule::Leftmost => leftmost_column_sum_norm(&self.strategy, schema)?,
        })
    }
}

/// `diagonal_strategy(n)` under its conventional name.
pub fn diagonal_strategy(n: usize) -> Result<Factorization> {
    Factorization::diagonal(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub maxse: f64,
    pub sens: f64,
    pub frob_over_sqrt_n: f64,
    pub rowmax: f64,
}

impl MetricReport {
    fn from_parts(frob_over_sqrt_n: f64, rowmax: f64, sens: f64) -> Self {
        Self {
            rmse: frob_over_sqrt_n * sens,
            maxse: rowmax * sens,
            sens,
            frob_over_sqrt_n,
            rowmax,
        }
    }
}

/// Dense evaluation of both error metrics.
pub fn evaluate(f: &Factorization, schema: &ParticipationSchema) -> Result<MetricReport> {
    let sens = f.sensitivity(schema)?;
    let n = f.n() as f64;
    Ok(MetricReport::from_parts(
        frobenius_norm(&f.left) / n.sqrt(),
        row_max_norm(&f.left),
        sens,
    ))
}

/// `||B_lambda||_F / sqrt(n)` and `||B_lambda||_{2->inf}` for `C_lambda`.
fn lambda_left_norms(n: usize, lambda: f64) -> (f64, f64) {
    let nf = n as f64;
    let g = (1.0 - lambda) * (1.0 - lambda);
    let frob2 = g * nf * (nf - 1.0) / 2.0 + nf;
    ((frob2 / nf).sqrt(), (1.0 + g * (nf - 1.0)).sqrt())
}

pub fn lambda_report(n: usize, k: usize, b: usize, lambda: f64) -> Result<MetricReport> {
    let sens = sens_c_lambda_closed(n, k, b, lambda)?;
    let (f, r) = lambda_left_norms(n, lambda);
    Ok(MetricReport::from_parts(f, r, sens))
}

pub fn rmse_lambda_closed(n: usize, k: usize, b: usize, lambda: f64) -> Result<f64> {
    Ok(lambda_report(n, k, b, lambda)?.rmse)
}

pub fn maxse_lambda_closed(n: usize, k: usize, b: usize, lambda: f64) -> Result<f64> {
    Ok(lambda_report(n, k, b, lambda)?.maxse)
}

/// O(nk) report for the column-normalized strategy. The left factor has
/// `d_j` on the diagonal and `d_j - lambda d_{j+1}` below it in column `j`.
pub fn normalized_report(n: usize, k: usize, b: usize, lambda: f64) -> Result<MetricReport> {
    let sens = sens_normalized(n, k, b, lambda)?;
    let d = ColumnNorms::c_lambda_closed(n, lambda).into_vec();
    let off: Vec<f64> = (0..n.saturating_sub(1))
        .map(|j| (d[j] - lambda * d[j + 1]).powi(2))
        .collect();
    let frob2 = compensated_sum(
        (0..n).map(|j| d[j] * d[j] + if j + 1 < n { (n - 1 - j) as f64 * off[j] } else { 0.0 }),
    );
    let mut rowmax2 = 0.0f64;
    let mut prefix = 0.0;
    for i in 0..n {
        rowmax2 = rowmax2.max(prefix + d[i] * d[i]);
        if i + 1 < n {
            prefix += off[i];
        }
    }
    Ok(MetricReport::from_parts(
        (frob2 / n as f64).sqrt(),
        rowmax2.sqrt(),
        sens,
    ))
}

/// RMSE of the column-normalized strategy divided by that of `C_lambda`.
pub fn normalized_rmse_ratio(n: usize, k: usize, b: usize, lambda: f64) -> Result<f64> {
    Ok(normalized_report(n, k, b, lambda)?.rmse / rmse_lambda_closed(n, k, b, lambda)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullBatchBounds {
    pub trivial: f64,
    pub diagonal: f64,
    pub lower: f64,
}

/// Full-batch (`b = 1`, `k = n`) RMSE of the trivial and diagonal
/// factorizations and the lower bound over all factorizations.
pub fn full_batch_bounds(n: usize) -> Result<FullBatchBounds> {
    if n == 0 {
        return Err(MetricsError::EmptyHorizon);
    }
    let nf = n as f64;
    Ok(FullBatchBounds {
        trivial: (nf * (nf + 1.0) / 2.0).sqrt(),
        diagonal: compensated_sum((1..=n).map(|j| (j as f64).sqrt())) / nf.sqrt(),
        lower: ((nf + 1.0) * (2.0 * nf + 1.0) / 6.0).sqrt(),
    })
}

/// Strategy family searched by [`optimize_lambda`] and [`sweep_lambda`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Lambda,
    Normalized,
}

impl Family {
    pub fn report(&self, schema: &ParticipationSchema, lambda: f64) -> Result<MetricReport> {
        let (n, k, b) = (schema.n(), schema.k(), schema.b());
        match self {
            Family::Lambda => lambda_report(n, k, b, lambda),
            Family::Normalized => normalized_report(n, k, b, lambda),
        }
    }
}

/// Noise multiplier as a function of lambda, linearly interpolated between
/// supplied points and held constant outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaTable {
    points: Vec<(f64, f64)>,
}

impl SigmaTable {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let sorted = points.windows(2).all(|w| w[0].0 < w[1].0);
        let valid = points
            .iter()
            .all(|&(l, s)| l.is_finite() && s.is_finite() && s > 0.0);
        if points.is_empty() || !sorted || !valid {
            return Err(MetricsError::InvalidSigmaTable);
        }
        Ok(Self { points })
    }

    pub fn sigma(&self, lambda: f64) -> f64 {
        let p = &self.points;
        let idx = p.partition_point(|&(l, _)| l <= lambda);
        if idx == 0 {
            return p[0].1;
        }
        if idx == p.len() {
            return p[p.len() - 1].1;
        }
        let (l0, s0) = p[idx - 1];
        let (l1, s1) = p[idx];
        s0 + (s1 - s0) * (lambda - l0) / (l1 - l0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Rmse,
    MaxSe,
    /// `||B||_F / sqrt(n) * sigma(lambda)` with an externally computed,
    /// already amplified multiplier.
    AmplifiedRmse { sigma: SigmaTable },
}

impl Objective {
    pub fn value(
        &self,
        family: Family,
        schema: &ParticipationSchema,
        lambda: f64,
    ) -> Result<f64> {
        let r = family.report(schema, lambda)?;
        Ok(match self {
            Objective::Rmse => r.rmse,
            Objective::MaxSe => r.maxse,
            Objective::AmplifiedRmse { sigma } => r.frob_over_sqrt_n * sigma.sigma(lambda),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub grid_lambda: f64,
    pub grid_value: f64,
    pub lambda: f64,
    pub value: f64,
    pub points: usize,
}

/// `{t / (m - 1)} ∩ [0, 1 - 1/m]`, plus `extra` points in that range, sorted.
pub fn lambda_grid(m: usize, extra: &[f64]) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(MetricsError::GridTooSmall(m));
    }
    let top = 1.0 - 1.0 / m as f64;
    let mut grid: Vec<f64> = (0..m)
        .map(|t| t as f64 / (m - 1) as f64)
        .filter(|&l| l <= top)
        .collect();
    grid.extend(extra.iter().copied().filter(|&l| (0.0..=top).contains(&l)));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Index of the smallest value, first occurrence on ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn golden_section(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> Option<f64>) -> Option<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    for _ in 0..200 {
        if hi - lo < 1e-12 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Some(if f1 <= f2 { (x1, f1) } else { (x2, f2) })
}

/// Grid search with smallest-lambda tie-break, then golden-section refinement
/// inside the winning cell, kept only when it improves beyond rounding noise.
pub fn optimize_lambda(
    objective: &Objective,
    family: Family,
    schema: &ParticipationSchema,
    m: usize,
    extra: &[f64],
) -> Result<LambdaSearch> {
    let grid = lambda_grid(m, extra)?;
    let values = grid
        .par_iter()
        .map(|&l| objective.value(family, schema, l))
        .collect::<Result<Vec<f64>>>()?;
    let i = argmin(&values);
    let (grid_lambda, grid_value) = (grid[i], values[i]);
    let lo = if i > 0 { grid[i - 1] } else { grid[0] };
    let hi = grid.get(i + 1).copied().unwrap_or(grid[i]);
    let (mut lambda, mut value) = (grid_lambda, grid_value);
    if hi > lo {
        if let Some((l, v)) =
            golden_section(lo, hi, |l| objective.value(family, schema, l).ok())
        {
            if v < value * (1.0 - REFINE_MARGIN) {
                lambda = l;
                value = v;
            }
        }
    }
    Ok(LambdaSearch {
        grid_lambda,
        grid_value,
        lambda,
        value,
        points: grid.len(),
    })
}

/// The two candidate lambdas used in the MaxSE upper-bound argument.
pub fn bound_test_points(schema: &ParticipationSchema) -> [f64; 2] {
    [
        (-1.0 / schema.b() as f64).exp(),
        (-1.0 / (schema.n() as f64).sqrt()).exp(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub optimized: f64,
    pub lambda: f64,
    /// `optimized / (k + sqrt(k) n^{1/4})`.
    pub bound_constant: f64,
    /// MaxSE of the trivial factorization, `sqrt(n k)`.
    pub dp_sgd: f64,
}

pub fn maxse_bound_check(schema: &ParticipationSchema, m: usize) -> Result<BoundCheck> {
    let search = optimize_lambda(
        &Objective::MaxSe,
        Family::Lambda,
        schema,
        m,
        &bound_test_points(schema),
    )?;
    let (n, k) = (schema.n() as f64, schema.k() as f64);
    Ok(BoundCheck {
        optimized: search.value,
        lambda: search.lambda,
        bound_constant: search.value / (k + k.sqrt() * n.powf(0.25)),
        dp_sgd: (n * k).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub b: usize,
    pub lambda: f64,
    pub rmse: f64,
    pub maxse: f64,
    pub sens: f64,
}

/// One row per grid point, in increasing lambda.
pub fn sweep_lambda(
    family: Family,
    schema: &ParticipationSchema,
    m: usize,
) -> Result<Vec<SweepRow>> {
    lambda_grid(m, &[])?
        .par_iter()
        .map(|&lambda| {
            let r = family.report(schema, lambda)?;
            Ok(SweepRow {
                n: schema.n(),
                k: schema.k(),
                b: schema.b(),
                lambda,
                rmse: r.rmse,
                maxse: r.maxse,
                sens: r.sens,
            })
        })
        .collect()
}
