//! Small numerical helpers shared across modules.

/// Compensated (Neumaier) summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Euclidean norm with compensated accumulation of squares.
pub fn l2_norm(values: &[f64]) -> f64 {
    compensated_sum(values.iter().map(|v| v * v)).sqrt()
}

/// `1 - x^m` for `x` in `[0, 1)`, accurate when `x^m` is close to one.
pub(crate) fn one_minus_pow(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        return if m == 0.0 { 0.0 } else { 1.0 };
    }
    -(m * x.ln()).exp_m1()
}

/// Relative difference `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut v = vec![1.0e16];
        v.extend(std::iter::repeat_n(1.0, 1000));
        v.push(-1.0e16);
        assert_eq!(compensated_sum(v), 1000.0);
    }

    #[test]
    fn one_minus_pow_matches_naive_away_from_one() {
        for &(x, m) in &[(0.5, 3.0), (0.9, 10.0), (0.1, 1.0)] {
            let naive = 1.0 - f64::powf(x, m);
            assert!(rel_diff(one_minus_pow(x, m), naive) < 1e-14);
        }
        assert_eq!(one_minus_pow(0.0, 4.0), 1.0);
    }
}
