//! Numerically stable scalar helpers shared across modules.

/// Logistic sigmoid, stable for large `|z|`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` computed as `-log1p(exp(-|z|)) - max(-z, 0)`.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -(-z.abs()).exp().ln_1p() - (-z).max(0.0)
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax; returns the log normalizer that was subtracted.
pub fn log_softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x -= lse;
    }
    lse
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error between an analytic and a numeric gradient block.
///
/// Components are compared relative to `max(|a|, |n|, floor)`, so entries
/// whose magnitude is below `floor` are effectively held to an absolute
/// tolerance of `tol * floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for &z in &[-20.0f64, -3.0, -0.5, 0.0, 0.7, 4.0, 25.0] {
            let naive = (1.0 / (1.0 + (-z).exp())).ln();
            assert!((log_sigmoid(z) - naive).abs() < 1e-14, "z = {z}");
        }
    }

    #[test]
    fn log_sigmoid_extremes_are_finite() {
        assert_eq!(log_sigmoid(800.0), 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &z in &[-8.0, -1.0, 0.0, 2.5] {
            assert!((logit(sigmoid(z)) - z).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut v = vec![1.0, 2.0, 3.0, -1000.0];
        log_softmax_in_place(&mut v);
        let total: f64 = v.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }
}
