//! Exact masking probabilities for rank-based selection, by quadrature.
//!
//! A token with base draw `u` is masked iff fewer than `m` other tokens
//! score higher. Conditioned on `u`, the number of higher-scoring salient
//! and non-salient tokens are independent binomials, so each probability
//! is a one-dimensional integral over `u`.

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n + 1];
    pmf[0] = 1.0;
    for k in 0..n {
        for j in (0..=k + 1).rev() {
            let stay = if j <= k { pmf[j] * (1.0 - p) } else { 0.0 };
            let step = if j > 0 { pmf[j - 1] * p } else { 0.0 };
            pmf[j] = stay + step;
        }
    }
    pmf
}

fn at_most(a: &[f64], b: &[f64], limit: usize) -> f64 {
    let mut total = 0.0;
    for (i, pa) in a.iter().enumerate().take(limit + 1) {
        total += pa * b.iter().take(limit + 1 - i).sum::<f64>();
    }
    total
}

fn simpson(f: impl Fn(f64) -> f64, steps: usize) -> f64 {
    let h = 1.0 / steps as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..steps {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `(P(masked | salient), P(masked | non-salient))` for `n` tokens of which
/// `s` are salient, `m` masked, increment `phi`.
pub fn masking_probabilities(n: usize, s: usize, m: usize, phi: f64) -> (f64, f64) {
    let steps = 20_000;
    let salient = simpson(
        |u| {
            let x = binomial_pmf(s - 1, 1.0 - u);
            let y = binomial_pmf(n - s, (1.0 - u - phi).max(0.0));
            at_most(&x, &y, m - 1)
        },
        steps,
    );
    let other = simpson(
        |u| {
            let x = binomial_pmf(s, (1.0 - u + phi).min(1.0));
            let y = binomial_pmf(n - s - 1, 1.0 - u);
            at_most(&x, &y, m - 1)
        },
        steps,
    );
    (salient, other)
}
