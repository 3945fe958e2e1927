//! Small numeric helpers shared across modules.

use statrs::distribution::{Beta, ContinuousCDF, Normal};

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Quantile of Beta(a, b).
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    Beta::new(a, b)
        .expect("beta shape parameters must be positive")
        .inverse_cdf(p)
}

/// Binomial Monte Carlo standard error `sqrt(r (1 - r) / reps)`.
pub fn binomial_se(rate: f64, reps: usize) -> f64 {
    (rate * (1.0 - rate) / reps as f64).sqrt()
}

/// 1-based rank of the conservative upper `1 - alpha` order statistic among
/// `n` sorted values: `ceil(n (1 - alpha))`, clamped to `1..=n`.
pub fn upper_quantile_rank(n: usize, alpha: f64) -> usize {
    let target = n as f64 * (1.0 - alpha);
    // absorb representation error such as 100 * 0.95 = 95.00000000000001
    let rank = (target - 1e-9 * target.abs().max(1.0)).ceil() as usize;
    rank.clamp(1, n)
}

/// Two-sample Kolmogorov–Smirnov distance. Both slices are sorted in place.
pub fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "ks_distance on empty sample");
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_match_tables() {
        assert!((normal_quantile(0.975) - 1.959_963_985).abs() < 1e-8);
        assert!((normal_cdf(1.959_963_985) - 0.975).abs() < 1e-9);
        // Beta(1, 1) is uniform
        assert!((beta_quantile(0.3, 1.0, 1.0) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn upper_rank_convention() {
        assert_eq!(upper_quantile_rank(100, 0.05), 95);
        assert_eq!(upper_quantile_rank(101, 0.05), 96);
        assert_eq!(upper_quantile_rank(10, 0.999), 1);
        assert_eq!(upper_quantile_rank(20, 0.05), 19);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = vec![3.0, 1.0, 2.0];
        assert_eq!(ks_distance(&mut a, &mut b), 0.0);
        let mut c = vec![10.0, 11.0];
        assert_eq!(ks_distance(&mut a, &mut c), 1.0);
        let mut d = vec![1.5, 2.5, 3.5, 4.5];
        // brute force over all jump points
        let mut best: f64 = 0.0;
        for &t in [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.5].iter() {
            let fa = a.iter().filter(|&&x| x <= t).count() as f64 / 3.0;
            let fd = d.iter().filter(|&&x| x <= t).count() as f64 / 4.0;
            best = best.max((fa - fd).abs());
        }
        assert!((ks_distance(&mut a, &mut d) - best).abs() < 1e-15);
    }
}
