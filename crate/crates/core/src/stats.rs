//! Statistics used by the verification harnesses.

use crate::par::map_blocks;
use crate::stream::RngStream;
use rand::seq::SliceRandom;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::gamma_ur;

/// `log Σ exp(x_k)`; `-∞` for an empty or all-`-∞` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Wilson score interval for `hits` successes in `trials`.
pub fn wilson_interval(hits: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// `log P(χ²_dof ≥ x)`.
pub fn chi_square_log_sf(dof: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let q = gamma_ur(dof / 2.0, x / 2.0);
    if q > 0.0 {
        q.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log P(χ²_dof ≤ x)`.
pub fn chi_square_log_cdf(dof: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    ChiSquared::new(dof).map(|d| d.cdf(x).ln()).unwrap_or(f64::NAN)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against `cdf`.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (k, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - k as f64 / n).max((k + 1) as f64 / n - f);
    }
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d),
    }
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Two-sample energy-distance test with a permutation p-value.
///
/// `a` and `b` hold one observation per row, `dim` values each.
pub fn energy_test(a: &[f64], b: &[f64], dim: usize, permutations: usize, stream: &RngStream) -> EnergyTest {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let n = na + nb;
    let point = |k: usize| if k < na { &a[k * dim..(k + 1) * dim] } else { &b[(k - na) * dim..(k - na + 1) * dim] };
    // packed lower triangle of pairwise distances
    let rows: Vec<Vec<f64>> = map_blocks(n, 64, &RngStream::new(0), |range, _| {
        range
            .map(|i| {
                (0..i)
                    .map(|j| {
                        point(i)
                            .iter()
                            .zip(point(j))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let statistic_for = |labels: &[bool]| {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for (j, &d) in rows[i].iter().enumerate() {
                match (labels[i], labels[j]) {
                    (true, true) => aa += d,
                    (false, false) => bb += d,
                    _ => ab += d,
                }
            }
        }
        let (fa, fb) = (na as f64, nb as f64);
        let e = 2.0 * ab / (fa * fb) - 2.0 * aa / (fa * fa) - 2.0 * bb / (fb * fb);
        fa * fb / (fa + fb) * e
    };
    let labels: Vec<bool> = (0..n).map(|k| k < na).collect();
    let observed = statistic_for(&labels);
    let exceed: usize = map_blocks(permutations, 1, stream, |_, s| {
        let mut rng = s.rng();
        let mut perm = labels.clone();
        perm.shuffle(&mut rng);
        usize::from(statistic_for(&perm) >= observed)
    })
    .into_iter()
    .sum();
    EnergyTest {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn lse_is_stable() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[0.0; 8]), 8f64.ln());
    }

    #[test]
    fn wilson_brackets_the_estimate() {
        let (lo, hi) = wilson_interval(50, 100, Z99);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
        let (lo, hi) = wilson_interval(0, 1000, Z99);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.01);
    }

    #[test]
    fn chi_square_tails() {
        // P(χ²_2 ≥ x) = exp(-x/2)
        assert!((chi_square_log_sf(2.0, 3.0) + 1.5).abs() < 1e-12);
        assert!((chi_square_log_cdf(2.0, 3.0) - (1.0 - (-1.5f64).exp()).ln()).abs() < 1e-12);
        // deep tail stays finite
        assert!(chi_square_log_sf(200.0, 600.0).is_finite());
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shifted() {
        let mut rng = RngStream::new(1).rng();
        let xs: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(ks_test(&xs, normal_cdf).p_value > 0.01);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.3).collect();
        assert!(ks_test(&shifted, normal_cdf).p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // classical critical values: P(K > 1.358) ≈ 0.05, P(K > 1.628) ≈ 0.01
        assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.628) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn energy_test_detects_difference() {
        let mut rng = RngStream::new(2).rng();
        let mut draw = |n: usize, shift: f64| -> Vec<f64> {
            (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect()
        };
        let a = draw(200, 0.0);
        let b = draw(200, 0.0);
        let c = draw(200, 0.5);
        let s = RngStream::new(3);
        assert!(energy_test(&a, &b, 2, 199, &s).p_value > 0.01);
        assert!(energy_test(&a, &c, 2, 199, &s).p_value <= 0.01);
    }
}
