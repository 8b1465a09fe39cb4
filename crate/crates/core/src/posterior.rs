//! Gaussian likelihood, the posterior potential `Ψ(K|y)` and importance
//! summaries of the posterior over the output covariance.

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::gauss::{Mat, PsdMatrix};
use crate::kernel::simulate_chain;
use crate::par::map_blocks;
use crate::stats::log_sum_exp;
use crate::stream::RngStream;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Targets `y` for `C` output channels, flattened channel-major: entry
/// `(c, i, μ)` sits at `(c·N + i)·P + μ`, so each channel block uses the
/// `(site, input)` layout of [`PsdMatrix`].
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    y: Vec<f64>,
    channels: usize,
    dim: usize,
    beta: f64,
}

impl Observations {
    pub fn new(y: Vec<f64>, channels: usize, dim: usize, beta: f64) -> Result<Self> {
        if channels == 0 || dim == 0 || y.len() != channels * dim {
            return Err(Error::Dimension(format!(
                "{} observations for {channels} channels of dimension {dim}",
                y.len()
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise precision must be positive, got {beta}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("observations must be finite".into()));
        }
        Ok(Self { y, channels, dim, beta })
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `D_{L+1}`, the length of one channel block.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn block(&self, c: usize) -> &[f64] {
        &self.y[c * self.dim..(c + 1) * self.dim]
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.y.clone(), self.channels, self.dim, beta)
    }
}

/// `(D̄/2) log(β/2π) − (β/2) ‖s − y‖²`.
pub fn log_likelihood(y: &Observations, s: &[f64]) -> Result<f64> {
    if s.len() != y.y.len() {
        return Err(Error::Dimension(format!("output of length {} against {} observations", s.len(), y.y.len())));
    }
    let n = s.len() as f64;
    let rss: f64 = s.iter().zip(&y.y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * n * (y.beta / (2.0 * std::f64::consts::PI)).ln() - 0.5 * y.beta * rss)
}

/// `Ψ = β Σ_c y_cᵀ (I + βK)⁻¹ y_c + C · logdet(I + βK)`, from one Cholesky
/// factorization of `I + βK`.
pub fn psi(k: &PsdMatrix, y: &Observations) -> Result<f64> {
    let d = y.dim;
    if k.dim() != d {
        return Err(Error::Dimension(format!("kernel of size {0}x{0} against blocks of length {d}", k.dim())));
    }
    let a = Mat::identity(d, d) + k.matrix() * y.beta;
    let chol = nalgebra::Cholesky::new(a).expect("I + βK is positive definite for PSD K");
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut quad = 0.0;
    for c in 0..y.channels {
        let yc = DVector::from_column_slice(y.block(c));
        quad += yc.dot(&chol.solve(&yc));
    }
    let value = y.beta * quad + y.channels as f64 * logdet;
    // both terms are nonnegative up to rounding
    let slack = 1e-12 * (1.0 + y.beta * quad.abs() + y.channels as f64 * logdet.abs());
    assert!(value >= -slack, "Ψ = {value} is negative");
    Ok(value.max(0.0))
}

/// `w_k ∝ exp(−Ψ(K_k|y)/2)`, normalized.
pub fn posterior_weights(ks: &[PsdMatrix], y: &Observations) -> Result<Vec<f64>> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("posterior weights need at least one sample".into()));
    }
    let logs: Vec<f64> = ks
        .par_iter()
        .map(|k| psi(k, y).map(|p| -0.5 * p))
        .collect::<Result<_>>()?;
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    pub value: f64,
    /// `1 / Σ w_k²`.
    pub ess: f64,
}

pub fn posterior_expectation(
    statistic: impl Fn(&PsdMatrix) -> f64,
    ks: &[PsdMatrix],
    weights: &[f64],
) -> Result<PosteriorEstimate> {
    if ks.len() != weights.len() || ks.is_empty() {
        return Err(Error::Dimension(format!("{} samples against {} weights", ks.len(), weights.len())));
    }
    let value = ks.iter().zip(weights).map(|(k, w)| w * statistic(k)).sum();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(PosteriorEstimate { value, ess })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LazinessRow {
    pub n: usize,
    pub samples: usize,
    pub prior: f64,
    pub posterior: f64,
    /// `(1/n) |log Q̂_n(B|y) − log Q̂_n(B)|`.
    pub ratio: f64,
    /// Largest `Ψ` over the samples that fall in `B`.
    pub psi_max: f64,
}

/// Prior and posterior mass of `B` under the empirical law of
/// `K^{(L+1,n)}`, for each `n`. Sample `r` at scale `n` draws from
/// `stream.split(n).split(r)`.
pub fn laziness(
    spec: &ArchSpec,
    k1: &PsdMatrix,
    y: &Observations,
    in_b: impl Fn(&PsdMatrix) -> bool + Sync,
    ns: &[usize],
    samples: usize,
    stream: &RngStream,
) -> Result<Vec<LazinessRow>> {
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let sn = stream.split(n as u64);
        let ks: Vec<PsdMatrix> = map_blocks(samples, 256, &sn, |range, _| {
            range
                .map(|r| simulate_chain(spec, k1, n, &sn.split(r as u64)).map(|c| c.last().clone()))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
        let w = posterior_weights(&ks, y)?;
        let (mut prior, mut post, mut psi_max) = (0usize, 0.0, 0.0f64);
        for (k, wk) in ks.iter().zip(&w) {
            if in_b(k) {
                prior += 1;
                post += wk;
                psi_max = psi_max.max(psi(k, y)?);
            }
        }
        let prior = prior as f64 / samples as f64;
        rows.push(LazinessRow {
            n,
            samples,
            prior,
            posterior: post,
            ratio: (post.ln() - prior.ln()).abs() / n as f64,
            psi_max,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Activation;
    use crate::gauss::tests::random_psd;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, Continuous};

    fn obs(y: Vec<f64>, c: usize, beta: f64) -> Observations {
        let d = y.len() / c;
        Observations::new(y, c, d, beta).unwrap()
    }

    #[test]
    fn likelihood_examples() {
        let y = obs(vec![1.0, 2.0, 3.0], 1, 2.0);
        assert_relative_eq!(log_likelihood(&y, &[1.0, 2.0, 3.0]).unwrap(), 1.5 * (1.0 / std::f64::consts::PI).ln());
        let y = obs(vec![0.0], 1, 1.0);
        assert_relative_eq!(
            log_likelihood(&y, &[2.0]).unwrap(),
            -0.5 * (2.0 * std::f64::consts::PI).ln() - 2.0,
            epsilon = 1e-15
        );
        assert!(log_likelihood(&y, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn likelihood_is_additive_over_inputs() {
        let y = obs(vec![0.5, -1.0, 2.0, 0.0], 1, 0.7);
        let s = [1.0, 1.0, 1.0, 1.0];
        let whole = log_likelihood(&y, &s).unwrap();
        let parts: f64 = (0..4)
            .map(|k| log_likelihood(&obs(vec![y.values()[k]], 1, 0.7), &s[k..k + 1]).unwrap())
            .sum();
        assert_relative_eq!(whole, parts, epsilon = 1e-12);
    }

    #[test]
    fn psi_examples() {
        let y = obs(vec![2.0], 1, 1.0);
        assert!((psi(&PsdMatrix::scalar(1.0).unwrap(), &y).unwrap() - (2.0 + 2f64.ln())).abs() < 1e-12);
        let y = obs(vec![1.0, -2.0], 1, 0.5);
        assert_relative_eq!(psi(&PsdMatrix::zeros(2, 1), &y).unwrap(), 0.5 * 5.0, epsilon = 1e-15);
    }

    #[test]
    fn psi_kronecker_block_identity() {
        let k = PsdMatrix::new(random_psd(1, 3, 3), 1).unwrap();
        let yc = vec![0.3, -1.0, 2.0];
        let one = psi(&k, &obs(yc.clone(), 1, 1.3)).unwrap();
        let two = psi(&k, &obs([yc.clone(), yc].concat(), 2, 1.3)).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-10);
    }

    #[test]
    fn psi_matches_dense_kronecker_formula() {
        let k = PsdMatrix::new(random_psd(2, 3, 2), 1).unwrap();
        let y = obs(vec![0.1, 0.2, -0.3, 1.0, 0.0, -1.0], 2, 0.8);
        let big = Mat::identity(6, 6) + Mat::identity(2, 2).kronecker(k.matrix()) * 0.8;
        let yv = DVector::from_column_slice(y.values());
        let dense = 0.8 * yv.dot(&(big.clone().try_inverse().unwrap() * &yv)) + big.determinant().ln();
        assert_relative_eq!(psi(&k, &y).unwrap(), dense, epsilon = 1e-10);
    }

    #[test]
    fn psi_vanishes_with_beta() {
        let k = PsdMatrix::new(random_psd(3, 2, 2), 1).unwrap();
        let y = obs(vec![1.0, 1.0], 1, 1e-12);
        assert!(psi(&k, &y).unwrap() < 1e-10);
    }

    #[test]
    fn weights_behave() {
        let y = obs(vec![2.0], 1, 1.0);
        let same = vec![PsdMatrix::scalar(1.0).unwrap(); 5];
        let w = posterior_weights(&same, &y).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let ks: Vec<_> = [0.1, 1.0, 4.0, 20.0].iter().map(|&q| PsdMatrix::scalar(q).unwrap()).collect();
        let w = posterior_weights(&ks, &y).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for a in 0..4 {
            for b in 0..4 {
                if psi(&ks[a], &y).unwrap() < psi(&ks[b], &y).unwrap() {
                    assert!(w[a] > w[b]);
                }
            }
        }
        assert!(posterior_weights(&[], &y).is_err());
    }

    #[test]
    fn expectation_basics() {
        let ks: Vec<_> = [0.5, 1.0, 2.0].iter().map(|&q| PsdMatrix::scalar(q).unwrap()).collect();
        let w = posterior_weights(&ks, &obs(vec![1.0], 1, 1.0)).unwrap();
        assert_eq!(posterior_expectation(|_| 3.5, &ks, &w).unwrap().value, 3.5);
        let u = vec![1.0 / 3.0; 3];
        let e = posterior_expectation(|k| k.matrix()[(0, 0)], &ks, &u).unwrap();
        assert_relative_eq!(e.value, 3.5 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(e.ess, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn expectation_matches_quadrature() {
        // scalar identity network: K = χ²_n / n, reweighted by exp(−Ψ/2)
        let spec = crate::kernel::tests::fcnn(1, 1, Activation::Identity);
        let n = 20;
        let y = obs(vec![1.5], 1, 2.0);
        let one = PsdMatrix::scalar(1.0).unwrap();
        let s = RngStream::new(5);
        let ks: Vec<PsdMatrix> = (0..100_000)
            .map(|r| simulate_chain(&spec, &one, n, &s.split(r)).unwrap().last().clone())
            .collect();
        let w = posterior_weights(&ks, &y).unwrap();
        let est = posterior_expectation(|k| k.matrix()[(0, 0)], &ks, &w).unwrap();

        let chi = ChiSquared::new(n as f64).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        let h = 1e-4;
        for j in 1..100_000 {
            let k = j as f64 * h;
            let dens = n as f64 * chi.pdf(n as f64 * k) * (-0.5 * psi(&PsdMatrix::scalar(k).unwrap(), &y).unwrap()).exp();
            num += k * dens;
            den += dens;
        }
        let exact = num / den;
        assert!((est.value - exact).abs() <= 0.01 * exact, "{} vs {exact}", est.value);
        assert!(est.ess > 50_000.0);
    }

    #[test]
    fn laziness_ratio_decays() {
        let spec = crate::kernel::tests::fcnn(1, 1, Activation::Identity);
        let one = PsdMatrix::scalar(1.0).unwrap();
        let y = obs(vec![2.0], 1, 1.0);
        let rows = laziness(&spec, &one, &y, |k| k.matrix()[(0, 0)] >= 1.0, &[64, 256, 1024], 2000, &RngStream::new(6)).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].ratio < w[0].ratio, "{rows:?}");
        }
        for r in &rows {
            assert!(r.ratio <= 5.0 / r.n as f64 * r.psi_max, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn psi_is_nonnegative(seed in 0u64..10_000, rank in 0usize..4, beta in 1e-3f64..10.0) {
            let k = PsdMatrix::new(random_psd(seed, 3, rank), 1).unwrap();
            let y = obs(vec![(seed % 7) as f64 - 3.0, 0.5, -1.0], 1, beta);
            prop_assert!(psi(&k, &y).unwrap() >= 0.0);
        }
    }
}
