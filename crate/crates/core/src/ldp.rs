//! Large-deviation engine.
//!
//! The layer rate `I_ℓ(Q₂|Q₁) = sup_{Q₀} tr(Q₀Q₂) − log M_ℓ(Q₀|Q₁)` is a
//! concave maximization over symmetric tilts. We fix an importance sample of
//! `z`, evaluate the objective and its gradient with self-normalized weights,
//! and take damped Newton steps inside a trust region that only grows while
//! the MGF stays finite. Whether the MGF is finite is decided by an
//! asymptotic ray probe, not by the sample.
//!
//! Tilts are stored as the upper triangle `θ` of `Q₀`. Internally the
//! optimizer works with `η_k = c_k θ_k` (`c_k = 2` off the diagonal) so that
//! `tr(Q₀ G) = η · f(G)` with `f` the plain upper triangle.

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::gauss::{generalized_q_norm, sqrt_matrix, sym_eigen, Mat, PsdMatrix};
use crate::kernel::{limit_kernel_mc, mirror_upper, simulate_chain, tri_len, GramMap, LimitOptions};
use crate::par::{map_blocks, DEFAULT_BLOCK};
use crate::stats::{log_sum_exp, wilson_interval, Z99};
use crate::stream::RngStream;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A log-scale value that may be `+∞`. Arithmetic saturates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogValue {
    Finite(f64),
    Infinite,
}

impl LogValue {
    pub fn is_finite(self) -> bool {
        matches!(self, LogValue::Finite(_))
    }

    /// As a float, with `+∞` for the flag.
    pub fn value(self) -> f64 {
        match self {
            LogValue::Finite(v) => v,
            LogValue::Infinite => f64::INFINITY,
        }
    }

    /// Multiplication by a nonnegative factor; `0 · ∞ = ∞` on purpose.
    pub fn scale(self, k: f64) -> LogValue {
        debug_assert!(k >= 0.0);
        match self {
            LogValue::Finite(a) => LogValue::Finite(k * a),
            LogValue::Infinite => LogValue::Infinite,
        }
    }
}

impl std::ops::Add for LogValue {
    type Output = LogValue;

    fn add(self, other: LogValue) -> LogValue {
        match (self, other) {
            (LogValue::Finite(a), LogValue::Finite(b)) => LogValue::Finite(a + b),
            _ => LogValue::Infinite,
        }
    }
}

/// Symmetric tilt `Q₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltMatrix(Mat);

impl TiltMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!("tilt must be square, got {}x{}", m.nrows(), m.ncols())));
        }
        Ok(Self((&m + m.transpose()) * 0.5))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(Mat::zeros(dim, dim))
    }

    pub fn scalar(t: f64) -> Self {
        Self(Mat::from_element(1, 1, t))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    fn to_eta(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(tri_len(d));
        for a in 0..d {
            for b in a..d {
                out.push(if a == b { self.0[(a, b)] } else { 2.0 * self.0[(a, b)] });
            }
        }
        out
    }

    fn from_eta(eta: &[f64], dim: usize) -> Self {
        let mut m = Mat::zeros(dim, dim);
        let mut k = 0;
        for a in 0..dim {
            for b in a..dim {
                m[(a, b)] = if a == b { eta[k] } else { 0.5 * eta[k] };
                k += 1;
            }
        }
        mirror_upper(&mut m);
        Self(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MgfEstimate {
    pub log_value: LogValue,
    /// Standard error of the log estimate (delta method).
    pub standard_error: f64,
    pub samples: usize,
    /// Share of the total held by the largest 0.1% of summands.
    pub tail_mass: f64,
}

/// Summands above this share of the total mark the estimate as divergent.
pub const TAIL_MASS_LIMIT: f64 = 0.5;
/// Radius at which the asymptotic ray probe evaluates `G`.
const PROBE_RADIUS: f64 = 1e4;
const PROBE_STARTS: usize = 64;
const PROBE_REFINE: usize = 4;
/// Proposal: `(1 − ε) N(m, SPREAD·Σ) + ε N(0, I)`.
const DEFENSIVE: f64 = 0.1;
const SPREAD: f64 = 1.1;
const MGF_STAGES: usize = 4;
const REDUCE_CHUNK: usize = 4096;

/// `√Q₁` and the Gram map of one layer, plus the ray probe.
struct TiltProblem {
    gram: GramMap,
    root: Mat,
    d_in: usize,
    d_out: usize,
    p: usize,
    probe_dirs: Vec<DVector<f64>>,
}

impl TiltProblem {
    fn new(spec: &ArchSpec, layer: usize, q1: &PsdMatrix, probe: &RngStream) -> Result<Self> {
        let gram = GramMap::new(spec, layer)?;
        if q1.dim() != gram.in_dim() {
            return Err(Error::Dimension(format!(
                "layer {layer} expects Q₁ of size {0}x{0}, got {1}x{1}",
                gram.in_dim(),
                q1.dim()
            )));
        }
        let root = sqrt_matrix(q1.matrix())?;
        let (d_in, d_out) = (gram.in_dim(), gram.out_dim());
        let mut rng = probe.rng();
        let probe_dirs = (0..PROBE_STARTS)
            .map(|_| {
                let v = DVector::from_fn(d_in, |_, _| rng.sample::<f64, _>(StandardNormal));
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    DVector::from_element(d_in, 1.0 / (d_in as f64).sqrt())
                }
            })
            .collect();
        Ok(Self {
            gram,
            root,
            d_in,
            d_out,
            p: tri_len(d_out),
            probe_dirs,
        })
    }

    fn features(&self, z: &DVector<f64>, out: &mut [f64], buf: &mut [f64]) {
        let x = &self.root * z;
        self.gram.features_into(x.as_slice(), out, buf);
    }

    fn buf(&self) -> Vec<f64> {
        vec![0.0; self.d_out * self.gram.mask_size()]
    }

    /// `tr(Q₀ G(√Q₁ R u)) / R²` on the unit sphere.
    fn ray(&self, eta: &[f64], u: &DVector<f64>, f: &mut [f64], buf: &mut [f64]) -> f64 {
        let n = u.norm();
        let z = u * (PROBE_RADIUS / n);
        self.features(&z, f, buf);
        dot(eta, f) / (PROBE_RADIUS * PROBE_RADIUS)
    }

    /// Largest asymptotic quadratic growth coefficient of the exponent.
    /// The MGF diverges when it reaches ½.
    fn growth(&self, eta: &[f64]) -> f64 {
        if eta.iter().all(|&v| v == 0.0) {
            return 0.0;
        }
        let mut f = vec![0.0; self.p];
        let mut buf = self.buf();
        let mut scored: Vec<(f64, usize)> = self
            .probe_dirs
            .iter()
            .enumerate()
            .flat_map(|(k, u)| {
                let a = self.ray(eta, u, &mut f, &mut buf);
                let b = self.ray(eta, &-u, &mut f, &mut buf);
                [(a, 2 * k), (b, 2 * k + 1)]
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut best = scored[0].0;
        for &(_, idx) in scored.iter().take(PROBE_REFINE) {
            let u0 = if idx % 2 == 0 { self.probe_dirs[idx / 2].clone() } else { -&self.probe_dirs[idx / 2] };
            best = best.max(self.refine(eta, u0, &mut f, &mut buf));
            if best >= 0.5 {
                break;
            }
        }
        best
    }

    /// Projected finite-difference ascent on the sphere.
    fn refine(&self, eta: &[f64], mut u: DVector<f64>, f: &mut [f64], buf: &mut [f64]) -> f64 {
        let mut val = self.ray(eta, &u, f, buf);
        let mut step = 0.5;
        let h = 1e-6;
        for _ in 0..60 {
            let mut g = DVector::zeros(self.d_in);
            for i in 0..self.d_in {
                let mut up = u.clone();
                up[i] += h;
                let mut dn = u.clone();
                dn[i] -= h;
                g[i] = (self.ray(eta, &up, f, buf) - self.ray(eta, &dn, f, buf)) / (2.0 * h);
            }
            // tangential component only
            let radial = g.dot(&u);
            g -= &u * radial;
            let gn = g.norm();
            if gn < 1e-12 {
                break;
            }
            let mut improved = false;
            while step > 1e-8 {
                let cand = &u + &g * (step / gn);
                let cand = &cand / cand.norm();
                let cv = self.ray(eta, &cand, f, buf);
                if cv > val {
                    u = cand;
                    val = cv;
                    step *= 1.5;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved || val >= 0.5 {
                break;
            }
        }
        val
    }

    fn finite(&self, eta: &[f64]) -> bool {
        self.growth(eta) < 0.5
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖Q₀‖_F` from `η`.
fn eta_frobenius(eta: &[f64], dim: usize) -> f64 {
    let mut s = 0.0;
    let mut k = 0;
    for a in 0..dim {
        for b in a..dim {
            s += if a == b { eta[k] * eta[k] } else { 0.5 * eta[k] * eta[k] };
            k += 1;
        }
    }
    s.sqrt()
}

/// `‖R‖_F` of a symmetric matrix from its upper triangle.
fn tri_frobenius(r: &[f64], dim: usize) -> f64 {
    let mut s = 0.0;
    let mut k = 0;
    for a in 0..dim {
        for b in a..dim {
            s += if a == b { r[k] * r[k] } else { 2.0 * r[k] * r[k] };
            k += 1;
        }
    }
    s.sqrt()
}

fn upper(m: &Mat) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(tri_len(d));
    for a in 0..d {
        for b in a..d {
            out.push(m[(a, b)]);
        }
    }
    out
}

#[derive(Clone, Debug)]
enum Proposal {
    Base,
    Mixture {
        mean: DVector<f64>,
        chol: Mat,
        chol_inv: Mat,
        half_log_det: f64,
    },
}

impl Proposal {
    /// Moment-matched to the weighted sample, inflated by [`SPREAD`].
    fn fit(sample: &TiltSample, weights: &[f64]) -> Proposal {
        let d = sample.d_in;
        let mut mean = DVector::zeros(d);
        for (k, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                for i in 0..d {
                    mean[i] += w * sample.z[k * d + i];
                }
            }
        }
        let mut cov = Mat::zeros(d, d);
        let mut diff = vec![0.0; d];
        for (k, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                for i in 0..d {
                    diff[i] = sample.z[k * d + i] - mean[i];
                }
                for i in 0..d {
                    for j in i..d {
                        cov[(i, j)] += w * diff[i] * diff[j];
                    }
                }
            }
        }
        mirror_upper(&mut cov);
        let (vals, vecs) = sym_eigen(&(cov * SPREAD));
        let floored = vals.map(|v| v.max(1e-2));
        let cov = &vecs * Mat::from_diagonal(&floored) * vecs.transpose();
        let chol = match nalgebra::Cholesky::new((&cov + cov.transpose()) * 0.5) {
            Some(c) => c.l(),
            None => return Proposal::Base,
        };
        let chol_inv = chol
            .clone()
            .solve_lower_triangular(&Mat::identity(d, d))
            .expect("Cholesky factor has a positive diagonal");
        let half_log_det = chol.diagonal().iter().map(|v| v.ln()).sum();
        Proposal::Mixture {
            mean,
            chol,
            chol_inv,
            half_log_det,
        }
    }

    /// Draws `z` and returns `log φ(z) − log q(z)`.
    fn draw(&self, rng: &mut impl Rng, z: &mut DVector<f64>) -> f64 {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        match self {
            Proposal::Base => 0.0,
            Proposal::Mixture {
                mean,
                chol,
                chol_inv,
                half_log_det,
            } => {
                let u: f64 = rng.random();
                if u >= DEFENSIVE {
                    *z = mean + chol * &*z;
                }
                let log_phi = -0.5 * z.norm_squared();
                let w = chol_inv * (&*z - mean);
                let log_n = -0.5 * w.norm_squared() - half_log_det;
                let log_q = log_sum_exp(&[(1.0 - DEFENSIVE).ln() + log_n, DEFENSIVE.ln() + log_phi]);
                log_phi - log_q
            }
        }
    }
}

/// Draws from a proposal together with their features and log density ratios.
struct TiltSample {
    d_in: usize,
    p: usize,
    z: Vec<f64>,
    f: Vec<f64>,
    log_rho: Vec<f64>,
}

impl TiltSample {
    fn draw(problem: &TiltProblem, proposal: &Proposal, count: usize, stream: &RngStream) -> Self {
        let (d_in, p) = (problem.d_in, problem.p);
        let parts = map_blocks(count, DEFAULT_BLOCK, stream, |range, s| {
            let mut rng = s.rng();
            let n = range.len();
            let mut zs = Vec::with_capacity(n * d_in);
            let mut fs = vec![0.0; n * p];
            let mut lr = Vec::with_capacity(n);
            let mut z = DVector::zeros(d_in);
            let mut buf = problem.buf();
            for k in 0..n {
                lr.push(proposal.draw(&mut rng, &mut z));
                zs.extend_from_slice(z.as_slice());
                problem.features(&z, &mut fs[k * p..(k + 1) * p], &mut buf);
            }
            (zs, fs, lr)
        });
        let mut out = Self {
            d_in,
            p,
            z: Vec::with_capacity(count * d_in),
            f: Vec::with_capacity(count * p),
            log_rho: Vec::with_capacity(count),
        };
        for (zs, fs, lr) in parts {
            out.z.extend(zs);
            out.f.extend(fs);
            out.log_rho.extend(lr);
        }
        out
    }

    fn len(&self) -> usize {
        self.log_rho.len()
    }

    fn feature(&self, k: usize) -> &[f64] {
        &self.f[k * self.p..(k + 1) * self.p]
    }

    /// `log ρ_k + η·f_k` for every draw.
    fn exponents(&self, eta: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .with_min_len(REDUCE_CHUNK)
            .map(|k| self.log_rho[k] + dot(eta, self.feature(k)))
            .collect()
    }

    /// `log M̂(η)`, the log of the plain importance-sampling mean.
    fn log_mgf(&self, eta: &[f64]) -> f64 {
        log_sum_exp(&self.exponents(eta)) - (self.len() as f64).ln()
    }
}

struct Evaluation {
    objective: f64,
    residual: Vec<f64>,
    weights: Vec<f64>,
    ess: f64,
}

fn evaluate(sample: &TiltSample, eta: &[f64], target: &[f64]) -> Evaluation {
    let l = sample.exponents(eta);
    let lse = log_sum_exp(&l);
    let weights: Vec<f64> = l.par_iter().with_min_len(REDUCE_CHUNK).map(|v| (v - lse).exp()).collect();
    // fixed chunks reduced in order, so the result does not depend on threads
    let partial: Vec<Vec<f64>> = weights
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(c, ws)| {
            let mut m = vec![0.0; sample.p];
            for (j, &w) in ws.iter().enumerate() {
                if w > 0.0 {
                    for (mi, f) in m.iter_mut().zip(sample.feature(c * REDUCE_CHUNK + j)) {
                        *mi += w * f;
                    }
                }
            }
            m
        })
        .collect();
    let mut mean = vec![0.0; sample.p];
    for m in &partial {
        for (a, b) in mean.iter_mut().zip(m) {
            *a += b;
        }
    }
    let residual: Vec<f64> = target.iter().zip(&mean).map(|(t, m)| t - m).collect();
    let ess = 1.0 / (weights.iter().map(|w| w * w).sum::<f64>() * sample.len() as f64);
    Evaluation {
        objective: dot(eta, target) - (lse - (sample.len() as f64).ln()),
        residual,
        weights,
        ess,
    }
}

/// Solves `Cov_w(f) d = r` on a strided subsample; falls back to `d = r`.
fn newton_direction(sample: &TiltSample, ev: &Evaluation, hessian_samples: usize) -> Vec<f64> {
    let p = sample.p;
    let stride = sample.len().div_ceil(hessian_samples.max(1)).max(1);
    let idx: Vec<usize> = (0..sample.len()).step_by(stride).collect();
    let total: f64 = idx.iter().map(|&k| ev.weights[k]).sum();
    let (idx, total) = if total > 1e-3 { (idx, total) } else { ((0..sample.len()).collect(), 1.0) };
    let mut mean = vec![0.0; p];
    for &k in &idx {
        let w = ev.weights[k] / total;
        for (m, f) in mean.iter_mut().zip(sample.feature(k)) {
            *m += w * f;
        }
    }
    let mut cov = Mat::zeros(p, p);
    let mut diff = vec![0.0; p];
    for &k in &idx {
        let w = ev.weights[k] / total;
        if w == 0.0 {
            continue;
        }
        for (d, (f, m)) in diff.iter_mut().zip(sample.feature(k).iter().zip(&mean)) {
            *d = f - m;
        }
        for a in 0..p {
            let wa = w * diff[a];
            for b in a..p {
                cov[(a, b)] += wa * diff[b];
            }
        }
    }
    mirror_upper(&mut cov);
    let ridge = 1e-9 * (cov.trace() / p as f64) + 1e-300;
    for a in 0..p {
        cov[(a, a)] += ridge;
    }
    match nalgebra::Cholesky::new(cov) {
        Some(c) => c.solve(&DVector::from_column_slice(&ev.residual)).as_slice().to_vec(),
        None => ev.residual.clone(),
    }
}

/// Monte Carlo estimate of `log E exp(tr(Q₀ G^{(ℓ)}(√Q₁ z)))`.
///
/// Returns the `+∞` flag when the ray probe finds quadratic growth of at
/// least ½, when the largest 0.1% of summands carry half the total, or when
/// an exponent overflows. The sampler adapts a Gaussian mixture proposal to
/// the tilted law over a few stages; the last stage gives the estimate.
pub fn log_mgf(
    spec: &ArchSpec,
    layer: usize,
    q0: &TiltMatrix,
    q1: &PsdMatrix,
    samples: usize,
    stream: &RngStream,
) -> Result<MgfEstimate> {
    let problem = TiltProblem::new(spec, layer, q1, &stream.split_named("probe"))?;
    if q0.dim() != problem.d_out {
        return Err(Error::Dimension(format!(
            "layer {layer} tilts are {0}x{0}, got {1}x{1}",
            problem.d_out,
            q0.dim()
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one Monte Carlo sample".into()));
    }
    let infinite = |tail_mass| MgfEstimate {
        log_value: LogValue::Infinite,
        standard_error: f64::INFINITY,
        samples,
        tail_mass,
    };
    let eta = q0.to_eta();
    if eta.iter().all(|&v| v == 0.0) {
        return Ok(MgfEstimate {
            log_value: LogValue::Finite(0.0),
            standard_error: 0.0,
            samples,
            tail_mass: 0.0,
        });
    }
    if !problem.finite(&eta) {
        return Ok(infinite(1.0));
    }
    let mut proposal = Proposal::Base;
    let mut stage = 0;
    let (sample, l) = loop {
        let sample = TiltSample::draw(&problem, &proposal, samples, &stream.split(stage as u64));
        let l = sample.exponents(&eta);
        if l.iter().any(|v| !v.is_finite()) {
            return Ok(infinite(1.0));
        }
        let lse = log_sum_exp(&l);
        let weights: Vec<f64> = l.iter().map(|v| (v - lse).exp()).collect();
        let ess = 1.0 / (weights.iter().map(|w| w * w).sum::<f64>() * samples as f64);
        let good = if stage == 0 { ess >= 0.9 } else { ess >= 0.5 };
        if good || stage + 1 == MGF_STAGES {
            break (sample, l);
        }
        proposal = Proposal::fit(&sample, &weights);
        stage += 1;
    };
    let lse = log_sum_exp(&l);
    let lmax = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut v: Vec<f64> = l.iter().map(|x| (x - lmax).exp()).collect();
    let n = sample.len() as f64;
    let total: f64 = v.iter().sum();
    let mean = total / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    v.sort_by(|a, b| b.total_cmp(a));
    let top = (samples as f64 * 1e-3).ceil() as usize;
    let tail_mass = v[..top].iter().sum::<f64>() / total;
    if tail_mass >= TAIL_MASS_LIMIT {
        return Ok(infinite(tail_mass));
    }
    Ok(MgfEstimate {
        log_value: LogValue::Finite(lse - n.ln()),
        standard_error: (var / n).sqrt() / mean,
        samples,
        tail_mass,
    })
}

/// Radius `1/(2Â‖Q₁‖₂)` of a ball of tilts with finite MGF, where `Â` is
/// 1.5× the largest sampled `‖G(z)‖_F / (1 + ‖z‖²)`.
///
/// `z` runs over random directions on radii `10^{-1}..10^4`, independent of
/// `Q₁`, so rescaling `Q₁` rescales the radius exactly. Returns `+∞` when
/// `Q₁ = 0` or `G` vanishes.
pub fn safe_tilt_radius(
    spec: &ArchSpec,
    layer: usize,
    q1: &PsdMatrix,
    probe_samples: usize,
    stream: &RngStream,
) -> Result<f64> {
    let gram = GramMap::new(spec, layer)?;
    if q1.dim() != gram.in_dim() {
        return Err(Error::Dimension(format!(
            "layer {layer} expects Q₁ of size {0}x{0}, got {1}x{1}",
            gram.in_dim(),
            q1.dim()
        )));
    }
    let d = gram.in_dim();
    let parts = map_blocks(probe_samples, DEFAULT_BLOCK, stream, |range, s| {
        let mut rng = s.rng();
        let mut best = 0.0f64;
        for k in range {
            let mut z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = z.norm();
            if n == 0.0 {
                continue;
            }
            let r = 10f64.powf(-1.0 + 5.0 * (k % 16) as f64 / 15.0);
            z *= r / n;
            let g = gram.eval(z.as_slice());
            best = best.max(g.norm() / (1.0 + r * r));
        }
        best
    });
    let a_hat = 1.5 * parts.into_iter().fold(0.0f64, f64::max);
    let qn = q1.spectral_norm();
    if a_hat == 0.0 || qn == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / (2.0 * a_hat * qn))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateOptions {
    pub samples: usize,
    /// Stop when `‖Q₂ − E_tilt G‖_F` falls below `tol · max(1, ‖Q₂‖_F)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Importance samples drawn at most this many times.
    pub max_stages: usize,
    /// Redraw when the effective sample fraction falls below this.
    pub ess_refresh: f64,
    pub probe_samples: usize,
    /// Subsample size for the Newton Hessian.
    pub hessian_samples: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            tol: 1e-7,
            max_iter: 200,
            max_stages: 6,
            ess_refresh: 0.1,
            probe_samples: 4096,
            hessian_samples: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateResult {
    /// `I ≥ 0`; a lower bound when `domain_limited`.
    pub value: f64,
    pub tilt: TiltMatrix,
    pub iterations: usize,
    pub grad_norm: f64,
    pub domain_limited: bool,
    pub converged: bool,
    /// Importance samples drawn.
    pub stages: usize,
    /// Effective sample fraction at the optimum.
    pub ess: f64,
    pub samples: usize,
    pub trust_radius: f64,
}

/// `I_ℓ(Q₂|Q₁)`.
pub fn rate_layer(
    spec: &ArchSpec,
    layer: usize,
    q2: &PsdMatrix,
    q1: &PsdMatrix,
    opts: &RateOptions,
    stream: &RngStream,
) -> Result<RateResult> {
    let problem = TiltProblem::new(spec, layer, q1, &stream.split_named("probe"))?;
    if q2.dim() != problem.d_out {
        return Err(Error::Dimension(format!(
            "layer {layer} rate expects Q₂ of size {0}x{0}, got {1}x{1}",
            problem.d_out,
            q2.dim()
        )));
    }
    if opts.samples < 2 {
        return Err(Error::InvalidArgument("need at least two Monte Carlo samples".into()));
    }
    let dim = problem.d_out;
    let target = upper(q2.matrix());
    let tol = opts.tol * q2.matrix().norm().max(1.0);
    let safe = safe_tilt_radius(spec, layer, q1, opts.probe_samples, &stream.split_named("radius"))?;
    let mut radius = if safe.is_finite() { 0.9 * safe } else { 1.0 };

    let mut eta = vec![0.0; problem.p];
    let mut centre = eta.clone();
    let mut stage = 0usize;
    let mut sample = TiltSample::draw(&problem, &Proposal::Base, opts.samples, &stream.split(0));
    let mut iterations = 0;
    let mut at_boundary = false;
    let mut converged = false;

    let ev = loop {
        let ev = evaluate(&sample, &eta, &target);
        let gnorm = tri_frobenius(&ev.residual, dim);
        let norm = eta_frobenius(&eta, dim);
        let moved: Vec<f64> = eta.iter().zip(&centre).map(|(a, b)| a - b).collect();
        let fresh = eta_frobenius(&moved, dim) <= 0.1 * norm + 1e-3;
        let refresh = ev.ess < opts.ess_refresh || (gnorm < tol && !fresh);
        if refresh && stage + 1 < opts.max_stages {
            let proposal = Proposal::fit(&sample, &ev.weights);
            stage += 1;
            centre = eta.clone();
            sample = TiltSample::draw(&problem, &proposal, opts.samples, &stream.split(stage as u64));
            continue;
        }
        if gnorm < tol {
            converged = true;
            break ev;
        }
        if iterations >= opts.max_iter {
            break ev;
        }
        iterations += 1;

        let d = newton_direction(&sample, &ev, opts.hessian_samples);
        let slope_ref: f64 = dot(&ev.residual, &d);
        let d = if slope_ref > 0.0 { d } else { ev.residual.clone() };
        // Newton decrement below the resolution of the objective
        if 0.5 * dot(&ev.residual, &d) < 1e-13 * (1.0 + ev.objective.abs()) {
            converged = true;
            break ev;
        }
        let mut s = 1.0;
        let mut accepted = None;
        while s > 1e-12 {
            let raw: Vec<f64> = eta.iter().zip(&d).map(|(e, di)| e + s * di).collect();
            let rn = eta_frobenius(&raw, dim);
            let (cand, clipped) = if rn > radius {
                (raw.iter().map(|v| v * radius / rn).collect::<Vec<_>>(), true)
            } else {
                (raw, false)
            };
            if problem.finite(&cand) {
                let obj = dot(&cand, &target) - sample.log_mgf(&cand);
                let step: Vec<f64> = cand.iter().zip(&eta).map(|(c, e)| c - e).collect();
                if obj >= ev.objective + 1e-4 * dot(&ev.residual, &step) && obj > ev.objective - 1e-15 {
                    accepted = Some((cand, clipped));
                    break;
                }
            }
            s *= 0.5;
        }
        match accepted {
            Some((cand, clipped)) => {
                let stalled = cand == eta;
                eta = cand;
                if clipped {
                    match expand(&problem, &eta, radius, dim) {
                        Some(r) => radius = r,
                        None => at_boundary = true,
                    }
                }
                if stalled && !clipped {
                    break evaluate(&sample, &eta, &target);
                }
            }
            None => {
                let norm = eta_frobenius(&eta, dim);
                if norm >= radius * (1.0 - 1e-9) {
                    match expand(&problem, &eta, radius, dim) {
                        Some(r) => {
                            radius = r;
                            continue;
                        }
                        None => at_boundary = true,
                    }
                }
                break evaluate(&sample, &eta, &target);
            }
        }
    };
    let grad_norm = tri_frobenius(&ev.residual, dim);
    let on_edge = eta_frobenius(&eta, dim) >= radius * (1.0 - 1e-6);
    // Q₀ = 0 attains 0 exactly, so a nonpositive optimum is reported there
    if ev.objective <= 0.0 {
        eta.iter_mut().for_each(|v| *v = 0.0);
    }
    let value = ev.objective.max(0.0);
    Ok(RateResult {
        value,
        tilt: TiltMatrix::from_eta(&eta, dim),
        iterations,
        grad_norm,
        domain_limited: !converged && (at_boundary || on_edge),
        converged,
        stages: stage + 1,
        ess: ev.ess,
        samples: opts.samples,
        trust_radius: radius,
    })
}

/// Grows the trust region along the ray through `eta` while the MGF stays
/// finite; `None` when it cannot grow by more than 0.1%.
fn expand(problem: &TiltProblem, eta: &[f64], radius: f64, dim: usize) -> Option<f64> {
    let norm = eta_frobenius(eta, dim);
    if norm == 0.0 {
        return Some(2.0 * radius);
    }
    let at = |r: f64| eta.iter().map(|v| v * r / norm).collect::<Vec<_>>();
    let target = 2.0 * radius;
    if problem.finite(&at(target)) {
        return Some(target);
    }
    let (mut lo, mut hi) = (radius, target);
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if problem.finite(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo > radius * 1.001).then_some(lo)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainRate {
    /// `α₁I₁(Q₂|K¹) + Σ_{ℓ≥2} α_ℓ I_ℓ(Q_{ℓ+1}|Q_ℓ)`.
    pub total: f64,
    pub terms: Vec<RateResult>,
    pub domain_limited: bool,
}

/// Rate of the whole chain; `values` holds `Q₂, …, Q_{L+1}`. Layer `ℓ` uses
/// `stream.split(ℓ)`.
pub fn rate_chain(
    spec: &ArchSpec,
    values: &[PsdMatrix],
    k1: &PsdMatrix,
    opts: &RateOptions,
    stream: &RngStream,
) -> Result<ChainRate> {
    let l = spec.hidden_layers;
    if values.len() != l {
        return Err(Error::Dimension(format!("chain of L = {l} layers needs {l} kernels, got {}", values.len())));
    }
    let mut terms = Vec::with_capacity(l);
    let mut total = 0.0;
    for layer in 1..=l {
        let prev = if layer == 1 { k1 } else { &values[layer - 2] };
        let r = rate_layer(spec, layer, &values[layer - 1], prev, opts, &stream.split(layer as u64))?;
        total += spec.channel_slopes[layer - 1] * r.value;
        terms.push(r);
    }
    Ok(ChainRate {
        total,
        domain_limited: terms.iter().any(|t| t.domain_limited),
        terms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginalOptions {
    /// Initial step in the Cholesky parameters of the intermediate kernel.
    pub initial_step: f64,
    /// Grid points on each side of the current best.
    pub points: usize,
    pub shrink: f64,
    pub rounds: usize,
    /// Converged when the last round improved by less than this.
    pub tol: f64,
    /// Samples for the limit kernel that seeds the search.
    pub limit_samples: usize,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.4,
            points: 3,
            shrink: 0.4,
            rounds: 8,
            tol: 1e-4,
            limit_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalRate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Minimizing `Q₂, …, Q_L` (empty for `L = 1`).
    pub intermediates: Vec<PsdMatrix>,
    pub converged: bool,
    pub evaluations: usize,
    pub domain_limited: bool,
}

/// `I_{L+1}(Q) = inf` of the chain rate over intermediate kernels, for
/// `L ≤ 2`.
///
/// For `L = 2` the intermediate is `Q₂ = BBᵀ` with `B` lower triangular and a
/// log-parameterized diagonal; coordinate descent runs over shrinking grids
/// from the limit kernel, with the same random streams at every point.
pub fn rate_marginal(
    spec: &ArchSpec,
    q: &PsdMatrix,
    k1: &PsdMatrix,
    opts: &RateOptions,
    grid: &MarginalOptions,
    stream: &RngStream,
) -> Result<MarginalRate> {
    let l = spec.hidden_layers;
    match l {
        1 => {
            let r = rate_chain(spec, std::slice::from_ref(q), k1, opts, stream)?;
            Ok(MarginalRate {
                value: r.total,
                lower: r.total,
                upper: r.total,
                intermediates: vec![],
                converged: r.terms[0].converged,
                evaluations: 1,
                domain_limited: r.domain_limited,
            })
        }
        2 => marginal_two_layer(spec, q, k1, opts, grid, stream),
        _ => Err(Error::InvalidArgument(format!(
            "marginal rates are implemented for L ≤ 2 only, got L = {l}"
        ))),
    }
}

fn marginal_two_layer(
    spec: &ArchSpec,
    q: &PsdMatrix,
    k1: &PsdMatrix,
    opts: &RateOptions,
    grid: &MarginalOptions,
    stream: &RngStream,
) -> Result<MarginalRate> {
    let d2 = spec.dim(2);
    if q.dim() != spec.dim(3) {
        return Err(Error::Dimension(format!(
            "marginal rate expects Q of size {0}x{0}, got {1}x{1}",
            spec.dim(3),
            q.dim()
        )));
    }
    let limit = limit_kernel_mc(
        spec,
        1,
        k1,
        LimitOptions {
            samples: grid.limit_samples,
            antithetic: false,
        },
        &stream.split_named("limit"),
    )?;
    let start = limit.kernel.matrix() + Mat::identity(d2, d2) * (1e-6 * limit.kernel.spectral_norm().max(1e-12));
    let chol = nalgebra::Cholesky::new(start)
        .ok_or_else(|| Error::InvalidArgument("limit intermediate kernel is not positive definite".into()))?
        .l();
    let mut params = Vec::with_capacity(tri_len(d2));
    for a in 0..d2 {
        for b in 0..=a {
            params.push(if a == b { chol[(a, b)].ln() } else { chol[(a, b)] });
        }
    }
    let to_kernel = |x: &[f64]| -> Result<PsdMatrix> {
        let mut b = Mat::zeros(d2, d2);
        let mut k = 0;
        for a in 0..d2 {
            for c in 0..=a {
                b[(a, c)] = if a == c { x[k].exp() } else { x[k] };
                k += 1;
            }
        }
        PsdMatrix::new(&b * b.transpose(), spec.inputs)
    };
    let mut evaluations = 0;
    let mut objective = |x: &[f64]| -> Result<(f64, bool)> {
        evaluations += 1;
        let q2 = to_kernel(x)?;
        let r = rate_chain(spec, &[q2, q.clone()], k1, opts, stream)?;
        Ok((r.total, r.domain_limited))
    };
    let (mut best, mut best_limited) = objective(&params)?;
    let mut step = grid.initial_step;
    let mut last_gain = f64::INFINITY;
    for _ in 0..grid.rounds {
        let round_start = best;
        for j in 0..params.len() {
            let base = params[j];
            let mut best_here = base;
            for k in 1..=grid.points {
                for sign in [-1.0, 1.0] {
                    params[j] = base + sign * k as f64 * step;
                    let (v, lim) = objective(&params)?;
                    if v < best {
                        best = v;
                        best_limited = lim;
                        best_here = params[j];
                    }
                }
            }
            params[j] = best_here;
        }
        last_gain = round_start - best;
        step *= grid.shrink;
    }
    Ok(MarginalRate {
        value: best,
        lower: (best - last_gain).max(0.0),
        upper: best,
        intermediates: vec![to_kernel(&params)?],
        converged: last_gain < grid.tol,
        evaluations,
        domain_limited: best_limited,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputRate {
    /// `J(Q, Z)`, possibly `+∞`.
    pub value: f64,
    /// `½ Σ_c ‖Z_c‖²_Q`.
    pub norm_part: f64,
    pub marginal: MarginalRate,
}

/// `J(Q, Z) = ½ Σ_c ‖Z_c‖²_Q + I_{L+1}(Q)`; `z` holds `C_{L+1}` blocks of
/// length `D_{L+1}`.
pub fn output_rate(
    spec: &ArchSpec,
    q: &PsdMatrix,
    z: &[f64],
    k1: &PsdMatrix,
    opts: &RateOptions,
    grid: &MarginalOptions,
    stream: &RngStream,
) -> Result<OutputRate> {
    let d = q.dim();
    let c = spec.output_channels;
    if z.len() != c * d {
        return Err(Error::Dimension(format!(
            "output of {c} channels × {d} needs {} values, got {}",
            c * d,
            z.len()
        )));
    }
    let mut norm_part = 0.0;
    for block in z.chunks(d) {
        norm_part += 0.5 * generalized_q_norm(q, block)?;
    }
    let marginal = rate_marginal(spec, q, k1, opts, grid, stream)?;
    Ok(OutputRate {
        value: norm_part + marginal.value,
        norm_part,
        marginal,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Statistic {
    /// 0-based entry of `K^{(ℓ,n)}`.
    Entry { row: usize, col: usize },
    Frobenius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

/// `{statistic(K^{(layer,n)}) ≥ level}` or `≤ level`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub layer: usize,
    pub statistic: Statistic,
    pub direction: Direction,
    pub level: f64,
}

impl Event {
    pub fn contains(&self, k: &PsdMatrix) -> bool {
        let v = match self.statistic {
            Statistic::Entry { row, col } => k.matrix()[(row, col)],
            Statistic::Frobenius => k.matrix().norm(),
        };
        match self.direction {
            Direction::AtLeast => v >= self.level,
            Direction::AtMost => v <= self.level,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRow {
    pub n: usize,
    pub replicas: usize,
    pub hits: usize,
    pub probability: f64,
    /// `−(1/n) log P̂`.
    pub rate: f64,
    pub rate_low: f64,
    pub rate_high: f64,
    pub undersampled: bool,
}

/// Fewer hits than this flag a row as undersampled.
pub const MIN_HITS: usize = 10;

/// Direct-simulation estimate of `−(1/n) log P(K^{(ℓ,n)} ∈ event)` with 99%
/// Wilson intervals. Replica `r` at scale `n` draws from
/// `stream.split(n).split(r)`.
pub fn empirical_rate(
    spec: &ArchSpec,
    k1: &PsdMatrix,
    event: &Event,
    ns: &[usize],
    replicas: usize,
    stream: &RngStream,
) -> Result<Vec<EmpiricalRow>> {
    if event.layer < 2 || event.layer > spec.hidden_layers + 1 {
        return Err(Error::InvalidArgument(format!(
            "event layer must lie in 2..={}, got {}",
            spec.hidden_layers + 1,
            event.layer
        )));
    }
    let dim = spec.dim(event.layer);
    if let Statistic::Entry { row, col } = event.statistic {
        if row >= dim || col >= dim {
            return Err(Error::InvalidArgument(format!("entry ({row}, {col}) outside a {dim}x{dim} kernel")));
        }
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let sn = stream.split(n as u64);
        let trimmed = {
            let mut s = spec.clone();
            s.hidden_layers = event.layer - 1;
            s.layers.truncate(event.layer);
            s.spatial.truncate(event.layer + 1);
            s.channel_slopes.truncate(event.layer - 1);
            s
        };
        let hits: Vec<Result<usize>> = map_blocks(replicas, DEFAULT_BLOCK, &sn, |range, _| {
            let mut h = 0;
            for r in range {
                let chain = simulate_chain(&trimmed, k1, n, &sn.split(r as u64))?;
                h += usize::from(event.contains(chain.last()));
            }
            Ok(h)
        });
        let mut total = 0;
        for h in hits {
            total += h?;
        }
        let p = total as f64 / replicas as f64;
        let (lo, hi) = wilson_interval(total, replicas, Z99);
        let nf = n as f64;
        let to_rate = |x: f64| if x > 0.0 { -x.ln() / nf } else { f64::INFINITY };
        rows.push(EmpiricalRow {
            n,
            replicas,
            hits: total,
            probability: p,
            rate: to_rate(p),
            rate_low: to_rate(hi),
            rate_high: to_rate(lo),
            undersampled: total < MIN_HITS,
        });
    }
    Ok(rows)
}
