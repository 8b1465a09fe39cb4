//! Covariance machinery: the input kernel, the per-channel Gram map `G^{(ℓ)}`,
//! the empirical covariance Markov chain, its deterministic (NNGP) limit, and
//! a literal weight-space network sampler used as an independent check on the
//! chain representation.
//!
//! Vectors over layer `ℓ` use the flattened `(site, input)` layout
//! `k = i·P + μ`, matching [`PsdMatrix`].

use crate::arch::{Activation, ArchSpec, InputMaskNorm, PatchPlan};
use crate::error::{Error, Result};
use crate::gauss::{sqrt_matrix, standard_normal_rows, Mat, PsdMatrix, CHANNEL_BLOCK};
use crate::par::{map_blocks, DEFAULT_BLOCK};
use crate::stream::RngStream;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `P` inputs of shape `C₀ × N₀`, stored as `data[(μ·C₀ + c)·N₀ + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch {
    inputs: usize,
    channels: usize,
    sites: usize,
    data: Vec<f64>,
}

impl InputBatch {
    pub fn new(inputs: usize, channels: usize, sites: usize, data: Vec<f64>) -> Result<Self> {
        if inputs == 0 || channels == 0 || sites == 0 {
            return Err(Error::Dimension("input batch dimensions must be positive".into()));
        }
        if data.len() != inputs * channels * sites {
            return Err(Error::Dimension(format!(
                "input batch expects {} values, got {}",
                inputs * channels * sites,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input batch has non-finite entries".into()));
        }
        Ok(Self {
            inputs,
            channels,
            sites,
            data,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Spatial vector `x_{μ,c,:}`.
    pub fn signal(&self, mu: usize, c: usize) -> &[f64] {
        let start = (mu * self.channels + c) * self.sites;
        &self.data[start..start + self.sites]
    }

    fn check_against(&self, spec: &ArchSpec) -> Result<()> {
        if self.inputs != spec.inputs || self.channels != spec.input_channels || self.sites != spec.spatial[0] {
            return Err(Error::Dimension(format!(
                "batch is P={} C₀={} N₀={}, architecture wants P={} C₀={} N₀={}",
                self.inputs, self.channels, self.sites, spec.inputs, spec.input_channels, spec.spatial[0]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Empirical { n: usize },
    Limit { samples: usize },
}

/// `[K^{(1)}, …, K^{(L+1)}]`, with optional entrywise Monte Carlo errors.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelChain {
    pub kernels: Vec<PsdMatrix>,
    pub provenance: Provenance,
    pub standard_errors: Option<Vec<Mat>>,
}

impl KernelChain {
    pub fn last(&self) -> &PsdMatrix {
        self.kernels.last().expect("a chain always holds the input kernel")
    }

    /// `K^{(layer)}` with the usual 1-based layer numbering.
    pub fn layer(&self, layer: usize) -> &PsdMatrix {
        &self.kernels[layer - 1]
    }
}

/// Number of upper-triangle entries of a `dim × dim` matrix.
pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// The per-channel Gram map of one layer:
/// `G(z)_{(i,μ),(j,ν)} = scale · Σ_m σ(R_m^{(i)}(z_{:,μ})) σ(R_m^{(j)}(z_{:,ν}))`.
#[derive(Clone, Debug)]
pub struct GramMap {
    plan: PatchPlan,
    activation: Option<Activation>,
    scale: f64,
    inputs: usize,
}

impl GramMap {
    /// `G^{(ℓ)}` with scale `1/(λ_ℓ M_ℓ)`.
    pub fn new(spec: &ArchSpec, layer: usize) -> Result<Self> {
        if layer > spec.hidden_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} has no Gram map (L = {})",
                spec.hidden_layers
            )));
        }
        let plan = spec.patch_plan(layer)?;
        let scale = 1.0 / (spec.layers[layer].precision * plan.mask_size as f64);
        Ok(Self {
            plan,
            activation: Some(spec.activation.clone()),
            scale,
            inputs: spec.inputs,
        })
    }

    fn linear(plan: PatchPlan, scale: f64, inputs: usize) -> Self {
        Self {
            plan,
            activation: None,
            scale,
            inputs,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.plan.in_sites * self.inputs
    }

    pub fn out_dim(&self) -> usize {
        self.plan.out_sites * self.inputs
    }

    pub fn mask_size(&self) -> usize {
        self.plan.mask_size
    }

    /// Activated patches, `out_dim × M` row-major, into `buf`.
    pub fn patches_into(&self, z: &[f64], buf: &mut [f64]) {
        let p = self.inputs;
        let m_len = self.plan.mask_size;
        for i in 0..self.plan.out_sites {
            for mu in 0..p {
                let row = (i * p + mu) * m_len;
                for m in 0..m_len {
                    let x = self.plan.component(i, m, |k| z[k * p + mu]);
                    buf[row + m] = match &self.activation {
                        Some(a) => a.eval(x),
                        None => x,
                    };
                }
            }
        }
    }

    /// `acc += weight · G(z)` on the upper triangle only; `buf` has
    /// `out_dim · M` slots.
    pub fn accumulate_upper(&self, z: &[f64], weight: f64, acc: &mut Mat, buf: &mut [f64]) {
        self.patches_into(z, buf);
        let d = self.out_dim();
        let m_len = self.plan.mask_size;
        let w = weight * self.scale;
        for a in 0..d {
            let ra = &buf[a * m_len..(a + 1) * m_len];
            for b in a..d {
                let rb = &buf[b * m_len..(b + 1) * m_len];
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                acc[(a, b)] += w * dot;
            }
        }
    }

    /// Upper triangle of `G(z)` in row-major `(a ≤ b)` order.
    pub fn features_into(&self, z: &[f64], out: &mut [f64], buf: &mut [f64]) {
        self.patches_into(z, buf);
        let d = self.out_dim();
        let m_len = self.plan.mask_size;
        let mut k = 0;
        for a in 0..d {
            let ra = &buf[a * m_len..(a + 1) * m_len];
            for b in a..d {
                let rb = &buf[b * m_len..(b + 1) * m_len];
                out[k] = self.scale * ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
                k += 1;
            }
        }
    }

    pub fn eval(&self, z: &[f64]) -> Mat {
        let d = self.out_dim();
        let mut acc = Mat::zeros(d, d);
        let mut buf = vec![0.0; d * self.plan.mask_size];
        self.accumulate_upper(z, 1.0, &mut acc, &mut buf);
        mirror_upper(&mut acc);
        acc
    }
}

pub fn mirror_upper(m: &mut Mat) {
    let d = m.nrows();
    for a in 0..d {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
}

/// `K¹_{(i,μ),(j,ν)} = 1/(λ₀ C₀ M) Σ_c Σ_m R_m^{(i,0)}(x_{μ,c}) R_m^{(j,0)}(x_{ν,c})`.
///
/// `M` is the layer-0 mask size unless the spec selects
/// [`InputMaskNorm::Layer1`].
pub fn input_kernel(spec: &ArchSpec, batch: &InputBatch) -> Result<PsdMatrix> {
    batch.check_against(spec)?;
    let plan = spec.patch_plan(0)?;
    let m_norm = match spec.input_mask_norm {
        InputMaskNorm::Layer0 => plan.mask_size,
        InputMaskNorm::Layer1 => spec
            .layers
            .get(1)
            .map(|l| l.mask.len())
            .ok_or_else(|| Error::InvalidArch("layer-1 mask normalization needs L ≥ 1".into()))?,
    };
    let scale = 1.0 / (spec.layers[0].precision * spec.input_channels as f64 * m_norm as f64);
    let gram = GramMap::linear(plan, scale, spec.inputs);
    let d = gram.out_dim();
    let mut acc = Mat::zeros(d, d);
    let mut buf = vec![0.0; d * gram.mask_size()];
    let mut z = vec![0.0; gram.in_dim()];
    for c in 0..batch.channels {
        for mu in 0..batch.inputs {
            for (i, &x) in batch.signal(mu, c).iter().enumerate() {
                z[i * batch.inputs + mu] = x;
            }
        }
        gram.accumulate_upper(&z, 1.0, &mut acc, &mut buf);
    }
    mirror_upper(&mut acc);
    PsdMatrix::new(acc, spec.inputs)
}

/// `G^{(ℓ)}(z)` as a PSD matrix of dimension `D_{ℓ+1}`.
pub fn g_map(spec: &ArchSpec, layer: usize, z: &[f64]) -> Result<PsdMatrix> {
    let gram = GramMap::new(spec, layer)?;
    if z.len() != gram.in_dim() {
        return Err(Error::Dimension(format!(
            "G^({layer}) takes vectors of length {}, got {}",
            gram.in_dim(),
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite argument to the Gram map".into()));
    }
    PsdMatrix::new(gram.eval(z), spec.inputs)
}

/// `(1/C) Σ_c G(S z_c)` for a given square root `S`; the transition law
/// depends on `Q` only through `S = √Q`.
pub fn transition_from_sqrt(gram: &GramMap, sqrt_q: &Mat, channels: usize, stream: &RngStream) -> Mat {
    let d_in = gram.in_dim();
    let d_out = gram.out_dim();
    let parts = map_blocks(channels, CHANNEL_BLOCK, stream, |range, s| {
        let mut rng = s.rng();
        let mut acc = Mat::zeros(d_out, d_out);
        let mut buf = vec![0.0; d_out * gram.mask_size()];
        let mut z = nalgebra::DVector::zeros(d_in);
        for _ in range {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let x = sqrt_q * &z;
            gram.accumulate_upper(x.as_slice(), 1.0, &mut acc, &mut buf);
        }
        acc
    });
    let mut total = Mat::zeros(d_out, d_out);
    for p in &parts {
        total += p;
    }
    mirror_upper(&mut total);
    total / channels as f64
}

/// One step of the covariance Markov chain with `channels` channels.
pub fn transition_sample(
    spec: &ArchSpec,
    layer: usize,
    q: &PsdMatrix,
    channels: usize,
    stream: &RngStream,
) -> Result<PsdMatrix> {
    if channels == 0 {
        return Err(Error::InvalidArgument("need at least one channel".into()));
    }
    let gram = GramMap::new(spec, layer)?;
    if q.dim() != gram.in_dim() {
        return Err(Error::Dimension(format!(
            "layer {layer} transition expects a {0}x{0} kernel, got {1}x{1}",
            gram.in_dim(),
            q.dim()
        )));
    }
    let s = sqrt_matrix(q.matrix())?;
    PsdMatrix::new(transition_from_sqrt(&gram, &s, channels, stream), spec.inputs)
}

/// Empirical chain `K^{(1)}, K^{(2,n)}, …, K^{(L+1,n)}`; layer `ℓ` draws from
/// `stream.split(ℓ)`.
pub fn simulate_chain(spec: &ArchSpec, k1: &PsdMatrix, n: usize, stream: &RngStream) -> Result<KernelChain> {
    if n == 0 {
        return Err(Error::InvalidArgument("scale index n must be ≥ 1".into()));
    }
    let mut kernels = vec![k1.clone()];
    for layer in 1..=spec.hidden_layers {
        let next = transition_sample(
            spec,
            layer,
            kernels.last().unwrap(),
            spec.channels(layer, n),
            &stream.split(layer as u64),
        )?;
        kernels.push(next);
    }
    Ok(KernelChain {
        kernels,
        provenance: Provenance::Empirical { n },
        standard_errors: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitOptions {
    pub samples: usize,
    /// Pair each draw `z` with `-z`.
    pub antithetic: bool,
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            antithetic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitEstimate {
    pub kernel: PsdMatrix,
    pub standard_error: Mat,
    pub samples: usize,
}

/// Monte Carlo estimate of `E[G^{(ℓ)}(Z)]`, `Z ~ N(0, K)`.
pub fn limit_kernel_mc(
    spec: &ArchSpec,
    layer: usize,
    k: &PsdMatrix,
    opts: LimitOptions,
    stream: &RngStream,
) -> Result<LimitEstimate> {
    if opts.samples == 0 {
        return Err(Error::InvalidArgument("need at least one Monte Carlo sample".into()));
    }
    let gram = GramMap::new(spec, layer)?;
    if k.dim() != gram.in_dim() {
        return Err(Error::Dimension(format!(
            "layer {layer} recursion expects a {0}x{0} kernel, got {1}x{1}",
            gram.in_dim(),
            k.dim()
        )));
    }
    let s = sqrt_matrix(k.matrix())?;
    let (d_in, d_out) = (gram.in_dim(), gram.out_dim());
    let parts = map_blocks(opts.samples, DEFAULT_BLOCK, stream, |range, st| {
        let mut rng = st.rng();
        let mut sum = Mat::zeros(d_out, d_out);
        let mut sumsq = Mat::zeros(d_out, d_out);
        let mut g = Mat::zeros(d_out, d_out);
        let mut buf = vec![0.0; d_out * gram.mask_size()];
        let mut z = nalgebra::DVector::zeros(d_in);
        for _ in range {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let x = &s * &z;
            g.fill(0.0);
            if opts.antithetic {
                gram.accumulate_upper(x.as_slice(), 0.5, &mut g, &mut buf);
                let neg = -x;
                gram.accumulate_upper(neg.as_slice(), 0.5, &mut g, &mut buf);
            } else {
                gram.accumulate_upper(x.as_slice(), 1.0, &mut g, &mut buf);
            }
            sum += &g;
            sumsq += g.component_mul(&g);
        }
        (sum, sumsq)
    });
    let mut sum = Mat::zeros(d_out, d_out);
    let mut sumsq = Mat::zeros(d_out, d_out);
    for (a, b) in &parts {
        sum += a;
        sumsq += b;
    }
    mirror_upper(&mut sum);
    mirror_upper(&mut sumsq);
    let n = opts.samples as f64;
    let mean = &sum / n;
    let se = if opts.samples > 1 {
        (sumsq / n - mean.component_mul(&mean)).map(|v| (v.max(0.0) * n / (n - 1.0) / n).sqrt())
    } else {
        Mat::from_element(d_out, d_out, f64::INFINITY)
    };
    Ok(LimitEstimate {
        kernel: PsdMatrix::new(mean, spec.inputs)?,
        standard_error: se,
        samples: opts.samples,
    })
}

/// The deterministic-limit chain `K^{(1)}, K^{(2)}, …, K^{(L+1)}`.
pub fn limit_chain(spec: &ArchSpec, k1: &PsdMatrix, opts: LimitOptions, stream: &RngStream) -> Result<KernelChain> {
    let mut kernels = vec![k1.clone()];
    let mut errors = vec![Mat::zeros(k1.dim(), k1.dim())];
    for layer in 1..=spec.hidden_layers {
        let est = limit_kernel_mc(spec, layer, kernels.last().unwrap(), opts, &stream.split(layer as u64))?;
        kernels.push(est.kernel);
        errors.push(est.standard_error);
    }
    Ok(KernelChain {
        kernels,
        provenance: Provenance::Limit { samples: opts.samples },
        standard_errors: Some(errors),
    })
}

/// Samples every weight `W^{(ℓ)} ~ N(0, 1/λ_ℓ)` and evaluates the network
/// literally. Returns `out_channels × D_{L+1}` (row = output channel).
pub fn forward_network_sample(
    spec: &ArchSpec,
    batch: &InputBatch,
    n: usize,
    out_channels: usize,
    stream: &RngStream,
) -> Result<Mat> {
    batch.check_against(spec)?;
    let l = spec.hidden_layers;
    if out_channels == 0 || out_channels > spec.output_channels {
        return Err(Error::Dimension(format!(
            "requested {out_channels} output channels, network has {}",
            spec.output_channels
        )));
    }
    let p = spec.inputs;

    // Layer 0 patches: rows (i, μ), columns (c', m).
    let plan0 = spec.patch_plan(0)?;
    let m0 = plan0.mask_size;
    let c0 = spec.input_channels;
    let d1 = spec.dim(1);
    let mut a = Mat::zeros(d1, c0 * m0);
    for c in 0..c0 {
        for mu in 0..p {
            let x = batch.signal(mu, c);
            for i in 0..plan0.out_sites {
                for m in 0..m0 {
                    a[(i * p + mu, c * m0 + m)] = plan0.component(i, m, |k| x[k]);
                }
            }
        }
    }
    let c_next = if l == 0 { out_channels } else { spec.channels(1, n) };
    let w = weights(spec, 0, c0 * m0, c_next, stream);
    // h: D_1 × C_1, column c is the flattened preactivation of channel c
    let mut h = a * w / ((m0 * c0) as f64).sqrt();

    for layer in 1..=l {
        let plan = spec.patch_plan(layer)?;
        let m_len = plan.mask_size;
        let c_prev = h.ncols();
        let d_out = spec.dim(layer + 1);
        let mut a = Mat::zeros(d_out, c_prev * m_len);
        for c in 0..c_prev {
            let col = h.column(c);
            for mu in 0..p {
                for i in 0..plan.out_sites {
                    for m in 0..m_len {
                        let x = plan.component(i, m, |k| col[k * p + mu]);
                        a[(i * p + mu, c * m_len + m)] = spec.activation.eval(x);
                    }
                }
            }
        }
        let c_next = if layer == l { out_channels } else { spec.channels(layer + 1, n) };
        let w = weights(spec, layer, c_prev * m_len, c_next, stream);
        h = a * w / ((m_len * c_prev) as f64).sqrt();
    }
    Ok(h.transpose())
}

fn weights(spec: &ArchSpec, layer: usize, rows: usize, cols: usize, stream: &RngStream) -> Mat {
    let sd = 1.0 / spec.layers[layer].precision.sqrt();
    standard_normal_rows(&stream.split_named("weights").split(layer as u64), rows, cols) * sd
}

/// Output sample through the chain representation: simulate
/// `K^{(L+1,n)}`, then draw `out_channels` rows of `√K · z`.
pub fn chain_network_sample(
    spec: &ArchSpec,
    k1: &PsdMatrix,
    n: usize,
    out_channels: usize,
    stream: &RngStream,
) -> Result<Mat> {
    let chain = simulate_chain(spec, k1, n, &stream.split_named("chain"))?;
    crate::gauss::sample_conditional_layer(chain.last(), out_channels, &stream.split_named("output"))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::arch::{ActivationTable, ExtractorKind, LayerSpec, ProbeParams};
    use crate::gauss::sym_eigen;
    use approx::assert_relative_eq;

    pub(crate) fn fcnn(layers: usize, inputs: usize, act: Activation) -> ArchSpec {
        ArchSpec {
            hidden_layers: layers,
            inputs,
            input_channels: 1,
            output_channels: 1,
            spatial: vec![1; layers + 2],
            channel_slopes: vec![1.0; layers],
            activation: act,
            input_mask_norm: InputMaskNorm::Layer0,
            probe: ProbeParams::default(),
            layers: (0..=layers)
                .map(|_| LayerSpec::new(ExtractorKind::FullyConnected, 1.0))
                .collect(),
        }
    }

    fn circular(n0: usize, inputs: usize, act: Activation) -> ArchSpec {
        ArchSpec {
            hidden_layers: 1,
            inputs,
            input_channels: 1,
            output_channels: 1,
            spatial: vec![n0, n0, n0],
            channel_slopes: vec![1.0],
            activation: act,
            input_mask_norm: InputMaskNorm::Layer0,
            probe: ProbeParams::default(),
            layers: vec![
                LayerSpec::new(ExtractorKind::Circular1d { halfwidth: 1 }, 1.0),
                LayerSpec::new(ExtractorKind::Circular1d { halfwidth: 1 }, 1.0),
            ],
        }
    }

    #[test]
    fn input_kernel_fcnn() {
        let spec = fcnn(1, 1, Activation::Identity);
        let k = input_kernel(&spec, &InputBatch::new(1, 1, 1, vec![2.0]).unwrap()).unwrap();
        assert_eq!(k.matrix()[(0, 0)], 4.0);
        let spec2 = fcnn(1, 2, Activation::Identity);
        let k = input_kernel(&spec2, &InputBatch::new(2, 1, 1, vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(k.matrix().as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        assert!(input_kernel(&spec2, &InputBatch::new(1, 1, 1, vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn input_kernel_circular_matches_direct_double_sum() {
        let spec = circular(3, 1, Activation::Relu);
        let x = [1.0, 0.0, 0.0];
        let k = input_kernel(&spec, &InputBatch::new(1, 1, 3, x.to_vec()).unwrap()).unwrap();
        // brute force over (i, j, m) with periodic indices
        for i in 0..3i64 {
            for j in 0..3i64 {
                let mut s = 0.0;
                for m in -1..=1i64 {
                    s += x[(i + m).rem_euclid(3) as usize] * x[(j + m).rem_euclid(3) as usize];
                }
                assert_relative_eq!(k.matrix()[(i as usize, j as usize)], s / 3.0, epsilon = 1e-15);
            }
        }
        // a single spike is seen once per site and never by two sites at the same tap
        assert_relative_eq!(*k.matrix(), Mat::identity(3, 3) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn input_kernel_mask_switch() {
        let mut spec = circular(5, 1, Activation::Relu);
        spec.layers[1] = LayerSpec::new(ExtractorKind::Circular1d { halfwidth: 0 }, 1.0);
        let batch = InputBatch::new(1, 1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let k0 = input_kernel(&spec, &batch).unwrap();
        spec.input_mask_norm = InputMaskNorm::Layer1;
        let k1 = input_kernel(&spec, &batch).unwrap();
        assert_relative_eq!(k1.matrix() / 3.0, *k0.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn g_map_scalar_examples() {
        assert_eq!(g_map(&fcnn(1, 1, Activation::Identity), 1, &[3.0]).unwrap().matrix()[(0, 0)], 9.0);
        assert_eq!(g_map(&fcnn(1, 1, Activation::Relu), 1, &[-1.0]).unwrap().matrix()[(0, 0)], 0.0);
        assert!(g_map(&fcnn(1, 1, Activation::Relu), 1, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn g_map_quadratic_forms_are_nonnegative() {
        let spec = circular(5, 2, Activation::Tanh);
        let zs = standard_normal_rows(&RngStream::new(5), 20, 10);
        let us = standard_normal_rows(&RngStream::new(6), 100, 10);
        for z in zs.row_iter() {
            let g = g_map(&spec, 1, z.transpose().as_slice()).unwrap();
            for u in us.row_iter() {
                let form = (u * g.matrix() * u.transpose())[(0, 0)];
                assert!(form >= -1e-12, "{form}");
            }
        }
    }

    #[test]
    fn transition_with_constant_activation_is_deterministic() {
        let mut spec = circular(4, 1, Activation::Table(ActivationTable::constant(1.0)));
        spec.layers[1].precision = 2.0;
        let q = PsdMatrix::identity(4, 1);
        for c in [1, 7, 300] {
            let out = transition_sample(&spec, 1, &q, c, &RngStream::new(c as u64)).unwrap();
            assert_relative_eq!(*out.matrix(), Mat::from_element(4, 4, 0.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn transition_is_reproducible() {
        let spec = circular(4, 2, Activation::Relu);
        let q = PsdMatrix::new(crate::gauss::tests::random_psd(3, 8, 8), 2).unwrap();
        let s = RngStream::new(77);
        let a = transition_sample(&spec, 1, &q, 1000, &s).unwrap();
        let b = transition_sample(&spec, 1, &q, 1000, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transition_identity_scalar_mean() {
        // mean of χ²₁ draws; standard error √2/√C ≈ 0.0045
        let spec = fcnn(1, 1, Activation::Identity);
        let q = PsdMatrix::scalar(1.0).unwrap();
        let out = transition_sample(&spec, 1, &q, 100_000, &RngStream::new(1)).unwrap();
        assert!((out.matrix()[(0, 0)] - 1.0).abs() < 0.02);
    }

    #[test]
    fn transition_depends_on_q_through_its_root() {
        let spec = circular(4, 1, Activation::Relu);
        let q = PsdMatrix::new(crate::gauss::tests::random_psd(8, 4, 4), 1).unwrap();
        let (vals, vecs) = sym_eigen(q.matrix());
        let rebuilt = PsdMatrix::new(&vecs * Mat::from_diagonal(&vals) * vecs.transpose(), 1).unwrap();
        let s = RngStream::new(4);
        let gram = GramMap::new(&spec, 1).unwrap();
        let root = sqrt_matrix(q.matrix()).unwrap();
        // identical roots give bit-identical draws
        assert_eq!(
            transition_from_sqrt(&gram, &root, 500, &s),
            transition_from_sqrt(&gram, &root.clone(), 500, &s)
        );
        let a = transition_sample(&spec, 1, &q, 500, &s).unwrap();
        let b = transition_sample(&spec, 1, &rebuilt, 500, &s).unwrap();
        assert!((a.matrix() - b.matrix()).abs().max() < 1e-10);
    }

    #[test]
    fn chain_examples() {
        let spec = fcnn(1, 1, Activation::Relu);
        let k1 = PsdMatrix::scalar(1.5).unwrap();
        let s = RngStream::new(12);
        let chain = simulate_chain(&spec, &k1, 40, &s).unwrap();
        assert_eq!(chain.kernels.len(), 2);
        assert_eq!(chain.kernels[0], k1);
        assert_eq!(chain.kernels[1], transition_sample(&spec, 1, &k1, 40, &s.split(1)).unwrap());

        let deep = fcnn(3, 2, Activation::Tanh);
        let zero = PsdMatrix::zeros(2, 2);
        let chain = simulate_chain(&deep, &zero, 10, &s).unwrap();
        assert!(chain.kernels.iter().all(|k| k.matrix().iter().all(|&v| v == 0.0)));

        let k1 = PsdMatrix::identity(2, 2);
        let a = simulate_chain(&deep, &k1, 10, &s.split(0)).unwrap();
        let b = simulate_chain(&deep, &k1, 10, &s.split(1)).unwrap();
        let a2 = simulate_chain(&deep, &k1, 10, &s.split(0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn limit_identity_and_relu_diagonal() {
        let q = 1.7;
        let s = RngStream::new(21);
        let opts = LimitOptions {
            samples: 200_000,
            antithetic: false,
        };
        let id = limit_kernel_mc(&fcnn(1, 1, Activation::Identity), 1, &PsdMatrix::scalar(q).unwrap(), opts, &s).unwrap();
        assert!((id.kernel.matrix()[(0, 0)] - q).abs() < 3.0 * id.standard_error[(0, 0)]);
        // half-Gaussian second moment
        let relu = limit_kernel_mc(&fcnn(1, 1, Activation::Relu), 1, &PsdMatrix::scalar(q).unwrap(), opts, &s).unwrap();
        assert!((relu.kernel.matrix()[(0, 0)] - q / 2.0).abs() < 3.0 * relu.standard_error[(0, 0)]);
    }

    #[test]
    fn limit_relu_arc_cosine_off_diagonal() {
        let rho: f64 = 0.6;
        let k = PsdMatrix::new(Mat::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]), 2).unwrap();
        let opts = LimitOptions {
            samples: 200_000,
            antithetic: true,
        };
        let est = limit_kernel_mc(&fcnn(1, 2, Activation::Relu), 1, &k, opts, &RngStream::new(22)).unwrap();
        let exact = ((1.0 - rho * rho).sqrt() + (std::f64::consts::PI - rho.acos()) * rho) / (2.0 * std::f64::consts::PI);
        assert!((est.kernel.matrix()[(0, 1)] - exact).abs() < 3.0 * est.standard_error[(0, 1)]);
    }

    #[test]
    fn limit_chain_shapes_and_constant_activation() {
        let spec = circular(4, 2, Activation::Table(ActivationTable::constant(1.0)));
        let k1 = PsdMatrix::identity(8, 2);
        let opts = LimitOptions {
            samples: 100,
            antithetic: false,
        };
        let chain = limit_chain(&spec, &k1, opts, &RngStream::new(1)).unwrap();
        assert_eq!(chain.kernels.iter().map(|k| k.dim()).collect::<Vec<_>>(), vec![8, 8]);
        assert_relative_eq!(*chain.last().matrix(), Mat::from_element(8, 8, 1.0), epsilon = 1e-12);
        let scalar = limit_chain(&fcnn(1, 1, Activation::Table(ActivationTable::constant(1.0))), &PsdMatrix::scalar(3.0).unwrap(), opts, &RngStream::new(1)).unwrap();
        assert_eq!(scalar.last().matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn forward_sampler_basics() {
        let spec = circular(4, 2, Activation::Tanh);
        let zeros = InputBatch::new(2, 1, 4, vec![0.0; 8]).unwrap();
        let out = forward_network_sample(&spec, &zeros, 16, 1, &RngStream::new(3)).unwrap();
        assert_eq!((out.nrows(), out.ncols()), (1, 8));
        assert!(out.iter().all(|&v| v == 0.0));
        let batch = InputBatch::new(2, 1, 4, (0..8).map(|k| k as f64 * 0.3 - 1.0).collect()).unwrap();
        let s = RngStream::new(4);
        assert_eq!(
            forward_network_sample(&spec, &batch, 16, 1, &s).unwrap(),
            forward_network_sample(&spec, &batch, 16, 1, &s).unwrap()
        );
        assert!(forward_network_sample(&spec, &batch, 16, 2, &s).is_err());
    }

    #[test]
    fn forward_sampler_second_moment_matches_limit() {
        // FCNN identity: output variance is exactly K¹/(λ₀λ₁) in expectation
        let spec = fcnn(1, 1, Activation::Identity);
        let batch = InputBatch::new(1, 1, 1, vec![1.5]).unwrap();
        let reps = 4000;
        let mean_sq: f64 = (0..reps)
            .map(|r| forward_network_sample(&spec, &batch, 8, 1, &RngStream::new(9).split(r)).unwrap()[(0, 0)].powi(2))
            .sum::<f64>()
            / reps as f64;
        // sd of the estimate ≈ 2.25·√(2 + 2/8 + …)/√4000 ≈ 0.06
        assert!((mean_sq - 2.25).abs() < 0.25, "{mean_sq}");
    }
}
