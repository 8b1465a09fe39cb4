//! Network architectures and receptive-field (patch) extractors.
//!
//! Layer `ℓ` of an [`ArchSpec`] describes the map from the spatial grid of
//! layer `ℓ` (size `N_ℓ`) to the grid of layer `ℓ+1` (size `N_{ℓ+1}`): for
//! every output site `i` the extractor returns `M_ℓ` values, one per mask
//! offset, in mask order. Every shipped extractor is linear in its input, so
//! each one is compiled into a [`PatchPlan`] of sparse taps that the kernel
//! and simulation code evaluate directly.
//!
//! Sites are 0-based. The 1-based residues `{1, …, N}` used in the usual
//! mathematical notation map to `{0, …, N-1}`; a 2-D site `(i₁, i₂)` on a
//! grid of side `Ñ+1` is stored at `i₁·(Ñ+1) + i₂`.

use crate::error::{Error, Result};
use crate::stream::RngStream;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

/// A receptive-field offset: 1-D for line grids, 2-D for square grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offset {
    Line(i64),
    Grid([i64; 2]),
}

/// Ordered receptive-field offsets together with the declared mask size `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    #[serde(rename = "mask")]
    pub elements: Vec<Offset>,
    #[serde(rename = "mask_size")]
    pub size: usize,
}

/// The nine offsets of a 3×3 mask, in the fixed reference order.
pub const MASK_3X3: [[i64; 2]; 9] = [
    [0, 0],
    [1, 0],
    [-1, 0],
    [0, 1],
    [1, 1],
    [1, -1],
    [-1, 1],
    [-1, -1],
    [0, -1],
];

impl MaskSet {
    pub fn new(elements: Vec<Offset>) -> Self {
        let size = elements.len();
        Self { elements, size }
    }

    /// `{-h, …, h}` in ascending order.
    pub fn symmetric_line(halfwidth: usize) -> Self {
        let h = halfwidth as i64;
        Self::new((-h..=h).map(Offset::Line).collect())
    }

    pub fn square_3x3() -> Self {
        Self::new(MASK_3X3.iter().copied().map(Offset::Grid).collect())
    }

    pub fn single() -> Self {
        Self::new(vec![Offset::Line(0)])
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Stride 1, periodic padding on a ring of `N` sites.
    Circular1d { halfwidth: usize },
    /// Average pooling of non-overlapping pairs, then a periodic width-3 window.
    Circular1dPool2,
    /// Stride 1, zero padding, 3×3 mask on a `(side+1)×(side+1)` grid.
    #[serde(rename = "zero_pad2d_3x3")]
    ZeroPad2d3x3 { side: usize },
    /// Single spatial site; the extractor is the identity.
    FullyConnected,
}

impl ExtractorKind {
    pub fn default_mask(&self) -> MaskSet {
        match *self {
            ExtractorKind::Circular1d { halfwidth } => MaskSet::symmetric_line(halfwidth),
            ExtractorKind::Circular1dPool2 => MaskSet::symmetric_line(1),
            ExtractorKind::ZeroPad2d3x3 { .. } => MaskSet::square_3x3(),
            ExtractorKind::FullyConnected => MaskSet::single(),
        }
    }

    /// Output grid size for an input grid of `n_in` sites.
    pub fn output_sites(&self, n_in: usize) -> usize {
        match self {
            ExtractorKind::Circular1dPool2 => n_in / 2,
            ExtractorKind::FullyConnected => 1,
            _ => n_in,
        }
    }
}

/// Out-of-range behaviour of a tabulated activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extension {
    /// Hold the end value.
    Constant,
    /// Continue the end segment's slope.
    Linear,
    /// `y_end · (|x| / |x_end|)^exponent`.
    Power { exponent: f64 },
}

/// Piecewise-linear activation given by `(x, y)` knots with increasing `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTable {
    pub knots: Vec<[f64; 2]>,
    pub extension: Extension,
}

impl ActivationTable {
    pub fn constant(value: f64) -> Self {
        Self {
            knots: vec![[-1.0, value], [1.0, value]],
            extension: Extension::Constant,
        }
    }

    /// Tabulates `f` on `points` equispaced knots over `[lo, hi]`.
    pub fn sampled(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize, extension: Extension) -> Self {
        let knots = (0..points)
            .map(|k| {
                let x = lo + (hi - lo) * k as f64 / (points - 1) as f64;
                [x, f(x)]
            })
            .collect();
        Self { knots, extension }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.knots.len() < 2 {
            return Err("activation table needs at least two knots".into());
        }
        if self.knots.iter().flatten().any(|v| !v.is_finite()) {
            return Err("activation table has non-finite entries".into());
        }
        if self.knots.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err("activation table knots must have strictly increasing x".into());
        }
        if let Extension::Power { exponent } = self.extension {
            let (first, last) = (self.knots[0][0], self.knots[self.knots.len() - 1][0]);
            if !exponent.is_finite() || exponent < 0.0 || first >= 0.0 || last <= 0.0 {
                return Err("power extension needs a finite exponent ≥ 0 and knots spanning 0".into());
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        let n = k.len();
        if x < k[0][0] {
            return extend(self.extension, x, k[0], k[1]);
        }
        if x > k[n - 1][0] {
            return extend(self.extension, x, k[n - 1], k[n - 2]);
        }
        let j = k.partition_point(|p| p[0] <= x).clamp(1, n - 1);
        let (a, b) = (k[j - 1], k[j]);
        a[1] + (b[1] - a[1]) * (x - a[0]) / (b[0] - a[0])
    }
}

fn extend(ext: Extension, x: f64, end: [f64; 2], inner: [f64; 2]) -> f64 {
    match ext {
        Extension::Constant => end[1],
        Extension::Linear => end[1] + (end[1] - inner[1]) / (end[0] - inner[0]) * (x - end[0]),
        Extension::Power { exponent } => end[1] * (x.abs() / end[0].abs()).powf(exponent),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Table(ActivationTable),
}

impl Activation {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Table(t) => t.eval(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub extractor: ExtractorKind,
    #[serde(flatten)]
    pub mask: MaskSet,
    /// Weight precision `λ_ℓ`; weights are `N(0, 1/λ_ℓ)`.
    pub precision: f64,
}

impl LayerSpec {
    pub fn new(extractor: ExtractorKind, precision: f64) -> Self {
        Self {
            mask: extractor.default_mask(),
            extractor,
            precision,
        }
    }
}

/// Which mask size normalizes the input kernel.
///
/// The first-layer preactivation is normalized by the layer-0 mask size, which
/// makes the input kernel the exact conditional covariance of the first layer.
/// `Layer1` reproduces the alternative normalization by the layer-1 mask size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMaskNorm {
    #[default]
    Layer0,
    Layer1,
}

/// Parameters of the activation growth spot-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub samples: usize,
    pub radii: Vec<f64>,
    /// Fitted growth orders at or above this are flagged.
    pub max_order: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            samples: 64,
            radii: vec![10.0, 100.0, 1_000.0, 10_000.0],
            max_order: 1.75,
        }
    }
}

/// Declarative description of a convolutional network with `L` hidden layers.
///
/// `layers[ℓ]` (for `ℓ = 0..=L`) maps grid `ℓ` to grid `ℓ+1`;
/// `spatial` lists `N_0, …, N_{L+1}`; `channel_slopes` lists `α_1, …, α_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden_layers: usize,
    pub inputs: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub spatial: Vec<usize>,
    pub channel_slopes: Vec<f64>,
    pub activation: Activation,
    #[serde(default)]
    pub input_mask_norm: InputMaskNorm,
    #[serde(default)]
    pub probe: ProbeParams,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn depth(&self) -> usize {
        self.hidden_layers
    }

    /// `D_ℓ = N_ℓ · P`.
    pub fn dim(&self, layer: usize) -> usize {
        self.spatial[layer] * self.inputs
    }

    pub fn mask_size(&self, layer: usize) -> usize {
        self.layers[layer].mask.len()
    }

    /// `C_ℓ(n) = max(1, round(α_ℓ n))` for hidden layers `1..=L`.
    pub fn channels(&self, layer: usize, n: usize) -> usize {
        match layer {
            0 => self.input_channels,
            l if l == self.hidden_layers + 1 => self.output_channels,
            l => ((self.channel_slopes[l - 1] * n as f64).round() as usize).max(1),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ArchSpec is always TOML-serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Compiles the extractor of `layer` into sparse taps.
    pub fn patch_plan(&self, layer: usize) -> Result<PatchPlan> {
        let spec = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArch(format!("no layer {layer}")))?;
        let n_in = *self
            .spatial
            .get(layer)
            .ok_or_else(|| Error::InvalidArch(format!("no spatial size for layer {layer}")))?;
        PatchPlan::build(spec, n_in).map_err(Error::InvalidArch)
    }
}

/// Sparse linear taps of an extractor: output `(i, m)` is `Σ coeff · z[site]`.
#[derive(Clone, Debug)]
pub struct PatchPlan {
    pub in_sites: usize,
    pub out_sites: usize,
    pub mask_size: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl PatchPlan {
    fn build(layer: &LayerSpec, n_in: usize) -> std::result::Result<Self, String> {
        let mask = &layer.mask.elements;
        let m_len = mask.len();
        let line = |o: &Offset| match o {
            Offset::Line(d) => Ok(*d),
            Offset::Grid(_) => Err("1-D extractor with a 2-D mask offset".to_string()),
        };
        let (out_sites, taps) = match layer.extractor {
            ExtractorKind::Circular1d { .. } => {
                let n = n_in as i64;
                let mut taps = Vec::with_capacity(n_in * m_len);
                for i in 0..n {
                    for o in mask {
                        taps.push(vec![((i + line(o)?).rem_euclid(n) as usize, 1.0)]);
                    }
                }
                (n_in, taps)
            }
            ExtractorKind::Circular1dPool2 => {
                let pooled = n_in / 2;
                if pooled == 0 {
                    return Err("pooling needs at least two input sites".into());
                }
                let np = pooled as i64;
                let mut taps = Vec::with_capacity(pooled * m_len);
                for i in 0..np {
                    for o in mask {
                        let k = (i + line(o)?).rem_euclid(np) as usize;
                        taps.push(vec![(2 * k, 0.5), (2 * k + 1, 0.5)]);
                    }
                }
                (pooled, taps)
            }
            ExtractorKind::ZeroPad2d3x3 { side } => {
                let s = side as i64 + 1;
                if (s * s) as usize != n_in {
                    return Err(format!("2-D grid of side {s} needs {} sites, layer has {n_in}", s * s));
                }
                let mut taps = Vec::with_capacity(n_in * m_len);
                for i in 0..s * s {
                    let (i1, i2) = (i / s, i % s);
                    for o in mask {
                        let Offset::Grid([d1, d2]) = *o else {
                            return Err("2-D extractor with a 1-D mask offset".into());
                        };
                        let (a, b) = (i1 + d1, i2 + d2);
                        if (0..s).contains(&a) && (0..s).contains(&b) {
                            taps.push(vec![((a * s + b) as usize, 1.0)]);
                        } else {
                            taps.push(Vec::new());
                        }
                    }
                }
                (n_in, taps)
            }
            ExtractorKind::FullyConnected => {
                if n_in != 1 || m_len != 1 {
                    return Err("fully connected layers need N = 1 and M = 1".into());
                }
                (1, vec![vec![(0, 1.0)]])
            }
        };
        Ok(Self {
            in_sites: n_in,
            out_sites,
            mask_size: m_len,
            taps,
        })
    }

    /// Patch component `m` of output site `i`, reading `z` through `at`.
    #[inline]
    pub fn component(&self, site: usize, m: usize, at: impl Fn(usize) -> f64) -> f64 {
        self.taps[site * self.mask_size + m]
            .iter()
            .map(|&(k, c)| c * at(k))
            .sum()
    }

    pub fn taps(&self, site: usize, m: usize) -> &[(usize, f64)] {
        &self.taps[site * self.mask_size + m]
    }
}

/// Receptive field of output site `site` of `layer`, in mask order.
pub fn extract_patch(spec: &ArchSpec, layer: usize, site: usize, z: &[f64]) -> Result<Vec<f64>> {
    let plan = spec.patch_plan(layer)?;
    if z.len() != plan.in_sites {
        return Err(Error::Dimension(format!(
            "layer {layer} expects a spatial vector of length {}, got {}",
            plan.in_sites,
            z.len()
        )));
    }
    if site >= plan.out_sites {
        return Err(Error::InvalidSite {
            layer,
            site,
            sites: plan.out_sites,
        });
    }
    Ok((0..plan.mask_size)
        .map(|m| plan.component(site, m, |k| z[k]))
        .collect())
}

/// Flattened index of the 2-D site `(i1, i2)` on a grid of side `side + 1`.
pub fn grid_site(side: usize, i1: usize, i2: usize) -> usize {
    i1 * (side + 1) + i2
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape(String),
    NonPositive(String),
    MaskCardinality { layer: usize, declared: usize, listed: usize },
    DuplicateOffset { layer: usize },
    MaskShape { layer: usize, reason: String },
    CircularWidth { layer: usize, width: usize, sites: usize },
    PoolParity { layer: usize, n_in: usize, n_out: usize },
    GridMismatch { layer: usize, reason: String },
    FullyConnectedShape { layer: usize },
    Activation(String),
    Growth { layer: usize, order: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape: {s}"),
            Violation::NonPositive(s) => write!(f, "non-positive parameter: {s}"),
            Violation::MaskCardinality { layer, declared, listed } => write!(
                f,
                "layer {layer}: mask cardinality M={declared} but {listed} offsets listed"
            ),
            Violation::DuplicateOffset { layer } => write!(f, "layer {layer}: duplicate mask offset"),
            Violation::MaskShape { layer, reason } => write!(f, "layer {layer}: mask {reason}"),
            Violation::CircularWidth { layer, width, sites } => {
                write!(f, "layer {layer}: 2M̃+1 < N fails (2M̃+1={width}, N={sites})")
            }
            Violation::PoolParity { layer, n_in, n_out } => write!(
                f,
                "layer {layer}: N_ℓ = 2N_{{ℓ+1}} fails (N_ℓ={n_in}, N_{{ℓ+1}}={n_out})"
            ),
            Violation::GridMismatch { layer, reason } => write!(f, "layer {layer}: {reason}"),
            Violation::FullyConnectedShape { layer } => {
                write!(f, "layer {layer}: fully connected requires N_ℓ = N_{{ℓ+1}} = 1 and M_ℓ = 1")
            }
            Violation::Activation(s) => write!(f, "activation: {s}"),
            Violation::Growth { layer, order } => write!(
                f,
                "layer {layer}: activation growth order {order:.3} is not below 2"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "pass");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks structural constraints; violations are returned as data.
///
/// The activation growth probe runs on a fixed internal stream so the
/// report is a pure function of the spec.
pub fn validate_arch(spec: &ArchSpec) -> ValidationReport {
    let mut v = Vec::new();
    let l = spec.hidden_layers;
    if spec.spatial.len() != l + 2 {
        v.push(Violation::Shape(format!(
            "spatial sizes list {} entries, expected L+2 = {}",
            spec.spatial.len(),
            l + 2
        )));
    }
    if spec.layers.len() != l + 1 {
        v.push(Violation::Shape(format!(
            "{} layer blocks, expected L+1 = {}",
            spec.layers.len(),
            l + 1
        )));
    }
    if spec.channel_slopes.len() != l {
        v.push(Violation::Shape(format!(
            "{} channel slopes, expected L = {l}",
            spec.channel_slopes.len()
        )));
    }
    for (name, val) in [
        ("inputs P", spec.inputs),
        ("input channels C_0", spec.input_channels),
        ("output channels C_{L+1}", spec.output_channels),
    ] {
        if val == 0 {
            v.push(Violation::NonPositive(name.into()));
        }
    }
    for (k, &n) in spec.spatial.iter().enumerate() {
        if n == 0 {
            v.push(Violation::NonPositive(format!("N_{k}")));
        }
    }
    for (k, &a) in spec.channel_slopes.iter().enumerate() {
        if !(a > 0.0 && a.is_finite()) {
            v.push(Violation::NonPositive(format!("α_{}", k + 1)));
        }
    }
    if let Activation::Table(t) = &spec.activation {
        if let Err(e) = t.check() {
            v.push(Violation::Activation(e));
        }
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }

    for (layer, ls) in spec.layers.iter().enumerate() {
        if !(ls.precision > 0.0 && ls.precision.is_finite()) {
            v.push(Violation::NonPositive(format!("λ_{layer}")));
        }
        let listed = ls.mask.elements.len();
        if listed != ls.mask.size {
            v.push(Violation::MaskCardinality {
                layer,
                declared: ls.mask.size,
                listed,
            });
        }
        if listed == 0 {
            v.push(Violation::MaskShape {
                layer,
                reason: "is empty".into(),
            });
        }
        let distinct: HashSet<_> = ls.mask.elements.iter().collect();
        if distinct.len() != listed {
            v.push(Violation::DuplicateOffset { layer });
        }
        let (n_in, n_out) = (spec.spatial[layer], spec.spatial[layer + 1]);
        let all_line = ls.mask.elements.iter().all(|o| matches!(o, Offset::Line(_)));
        let all_grid = ls.mask.elements.iter().all(|o| matches!(o, Offset::Grid(_)));
        match ls.extractor {
            ExtractorKind::Circular1d { halfwidth } => {
                if 2 * halfwidth + 1 >= n_in {
                    v.push(Violation::CircularWidth {
                        layer,
                        width: 2 * halfwidth + 1,
                        sites: n_in,
                    });
                }
                if n_out != n_in {
                    v.push(Violation::GridMismatch {
                        layer,
                        reason: format!("stride-1 convolution needs N_{{ℓ+1}} = N_ℓ ({n_out} ≠ {n_in})"),
                    });
                }
                if !all_line {
                    v.push(Violation::MaskShape {
                        layer,
                        reason: "must use 1-D offsets".into(),
                    });
                }
            }
            ExtractorKind::Circular1dPool2 => {
                if n_in != 2 * n_out {
                    v.push(Violation::PoolParity { layer, n_in, n_out });
                }
                if !all_line {
                    v.push(Violation::MaskShape {
                        layer,
                        reason: "must use 1-D offsets".into(),
                    });
                }
            }
            ExtractorKind::ZeroPad2d3x3 { side } => {
                let sites = (side + 1) * (side + 1);
                if n_in != sites || n_out != sites {
                    v.push(Violation::GridMismatch {
                        layer,
                        reason: format!(
                            "2-D grid of side {} needs N_ℓ = N_{{ℓ+1}} = {sites} (got {n_in}, {n_out})",
                            side + 1
                        ),
                    });
                }
                if !all_grid {
                    v.push(Violation::MaskShape {
                        layer,
                        reason: "must use 2-D offsets".into(),
                    });
                }
            }
            ExtractorKind::FullyConnected => {
                if n_in != 1 || n_out != 1 || listed != 1 {
                    v.push(Violation::FullyConnectedShape { layer });
                }
            }
        }
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }

    let probe_stream = RngStream::new(0).split_named("validate/growth");
    for layer in 1..=l {
        let report = growth_probe(
            spec,
            layer,
            spec.probe.samples,
            &spec.probe.radii,
            &probe_stream.split(layer as u64),
        );
        if let Ok(r) = report {
            if r.flagged {
                v.push(Violation::Growth {
                    layer,
                    order: r.order,
                });
            }
        }
    }
    ValidationReport { violations: v }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthReport {
    pub order: f64,
    pub flagged: bool,
    pub radii: Vec<f64>,
    /// Largest `|σ(R_m^{(i,ℓ)}(z))|` observed at each radius.
    pub maxima: Vec<f64>,
}

/// Spot-checks the growth of `|σ(R(z))|` along random rays.
///
/// The same `samples` unit directions are scaled to every radius, so a
/// positively homogeneous activation yields an exact log-log slope.
pub fn growth_probe(
    spec: &ArchSpec,
    layer: usize,
    samples: usize,
    radii: &[f64],
    stream: &RngStream,
) -> Result<GrowthReport> {
    if radii.len() < 2 || radii.iter().any(|r| r.is_nan() || *r <= 0.0) {
        return Err(Error::InvalidArgument("growth probe needs at least two positive radii".into()));
    }
    let plan = spec.patch_plan(layer)?;
    let n = plan.in_sites;
    let mut rng = stream.rng();
    let dirs: Vec<Vec<f64>> = (0..samples.max(1))
        .map(|_| {
            let mut u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|x| *x /= norm);
            u
        })
        .collect();
    let maxima: Vec<f64> = radii
        .iter()
        .map(|&r| {
            let mut best = 0.0f64;
            for u in &dirs {
                for i in 0..plan.out_sites {
                    for m in 0..plan.mask_size {
                        let x = plan.component(i, m, |k| r * u[k]);
                        best = best.max(spec.activation.eval(x).abs());
                    }
                }
            }
            best
        })
        .collect();
    let pts: Vec<(f64, f64)> = radii
        .iter()
        .zip(&maxima)
        .filter(|(_, m)| **m > 0.0 && m.is_finite())
        .map(|(r, m)| (r.ln(), m.ln()))
        .collect();
    let order = if pts.len() < 2 {
        0.0
    } else {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    };
    Ok(GrowthReport {
        order,
        flagged: order >= spec.probe.max_order,
        radii: radii.to_vec(),
        maxima,
    })
}
