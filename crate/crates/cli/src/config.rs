//! Experiment configuration (TOML) and the shipped presets.

use convldp::arch::{ExtractorKind, InputMaskNorm, LayerSpec, MaskSet, ProbeParams};
use convldp::ldp::{Direction, Event, MarginalOptions, RateOptions, Statistic};
use convldp::{Activation, ArchSpec, Error, InputBatch, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Preset name, when the config came from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seed: u64,
    /// Output root; overridden by `--out` and `CONVLDP_OUT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Inline architecture, or `arch_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_file: Option<PathBuf>,
    pub inputs: InputsConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub limit: LimitConfig,
    #[serde(default)]
    pub clt: CltConfig,
    #[serde(default)]
    pub rate: RateConfig,
    #[serde(default)]
    pub rate_chain: RateChainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldp: Option<LdpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<PosteriorConfig>,
}

/// Input tensor: `values` in `(μ, c, i)` order, or a CSV `file` with
/// header `mu,c,i,value`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub n: Vec<usize>,
    pub replicas: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n: vec![64, 256, 1024],
            replicas: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimitConfig {
    pub samples: usize,
    pub antithetic: bool,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            antithetic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CltConfig {
    pub n: usize,
    pub replicas: usize,
    /// Scale for the weight-space sampler in the two-sample test; both
    /// samplers run at this scale there. Defaults to `n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forward_n: Option<usize>,
    pub permutations: usize,
    pub level: f64,
}

impl Default for CltConfig {
    fn default() -> Self {
        Self {
            n: 4096,
            replicas: 2000,
            forward_n: None,
            permutations: 199,
            level: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateConfig {
    /// `I_ℓ(s·K^{(ℓ+1)} | K^{(ℓ)})` is evaluated at each scale `s`.
    pub layer: usize,
    pub scales: Vec<f64>,
    pub options: RateOptions,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            layer: 1,
            scales: vec![0.5, 1.0, 1.5],
            options: RateOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateChainConfig {
    /// `Q_{ℓ+1} = s_ℓ · K^{(ℓ+1)}`, one scale per hidden layer; empty means
    /// the limit chain itself.
    pub scales: Vec<f64>,
    pub options: RateOptions,
    /// Also minimize over intermediates for the output marginal (`L ≤ 2`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginal: Option<MarginalOptions>,
}

/// An event on `K^{(layer,n)}`. With `relative`, the threshold is `level`
/// times the same statistic of the limit kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub layer: usize,
    pub statistic: Statistic,
    pub direction: Direction,
    pub level: f64,
    #[serde(default)]
    pub relative: bool,
}

impl EventConfig {
    /// The concrete event, given the limit kernel of the same layer.
    pub fn resolve(&self, limit: &convldp::PsdMatrix) -> Event {
        let mut e = Event {
            layer: self.layer,
            statistic: self.statistic,
            direction: self.direction,
            level: self.level,
        };
        if self.relative {
            let base = match self.statistic {
                Statistic::Entry { row, col } => limit.matrix()[(row, col)],
                Statistic::Frobenius => limit.matrix().norm(),
            };
            e.level *= base;
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdpConfig {
    pub event: EventConfig,
    pub n: Vec<usize>,
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorConfig {
    pub beta: f64,
    /// Observations in channel-major `(c, i, μ)` order, or `observation_file`
    /// in the input CSV layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_file: Option<PathBuf>,
    pub n: usize,
    pub samples: usize,
    /// Laziness check: prior vs posterior mass of `event` (on the output
    /// kernel) at each scale.
    pub laziness_n: Vec<usize>,
    pub event: EventConfig,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.arch_file);
        fix(&mut cfg.inputs.file);
        if let Some(post) = cfg.posterior.as_mut() {
            fix(&mut post.observation_file);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-serializable")
    }

    fn check_files(&self) -> Result<()> {
        let mut files: Vec<&PathBuf> = vec![];
        files.extend(self.arch_file.iter());
        files.extend(self.inputs.file.iter());
        if let Some(p) = &self.posterior {
            files.extend(p.observation_file.iter());
        }
        for f in files {
            if !f.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("referenced file {} does not exist", f.display()),
                )));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        match (&self.arch, &self.arch_file) {
            (Some(a), None) => Ok(a.clone()),
            (None, Some(f)) => ArchSpec::from_toml(&std::fs::read_to_string(f)?),
            _ => Err(Error::Parse("give exactly one of `arch` or `arch_file`".into())),
        }
    }

    pub fn input_batch(&self, spec: &ArchSpec) -> Result<InputBatch> {
        let (p, c, n) = (spec.inputs, spec.input_channels, spec.spatial[0]);
        match (&self.inputs.values, &self.inputs.file) {
            (Some(v), None) => InputBatch::new(p, c, n, v.clone()),
            (None, Some(f)) => convldp::io::read_input_batch(std::fs::File::open(f)?, p, c, n),
            _ => Err(Error::Parse("give exactly one of `inputs.values` or `inputs.file`".into())),
        }
    }
}

pub const PRESETS: [&str; 4] = ["fcnn-scalar-identity", "circular1d-relu", "pool2-tanh", "zeropad2d-relu"];

/// A complete configuration for one of the example architectures.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (arch, inputs, forward_n) = match name {
        "fcnn-scalar-identity" => (fcnn_scalar(), vec![1.0], None),
        "circular1d-relu" => (
            circular_relu(),
            vec![1.0, 0.5, -0.5, 0.25, 0.3, -1.0, 0.8, 0.1],
            Some(256),
        ),
        "pool2-tanh" => (
            pool2_tanh(),
            (0..8).map(|i| (0.7 * i as f64).sin() + 0.2).collect(),
            None,
        ),
        "zeropad2d-relu" => (
            zeropad_relu(),
            vec![1.0, -0.5, 0.25, 0.8, 0.0, -1.0, 0.4, 0.6, -0.2],
            None,
        ),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let l = arch.hidden_layers;
    let out = arch.dim(l + 1);
    let scalar = name == "fcnn-scalar-identity";
    Ok(ExperimentConfig {
        name: Some(name.into()),
        seed: 20_240_601,
        output: None,
        arch: Some(arch),
        arch_file: None,
        inputs: InputsConfig {
            values: Some(inputs),
            file: None,
        },
        chain: ChainConfig::default(),
        limit: LimitConfig::default(),
        clt: CltConfig {
            forward_n,
            ..Default::default()
        },
        rate: RateConfig {
            scales: if scalar { vec![0.25, 0.5, 1.5, 2.0, 4.0] } else { vec![0.9, 1.0, 1.1] },
            ..Default::default()
        },
        rate_chain: RateChainConfig::default(),
        ldp: Some(LdpConfig {
            event: EventConfig {
                layer: 2,
                statistic: Statistic::Entry { row: 0, col: 0 },
                direction: Direction::AtLeast,
                level: 1.5,
                relative: !scalar,
            },
            n: vec![20, 50, 100],
            replicas: 100_000,
        }),
        posterior: Some(PosteriorConfig {
            beta: 1.0,
            observations: Some((0..out).map(|k| if k % 2 == 0 { 2.0 } else { -1.0 }).collect()),
            observation_file: None,
            n: 64,
            samples: 4000,
            laziness_n: vec![64, 256, 1024],
            event: EventConfig {
                layer: l + 1,
                statistic: Statistic::Frobenius,
                direction: Direction::AtLeast,
                level: 1.0,
                relative: true,
            },
        }),
    })
}

fn base(l: usize, spatial: Vec<usize>, inputs: usize, act: Activation, layers: Vec<LayerSpec>) -> ArchSpec {
    ArchSpec {
        hidden_layers: l,
        inputs,
        input_channels: 1,
        output_channels: 1,
        spatial,
        channel_slopes: vec![1.0; l],
        activation: act,
        input_mask_norm: InputMaskNorm::Layer0,
        probe: ProbeParams::default(),
        layers,
    }
}

fn fcnn_scalar() -> ArchSpec {
    base(
        1,
        vec![1, 1, 1],
        1,
        Activation::Identity,
        vec![LayerSpec::new(ExtractorKind::FullyConnected, 1.0); 2],
    )
}

fn circular_relu() -> ArchSpec {
    base(
        2,
        vec![4, 4, 4, 4],
        2,
        Activation::Relu,
        vec![LayerSpec::new(ExtractorKind::Circular1d { halfwidth: 1 }, 1.0); 3],
    )
}

fn pool2_tanh() -> ArchSpec {
    base(
        1,
        vec![8, 8, 4],
        1,
        Activation::Tanh,
        vec![
            LayerSpec::new(ExtractorKind::Circular1d { halfwidth: 1 }, 1.0),
            LayerSpec::new(ExtractorKind::Circular1dPool2, 1.0),
        ],
    )
}

fn zeropad_relu() -> ArchSpec {
    let layer = LayerSpec::new(ExtractorKind::ZeroPad2d3x3 { side: 2 }, 1.0);
    debug_assert_eq!(layer.mask, MaskSet::square_3x3());
    base(1, vec![9, 9, 9], 1, Activation::Relu, vec![layer; 2])
}
