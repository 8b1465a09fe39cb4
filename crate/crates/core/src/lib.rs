//! Desk-scale numerics for the infinite-channel asymptotics of convolutional
//! networks with Gaussian weights.
//!
//! * [`arch`]: architectures and receptive-field extractors.
//! * [`gauss`]: PSD matrices, square roots, conditional Gaussian sampling.
//! * [`kernel`]: the covariance Markov chain and its deterministic limit.
//! * [`ldp`]: log-MGF estimation and layerwise large-deviation rates.
//! * [`posterior`]: Gaussian likelihood and posterior reweighting of kernels.
//! * [`stats`]: test statistics used by the verification harnesses.
//! * [`io`]: file formats (CSV tensors, hex-float JSON).

pub mod arch;
pub mod error;
pub mod gauss;
pub mod io;
pub mod kernel;
pub mod ldp;
pub mod par;
pub mod posterior;
pub mod stats;
pub mod stream;

pub use arch::{Activation, ArchSpec, ExtractorKind, LayerSpec, MaskSet};
pub use error::{Error, Result};
pub use gauss::{Mat, PsdMatrix};
pub use kernel::{InputBatch, KernelChain};
pub use stream::RngStream;
pub use ldp::{MgfEstimate, RateResult, TiltMatrix};
pub use posterior::Observations;
