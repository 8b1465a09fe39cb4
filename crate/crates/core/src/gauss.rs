//! PSD matrices, square roots, conditional Gaussian sampling and the
//! generalized norm `‖Z‖²_Q`.

use crate::error::{Error, Result};
use crate::par::map_blocks;
use crate::stream::RngStream;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;

/// Relative eigenvalue cutoff: eigenvalues within `CLAMP_REL · ‖Q‖₂` of zero
/// are treated as zero.
pub const CLAMP_REL: f64 = 1e-10;

/// Channels per parallel block when sampling.
pub const CHANNEL_BLOCK: usize = 256;

pub fn clamp_tol(spectral_norm: f64) -> f64 {
    CLAMP_REL * spectral_norm
}

/// Eigenvalues and eigenvectors of the symmetric part of `m`.
pub fn sym_eigen(m: &Mat) -> (DVector<f64>, Mat) {
    let e = SymmetricEigen::new(symmetrize(m));
    (e.eigenvalues, e.eigenvectors)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// A symmetric positive-semidefinite `D × D` matrix over `D = N · P`
/// flattened `(site, input)` pairs, with `k(i, μ) = i·P + μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdMatrix {
    mat: Mat,
    inputs: usize,
}

impl PsdMatrix {
    /// Symmetrizes `mat`, rejects eigenvalues below `-1e-10·‖Q‖₂` and clamps
    /// the remaining negative ones to zero.
    pub fn new(mat: Mat, inputs: usize) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::Dimension(format!(
                "PSD matrix must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if inputs == 0 || !mat.nrows().is_multiple_of(inputs) {
            return Err(Error::Dimension(format!(
                "dimension {} is not a multiple of P = {inputs}",
                mat.nrows()
            )));
        }
        if mat.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("PSD matrix has non-finite entries".into()));
        }
        let sym = symmetrize(&mat);
        if sym.nrows() == 0 {
            return Ok(Self { mat: sym, inputs });
        }
        let (vals, vecs) = sym_eigen(&sym);
        let norm = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let tol = clamp_tol(norm);
        let min = vals.min();
        if min < -tol {
            return Err(Error::NotPsd { min_eig: min, tol });
        }
        let mat = if min < 0.0 {
            let clamped = vals.map(|v| v.max(0.0));
            symmetrize(&(&vecs * Mat::from_diagonal(&clamped) * vecs.transpose()))
        } else {
            sym
        };
        Ok(Self { mat, inputs })
    }

    pub fn scalar(q: f64) -> Result<Self> {
        Self::new(Mat::from_element(1, 1, q), 1)
    }

    pub fn zeros(dim: usize, inputs: usize) -> Self {
        Self {
            mat: Mat::zeros(dim, dim),
            inputs,
        }
    }

    pub fn identity(dim: usize, inputs: usize) -> Self {
        Self {
            mat: Mat::identity(dim, dim),
            inputs,
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn sites(&self) -> usize {
        self.dim() / self.inputs
    }

    /// Flattened position of `(site, input)`.
    pub fn index(&self, site: usize, input: usize) -> usize {
        site * self.inputs + input
    }

    pub fn get(&self, site_a: usize, mu: usize, site_b: usize, nu: usize) -> f64 {
        self.mat[(self.index(site_a, mu), self.index(site_b, nu))]
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn into_matrix(self) -> Mat {
        self.mat
    }

    pub fn spectral_norm(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        sym_eigen(&self.mat).0.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.mat * factor, self.inputs)
    }

    pub fn frobenius_distance(&self, other: &PsdMatrix) -> f64 {
        (&self.mat - &other.mat).norm()
    }
}

/// Symmetric square root of a raw symmetric matrix via eigendecomposition.
pub fn sqrt_matrix(q: &Mat) -> Result<Mat> {
    if q.nrows() == 0 {
        return Ok(q.clone());
    }
    let (vals, vecs) = sym_eigen(q);
    let norm = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = clamp_tol(norm);
    let min = vals.min();
    if min < -tol {
        return Err(Error::NotPsd { min_eig: min, tol });
    }
    let roots = vals.map(|v| v.max(0.0).sqrt());
    Ok(symmetrize(&(&vecs * Mat::from_diagonal(&roots) * vecs.transpose())))
}

/// `S` with `S·S ≈ Q`, symmetric.
pub fn psd_sqrt(q: &PsdMatrix) -> Result<PsdMatrix> {
    Ok(PsdMatrix {
        mat: sqrt_matrix(q.matrix())?,
        inputs: q.inputs,
    })
}

/// `channels × dim` standard normals, drawn in channel blocks of
/// [`CHANNEL_BLOCK`] from `stream.split(block)`, row-major within a block.
pub fn standard_normal_rows(stream: &RngStream, channels: usize, dim: usize) -> Mat {
    let blocks = map_blocks(channels, CHANNEL_BLOCK, stream, |range, s| {
        let mut rng = s.rng();
        (0..range.len() * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<f64>>()
    });
    let flat: Vec<f64> = blocks.into_iter().flatten().collect();
    Mat::from_row_slice(channels, dim, &flat)
}

/// Conditional preactivations of one layer: row `c` is `√K · z_c`, channels
/// independent.
pub fn sample_conditional_layer(k: &PsdMatrix, channels: usize, stream: &RngStream) -> Result<Mat> {
    if channels == 0 {
        return Err(Error::InvalidArgument("need at least one channel".into()));
    }
    let s = sqrt_matrix(k.matrix())?;
    Ok(standard_normal_rows(stream, channels, k.dim()) * s)
}

/// `‖Z‖²_Q = VᵀQV` for any `V` with `QV = Z`, or `+∞` when `Z ∉ Im(Q)`.
///
/// Computed as `Zᵀ Q⁺ Z` over eigenvalues above the clamp tolerance. `Z` is
/// outside the image when its residual after projection exceeds `1e-8·‖Z‖₂`.
pub fn generalized_q_norm(q: &PsdMatrix, z: &[f64]) -> Result<f64> {
    if z.len() != q.dim() {
        return Err(Error::Dimension(format!(
            "vector of length {} against a {}x{} matrix",
            z.len(),
            q.dim(),
            q.dim()
        )));
    }
    let zv = DVector::from_column_slice(z);
    let znorm = zv.norm();
    if znorm == 0.0 {
        return Ok(0.0);
    }
    let (vals, vecs) = sym_eigen(q.matrix());
    let tol = clamp_tol(vals.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let mut value = 0.0;
    let mut projected = DVector::zeros(z.len());
    for (k, &lam) in vals.iter().enumerate() {
        if lam > tol && lam > 0.0 {
            let v = vecs.column(k);
            let c = v.dot(&zv);
            value += c * c / lam;
            projected += v * c;
        }
    }
    if (zv - projected).norm() > 1e-8 * znorm {
        return Ok(f64::INFINITY);
    }
    Ok(value)
}
