//! Orthonormal DCT encoding and decoding of per-joint, per-channel
//! trajectories, plus last-frame padding of the unknown future.
//!
//! The basis is the type-II DCT with orthonormal scaling: for a length-`N`
//! signal, row `l` (0-based) and column `t` hold
//! `sqrt(2/N) * cos(pi/(2N) * (2t+1) * l) / sqrt(1 + [l == 0])`,
//! so row 0 is the constant vector `1/sqrt(N)` and the full basis satisfies
//! `B * B^T = I`. Keeping only the first `L` rows truncates the spectrum to
//! the `L` lowest frequencies.

use ndarray::{Array1, Array2, Array3, ArrayView1};

use crate::error::{Error, Result};
use crate::pose::PoseSequence;

/// Precomputed `L x N` transform matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    matrix: Array2<f64>,
    n: usize,
    l: usize,
}

impl DctBasis {
    /// Signal length `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of retained coefficients `L`.
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

/// Build the `l x n` orthonormal DCT basis.
pub fn make_basis(n: usize, l: usize) -> Result<DctBasis> {
    if n == 0 {
        return Err(Error::Invalid("basis length n must be positive".into()));
    }
    if l == 0 || l > n {
        return Err(Error::Invalid(format!("coefficient count l={l} outside [1, {n}]")));
    }
    let nf = n as f64;
    let matrix = Array2::from_shape_fn((l, n), |(row, t)| {
        let norm = if row == 0 { 2.0_f64.sqrt() } else { 1.0 };
        (2.0 / nf).sqrt() / norm
            * (std::f64::consts::PI / (2.0 * nf) * ((2 * t + 1) * row) as f64).cos()
    });
    Ok(DctBasis { matrix, n, l })
}

/// Extend a trajectory by repeating its final value `tau` times.
pub fn pad_future(traj: &[f64], tau: usize) -> Result<Vec<f64>> {
    let last = *traj.last().ok_or_else(|| Error::Invalid("cannot pad an empty trajectory".into()))?;
    let mut out = Vec::with_capacity(traj.len() + tau);
    out.extend_from_slice(traj);
    out.extend(std::iter::repeat(last).take(tau));
    Ok(out)
}

/// Forward transform of one scalar trajectory: `coeffs = B * traj`.
pub fn encode(traj: ArrayView1<f64>, basis: &DctBasis) -> Result<Array1<f64>> {
    if traj.len() != basis.n {
        return Err(Error::Shape(format!(
            "trajectory length {} does not match basis n={}",
            traj.len(),
            basis.n
        )));
    }
    Ok(basis.matrix.dot(&traj))
}

/// Inverse transform: `traj = B^T * coeffs`. Exact inverse when `L = N`.
pub fn decode(coeffs: ArrayView1<f64>, basis: &DctBasis) -> Result<Array1<f64>> {
    if coeffs.len() != basis.l {
        return Err(Error::Shape(format!(
            "coefficient length {} does not match basis l={}",
            coeffs.len(),
            basis.l
        )));
    }
    Ok(basis.matrix.t().dot(&coeffs))
}

/// Encode every joint of a sequence into a `(J, D*L)` feature matrix.
///
/// The layout is channel-major within each joint row: columns `[d*L, (d+1)*L)`
/// hold channel `d`'s spectrum.
pub fn encode_sequence(seq: &PoseSequence, basis: &DctBasis) -> Result<Array2<f64>> {
    encode_coords(seq.coords(), basis)
}

/// `encode_sequence` on a raw `(N, J, D)` coordinate tensor.
pub fn encode_coords(coords: &Array3<f64>, basis: &DctBasis) -> Result<Array2<f64>> {
    let (n, j, d) = coords.dim();
    if n != basis.n {
        return Err(Error::Shape(format!(
            "sequence length {n} does not match basis n={}",
            basis.n
        )));
    }
    let l = basis.l;
    let mut features = Array2::zeros((j, d * l));
    for jj in 0..j {
        for dd in 0..d {
            let traj = coords.slice(ndarray::s![.., jj, dd]);
            let coeffs = basis.matrix.dot(&traj);
            features
                .slice_mut(ndarray::s![jj, dd * l..(dd + 1) * l])
                .assign(&coeffs);
        }
    }
    Ok(features)
}

/// Decode a `(J, D*L)` feature matrix back into `(N, J, D)` coordinates.
///
/// Visibility is not reconstructed here; callers attach their own flags.
pub fn decode_sequence(features: &Array2<f64>, basis: &DctBasis, dims: usize) -> Result<Array3<f64>> {
    let (j, cols) = features.dim();
    let l = basis.l;
    if dims == 0 || cols != dims * l {
        return Err(Error::Shape(format!(
            "feature width {cols} does not match dims {dims} x l={l}"
        )));
    }
    let mut coords = Array3::zeros((basis.n, j, dims));
    for jj in 0..j {
        for dd in 0..dims {
            let coeffs = features.slice(ndarray::s![jj, dd * l..(dd + 1) * l]);
            let traj = basis.matrix.t().dot(&coeffs);
            coords.slice_mut(ndarray::s![.., jj, dd]).assign(&traj);
        }
    }
    Ok(coords)
}

/// Pull a `(N, J, D)` coordinate gradient back through `decode_sequence`.
///
/// `decode_sequence` is linear (`traj = B^T c`), so the feature gradient is
/// `B * grad_traj` per channel, laid out like `encode_coords`.
pub fn decode_sequence_backward(grad_coords: &Array3<f64>, basis: &DctBasis) -> Result<Array2<f64>> {
    encode_coords(grad_coords, basis)
}
