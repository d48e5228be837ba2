//! PCA spectral reduction over all pixels of a cube.

use nalgebra::{DMatrix, DVector};

use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::Real;

/// Spectrally reduced cube: per-pixel component scores plus the projection
/// that produced them.
#[derive(Clone, Debug)]
pub struct ReducedCube {
    pub height: usize,
    pub width: usize,
    /// Retained component count d.
    pub dim: usize,
    /// `[row][col][component]` row-major.
    pub scores: Vec<Real>,
    /// V×d, row-major `[band][component]`; orthonormal columns.
    pub basis: Vec<Real>,
    /// Per-band mean over all pixels.
    pub mean: Vec<Real>,
    /// Eigenvalues of the retained components, non-increasing.
    pub explained: Vec<Real>,
    /// Set when the data covariance is rank-deficient and trailing
    /// components were zeroed.
    pub rank_deficient: bool,
}

impl ReducedCube {
    pub fn pixel(&self, row: usize, col: usize) -> &[Real] {
        let off = (row * self.width + col) * self.dim;
        &self.scores[off..off + self.dim]
    }
}

/// Project every pixel onto the top-d eigenvectors of the band covariance
/// (population normalization, computed over all pixels, labeled or not).
/// Component signs are fixed so each eigenvector's largest-magnitude entry
/// is positive; ties take the earliest band.
pub fn pca_reduce(cube: &HsiCube, d: usize) -> Result<ReducedCube> {
    let v = cube.bands;
    if d == 0 || d > v {
        return Err(Error::invalid(format!(
            "pca_reduce: requested dimension {d} outside 1..={v}"
        )));
    }
    let n_pix = cube.height * cube.width;
    let nf = n_pix as Real;

    let mut mean = vec![0.0 as Real; v];
    for px in 0..n_pix {
        for b in 0..v {
            mean[b] += cube.radiance[px * v + b];
        }
    }
    for m in mean.iter_mut() {
        *m /= nf;
    }

    let mut cov = DMatrix::<Real>::zeros(v, v);
    let mut centered = vec![0.0 as Real; v];
    for px in 0..n_pix {
        for b in 0..v {
            centered[b] = cube.radiance[px * v + b] - mean[b];
        }
        for i in 0..v {
            let ci = centered[i];
            for j in i..v {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..v {
        for j in i..v {
            let val = cov[(i, j)] / nf;
            cov[(i, j)] = val;
            cov[(j, i)] = val;
        }
    }
    let total_variance = cov.trace();

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let rank_tol = total_variance.max(1e-300) * 1e-12;
    let mut basis = vec![0.0 as Real; v * d];
    let mut explained = Vec::with_capacity(d);
    let mut rank_deficient = false;
    for (j, &src) in order.iter().take(d).enumerate() {
        let lam = eig.eigenvalues[src];
        if lam <= rank_tol {
            // Beyond the data rank: report a zero component.
            explained.push(0.0);
            rank_deficient = true;
            continue;
        }
        explained.push(lam);
        let col: DVector<Real> = eig.eigenvectors.column(src).into();
        // Sign convention: largest-magnitude entry positive.
        let mut best = 0;
        for i in 1..v {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let flip = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for b in 0..v {
            basis[b * d + j] = flip * col[b];
        }
    }

    let mut scores = vec![0.0 as Real; n_pix * d];
    for px in 0..n_pix {
        for b in 0..v {
            centered[b] = cube.radiance[px * v + b] - mean[b];
        }
        let out = &mut scores[px * d..(px + 1) * d];
        for b in 0..v {
            let c = centered[b];
            if c == 0.0 {
                continue;
            }
            let brow = &basis[b * d..(b + 1) * d];
            for (o, w) in out.iter_mut().zip(brow) {
                *o += c * w;
            }
        }
    }

    Ok(ReducedCube {
        height: cube.height,
        width: cube.width,
        dim: d,
        scores,
        basis,
        mean,
        explained,
        rank_deficient,
    })
}
