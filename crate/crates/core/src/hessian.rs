//! Per-layer Hessian accumulation, dampening, and inverse factorization.
//!
//! For a linear layer the layer-wise quadratic error shares one Hessian
//! `H = 2XXᵀ` across all output rows, where `X` holds the calibration
//! activations reaching the layer. The engine consumes the upper Cholesky
//! factor `U` of `H⁻¹` (so `UᵀU = H⁻¹`); row `q` of `U` carries the
//! suffix-submatrix inverse needed by the column-sequential update.
//!
//! Accumulation and factorization run in f64 internally; tensors everywhere
//! else stay f32.

use crate::error::{OwqError, Result};
use crate::tensor::Tensor;

/// Accumulated, optionally dampened Hessian for one layer.
#[derive(Debug, Clone)]
pub struct HessianState {
    h: Vec<f64>,
    c_in: usize,
    n_samples: usize,
    damp_applied: f64,
    dead_columns: Vec<usize>,
}

impl HessianState {
    /// Fresh all-zero state for a layer of input width `c_in`.
    pub fn new(c_in: usize) -> Self {
        Self { h: vec![0.0; c_in * c_in], c_in, n_samples: 0, damp_applied: 0.0, dead_columns: Vec::new() }
    }

    /// Build a state directly from one activation batch.
    pub fn from_activations(x: &Tensor) -> Result<Self> {
        let mut s = Self::new(x.rows());
        s.accumulate(x)?;
        Ok(s)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn damp_applied(&self) -> f64 {
        self.damp_applied
    }

    /// Columns whose diagonal was exactly zero before dampening.
    pub fn dead_columns(&self) -> &[usize] {
        &self.dead_columns
    }

    /// Row-major `c_in×c_in` Hessian.
    pub fn matrix(&self) -> &[f64] {
        &self.h
    }

    /// Hessian diagonal (the per-column λ values).
    pub fn diag(&self) -> Vec<f64> {
        (0..self.c_in).map(|j| self.h[j * self.c_in + j]).collect()
    }

    /// Add `2·x·xᵀ` for a `c_in×n` batch of activation columns.
    pub fn accumulate(&mut self, x_batch: &Tensor) -> Result<()> {
        if x_batch.shape().len() != 2 || x_batch.rows() != self.c_in {
            return Err(OwqError::ShapeMismatch(format!(
                "x_batch shape {:?} does not match c_in {}",
                x_batch.shape(),
                self.c_in
            )));
        }
        let n = x_batch.cols();
        let c = self.c_in;
        for i in 0..c {
            let xi = x_batch.row(i);
            for j in i..c {
                let xj = x_batch.row(j);
                let mut acc = 0.0f64;
                for k in 0..n {
                    acc += xi[k] as f64 * xj[k] as f64;
                }
                let v = 2.0 * acc;
                self.h[i * c + j] += v;
                if i != j {
                    self.h[j * c + i] += v;
                }
            }
        }
        self.n_samples += n;
        Ok(())
    }

    /// Add `percdamp · mean(diag)` to every diagonal entry, recording the
    /// columns that had no calibration signal at all.
    pub fn dampen(&mut self, percdamp: f64) -> Result<()> {
        if percdamp <= 0.0 {
            return Err(OwqError::InvalidParam("percdamp must be positive".into()));
        }
        let c = self.c_in;
        let mean_diag: f64 = (0..c).map(|j| self.h[j * c + j]).sum::<f64>() / c as f64;
        if mean_diag == 0.0 {
            return Err(OwqError::AllZeroHessian);
        }
        self.dead_columns = (0..c).filter(|&j| self.h[j * c + j] == 0.0).collect();
        let damp = percdamp * mean_diag;
        for j in 0..c {
            self.h[j * c + j] += damp;
        }
        self.damp_applied += damp;
        Ok(())
    }

    /// Upper Cholesky factor `U` of `H⁻¹` with `UᵀU = H⁻¹`.
    pub fn cholesky_inverse(&self) -> Result<UpperFactor> {
        let c = self.c_in;
        let l = cholesky_lower(&self.h, c)?;
        let linv = invert_lower(&l, c);
        // H⁻¹ = Linvᵀ·Linv
        let mut hinv = vec![0.0f64; c * c];
        for i in 0..c {
            for j in i..c {
                let mut acc = 0.0;
                // Linv is lower: Linv[k][i] nonzero for k >= i.
                for k in j..c {
                    acc += linv[k * c + i] * linv[k * c + j];
                }
                hinv[i * c + j] = acc;
                hinv[j * c + i] = acc;
            }
        }
        let m = cholesky_lower(&hinv, c)?;
        // U = Mᵀ satisfies UᵀU = M·Mᵀ = H⁻¹.
        let mut u = vec![0.0f64; c * c];
        for i in 0..c {
            for j in 0..=i {
                u[j * c + i] = m[i * c + j];
            }
        }
        Ok(UpperFactor { u, n: c })
    }

    /// State with rows/columns reordered by `perm` (entry `p` of the result
    /// corresponds to original column `perm[p]`).
    pub fn permuted(&self, perm: &[usize]) -> HessianState {
        assert_eq!(perm.len(), self.c_in);
        let c = self.c_in;
        let mut h = vec![0.0f64; c * c];
        for i in 0..c {
            for j in 0..c {
                h[i * c + j] = self.h[perm[i] * c + perm[j]];
            }
        }
        let dead = (0..c).filter(|&p| self.dead_columns.contains(&perm[p])).collect();
        HessianState {
            h,
            c_in: c,
            n_samples: self.n_samples,
            damp_applied: self.damp_applied,
            dead_columns: dead,
        }
    }
}

/// Upper-triangular factor of an inverse Hessian.
#[derive(Debug, Clone)]
pub struct UpperFactor {
    u: Vec<f64>,
    n: usize,
}

impl UpperFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.u[r * self.n + c]
    }

    /// Row `r` as a slice over all columns.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.u[r * self.n..(r + 1) * self.n]
    }

    /// Reconstruct `UᵀU` (the inverse Hessian) for verification.
    pub fn reconstruct_inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..=i.min(j) {
                    acc += self.u[k * n + i] * self.u[k * n + j];
                }
                a[i * n + j] = acc;
            }
        }
        a
    }
}

/// Lower Cholesky factor of a row-major SPD matrix.
fn cholesky_lower(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(OwqError::NotPositiveDefinite { pivot: i });
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0f64; n * n];
    for col in 0..n {
        inv[col * n + col] = 1.0 / l[col * n + col];
        for row in col + 1..n {
            let mut s = 0.0;
            for k in col..row {
                s += l[row * n + k] * inv[k * n + col];
            }
            inv[row * n + col] = -s / l[row * n + row];
        }
    }
    inv
}
