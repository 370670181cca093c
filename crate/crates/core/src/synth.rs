//! Synthetic weight/activation fixtures with injected activation outliers.

use crate::error::{OwqError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Recipe for a synthetic layer: weight matrix plus calibration activations
/// whose chosen input channels carry outlier-scale magnitudes.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Input channel count (rows of X, columns of W).
    pub c_in: usize,
    /// Output channel count (rows of W).
    pub c_out: usize,
    /// Number of calibration samples (columns of X).
    pub n_samples: usize,
    /// (channel index, scale factor) pairs; each scale multiplies one X row.
    pub outlier_channels: Vec<(usize, f32)>,
    /// Seed for the deterministic generator.
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.n_samples == 0 {
            return Err(OwqError::InvalidParam(
                "c_in, c_out and n_samples must be positive".into(),
            ));
        }
        for &(ch, scale) in &self.outlier_channels {
            if ch >= self.c_in {
                return Err(OwqError::InvalidParam(format!(
                    "outlier channel {ch} out of range for c_in {}",
                    self.c_in
                )));
            }
            if scale < 1.0 {
                return Err(OwqError::InvalidParam(format!(
                    "outlier scale {scale} must be >= 1"
                )));
            }
        }
        Ok(())
    }
}

/// Generate `(W, X)`: a `c_out×c_in` standard-normal weight matrix and a
/// `c_in×n_samples` activation matrix with the requested outlier rows.
///
/// Pure function of its arguments: identical seeds produce identical bits.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let w = rng::normal_matrix(&mut rng, spec.c_out, spec.c_in);
    let mut x = rng::normal_matrix(&mut rng, spec.c_in, spec.n_samples);
    let n = spec.n_samples;
    for &(ch, scale) in &spec.outlier_channels {
        for v in &mut x.data_mut()[ch * n..(ch + 1) * n] {
            *v *= scale;
        }
    }
    Ok((w, x))
}
