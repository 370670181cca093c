//! Reference forward computation.
//!
//! [`dense_matmul`] is the naive triple-loop oracle. [`mixed_forward`]
//! computes the packed layer's output the way the mixed kernel does: the
//! low-bit matrix is dequantized on the fly with weak columns contributing
//! zero, and the fp16 sidecar is applied to the gathered weak activation
//! channels. Accumulation is f32 throughout.

use half::f16;

use crate::error::{OwqError, Result};
use crate::packed::QuantizedLayer;
use crate::selector::AccountingMode;
use crate::tensor::Tensor;

/// Naive `m×k · k×n` matrix product with 32-bit accumulation.
pub fn dense_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(OwqError::ShapeMismatch(format!(
            "inner dims differ: {m}×{ka} · {kb}×{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for l in 0..ka {
            let av = a.at(i, l);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(l);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Mixed-precision forward: zero-filled low-bit product plus the fp16
/// weak-column sidecar applied to the matching activation channels.
pub fn mixed_forward(layer: &QuantizedLayer, x: &Tensor) -> Result<Tensor> {
    if x.rows() != layer.c_in {
        return Err(OwqError::ShapeMismatch(format!(
            "activations have {} channels, layer expects {}",
            x.rows(),
            layer.c_in
        )));
    }
    let n = x.cols();
    let (c_out, c_in) = (layer.c_out, layer.c_in);
    let codes = layer.codes()?;
    let pc = layer.packed_cols();
    let k = layer.k();
    let mut out = vec![0.0f32; c_out * n];

    // Low-bit part: weak columns contribute zero.
    for r in 0..c_out {
        let orow = &mut out[r * n..(r + 1) * n];
        let mut packed_col = 0usize;
        for c in 0..c_in {
            if layer.is_weak(c) {
                if layer.mode == AccountingMode::LatencyFavored {
                    packed_col += 1;
                }
                continue;
            }
            let (step, lo) = layer.param(r, c);
            let wv = lo + step * codes[r * pc + packed_col] as f32;
            packed_col += 1;
            if wv == 0.0 {
                continue;
            }
            let xrow = x.row(c);
            for j in 0..n {
                orow[j] += wv * xrow[j];
            }
        }
    }

    // Sidecar: fp16 weak columns × gathered activation channels.
    for r in 0..c_out {
        let orow = &mut out[r * n..(r + 1) * n];
        for (pos, &wi) in layer.weak_indices.iter().enumerate() {
            let wv = f16::from_bits(layer.weak_values[r * k + pos]).to_f32();
            if wv == 0.0 {
                continue;
            }
            let xrow = x.row(wi as usize);
            for j in 0..n {
                orow[j] += wv * xrow[j];
            }
        }
    }
    Tensor::matrix(c_out, n, out)
}

/// `‖w_ref·x − mixed_forward(layer, x)‖²_F`, accumulated in f64.
pub fn layer_output_error(w_ref: &Tensor, layer: &QuantizedLayer, x: &Tensor) -> Result<f64> {
    if w_ref.rows() != layer.c_out || w_ref.cols() != layer.c_in {
        return Err(OwqError::ShapeMismatch(format!(
            "reference is {}×{}, layer is {}×{}",
            w_ref.rows(),
            w_ref.cols(),
            layer.c_out,
            layer.c_in
        )));
    }
    let reference = dense_matmul(w_ref, x)?;
    let mixed = mixed_forward(layer, x)?;
    let mut err = 0.0f64;
    for (a, b) in reference.data().iter().zip(mixed.data()) {
        let d = (a - b) as f64;
        err += d * d;
    }
    Ok(err)
}
