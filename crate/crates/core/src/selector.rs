//! Weak-column selection and extra-bit budgeting.
//!
//! The sensitivity of column `j` is `λ_j·‖ΔW_{:,j}‖²`, where `λ_j` is the
//! Hessian diagonal and `ΔW` is the round-to-nearest reconstruction error at
//! the target bit-width. Columns aligned with activation outliers inflate
//! `λ_j`, so they rank first even when their weights look unremarkable.
//! The top-k columns are kept in fp16; `k` comes from an average-extra-bit
//! budget spread across the layers of a block.

use serde::{Deserialize, Serialize};

use crate::error::{OwqError, Result};
use crate::hessian::HessianState;
use crate::quantgrid::rtn_reconstruct;
use crate::tensor::Tensor;

/// How weak columns are accounted for in storage.
///
/// `LatencyFavored` keeps the zero-filled columns inside the packed matrix
/// (dense kernels stay regular); `StorageFavored` drops them from the packed
/// matrix entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    LatencyFavored,
    StorageFavored,
}

impl AccountingMode {
    pub fn name(self) -> &'static str {
        match self {
            AccountingMode::LatencyFavored => "latency",
            AccountingMode::StorageFavored => "storage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latency" | "latency_favored" => Ok(AccountingMode::LatencyFavored),
            "storage" | "storage_favored" => Ok(AccountingMode::StorageFavored),
            other => Err(OwqError::InvalidParam(format!("unknown accounting mode '{other}'"))),
        }
    }
}

/// Per-column sensitivity scores for one layer.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    /// Hessian diagonal λ per column.
    pub lambda_diag: Vec<f64>,
    /// Squared column norms of the RTN error ΔW.
    pub delta_norms: Vec<f64>,
    /// `λ_j·‖ΔW_{:,j}‖²`, zero for dead columns.
    pub sensitivity: Vec<f64>,
    /// Selected weak columns, ascending (empty before selection).
    pub selected: Vec<usize>,
}

/// Score every column of a layer. `selected` is left empty; call
/// [`select_weak_columns`] with the budgeted `k`.
pub fn column_sensitivities(
    w: &Tensor,
    hstate: &HessianState,
    bits: u8,
    clip_search: bool,
) -> Result<SensitivityReport> {
    let (c_out, c_in) = (w.rows(), w.cols());
    if hstate.c_in() != c_in {
        return Err(OwqError::ShapeMismatch(format!(
            "weight has c_in {c_in}, Hessian has {}",
            hstate.c_in()
        )));
    }
    let recon = rtn_reconstruct(w, bits, 0, clip_search)?;
    let mut delta_norms = vec![0.0f64; c_in];
    for r in 0..c_out {
        for c in 0..c_in {
            let d = (w.at(r, c) - recon.at(r, c)) as f64;
            delta_norms[c] += d * d;
        }
    }
    let lambda_diag = hstate.diag();
    let mut sensitivity: Vec<f64> =
        lambda_diag.iter().zip(&delta_norms).map(|(l, d)| l * d).collect();
    for &dead in hstate.dead_columns() {
        sensitivity[dead] = 0.0;
    }
    Ok(SensitivityReport { lambda_diag, delta_norms, sensitivity, selected: Vec::new() })
}

/// Indices of the `k` highest-sensitivity columns, ties broken by ascending
/// index, returned sorted ascending.
pub fn select_weak_columns(report: &SensitivityReport, k: usize) -> Result<Vec<usize>> {
    let c_in = report.sensitivity.len();
    if k > c_in {
        return Err(OwqError::InvalidParam(format!("k {k} exceeds c_in {c_in}")));
    }
    let mut order: Vec<usize> = (0..c_in).collect();
    order.sort_by(|&a, &b| {
        report.sensitivity[b].total_cmp(&report.sensitivity[a]).then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Storage cost, in bits, of retaining one weak column of a layer: the fp16
/// copy of the column plus its 16-bit index, minus the packed bits it frees
/// under storage-favored accounting.
pub fn cost_per_column(c_out: usize, bits: u8, mode: AccountingMode) -> f64 {
    match mode {
        AccountingMode::LatencyFavored => 16.0 * c_out as f64 + 16.0,
        AccountingMode::StorageFavored => (16.0 - bits as f64) * c_out as f64 + 16.0,
    }
}

/// Budgeted weak-column counts for the layers of a block.
#[derive(Debug, Clone)]
pub struct BudgetPlan {
    pub extra_bits: f64,
    pub bits: u8,
    pub mode: AccountingMode,
    /// `(c_out, c_in)` per layer.
    pub layer_dims: Vec<(usize, usize)>,
    /// Bit budget granted to each layer.
    pub per_layer_budget: Vec<f64>,
    pub k_per_layer: Vec<usize>,
}

impl BudgetPlan {
    /// Average extra bits per weight actually realized by the floored plan.
    pub fn realized_extra_bits(&self) -> f64 {
        let total: f64 = self.layer_dims.iter().map(|&(o, i)| (o * i) as f64).sum();
        let spent: f64 = self
            .layer_dims
            .iter()
            .zip(&self.k_per_layer)
            .map(|(&(o, _), &k)| k as f64 * cost_per_column(o, self.bits, self.mode))
            .sum();
        spent / total
    }

    /// Extra storage implied by the budget for a model of `total_weights`
    /// parameters, in bytes.
    pub fn budgeted_extra_bytes(&self, total_weights: f64) -> f64 {
        self.extra_bits * total_weights / 8.0
    }
}

/// Split an average extra-bit budget across the layers of a block and floor
/// each layer's column count so the realized average never exceeds the
/// budget. `layer_weights`, when given, splits the budget proportionally
/// instead of evenly.
pub fn budget_to_k(
    extra_bits: f64,
    layer_dims: &[(usize, usize)],
    bits: u8,
    mode: AccountingMode,
    layer_weights: Option<&[f64]>,
) -> Result<BudgetPlan> {
    if extra_bits < 0.0 {
        return Err(OwqError::InvalidParam("extra_bits must be non-negative".into()));
    }
    if layer_dims.is_empty() {
        return Err(OwqError::InvalidParam("layer_dims must be non-empty".into()));
    }
    if let Some(&(_, wide)) = layer_dims.iter().find(|&&(_, c_in)| c_in > 65536) {
        return Err(OwqError::LayerTooWide { c_in: wide });
    }
    let weights: Vec<f64> = match layer_weights {
        Some(w) => {
            if w.len() != layer_dims.len() {
                return Err(OwqError::InvalidParam(format!(
                    "{} layer weights for {} layers",
                    w.len(),
                    layer_dims.len()
                )));
            }
            if w.iter().any(|&v| v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(OwqError::InvalidParam(
                    "layer weights must be non-negative with a positive sum".into(),
                ));
            }
            w.to_vec()
        }
        None => vec![1.0; layer_dims.len()],
    };
    let wsum: f64 = weights.iter().sum();
    let total_weights: f64 = layer_dims.iter().map(|&(o, i)| (o * i) as f64).sum();
    let total_budget = extra_bits * total_weights;

    let mut per_layer_budget = Vec::with_capacity(layer_dims.len());
    let mut k_per_layer = Vec::with_capacity(layer_dims.len());
    for (&(c_out, c_in), wl) in layer_dims.iter().zip(&weights) {
        let budget = total_budget * wl / wsum;
        let cost = cost_per_column(c_out, bits, mode);
        let k = ((budget / cost).floor() as usize).min(c_in);
        per_layer_budget.push(budget);
        k_per_layer.push(k);
    }
    Ok(BudgetPlan { extra_bits, bits, mode, layer_dims: layer_dims.to_vec(), per_layer_budget, k_per_layer })
}

/// Average stored bits per weight for one layer with `k` weak columns.
pub fn effective_bits(c_out: usize, c_in: usize, bits: u8, k: usize, mode: AccountingMode) -> f64 {
    let b = bits as f64;
    let (o, i, kf) = (c_out as f64, c_in as f64, k as f64);
    let mut numer = b * o * (i - kf) + 16.0 * o * kf + 16.0 * kf;
    if mode == AccountingMode::LatencyFavored {
        numer += b * o * kf;
    }
    numer / (o * i)
}

/// Weight-count-averaged effective bits across a block's layers.
pub fn effective_bits_avg(
    layer_dims: &[(usize, usize)],
    bits: u8,
    ks: &[usize],
    mode: AccountingMode,
) -> f64 {
    let mut numer = 0.0;
    let mut denom = 0.0;
    for (&(o, i), &k) in layer_dims.iter().zip(ks) {
        let n = (o * i) as f64;
        numer += effective_bits(o, i, bits, k, mode) * n;
        denom += n;
    }
    numer / denom
}

/// Layer dims `(c_out, c_in)` of a transformer block with model width `d`:
/// key, query, value, out projections plus the two feed-forward layers.
pub fn transformer_block_dims(d: usize) -> Vec<(usize, usize)> {
    vec![(d, d), (d, d), (d, d), (d, d), (4 * d, d), (d, 4 * d)]
}
