//! Column-sequential quantization with Hessian-based error compensation.
//!
//! Columns are processed in order (natural, or by descending Hessian
//! diagonal). Quantizing column `q` leaves a per-row error
//! `e = (w_q − quant(w_q)) / U[q,q]`, where `U` is the upper Cholesky
//! factor of `H⁻¹`; the not-yet-quantized columns absorb `e·U[q, j]`, which
//! is exactly the update that minimizes `ΔW·H·ΔWᵀ` with the quantized
//! coordinate held fixed. Updates to columns beyond the current block are
//! batched and flushed at block boundaries; the batched form is the same
//! sum of rank-1 updates, so results match the eager reference to
//! floating-point noise.
//!
//! Columns listed in `skip_columns` are never rounded. They still absorb
//! compensation by default (they are stored in fp16 later, so soaking up
//! error there is free); a flag freezes them at their original values.

use crate::error::{OwqError, Result};
use crate::hessian::HessianState;
use crate::quantgrid::{fit_segment, QuantParams};
use crate::tensor::Tensor;

/// Options for one engine run.
#[derive(Debug, Clone)]
pub struct OptqOptions {
    /// Target bit-width of the low-precision grid.
    pub bits: u8,
    /// Lazy-update block width; updates beyond the block are deferred to
    /// the block boundary.
    pub block_size: usize,
    /// Process columns in descending Hessian-diagonal order.
    pub act_order: bool,
    /// 0 fits one grid per row; otherwise one grid per `group_size`-wide
    /// row segment (must divide the column count).
    pub group_size: usize,
    /// Use the greedy clip search instead of min-max when fitting grids.
    pub clip_search: bool,
    /// Original column indices excluded from quantization.
    pub skip_columns: Vec<usize>,
    /// Let skipped columns absorb compensation updates.
    pub compensate_skipped: bool,
}

impl OptqOptions {
    pub fn new(bits: u8) -> Self {
        Self {
            bits,
            block_size: 128,
            act_order: false,
            group_size: 0,
            clip_search: false,
            skip_columns: Vec::new(),
            compensate_skipped: true,
        }
    }
}

/// Output of [`quantize_layer`].
#[derive(Debug, Clone)]
pub struct OptqResult {
    pub c_out: usize,
    pub c_in: usize,
    pub bits: u8,
    pub group_size: usize,
    /// Row-major `c_out×c_in` codes; skipped columns hold 0 and carry no code.
    pub codes: Vec<u16>,
    /// Grid per `[row][group]` (one group per row when `group_size == 0`).
    pub params: Vec<Vec<QuantParams>>,
    /// Skipped columns, ascending.
    pub skip_columns: Vec<usize>,
    /// `c_out×k` final values of the skipped columns (post-compensation when
    /// enabled, original otherwise).
    pub updated_skip_values: Vec<f32>,
    /// Σ over quantized columns of `(w−q)²/[H⁻¹]_qq`.
    pub layer_error_proxy: f64,
}

impl OptqResult {
    /// Number of groups per row.
    pub fn groups_per_row(&self) -> usize {
        if self.group_size == 0 {
            1
        } else {
            self.c_in / self.group_size
        }
    }

    /// Group index of an original column.
    pub fn group_of(&self, col: usize) -> usize {
        if self.group_size == 0 {
            0
        } else {
            col / self.group_size
        }
    }

    /// Whether a column carries a code (i.e. was not skipped).
    pub fn has_code(&self, col: usize) -> bool {
        self.skip_columns.binary_search(&col).is_err()
    }

    /// Dense reconstruction: grid values everywhere, skipped columns from
    /// `updated_skip_values`.
    pub fn reconstruct(&self) -> Tensor {
        let k = self.skip_columns.len();
        let mut out = vec![0.0f32; self.c_out * self.c_in];
        for r in 0..self.c_out {
            for c in 0..self.c_in {
                out[r * self.c_in + c] = match self.skip_columns.binary_search(&c) {
                    Ok(pos) => self.updated_skip_values[r * k + pos],
                    Err(_) => {
                        self.params[r][self.group_of(c)].dequantize_one(self.codes[r * self.c_in + c])
                    }
                };
            }
        }
        Tensor::matrix(self.c_out, self.c_in, out).expect("consistent dims")
    }
}

/// One step of a traced run: running values around the quantization of a
/// single column, in processing order.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Index in processing order.
    pub position: usize,
    /// Original column quantized at this step.
    pub orig_col: usize,
    pub skipped: bool,
    pub dead: bool,
    /// Dequantized values assigned to the column (empty when skipped).
    pub quantized: Vec<f32>,
    /// Per row: running values of processing positions `[position, c_in)`
    /// before the step.
    pub before: Vec<Vec<f32>>,
    /// Per row: running values of processing positions `(position, c_in)`
    /// after the step's compensation.
    pub after: Vec<Vec<f32>>,
}

/// Stable ordering of columns by descending Hessian diagonal, ties broken
/// by ascending index.
pub fn act_order_permutation(hstate: &HessianState) -> Vec<usize> {
    let diag = hstate.diag();
    let mut idx: Vec<usize> = (0..diag.len()).collect();
    idx.sort_by(|&a, &b| diag[b].total_cmp(&diag[a]).then(a.cmp(&b)));
    idx
}

/// Rank-1 compensation update: `w[i,j] − err_col[i]·hinv_row[j]`.
pub fn compensation_step(
    w_remaining: &Tensor,
    err_col: &[f32],
    hinv_row: &[f32],
) -> Result<Tensor> {
    let (rows, cols) = (w_remaining.rows(), w_remaining.cols());
    if err_col.len() != rows || hinv_row.len() != cols {
        return Err(OwqError::ShapeMismatch(format!(
            "compensation_step: w is {rows}×{cols}, err_col has {}, hinv_row has {}",
            err_col.len(),
            hinv_row.len()
        )));
    }
    let mut out = w_remaining.data().to_vec();
    for i in 0..rows {
        let e = err_col[i] as f64;
        for j in 0..cols {
            out[i * cols + j] = (out[i * cols + j] as f64 - e * hinv_row[j] as f64) as f32;
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Quantize a layer with error compensation.
pub fn quantize_layer(w: &Tensor, hstate: &HessianState, opts: &OptqOptions) -> Result<OptqResult> {
    quantize_layer_inner(w, hstate, opts, None)
}

/// Traced variant for step-level verification. Forces fully eager updates
/// (one block spanning the whole layer) so each record reflects the
/// completed state after its column.
pub fn quantize_layer_traced(
    w: &Tensor,
    hstate: &HessianState,
    opts: &OptqOptions,
) -> Result<(OptqResult, Vec<StepRecord>)> {
    let mut trace = Vec::new();
    let res = quantize_layer_inner(w, hstate, opts, Some(&mut trace))?;
    Ok((res, trace))
}

fn quantize_layer_inner(
    w: &Tensor,
    hstate: &HessianState,
    opts: &OptqOptions,
    mut trace: Option<&mut Vec<StepRecord>>,
) -> Result<OptqResult> {
    let (c_out, c_in) = (w.rows(), w.cols());
    if hstate.c_in() != c_in {
        return Err(OwqError::ShapeMismatch(format!(
            "weight has c_in {c_in}, Hessian has {}",
            hstate.c_in()
        )));
    }
    if opts.group_size != 0 && c_in % opts.group_size != 0 {
        return Err(OwqError::InvalidParam(format!(
            "group_size {} does not divide c_in {c_in}",
            opts.group_size
        )));
    }
    if opts.block_size == 0 {
        return Err(OwqError::InvalidParam("block_size must be positive".into()));
    }
    let mut skips: Vec<usize> = opts.skip_columns.clone();
    skips.sort_unstable();
    skips.dedup();
    if let Some(&bad) = skips.iter().find(|&&c| c >= c_in) {
        return Err(OwqError::InvalidParam(format!(
            "skip column {bad} out of range for c_in {c_in}"
        )));
    }

    let perm: Vec<usize> = if opts.act_order {
        act_order_permutation(hstate)
    } else {
        (0..c_in).collect()
    };
    let hp = hstate.permuted(&perm);
    let u = hp.cholesky_inverse()?;

    let mut dead_p = vec![false; c_in];
    for &p in hp.dead_columns() {
        dead_p[p] = true;
    }
    let mut skip_p = vec![false; c_in];
    for (p, &orig) in perm.iter().enumerate() {
        if skips.binary_search(&orig).is_ok() {
            skip_p[p] = true;
        }
    }

    // Running weights in processing order.
    let mut wp = vec![0.0f32; c_out * c_in];
    for r in 0..c_out {
        for p in 0..c_in {
            wp[r * c_in + p] = w.at(r, perm[p]);
        }
    }

    let g = opts.group_size;
    let n_groups = if g == 0 { 1 } else { c_in / g };
    let group_of = |orig: usize| if g == 0 { 0 } else { orig / g };
    // Processing positions belonging to each group, for grid fitting.
    let mut group_positions: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (p, &orig) in perm.iter().enumerate() {
        group_positions[group_of(orig)].push(p);
    }

    let mut grids: Vec<Vec<Option<QuantParams>>> = vec![vec![None; n_groups]; c_out];
    let mut codes_p = vec![0u16; c_out * c_in];
    let mut proxy = 0.0f64;

    let block = if trace.is_some() { c_in } else { opts.block_size };
    let mut p0 = 0usize;
    while p0 < c_in {
        let p1 = (p0 + block).min(c_in);
        let bw = p1 - p0;
        let mut err_block = vec![0.0f64; c_out * bw];
        // Columns of err_block already applied to the tail [p1, c_in).
        let mut flushed = 0usize;

        for p in p0..p1 {
            let gidx = group_of(perm[p]);
            if grids[0][gidx].is_none() {
                // The segment may extend past this block; make its values
                // current before fitting.
                flush_tail(&mut wp, &err_block, &u, c_in, p0, flushed..p - p0, p1);
                flushed = p - p0;
                for r in 0..c_out {
                    let vals: Vec<f32> = group_positions[gidx]
                        .iter()
                        .filter(|&&gp| !skip_p[gp])
                        .map(|&gp| wp[r * c_in + gp])
                        .collect();
                    let prm = if vals.is_empty() {
                        QuantParams::from_range(0.0, 0.0, opts.bits)?
                    } else {
                        fit_segment(&vals, opts.bits, opts.clip_search)?
                    };
                    grids[r][gidx] = Some(prm);
                }
            }

            let d = u.at(p, p);
            let mut quantized = Vec::new();
            let before = trace.as_ref().map(|_| snapshot(&wp, c_out, c_in, p));
            for r in 0..c_out {
                let cur = wp[r * c_in + p];
                if skip_p[p] {
                    continue;
                }
                let prm = grids[r][gidx].as_ref().expect("grid fitted above");
                let code = prm.quantize_one(cur);
                codes_p[r * c_in + p] = code;
                let q = prm.dequantize_one(code);
                let raw = cur as f64 - q as f64;
                proxy += raw * raw / (d * d);
                if trace.is_some() {
                    quantized.push(q);
                }
                if dead_p[p] {
                    continue; // RTN with zero compensation
                }
                let e = raw / d;
                err_block[r * bw + (p - p0)] = e;
                for j in p + 1..p1 {
                    let upj = u.at(p, j);
                    if upj != 0.0 {
                        wp[r * c_in + j] = (wp[r * c_in + j] as f64 - e * upj) as f32;
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(StepRecord {
                    position: p,
                    orig_col: perm[p],
                    skipped: skip_p[p],
                    dead: dead_p[p],
                    quantized,
                    before: before.unwrap(),
                    after: snapshot(&wp, c_out, c_in, p + 1),
                });
            }
        }
        flush_tail(&mut wp, &err_block, &u, c_in, p0, flushed..bw, p1);
        p0 = p1;
    }

    // Capture skipped-column values in ascending original order.
    let mut inv_perm = vec![0usize; c_in];
    for (p, &orig) in perm.iter().enumerate() {
        inv_perm[orig] = p;
    }
    let k = skips.len();
    let mut skip_values = vec![0.0f32; c_out * k];
    for (si, &orig) in skips.iter().enumerate() {
        for r in 0..c_out {
            skip_values[r * k + si] = if opts.compensate_skipped {
                wp[r * c_in + inv_perm[orig]]
            } else {
                w.at(r, orig)
            };
        }
    }

    // Un-permute codes back to original column order.
    let mut codes = vec![0u16; c_out * c_in];
    for r in 0..c_out {
        for p in 0..c_in {
            codes[r * c_in + perm[p]] = codes_p[r * c_in + p];
        }
    }
    let params: Vec<Vec<QuantParams>> = grids
        .into_iter()
        .map(|row| row.into_iter().map(|p| p.expect("all groups fitted")).collect())
        .collect();

    Ok(OptqResult {
        c_out,
        c_in,
        bits: opts.bits,
        group_size: g,
        codes,
        params,
        skip_columns: skips,
        updated_skip_values: skip_values,
        layer_error_proxy: proxy,
    })
}

/// Apply deferred updates from block columns `range` (relative to `p0`) to
/// the tail positions `[tail_from, c_in)`.
fn flush_tail(
    wp: &mut [f32],
    err_block: &[f64],
    u: &crate::hessian::UpperFactor,
    c_in: usize,
    p0: usize,
    range: std::ops::Range<usize>,
    tail_from: usize,
) {
    if range.is_empty() || tail_from >= c_in {
        return;
    }
    let c_out = wp.len() / c_in;
    let width = err_block.len() / c_out;
    for r in 0..c_out {
        for j in tail_from..c_in {
            let mut acc = 0.0f64;
            for bp in range.clone() {
                let e = err_block[r * width + bp];
                if e != 0.0 {
                    acc += e * u.at(p0 + bp, j);
                }
            }
            if acc != 0.0 {
                wp[r * c_in + j] = (wp[r * c_in + j] as f64 - acc) as f32;
            }
        }
    }
}

fn snapshot(wp: &[f32], c_out: usize, c_in: usize, from: usize) -> Vec<Vec<f32>> {
    (0..c_out).map(|r| wp[r * c_in + from..(r + 1) * c_in].to_vec()).collect()
}
