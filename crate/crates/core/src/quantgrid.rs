//! Linear quantization grids.
//!
//! A grid maps real values onto `2^bits` evenly spaced levels spanning
//! `[clip_lo, clip_hi]`. Fitting is either plain min-max or a greedy search
//! over symmetric shrink factors that trades truncation error against
//! rounding error.

use crate::error::{OwqError, Result};
use crate::tensor::Tensor;

/// Parameters of one linear grid.
///
/// `dequant(code) = clip_lo + step·code` spans `[clip_lo, clip_hi]` as the
/// code spans `[0, 2^bits − 1]`, with `step = (clip_hi − clip_lo)/(2^bits − 1)`.
/// The degenerate all-equal fit keeps `clip_lo == clip_hi` and `step = 1` so
/// code 0 reproduces the constant exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub step: f32,
    pub zero_point: u16,
    pub clip_lo: f32,
    pub clip_hi: f32,
}

impl QuantParams {
    /// Largest code on this grid.
    pub fn max_code(&self) -> u16 {
        ((1u32 << self.bits) - 1) as u16
    }

    /// Build a grid from an explicit clip range.
    pub fn from_range(clip_lo: f32, clip_hi: f32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let maxq = ((1u32 << bits) - 1) as f32;
        let (step, zero_point) = if clip_hi > clip_lo {
            let step = (clip_hi - clip_lo) / maxq;
            let zp = (-clip_lo / step).round().clamp(0.0, maxq) as u16;
            (step, zp)
        } else {
            (1.0, 0)
        };
        Ok(Self { bits, step, zero_point, clip_lo, clip_hi })
    }

    /// Quantize a single value: round to nearest grid point, truncating to
    /// the clip range. Rounding is half-away-from-zero.
    #[inline]
    pub fn quantize_one(&self, v: f32) -> u16 {
        let maxq = self.max_code() as f32;
        ((v - self.clip_lo) / self.step).round().clamp(0.0, maxq) as u16
    }

    /// Dequantize a single code.
    #[inline]
    pub fn dequantize_one(&self, code: u16) -> f32 {
        self.clip_lo + self.step * code as f32
    }

    /// Round-trip a value through the grid.
    #[inline]
    pub fn reconstruct_one(&self, v: f32) -> f32 {
        self.dequantize_one(self.quantize_one(v))
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(OwqError::InvalidParam(format!("bits must be in [1, 8], got {bits}")));
    }
    Ok(())
}

/// Fit a grid spanning exactly `[min(values), max(values)]`.
pub fn fit_minmax(values: &[f32], bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(OwqError::EmptyInput("fit_minmax".into()));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    QuantParams::from_range(lo, hi, bits)
}

/// Round-to-nearest quantization of a value vector.
pub fn quantize_rtn(values: &[f32], p: &QuantParams) -> Vec<u16> {
    values.iter().map(|&v| p.quantize_one(v)).collect()
}

/// Dequantize a code vector, rejecting codes outside the grid.
pub fn dequantize(codes: &[u16], p: &QuantParams) -> Result<Vec<f32>> {
    let maxq = p.max_code();
    for &c in codes {
        if c > maxq {
            return Err(OwqError::CodeOutOfRange { code: c, bits: p.bits });
        }
    }
    Ok(codes.iter().map(|&c| p.dequantize_one(c)).collect())
}

/// Squared reconstruction error of `values` on the grid, accumulated in f64.
pub fn reconstruction_error(values: &[f32], p: &QuantParams) -> f64 {
    values
        .iter()
        .map(|&v| {
            let d = (v - p.reconstruct_one(v)) as f64;
            d * d
        })
        .sum()
}

/// Greedy clip-range search.
///
/// Evaluates shrink factors `p = 1 − t·(1−maxshrink)/(grid_points−1)` for
/// `t = 0..grid_points−1`, applying each symmetrically to the min-max range
/// about its midpoint, and keeps the grid with the smallest squared
/// reconstruction error. Factor 1 reproduces the min-max grid exactly, so
/// the search never does worse than [`fit_minmax`].
pub fn search_clip(
    values: &[f32],
    bits: u8,
    grid_points: usize,
    maxshrink: f32,
) -> Result<QuantParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(OwqError::EmptyInput("search_clip".into()));
    }
    if grid_points < 2 {
        return Err(OwqError::InvalidParam(format!(
            "grid_points must be >= 2, got {grid_points}"
        )));
    }
    if !(maxshrink > 0.0 && maxshrink < 1.0) {
        return Err(OwqError::InvalidParam(format!(
            "maxshrink must be in (0, 1), got {maxshrink}"
        )));
    }

    let base = fit_minmax(values, bits)?;
    let mut best = base;
    let mut best_err = reconstruction_error(values, &base);

    let mid = (base.clip_lo + base.clip_hi) / 2.0;
    let half = (base.clip_hi - base.clip_lo) / 2.0;
    for t in 1..grid_points {
        let p = 1.0 - t as f32 * (1.0 - maxshrink) / (grid_points - 1) as f32;
        let cand = QuantParams::from_range(mid - p * half, mid + p * half, bits)?;
        let err = reconstruction_error(values, &cand);
        if err < best_err {
            best = cand;
            best_err = err;
        }
    }
    Ok(best)
}

/// Defaults for the clip search, exposed as configuration knobs elsewhere.
pub const CLIP_GRID_POINTS: usize = 100;
pub const CLIP_MAXSHRINK: f32 = 0.2;

/// Fit the grid for one row segment under the module defaults.
pub fn fit_segment(values: &[f32], bits: u8, clip_search: bool) -> Result<QuantParams> {
    if clip_search {
        search_clip(values, bits, CLIP_GRID_POINTS, CLIP_MAXSHRINK)
    } else {
        fit_minmax(values, bits)
    }
}

/// Plain RTN reconstruction of a weight matrix at the target bit-width,
/// with grids fitted per row (`group_size == 0`) or per `group_size`-wide
/// row segment. The no-compensation baseline used for sensitivity scoring
/// and error comparisons.
pub fn rtn_reconstruct(
    w: &Tensor,
    bits: u8,
    group_size: usize,
    clip_search: bool,
) -> Result<Tensor> {
    let (rows, cols) = (w.rows(), w.cols());
    if group_size != 0 && cols % group_size != 0 {
        return Err(OwqError::InvalidParam(format!(
            "group_size {group_size} does not divide c_in {cols}"
        )));
    }
    let g = if group_size == 0 { cols } else { group_size };
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = w.row(r);
        for seg in 0..cols / g {
            let span = seg * g..(seg + 1) * g;
            let p = fit_segment(&row[span.clone()], bits, clip_search)?;
            for c in span {
                out[r * cols + c] = p.reconstruct_one(row[c]);
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minmax_zero_to_seven_three_bits() {
        let vals: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let p = fit_minmax(&vals, 3).unwrap();
        assert_eq!(p.step, 1.0);
        assert_eq!(p.zero_point, 0);
        for (i, &v) in vals.iter().enumerate() {
            assert_eq!(p.quantize_one(v), i as u16);
            assert_eq!(p.dequantize_one(i as u16), v);
        }
    }

    #[test]
    fn constant_vector_reconstructs_exactly() {
        let p = fit_minmax(&[5.0, 5.0, 5.0], 3).unwrap();
        assert_eq!(p.reconstruct_one(5.0), 5.0);
    }

    #[test]
    fn two_bit_grid_minus_one_to_two() {
        let p = fit_minmax(&[-1.0, 2.0], 2).unwrap();
        assert_eq!(p.step, 1.0);
        let grid: Vec<f32> = (0..4).map(|c| p.dequantize_one(c)).collect();
        assert_eq!(grid, vec![-1.0, 0.0, 1.0, 2.0]);
        assert_eq!(p.zero_point, 1);
    }

    #[test]
    fn rtn_rounds_and_truncates() {
        let vals: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let p = fit_minmax(&vals, 3).unwrap();
        assert_eq!(p.quantize_one(3.4), 3);
        assert_eq!(p.quantize_one(100.0), 7);
        assert_eq!(p.quantize_one(-5.0), 0);
        // half-away-from-zero
        assert_eq!(p.quantize_one(3.5), 4);
    }

    #[test]
    fn dequantize_endpoints_and_range_check() {
        let p = fit_minmax(&[-1.0, 2.0], 2).unwrap();
        assert_eq!(dequantize(&[0], &p).unwrap()[0], p.clip_lo);
        assert_eq!(dequantize(&[3], &p).unwrap()[0], p.clip_hi);
        assert!(matches!(dequantize(&[4], &p), Err(OwqError::CodeOutOfRange { .. })));
    }

    #[test]
    fn quantize_dequantize_identity_on_codes() {
        let p = fit_minmax(&[-2.0, 6.0], 3).unwrap();
        for code in 0..=p.max_code() {
            let v = p.dequantize_one(code);
            assert_eq!(p.quantize_one(v), code);
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(fit_minmax(&[], 3), Err(OwqError::EmptyInput(_))));
        assert!(matches!(search_clip(&[], 3, 100, 0.2), Err(OwqError::EmptyInput(_))));
    }

    #[test]
    fn bad_search_params_rejected() {
        assert!(search_clip(&[1.0], 3, 1, 0.2).is_err());
        assert!(search_clip(&[1.0], 3, 100, 0.0).is_err());
        assert!(search_clip(&[1.0], 3, 100, 1.0).is_err());
    }

    // Independent oracle: re-evaluate every shrink factor with plain formulas.
    fn clip_oracle(values: &[f32], bits: u8, grid_points: usize, maxshrink: f32) -> f64 {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
        let maxq = ((1u32 << bits) - 1) as f32;
        let mut best = f64::INFINITY;
        for t in 0..grid_points {
            let p = 1.0 - t as f32 * (1.0 - maxshrink) / (grid_points - 1) as f32;
            let (l, h) = if t == 0 { (lo, hi) } else { (mid - p * half, mid + p * half) };
            let step = if h > l { (h - l) / maxq } else { 1.0 };
            let err: f64 = values
                .iter()
                .map(|&v| {
                    let code = ((v - l) / step).round().clamp(0.0, maxq);
                    let d = (v - (l + step * code)) as f64;
                    d * d
                })
                .sum();
            best = best.min(err);
        }
        best
    }

    #[test]
    fn clip_search_beats_minmax_on_outlier_row() {
        let mut vals: Vec<f32> = (0..63).map(|i| -1.0 + 2.0 * i as f32 / 62.0).collect();
        vals.push(10.0);
        let searched = search_clip(&vals, 3, 100, 0.2).unwrap();
        let minmax = fit_minmax(&vals, 3).unwrap();
        assert!(searched.clip_hi < 10.0);
        let se = reconstruction_error(&vals, &searched);
        let me = reconstruction_error(&vals, &minmax);
        assert!(se < me, "searched {se} vs minmax {me}");
        let oracle = clip_oracle(&vals, 3, 100, 0.2);
        assert!((se - oracle).abs() <= 1e-9 * oracle.max(1.0), "se {se} oracle {oracle}");
    }

    #[test]
    fn on_grid_values_keep_full_range() {
        let vals: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let p = search_clip(&vals, 3, 100, 0.2).unwrap();
        assert_eq!(reconstruction_error(&vals, &p), 0.0);
        assert_eq!((p.clip_lo, p.clip_hi), (0.0, 7.0));
    }

    #[test]
    fn gaussian_search_never_worse_than_minmax() {
        use crate::rng;
        let x = rng::normal_matrix(&mut rng::seeded(11), 1, 256);
        let vals = x.data();
        let searched = search_clip(vals, 3, 100, 0.5).unwrap();
        let se = reconstruction_error(vals, &searched);
        let me = reconstruction_error(vals, &fit_minmax(vals, 3).unwrap());
        assert!(se <= me);
    }

    #[test]
    fn rtn_reconstruct_grouped_matches_manual_segments() {
        let w = Tensor::matrix(1, 4, vec![0.0, 1.0, 10.0, 30.0]).unwrap();
        let r = rtn_reconstruct(&w, 2, 2, false).unwrap();
        let p0 = fit_minmax(&[0.0, 1.0], 2).unwrap();
        let p1 = fit_minmax(&[10.0, 30.0], 2).unwrap();
        assert_eq!(r.at(0, 0), p0.reconstruct_one(0.0));
        assert_eq!(r.at(0, 3), p1.reconstruct_one(30.0));
        assert!(rtn_reconstruct(&w, 2, 3, false).is_err());
    }

    proptest! {
        #[test]
        fn search_never_worse_than_minmax(
            vals in proptest::collection::vec(-100.0f32..100.0, 2..64),
            bits in 2u8..=4,
        ) {
            let se = reconstruction_error(&vals, &search_clip(&vals, bits, 25, 0.2).unwrap());
            let me = reconstruction_error(&vals, &fit_minmax(&vals, bits).unwrap());
            prop_assert!(se <= me);
        }

        #[test]
        fn codes_monotone_in_value(
            vals in proptest::collection::vec(-10.0f32..10.0, 2..32),
            a in -12.0f32..12.0,
            b in -12.0f32..12.0,
        ) {
            let p = fit_minmax(&vals, 3).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize_one(lo) <= p.quantize_one(hi));
        }

        #[test]
        fn scale_equivariance(
            vals in proptest::collection::vec(-10.0f32..10.0, 2..32),
            c in 0.1f32..10.0,
        ) {
            let p = fit_minmax(&vals, 3).unwrap();
            let scaled: Vec<f32> = vals.iter().map(|v| v * c).collect();
            let ps = fit_minmax(&scaled, 3).unwrap();
            // Rounding noise is proportional to the grid span.
            let tol = 1e-5 * (c * (p.clip_hi - p.clip_lo)).max(1.0);
            for (&v, &sv) in vals.iter().zip(&scaled) {
                let want = c * p.reconstruct_one(v);
                let got = ps.reconstruct_one(sv);
                prop_assert!((want - got).abs() <= tol, "want {want} got {got}");
            }
        }
    }
}
