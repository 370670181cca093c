//! Bit-packed storage of quantized layers.
//!
//! Codes are packed LSB-first into little-endian bytes, row-major, each row
//! padded to a byte boundary. Weak columns are stored zero-filled inside the
//! packed matrix (latency-favored) or dropped from it (storage-favored);
//! either way their real values live in an fp16 sidecar addressed by a u16
//! index vector. Grid parameters are stored as one fp16 `(step, zero
//! offset)` pair per row or group, where the zero offset is the real value
//! of code 0.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::archive::{EntryData, TensorArchive};
use crate::error::{OwqError, Result};
use crate::optq::OptqResult;
use crate::selector::{self, AccountingMode, SensitivityReport};
use crate::tensor::Tensor;

/// Packed bytes per row for `cols` codes at `bits` each.
pub fn row_bytes(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

/// Pack a row-major code matrix into a dense LSB-first bit stream, padding
/// each row to a byte boundary.
pub fn pack_codes(codes: &[u16], rows: usize, cols: usize, bits: u8) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(OwqError::InvalidParam(format!("bits must be in [1, 8], got {bits}")));
    }
    if codes.len() != rows * cols {
        return Err(OwqError::ShapeMismatch(format!(
            "{} codes for a {rows}×{cols} matrix",
            codes.len()
        )));
    }
    let limit = 1u16 << bits;
    if let Some(&bad) = codes.iter().find(|&&c| c >= limit) {
        return Err(OwqError::CodeOutOfRange { code: bad, bits });
    }
    let rb = row_bytes(cols, bits);
    let mut out = vec![0u8; rows * rb];
    for r in 0..rows {
        let base = r * rb;
        let mut bit = 0usize;
        for c in 0..cols {
            let code = codes[r * cols + c];
            for b in 0..bits as usize {
                if code >> b & 1 == 1 {
                    out[base + (bit + b) / 8] |= 1 << ((bit + b) % 8);
                }
            }
            bit += bits as usize;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(blob: &[u8], rows: usize, cols: usize, bits: u8) -> Result<Vec<u16>> {
    let rb = row_bytes(cols, bits);
    if blob.len() != rows * rb {
        return Err(OwqError::PayloadLengthMismatch(format!(
            "packed blob has {} bytes, {rows}×{cols} at {bits} bits needs {}",
            blob.len(),
            rows * rb
        )));
    }
    let mut out = vec![0u16; rows * cols];
    for r in 0..rows {
        let base = r * rb;
        let mut bit = 0usize;
        for c in 0..cols {
            let mut code = 0u16;
            for b in 0..bits as usize {
                if blob[base + (bit + b) / 8] >> ((bit + b) % 8) & 1 == 1 {
                    code |= 1 << b;
                }
            }
            out[r * cols + c] = code;
            bit += bits as usize;
        }
    }
    Ok(out)
}

/// A fully packed mixed-precision layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub c_out: usize,
    pub c_in: usize,
    pub bits: u8,
    pub group_size: usize,
    pub mode: AccountingMode,
    /// Bit-packed codes; width is `c_in` (latency-favored, weak columns
    /// zero-filled) or `c_in − k` (storage-favored, weak columns removed).
    pub packed_codes: Vec<u8>,
    /// fp16 `(step, zero offset)` pairs, row-major `[c_out][groups][2]`.
    pub qparams: Vec<u16>,
    /// Weak column indices, strictly ascending.
    pub weak_indices: Vec<u16>,
    /// fp16 weak column values, row-major `c_out×k`.
    pub weak_values: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    c_out: usize,
    c_in: usize,
    bits: u8,
    group_size: usize,
    mode: String,
}

impl QuantizedLayer {
    /// Number of weak columns.
    pub fn k(&self) -> usize {
        self.weak_indices.len()
    }

    pub fn groups_per_row(&self) -> usize {
        if self.group_size == 0 {
            1
        } else {
            self.c_in / self.group_size
        }
    }

    fn group_of(&self, col: usize) -> usize {
        if self.group_size == 0 {
            0
        } else {
            col / self.group_size
        }
    }

    /// Column count of the packed matrix under this layer's mode.
    pub fn packed_cols(&self) -> usize {
        match self.mode {
            AccountingMode::LatencyFavored => self.c_in,
            AccountingMode::StorageFavored => self.c_in - self.k(),
        }
    }

    /// Widened `(step, zero offset)` of a row/column's grid.
    pub fn param(&self, row: usize, col: usize) -> (f32, f32) {
        let g = self.groups_per_row();
        let base = (row * g + self.group_of(col)) * 2;
        (
            f16::from_bits(self.qparams[base]).to_f32(),
            f16::from_bits(self.qparams[base + 1]).to_f32(),
        )
    }

    pub fn is_weak(&self, col: usize) -> bool {
        self.weak_indices.binary_search(&(col as u16)).is_ok()
    }

    /// Unpacked code matrix (`c_out × packed_cols`).
    pub fn codes(&self) -> Result<Vec<u16>> {
        unpack_codes(&self.packed_codes, self.c_out, self.packed_cols(), self.bits)
    }

    /// Average stored bits per weight under this layer's accounting mode.
    pub fn effective_bits(&self) -> f64 {
        selector::effective_bits(self.c_out, self.c_in, self.bits, self.k(), self.mode)
    }

    /// Total payload bytes this layer occupies as archive entries
    /// (codes padded to u32 words; header and alignment not counted).
    pub fn payload_bytes(&self) -> usize {
        let code_words = self.packed_codes.len().div_ceil(4);
        code_words * 4 + self.qparams.len() * 2 + self.weak_indices.len() * 2
            + self.weak_values.len() * 2
    }

    /// Store the layer under `<prefix>.codes/.qparams/.weak_idx/.weak_val`
    /// plus a `<prefix>.meta` metadata record.
    pub fn add_to_archive(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        let words: Vec<u32> = self
            .packed_codes
            .chunks(4)
            .map(|c| {
                let mut b = [0u8; 4];
                b[..c.len()].copy_from_slice(c);
                u32::from_le_bytes(b)
            })
            .collect();
        archive.insert(&format!("{prefix}.codes"), vec![words.len()], EntryData::U32(words))?;
        archive.insert(
            &format!("{prefix}.qparams"),
            vec![self.c_out, self.groups_per_row(), 2],
            EntryData::F16(self.qparams.clone()),
        )?;
        if self.k() > 0 {
            archive.insert(
                &format!("{prefix}.weak_idx"),
                vec![self.k()],
                EntryData::U16(self.weak_indices.clone()),
            )?;
            archive.insert(
                &format!("{prefix}.weak_val"),
                vec![self.c_out, self.k()],
                EntryData::F16(self.weak_values.clone()),
            )?;
        }
        let meta = LayerMeta {
            c_out: self.c_out,
            c_in: self.c_in,
            bits: self.bits,
            group_size: self.group_size,
            mode: self.mode.name().to_string(),
        };
        archive.set_meta(&format!("{prefix}.meta"), &serde_json::to_string(&meta)?);
        Ok(())
    }

    /// Load a layer previously stored with [`QuantizedLayer::add_to_archive`].
    pub fn from_archive(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let meta_str = archive
            .meta(&format!("{prefix}.meta"))
            .ok_or_else(|| OwqError::MissingEntry(format!("{prefix}.meta")))?;
        let meta: LayerMeta = serde_json::from_str(meta_str)?;
        let mode = AccountingMode::parse(&meta.mode)?;

        let (weak_indices, weak_values) = if archive.contains(&format!("{prefix}.weak_idx")) {
            let idx = match &archive.get(&format!("{prefix}.weak_idx"))?.data {
                EntryData::U16(v) => v.clone(),
                _ => return Err(OwqError::MalformedHeader(format!("{prefix}.weak_idx dtype"))),
            };
            let val = match &archive.get(&format!("{prefix}.weak_val"))?.data {
                EntryData::F16(v) => v.clone(),
                _ => return Err(OwqError::MalformedHeader(format!("{prefix}.weak_val dtype"))),
            };
            (idx, val)
        } else {
            (Vec::new(), Vec::new())
        };

        let qparams = match &archive.get(&format!("{prefix}.qparams"))?.data {
            EntryData::F16(v) => v.clone(),
            _ => return Err(OwqError::MalformedHeader(format!("{prefix}.qparams dtype"))),
        };
        let words = match &archive.get(&format!("{prefix}.codes"))?.data {
            EntryData::U32(v) => v.clone(),
            _ => return Err(OwqError::MalformedHeader(format!("{prefix}.codes dtype"))),
        };
        let packed_cols = match mode {
            AccountingMode::LatencyFavored => meta.c_in,
            AccountingMode::StorageFavored => meta.c_in - weak_indices.len(),
        };
        let want = meta.c_out * row_bytes(packed_cols, meta.bits);
        let mut bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        if bytes.len() < want {
            return Err(OwqError::PayloadLengthMismatch(format!(
                "{prefix}.codes holds {} bytes, need {want}",
                bytes.len()
            )));
        }
        bytes.truncate(want);

        Ok(Self {
            c_out: meta.c_out,
            c_in: meta.c_in,
            bits: meta.bits,
            group_size: meta.group_size,
            mode,
            packed_codes: bytes,
            qparams,
            weak_indices,
            weak_values,
        })
    }
}

/// Narrow to fp16 bits, saturating instead of overflowing to infinity so
/// archives stay loadable (the loader rejects non-finite values).
fn f16_saturating(v: f32) -> u16 {
    let h = f16::from_f32(v);
    if h.is_infinite() {
        if v > 0.0 { f16::MAX } else { f16::MIN }.to_bits()
    } else {
        h.to_bits()
    }
}

/// Combine an engine result and the matching selection into a packed layer.
///
/// Weak columns are zero-filled (latency-favored) or removed
/// (storage-favored) in the packed matrix; their compensated values are
/// narrowed to fp16, as are the grid parameters.
pub fn assemble_layer(
    result: &OptqResult,
    report: &SensitivityReport,
    mode: AccountingMode,
) -> Result<QuantizedLayer> {
    if result.skip_columns != report.selected {
        return Err(OwqError::InconsistentSkipSet(format!(
            "engine skipped {:?}, selection is {:?}",
            result.skip_columns, report.selected
        )));
    }
    if result.c_in > 65536 {
        return Err(OwqError::LayerTooWide { c_in: result.c_in });
    }
    let (c_out, c_in) = (result.c_out, result.c_in);
    let k = result.skip_columns.len();

    let packed_codes = match mode {
        AccountingMode::LatencyFavored => {
            // Codes for skipped columns are already absent (zero) in the
            // engine result; pack the full-width matrix as-is.
            pack_codes(&result.codes, c_out, c_in, result.bits)?
        }
        AccountingMode::StorageFavored => {
            let mut kept = Vec::with_capacity(c_out * (c_in - k));
            for r in 0..c_out {
                for c in 0..c_in {
                    if result.has_code(c) {
                        kept.push(result.codes[r * c_in + c]);
                    }
                }
            }
            pack_codes(&kept, c_out, c_in - k, result.bits)?
        }
    };

    let groups = result.groups_per_row();
    let mut qparams = Vec::with_capacity(c_out * groups * 2);
    for r in 0..c_out {
        for g in 0..groups {
            let p = &result.params[r][g];
            qparams.push(f16_saturating(p.step));
            qparams.push(f16_saturating(p.clip_lo));
        }
    }

    let weak_indices: Vec<u16> = result.skip_columns.iter().map(|&c| c as u16).collect();
    let weak_values: Vec<u16> =
        result.updated_skip_values.iter().map(|&v| f16_saturating(v)).collect();

    Ok(QuantizedLayer {
        c_out,
        c_in,
        bits: result.bits,
        group_size: result.group_size,
        mode,
        packed_codes,
        qparams,
        weak_indices,
        weak_values,
    })
}

/// Dense reconstruction of a packed layer: grid values everywhere, weak
/// columns overwritten with their fp16 sidecar values.
pub fn dequantize_layer(layer: &QuantizedLayer) -> Result<Tensor> {
    let codes = layer.codes()?;
    let (c_out, c_in) = (layer.c_out, layer.c_in);
    let pc = layer.packed_cols();
    let k = layer.k();
    let mut out = vec![0.0f32; c_out * c_in];
    for r in 0..c_out {
        let mut packed_col = 0usize;
        for c in 0..c_in {
            out[r * c_in + c] = match layer.weak_indices.binary_search(&(c as u16)) {
                Ok(pos) => {
                    if layer.mode == AccountingMode::LatencyFavored {
                        packed_col += 1;
                    }
                    f16::from_bits(layer.weak_values[r * k + pos]).to_f32()
                }
                Err(_) => {
                    let (step, lo) = layer.param(r, c);
                    let code = codes[r * pc + packed_col];
                    packed_col += 1;
                    lo + step * code as f32
                }
            };
        }
    }
    Tensor::matrix(c_out, c_in, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::HessianState;
    use crate::optq::{quantize_layer, OptqOptions};
    use crate::rng;
    use crate::selector::column_sensitivities;
    use proptest::prelude::*;

    #[test]
    fn pack_example_bytes() {
        let codes: Vec<u16> = (0..8).collect();
        let blob = pack_codes(&codes, 1, 8, 3).unwrap();
        assert_eq!(blob, vec![0b1000_1000, 0b1100_0110, 0b1111_1010]);
        assert_eq!(unpack_codes(&blob, 1, 8, 3).unwrap(), codes);
    }

    #[test]
    fn pack_rejects_overflow_and_bad_lengths() {
        assert!(matches!(
            pack_codes(&[8], 1, 1, 3),
            Err(OwqError::CodeOutOfRange { code: 8, bits: 3 })
        ));
        assert!(pack_codes(&[0, 1], 1, 3, 3).is_err());
        assert!(unpack_codes(&[0, 0], 1, 8, 3).is_err());
    }

    #[test]
    fn rows_pad_to_byte_boundaries() {
        // 3 codes at 3 bits = 9 bits → 2 bytes per row.
        let codes = vec![7u16, 0, 7, 1, 2, 3];
        let blob = pack_codes(&codes, 2, 3, 3).unwrap();
        assert_eq!(blob.len(), 4);
        assert_eq!(unpack_codes(&blob, 2, 3, 3).unwrap(), codes);
    }

    fn identity(n: usize) -> Tensor {
        let mut d = vec![0.0f32; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    fn assembled_fixture(mode: AccountingMode, k: usize) -> (Tensor, QuantizedLayer) {
        let w = rng::normal_matrix(&mut rng::seeded(100), 6, 16);
        let x = rng::normal_matrix(&mut rng::seeded(101), 16, 64);
        let mut h = HessianState::from_activations(&x).unwrap();
        h.dampen(0.01).unwrap();
        let mut rep = column_sensitivities(&w, &h, 3, false).unwrap();
        rep.selected = crate::selector::select_weak_columns(&rep, k).unwrap();
        let mut opts = OptqOptions::new(3);
        opts.skip_columns = rep.selected.clone();
        let res = quantize_layer(&w, &h, &opts).unwrap();
        let layer = assemble_layer(&res, &rep, mode).unwrap();
        (w, layer)
    }

    #[test]
    fn weak_columns_read_back_as_zero_codes() {
        let (_, layer) = assembled_fixture(AccountingMode::LatencyFavored, 3);
        let codes = layer.codes().unwrap();
        for r in 0..layer.c_out {
            for &wi in &layer.weak_indices {
                assert_eq!(codes[r * layer.c_in + wi as usize], 0);
            }
        }
    }

    #[test]
    fn k_zero_matches_engine_reconstruction_on_exact_grids() {
        // Integer weights on [0,7] give step 1, offset 0: exactly fp16
        // representable, so dequantization reproduces the engine output
        // bit-for-bit.
        let w = Tensor::matrix(2, 8, (0..16).map(|i| (i % 8) as f32).collect()).unwrap();
        let h = HessianState::from_activations(&identity(8)).unwrap();
        let res = quantize_layer(&w, &h, &OptqOptions::new(3)).unwrap();
        let rep = column_sensitivities(&w, &h, 3, false).unwrap();
        let layer = assemble_layer(&res, &rep, AccountingMode::LatencyFavored).unwrap();
        assert_eq!(layer.k(), 0);
        assert_eq!(dequantize_layer(&layer).unwrap().data(), res.reconstruct().data());
    }

    #[test]
    fn dequantize_matches_scalar_oracle() {
        for mode in [AccountingMode::LatencyFavored, AccountingMode::StorageFavored] {
            let (_, layer) = assembled_fixture(mode, 2);
            let got = dequantize_layer(&layer).unwrap();
            // Independent per-element path: raw bit extraction from the blob.
            let pc = layer.packed_cols();
            let rb = row_bytes(pc, layer.bits);
            for r in 0..layer.c_out {
                let mut pcol = 0usize;
                for c in 0..layer.c_in {
                    let weak_pos = layer.weak_indices.iter().position(|&i| i as usize == c);
                    let want = if let Some(pos) = weak_pos {
                        if mode == AccountingMode::LatencyFavored {
                            pcol += 1;
                        }
                        f16::from_bits(layer.weak_values[r * layer.k() + pos]).to_f32()
                    } else {
                        let mut code = 0u16;
                        for b in 0..layer.bits as usize {
                            let bit = pcol * layer.bits as usize + b;
                            if layer.packed_codes[r * rb + bit / 8] >> (bit % 8) & 1 == 1 {
                                code |= 1 << b;
                            }
                        }
                        pcol += 1;
                        let (step, lo) = layer.param(r, c);
                        lo + step * code as f32
                    };
                    assert_eq!(got.at(r, c), want, "mode {mode:?} at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn weak_values_survive_f16_exactly_when_representable() {
        let (_, mut layer) = assembled_fixture(AccountingMode::LatencyFavored, 2);
        let vals = [0.5f32, -1.25, 3.0, 0.099975586, -2.5, 100.0];
        layer.weak_values = (0..layer.c_out * 2)
            .map(|i| f16::from_f32(vals[i % vals.len()]).to_bits())
            .collect();
        let deq = dequantize_layer(&layer).unwrap();
        for r in 0..layer.c_out {
            for (pos, &wi) in layer.weak_indices.iter().enumerate() {
                let want = f16::from_bits(layer.weak_values[r * 2 + pos]).to_f32();
                assert_eq!(deq.at(r, wi as usize), want);
            }
        }
        // All fixture values are exactly representable in binary16.
        for &v in &vals {
            assert_eq!(f16::from_f32(v).to_f32(), v);
        }
    }

    #[test]
    fn inconsistent_skip_sets_rejected() {
        let w = rng::normal_matrix(&mut rng::seeded(110), 4, 8);
        let x = rng::normal_matrix(&mut rng::seeded(111), 8, 32);
        let mut h = HessianState::from_activations(&x).unwrap();
        h.dampen(0.01).unwrap();
        let mut rep = column_sensitivities(&w, &h, 3, false).unwrap();
        rep.selected = vec![1];
        let mut opts = OptqOptions::new(3);
        opts.skip_columns = vec![2];
        let res = quantize_layer(&w, &h, &opts).unwrap();
        assert!(matches!(
            assemble_layer(&res, &rep, AccountingMode::LatencyFavored),
            Err(OwqError::InconsistentSkipSet(_))
        ));
    }

    #[test]
    fn archive_roundtrip_bit_exact() {
        for mode in [AccountingMode::LatencyFavored, AccountingMode::StorageFavored] {
            let (_, layer) = assembled_fixture(mode, 2);
            let mut ar = TensorArchive::new();
            layer.add_to_archive(&mut ar, "layer.0.test").unwrap();
            let back = TensorArchive::from_bytes(&ar.to_bytes().unwrap()).unwrap();
            let restored = QuantizedLayer::from_archive(&back, "layer.0.test").unwrap();
            assert_eq!(layer, restored);
        }
    }

    #[test]
    fn values_beyond_f16_range_saturate_and_stay_loadable() {
        // Weights far outside fp16 range would narrow to infinity and make
        // the archive reject its own payload on load; they must clamp.
        let w = Tensor::matrix(
            2,
            4,
            vec![1.0e6, -2.0e5, 3.0, 0.5, -9.0e5, 1.0e5, -1.5, 0.25],
        )
        .unwrap();
        let h = HessianState::from_activations(&identity(4)).unwrap();
        let mut rep = column_sensitivities(&w, &h, 3, false).unwrap();
        rep.selected = vec![0];
        let mut opts = OptqOptions::new(3);
        opts.skip_columns = vec![0];
        let res = quantize_layer(&w, &h, &opts).unwrap();
        let layer = assemble_layer(&res, &rep, AccountingMode::LatencyFavored).unwrap();
        for &bits in layer.weak_values.iter().chain(&layer.qparams) {
            assert!(f16::from_bits(bits).is_finite());
        }
        assert_eq!(f16::from_bits(layer.weak_values[0]), f16::MAX);
        assert_eq!(f16::from_bits(layer.weak_values[1]), f16::MIN);
        let mut ar = TensorArchive::new();
        layer.add_to_archive(&mut ar, "layer.0.big").unwrap();
        let back = TensorArchive::from_bytes(&ar.to_bytes().unwrap()).unwrap();
        assert_eq!(QuantizedLayer::from_archive(&back, "layer.0.big").unwrap(), layer);
    }

    #[test]
    fn payload_bytes_track_effective_bits() {
        // 256×2048 at 3 bits with 4 weak columns: the gap between actual
        // payload and the effective-bit formula is the qparams store plus
        // u32 padding, under 1% of the payload.
        let w = rng::normal_matrix(&mut rng::seeded(120), 256, 2048);
        let x = rng::normal_matrix(&mut rng::seeded(121), 2048, 64);
        let mut h = HessianState::from_activations(&x).unwrap();
        h.dampen(0.01).unwrap();
        let mut rep = column_sensitivities(&w, &h, 3, false).unwrap();
        rep.selected = crate::selector::select_weak_columns(&rep, 4).unwrap();
        let mut opts = OptqOptions::new(3);
        opts.skip_columns = rep.selected.clone();
        let res = quantize_layer(&w, &h, &opts).unwrap();
        for mode in [AccountingMode::LatencyFavored, AccountingMode::StorageFavored] {
            let layer = assemble_layer(&res, &rep, mode).unwrap();
            let formula = layer.effective_bits() * (256.0 * 2048.0) / 8.0;
            let actual = layer.payload_bytes() as f64;
            let overhead = (actual - formula).abs() / formula;
            assert!(overhead <= 0.01, "mode {mode:?}: overhead {overhead}");
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(
            rows in 1usize..5,
            cols in 1usize..24,
            bits in 1u8..=8,
            seed in 0u64..1000,
        ) {
            let mut r = rng::seeded(seed);
            use rand::Rng;
            let codes: Vec<u16> =
                (0..rows * cols).map(|_| r.gen_range(0..1u16 << bits)).collect();
            let blob = pack_codes(&codes, rows, cols, bits).unwrap();
            prop_assert_eq!(blob.len(), rows * row_bytes(cols, bits));
            prop_assert_eq!(unpack_codes(&blob, rows, cols, bits).unwrap(), codes);
        }
    }
}
