//! End-to-end orchestration.
//!
//! A [`LayerStack`] is either a plain sequential MLP (ReLU between layers)
//! or a toy single-head transformer block (k/q/v/out/fc1/fc2 with residual
//! wiring, no layer norms). [`quantize_model`] walks the stack in order,
//! builds each layer's Hessian from the activations reaching it, selects
//! weak columns under the extra-bit budget, runs the compensation engine,
//! and packs the result into an archive. Provided activations are split
//! into disjoint calibration and evaluation sets (80/20 by default) so
//! reported errors are not measured on the calibration data itself.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{OwqError, Result};
use crate::gemm::{dense_matmul, layer_output_error};
use crate::hessian::HessianState;
use crate::optq::{quantize_layer, OptqOptions};
use crate::packed::{assemble_layer, dequantize_layer, QuantizedLayer};
use crate::quantgrid::rtn_reconstruct;
use crate::rng;
use crate::selector::{
    budget_to_k, column_sensitivities, effective_bits_avg, select_weak_columns, AccountingMode,
};
use crate::tensor::Tensor;

/// All knobs of a pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits: u8,
    pub extra_bits: f64,
    pub mode: AccountingMode,
    pub act_order: bool,
    pub true_sequential: bool,
    pub group_size: usize,
    pub clip_search: bool,
    pub compensate_weak: bool,
    pub percdamp: f64,
    pub seed: u64,
    pub block_size: usize,
    pub per_layer_budget_weights: Option<Vec<f64>>,
    /// Fraction of provided samples used for calibration; the rest evaluate.
    pub calib_fraction: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 3,
            extra_bits: 0.0,
            mode: AccountingMode::LatencyFavored,
            act_order: false,
            true_sequential: false,
            group_size: 0,
            clip_search: true,
            compensate_weak: true,
            percdamp: 0.01,
            seed: 0,
            block_size: 128,
            per_layer_budget_weights: None,
            calib_fraction: 0.8,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8) -> Self {
        Self { bits, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(OwqError::InvalidParam(format!(
                "bits must be in [2, 8], got {}",
                self.bits
            )));
        }
        if self.extra_bits < 0.0 {
            return Err(OwqError::InvalidParam("extra_bits must be non-negative".into()));
        }
        if self.percdamp <= 0.0 {
            return Err(OwqError::InvalidParam("percdamp must be positive".into()));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return Err(OwqError::InvalidParam("calib_fraction must be in (0, 1)".into()));
        }
        if self.block_size == 0 {
            return Err(OwqError::InvalidParam("block_size must be positive".into()));
        }
        Ok(())
    }
}

/// Wiring of a layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Sequential linears with ReLU between them.
    Mlp,
    /// Single-head attention block: k/q/v/out plus fc1/fc2, residual wiring.
    Block,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Mlp => "mlp",
            Topology::Block => "block",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Topology::Mlp),
            "block" => Ok(Topology::Block),
            other => Err(OwqError::InvalidParam(format!("unknown topology '{other}'"))),
        }
    }
}

const BLOCK_LAYER_NAMES: [&str; 6] = ["k", "q", "v", "out", "fc1", "fc2"];

/// Ordered weights of a toy model.
#[derive(Debug, Clone)]
pub struct LayerStack {
    topology: Topology,
    layers: Vec<(String, Tensor)>,
}

/// Activations of one forward pass: the input reaching each linear layer,
/// plus the stack output.
#[derive(Debug, Clone)]
pub struct StackActivations {
    pub layer_inputs: Vec<Tensor>,
    pub output: Tensor,
}

impl LayerStack {
    /// Sequential MLP; adjacent shapes must compose.
    pub fn mlp(layers: Vec<(String, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(OwqError::InvalidParam("stack needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].1.cols() != pair[0].1.rows() {
                return Err(OwqError::ShapeMismatch(format!(
                    "layer '{}' ({}×{}) does not compose with '{}' ({}×{})",
                    pair[0].0,
                    pair[0].1.rows(),
                    pair[0].1.cols(),
                    pair[1].0,
                    pair[1].1.rows(),
                    pair[1].1.cols()
                )));
            }
        }
        Ok(Self { topology: Topology::Mlp, layers })
    }

    /// Transformer block of width `d`: weights for k, q, v, out (`d×d`),
    /// fc1 (`4d×d`), fc2 (`d×4d`), in that order.
    pub fn transformer_block(d: usize, weights: Vec<Tensor>) -> Result<Self> {
        if weights.len() != 6 {
            return Err(OwqError::InvalidParam(format!(
                "transformer block needs 6 layers, got {}",
                weights.len()
            )));
        }
        let want = [(d, d), (d, d), (d, d), (d, d), (4 * d, d), (d, 4 * d)];
        for ((w, &(o, i)), name) in weights.iter().zip(&want).zip(BLOCK_LAYER_NAMES) {
            if w.rows() != o || w.cols() != i {
                return Err(OwqError::ShapeMismatch(format!(
                    "block layer '{name}' must be {o}×{i}, got {}×{}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        let layers = BLOCK_LAYER_NAMES
            .iter()
            .zip(weights)
            .map(|(n, w)| (n.to_string(), w))
            .collect();
        Ok(Self { topology: Topology::Block, layers })
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn layers(&self) -> &[(String, Tensor)] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Channel count the stack expects at its input.
    pub fn input_width(&self) -> usize {
        match self.topology {
            Topology::Mlp | Topology::Block => self.layers[0].1.cols(),
        }
    }

    /// `(c_out, c_in)` per layer.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|(_, w)| (w.rows(), w.cols())).collect()
    }

    /// Archive entry prefix for layer `i`.
    pub fn prefix(&self, i: usize) -> String {
        format!("layer.{i}.{}", self.layers[i].0)
    }

    /// Full-precision forward.
    pub fn forward(&self, x: &Tensor) -> Result<StackActivations> {
        let weights: Vec<&Tensor> = self.layers.iter().map(|(_, w)| w).collect();
        self.forward_with(&weights, x)
    }

    /// Forward with substituted weights (same shapes as the stack's own).
    pub fn forward_with(&self, weights: &[&Tensor], x: &Tensor) -> Result<StackActivations> {
        if weights.len() != self.layers.len() {
            return Err(OwqError::ShapeMismatch(format!(
                "{} weights for {} layers",
                weights.len(),
                self.layers.len()
            )));
        }
        if x.rows() != self.input_width() {
            return Err(OwqError::ShapeMismatch(format!(
                "input has {} channels, stack expects {}",
                x.rows(),
                self.input_width()
            )));
        }
        match self.topology {
            Topology::Mlp => {
                let mut inputs = Vec::with_capacity(weights.len());
                let mut a = x.clone();
                for (i, w) in weights.iter().enumerate() {
                    inputs.push(a.clone());
                    let mut y = dense_matmul(w, &a)?;
                    if i + 1 < weights.len() {
                        relu(&mut y);
                    }
                    a = y;
                }
                Ok(StackActivations { layer_inputs: inputs, output: a })
            }
            Topology::Block => {
                let d = self.input_width();
                let keys = dense_matmul(weights[0], x)?;
                let queries = dense_matmul(weights[1], x)?;
                let values = dense_matmul(weights[2], x)?;
                let attn = attention(&keys, &queries, &values, d)?;
                let proj = dense_matmul(weights[3], &attn)?;
                let resid = add(x, &proj)?;
                let mut hidden = dense_matmul(weights[4], &resid)?;
                relu(&mut hidden);
                let ff = dense_matmul(weights[5], &hidden)?;
                let output = add(&resid, &ff)?;
                Ok(StackActivations {
                    layer_inputs: vec![
                        x.clone(),
                        x.clone(),
                        x.clone(),
                        attn,
                        resid,
                        hidden,
                    ],
                    output,
                })
            }
        }
    }

    /// Store weights as `layer.<i>.<name>.weight` entries with a topology tag.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut ar = TensorArchive::new();
        for (i, (_, w)) in self.layers.iter().enumerate() {
            ar.insert_f32(&format!("{}.weight", self.prefix(i)), w.clone())?;
        }
        ar.set_meta("topology", self.topology.name());
        Ok(ar)
    }

    /// Rebuild a stack from `layer.<i>.<name>.weight` entries.
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let topology = Topology::parse(
            archive.meta("topology").ok_or_else(|| OwqError::MissingEntry("topology".into()))?,
        )?;
        let mut found: Vec<(usize, String)> = Vec::new();
        for name in archive.names() {
            let parts: Vec<&str> = name.split('.').collect();
            if parts.len() == 4 && parts[0] == "layer" && parts[3] == "weight" {
                let idx: usize = parts[1].parse().map_err(|_| {
                    OwqError::MalformedHeader(format!("bad layer index in '{name}'"))
                })?;
                found.push((idx, parts[2].to_string()));
            }
        }
        found.sort();
        if found.is_empty() {
            return Err(OwqError::MissingEntry("no layer.<i>.<name>.weight entries".into()));
        }
        for (want, &(idx, _)) in found.iter().enumerate() {
            if idx != want {
                return Err(OwqError::MalformedHeader(format!(
                    "layer indices not contiguous at {idx}"
                )));
            }
        }
        let mut layers = Vec::with_capacity(found.len());
        for (idx, name) in &found {
            let t = archive.get_f32(&format!("layer.{idx}.{name}.weight"))?;
            layers.push((name.clone(), t));
        }
        match topology {
            Topology::Mlp => Self::mlp(layers),
            Topology::Block => {
                let names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
                if names != BLOCK_LAYER_NAMES {
                    return Err(OwqError::MalformedHeader(format!(
                        "block layers must be {BLOCK_LAYER_NAMES:?}, got {names:?}"
                    )));
                }
                let d = layers[0].1.rows();
                Self::transformer_block(d, layers.into_iter().map(|(_, w)| w).collect())
            }
        }
    }
}

fn relu(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(OwqError::ShapeMismatch(format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Single-head attention: values weighted by column-wise softmax of
/// `kᵀq/√d`.
fn attention(keys: &Tensor, queries: &Tensor, values: &Tensor, d: usize) -> Result<Tensor> {
    let n = queries.cols();
    let scale = 1.0 / (d as f32).sqrt();
    let scores = dense_matmul(&keys.transposed(), queries)?; // n×n: key i vs query j
    let mut weights = vec![0.0f32; n * n];
    for j in 0..n {
        let mut m = f32::NEG_INFINITY;
        for i in 0..n {
            m = m.max(scores.at(i, j) * scale);
        }
        let mut sum = 0.0f32;
        for i in 0..n {
            let e = (scores.at(i, j) * scale - m).exp();
            weights[i * n + j] = e;
            sum += e;
        }
        for i in 0..n {
            weights[i * n + j] /= sum;
        }
    }
    dense_matmul(values, &Tensor::matrix(n, n, weights)?)
}

/// Deterministic disjoint split of activation columns.
pub fn split_calibration(x: &Tensor, fraction: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    let n = x.cols();
    if n < 2 {
        return Err(OwqError::InvalidParam(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let rows = x.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_cal = ((n as f64 * fraction) as usize).clamp(1, n - 1);
    let gather = |cols: &[usize]| -> Tensor {
        let mut data = vec![0.0f32; rows * cols.len()];
        for r in 0..rows {
            let row = x.row(r);
            for (out_c, &c) in cols.iter().enumerate() {
                data[r * cols.len() + out_c] = row[c];
            }
        }
        Tensor::matrix(rows, cols.len(), data).expect("consistent dims")
    };
    Ok((gather(&idx[..n_cal]), gather(&idx[n_cal..])))
}

/// Per-layer entry of a [`QuantReport`].
#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub effective_bits: f64,
    pub sensitivity_max: f64,
    pub sensitivity_mean: f64,
    /// `‖WX − ŴX‖²` of the plain RTN baseline on the evaluation split.
    pub rtn_error: f64,
    /// `‖WX − ŴX‖²` of the packed layer on the evaluation split.
    pub quantized_error: f64,
    pub payload_bytes: usize,
}

/// Quality and accounting summary of one pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct QuantReport {
    pub topology: String,
    pub bits: u8,
    pub extra_bits: f64,
    pub mode: String,
    pub true_sequential: bool,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub layers: Vec<LayerReport>,
    /// Weight-averaged effective bits across the stack.
    pub realized_avg_bits: f64,
    /// Sum of per-layer archive payload bytes.
    pub total_bytes: usize,
    /// `‖F(x) − F̂(x)‖²_F` over the evaluation split.
    pub end_to_end_error: f64,
    /// End-to-end error divided by `‖F(x)‖²_F`.
    pub relative_error: f64,
}

impl QuantReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Quantize every layer of the stack. Returns the packed archive and the
/// evaluation report; both are deterministic for a fixed config.
pub fn quantize_model(
    stack: &LayerStack,
    calib: &Tensor,
    cfg: &QuantConfig,
) -> Result<(TensorArchive, QuantReport)> {
    cfg.validate()?;
    let (cal_x, eval_x) = split_calibration(calib, cfg.calib_fraction, cfg.seed)?;

    let dims = stack.dims();
    let plan = budget_to_k(
        cfg.extra_bits,
        &dims,
        cfg.bits,
        cfg.mode,
        cfg.per_layer_budget_weights.as_deref(),
    )?;

    let mut archive = TensorArchive::new();
    let mut quantized: Vec<QuantizedLayer> = Vec::with_capacity(stack.len());
    let mut dequantized: Vec<Tensor> = Vec::with_capacity(stack.len());
    let mut sens_summaries: Vec<(f64, f64)> = Vec::with_capacity(stack.len());

    // Full-precision activations; recomputed per stage when true_sequential.
    let fp_acts = stack.forward(&cal_x)?;
    for (i, (_, w)) in stack.layers().iter().enumerate() {
        let input = if cfg.true_sequential {
            let mut weights: Vec<&Tensor> = Vec::with_capacity(stack.len());
            for (j, (_, orig)) in stack.layers().iter().enumerate() {
                weights.push(if j < i { &dequantized[j] } else { orig });
            }
            stack.forward_with(&weights, &cal_x)?.layer_inputs[i].clone()
        } else {
            fp_acts.layer_inputs[i].clone()
        };

        let mut hstate = HessianState::from_activations(&input)?;
        hstate.dampen(cfg.percdamp)?;

        let mut report = column_sensitivities(w, &hstate, cfg.bits, cfg.clip_search)?;
        report.selected = select_weak_columns(&report, plan.k_per_layer[i])?;

        let opts = OptqOptions {
            bits: cfg.bits,
            block_size: cfg.block_size,
            act_order: cfg.act_order,
            group_size: cfg.group_size,
            clip_search: cfg.clip_search,
            skip_columns: report.selected.clone(),
            compensate_skipped: cfg.compensate_weak,
        };
        let result = quantize_layer(w, &hstate, &opts)?;
        let layer = assemble_layer(&result, &report, cfg.mode)?;

        let prefix = stack.prefix(i);
        layer.add_to_archive(&mut archive, &prefix)?;
        if cfg.extra_bits > 0.0 {
            let c_in = w.cols();
            let as_f32 = |v: &[f64]| -> Vec<f32> { v.iter().map(|&x| x as f32).collect() };
            archive.insert_f32(
                &format!("{prefix}.sensitivity"),
                Tensor::new(vec![c_in], as_f32(&report.sensitivity))?,
            )?;
            archive.insert_f32(
                &format!("{prefix}.lambda"),
                Tensor::new(vec![c_in], as_f32(&report.lambda_diag))?,
            )?;
            archive.insert_f32(
                &format!("{prefix}.delta_norms"),
                Tensor::new(vec![c_in], as_f32(&report.delta_norms))?,
            )?;
        }

        let smax = report.sensitivity.iter().copied().fold(0.0f64, f64::max);
        let smean = report.sensitivity.iter().sum::<f64>() / report.sensitivity.len() as f64;
        sens_summaries.push((smax, smean));
        dequantized.push(dequantize_layer(&layer)?);
        quantized.push(layer);
    }

    archive.set_meta("topology", stack.topology().name());
    archive.set_meta("bits", &cfg.bits.to_string());
    archive.set_meta("group_size", &cfg.group_size.to_string());
    archive.set_meta("mode", cfg.mode.name());
    archive.set_meta("config", &serde_json::to_string(cfg)?);

    let mut report = build_report(stack, &quantized, &dequantized, &eval_x, cfg, &sens_summaries)?;
    report.calib_samples = cal_x.cols();
    Ok((archive, report))
}

/// Measure a quantized archive against the full-precision stack on an
/// explicit evaluation set.
pub fn evaluate(stack: &LayerStack, archive: &TensorArchive, eval_x: &Tensor) -> Result<QuantReport> {
    let mut quantized = Vec::with_capacity(stack.len());
    let mut dequantized = Vec::with_capacity(stack.len());
    for i in 0..stack.len() {
        let layer = QuantizedLayer::from_archive(archive, &stack.prefix(i))?;
        dequantized.push(dequantize_layer(&layer)?);
        quantized.push(layer);
    }
    let mut cfg = QuantConfig::default();
    if let Some(meta_cfg) = archive.meta("config") {
        cfg = serde_json::from_str(meta_cfg)?;
    } else if let Some(bits) = archive.meta("bits") {
        cfg.bits = bits.parse().map_err(|_| {
            OwqError::MalformedHeader("bits metadata is not an integer".into())
        })?;
    }
    let sens = vec![(0.0, 0.0); stack.len()];
    build_report(stack, &quantized, &dequantized, eval_x, &cfg, &sens)
}

fn build_report(
    stack: &LayerStack,
    quantized: &[QuantizedLayer],
    dequantized: &[Tensor],
    eval_x: &Tensor,
    cfg: &QuantConfig,
    sens_summaries: &[(f64, f64)],
) -> Result<QuantReport> {
    let fp = stack.forward(eval_x)?;
    let mut layers = Vec::with_capacity(stack.len());
    for (i, (name, w)) in stack.layers().iter().enumerate() {
        let layer = &quantized[i];
        let input = &fp.layer_inputs[i];
        let quantized_error = layer_output_error(w, layer, input)?;
        let rtn = rtn_reconstruct(w, layer.bits, layer.group_size, cfg.clip_search)?;
        let rtn_out = dense_matmul(&rtn, input)?;
        let ref_out = dense_matmul(w, input)?;
        let rtn_error: f64 = ref_out
            .data()
            .iter()
            .zip(rtn_out.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        layers.push(LayerReport {
            name: name.clone(),
            c_out: w.rows(),
            c_in: w.cols(),
            k: layer.k(),
            effective_bits: layer.effective_bits(),
            sensitivity_max: sens_summaries[i].0,
            sensitivity_mean: sens_summaries[i].1,
            rtn_error,
            quantized_error,
            payload_bytes: layer.payload_bytes(),
        });
    }

    let weights: Vec<&Tensor> = dequantized.iter().collect();
    let q_out = stack.forward_with(&weights, eval_x)?.output;
    let mut end_to_end = 0.0f64;
    for (a, b) in fp.output.data().iter().zip(q_out.data()) {
        end_to_end += ((a - b) as f64).powi(2);
    }
    let fp_norm = fp.output.sq_norm();
    let dims = stack.dims();
    let ks: Vec<usize> = quantized.iter().map(|l| l.k()).collect();

    Ok(QuantReport {
        topology: stack.topology().name().to_string(),
        bits: cfg.bits,
        extra_bits: cfg.extra_bits,
        mode: cfg.mode.name().to_string(),
        true_sequential: cfg.true_sequential,
        calib_samples: 0,
        eval_samples: eval_x.cols(),
        layers,
        realized_avg_bits: effective_bits_avg(&dims, cfg.bits, &ks, cfg.mode),
        total_bytes: quantized.iter().map(|l| l.payload_bytes()).sum(),
        end_to_end_error: end_to_end,
        relative_error: if fp_norm > 0.0 { end_to_end / fp_norm } else { 0.0 },
    })
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub extra_bits: f64,
    pub effective_bits: f64,
    pub end_to_end_error: f64,
    pub total_bytes: usize,
}

/// Sweep result over several extra-bit budgets.
#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV with the `effective_bits,end_to_end_error,total_bytes` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("effective_bits,end_to_end_error,total_bytes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.6},{:.6e},{}\n",
                r.effective_bits, r.end_to_end_error, r.total_bytes
            ));
        }
        out
    }
}

/// Quantize and evaluate the stack once per budget.
pub fn sweep(
    stack: &LayerStack,
    calib: &Tensor,
    base_cfg: &QuantConfig,
    extra_bit_list: &[f64],
) -> Result<SweepTable> {
    if extra_bit_list.is_empty() {
        return Err(OwqError::InvalidParam("budget list must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(extra_bit_list.len());
    for &extra in extra_bit_list {
        let cfg = QuantConfig { extra_bits: extra, ..base_cfg.clone() };
        let (_, report) = quantize_model(stack, calib, &cfg)?;
        rows.push(SweepRow {
            extra_bits: extra,
            effective_bits: report.realized_avg_bits,
            end_to_end_error: report.end_to_end_error,
            total_bytes: report.total_bytes,
        });
    }
    Ok(SweepTable { rows })
}
