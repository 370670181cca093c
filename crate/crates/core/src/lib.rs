//! Outlier-aware mixed-precision post-training weight quantization.
//!
//! The library quantizes explicit weight matrices against calibration
//! activations: a column-sequential engine with Hessian-based error
//! compensation, sensitivity-ranked selection of full-precision "weak"
//! columns, bit-packed storage with an fp16 sidecar, a reference
//! mixed-precision forward kernel, and an end-to-end pipeline with
//! budget sweeps.

pub mod archive;
pub mod error;
pub mod gemm;
pub mod hessian;
pub mod optq;
pub mod packed;
pub mod pipeline;
pub mod quantgrid;
pub mod rng;
pub mod selector;
pub mod synth;
pub mod tensor;

pub use archive::{DType, Entry, EntryData, TensorArchive};
pub use error::{OwqError, Result};
pub use gemm::{dense_matmul, layer_output_error, mixed_forward};
pub use hessian::{HessianState, UpperFactor};
pub use optq::{
    act_order_permutation, compensation_step, quantize_layer, quantize_layer_traced,
    OptqOptions, OptqResult, StepRecord,
};
pub use packed::{assemble_layer, dequantize_layer, pack_codes, unpack_codes, QuantizedLayer};
pub use pipeline::{
    evaluate, quantize_model, split_calibration, sweep, LayerStack, QuantConfig, QuantReport,
    StackActivations, SweepTable, Topology,
};
pub use quantgrid::{
    dequantize, fit_minmax, quantize_rtn, rtn_reconstruct, search_clip, QuantParams,
};
pub use selector::{
    budget_to_k, column_sensitivities, effective_bits, select_weak_columns, AccountingMode,
    BudgetPlan, SensitivityReport,
};
pub use synth::{gen_synthetic, SyntheticSpec};
pub use tensor::Tensor;
