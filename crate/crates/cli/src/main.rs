//! Command-line front end for outlier-aware weight quantization.
//!
//! Subcommands: `gen` builds synthetic model/calibration archives,
//! `quantize` packs a model, `eval` measures a packed model, `sweep` runs
//! a budget sweep to CSV, `inspect` dumps per-column sensitivities and the
//! selected weak columns. Exit codes: 0 success, 1 runtime error, 2 usage
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use owq_core::pipeline::{self, LayerStack, QuantConfig, SweepRow, SweepTable, Topology};
use owq_core::selector::AccountingMode;
use owq_core::{gen_synthetic, EntryData, SyntheticSpec, Tensor, TensorArchive};

#[derive(Parser)]
#[command(name = "owq", version, about = "Outlier-aware mixed-precision weight quantization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic model and calibration archive.
    Gen(GenArgs),
    /// Quantize a model archive against calibration activations.
    Quantize(QuantizeArgs),
    /// Evaluate a quantized archive against the full-precision model.
    Eval(EvalArgs),
    /// Quantize once per extra-bit budget and emit a CSV table.
    Sweep(SweepArgs),
    /// Print per-column sensitivities and selected weak columns.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Stack wiring: "mlp" or "block".
    #[arg(long, default_value = "mlp")]
    topology: String,
    /// Model width (input channels).
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Layer count (mlp only; a block always has six).
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Calibration sample count.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    /// Outlier channels as `idx:scale[,idx:scale...]`.
    #[arg(long, default_value = "")]
    outliers: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight scale; defaults to 1/sqrt(dim).
    #[arg(long)]
    weight_scale: Option<f32>,
    /// Output path for the model archive.
    #[arg(long)]
    out: PathBuf,
    /// Output path for the calibration archive.
    #[arg(long)]
    calib_out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigFlags {
    /// JSON file with QuantConfig fields; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
    bits: Option<u8>,
    #[arg(long)]
    extra_bits: Option<f64>,
    /// Weak-column accounting: "latency" or "storage".
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    act_order: bool,
    #[arg(long)]
    true_sequential: bool,
    #[arg(long)]
    no_clip_search: bool,
    #[arg(long)]
    no_compensate_weak: bool,
    #[arg(long)]
    percdamp: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<QuantConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => QuantConfig::default(),
        };
        if let Some(bits) = self.bits {
            cfg.bits = bits;
        }
        if let Some(extra) = self.extra_bits {
            cfg.extra_bits = extra;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = AccountingMode::parse(mode)?;
        }
        if let Some(g) = self.group_size {
            cfg.group_size = g;
        }
        if self.act_order {
            cfg.act_order = true;
        }
        if self.true_sequential {
            cfg.true_sequential = true;
        }
        if self.no_clip_search {
            cfg.clip_search = false;
        }
        if self.no_compensate_weak {
            cfg.compensate_weak = false;
        }
        if let Some(p) = self.percdamp {
            cfg.percdamp = p;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct QuantizeArgs {
    /// Model archive (layer.<i>.<name>.weight entries).
    #[arg(long = "in")]
    input: PathBuf,
    /// Calibration archive (calib.x entry).
    #[arg(long)]
    calib: PathBuf,
    /// Output path for the quantized archive.
    #[arg(long)]
    out: PathBuf,
    /// Report path; defaults to the output path with a .report.json suffix.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Full-precision model archive.
    #[arg(long = "in")]
    input: PathBuf,
    /// Quantized archive to evaluate.
    #[arg(long)]
    quantized: PathBuf,
    /// Activation archive used as the evaluation set.
    #[arg(long)]
    calib: PathBuf,
    /// Time the mixed kernel against the dense dequantize-then-multiply
    /// path (wall-clock, information only).
    #[arg(long)]
    bench: bool,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Comma-separated extra-bit budgets, e.g. `0,0.01,0.1`.
    #[arg(long)]
    budgets: String,
    /// Optional CSV output path (always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run up to N sweep points in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct InspectArgs {
    /// Quantized archive.
    #[arg(long = "in")]
    input: PathBuf,
    /// Emit CSV rows instead of text.
    #[arg(long)]
    csv: bool,
    /// Restrict output to one layer prefix (e.g. `layer.0.k`).
    #[arg(long)]
    layer: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn parse_outliers(spec: &str) -> Result<Vec<(usize, f32)>> {
    let mut out = Vec::new();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (idx, scale) = part
            .split_once(':')
            .with_context(|| format!("outlier '{part}' is not idx:scale"))?;
        out.push((idx.trim().parse()?, scale.trim().parse()?));
    }
    Ok(out)
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let topology = Topology::parse(&args.topology)?;
    let outliers = parse_outliers(&args.outliers)?;
    let scale = args.weight_scale.unwrap_or(1.0 / (args.dim as f32).sqrt());

    let mut rng = owq_core::rng::seeded(args.seed);
    let mk = |rng: &mut _, o: usize, i: usize| -> Tensor {
        let t = owq_core::rng::normal_matrix(rng, o, i);
        Tensor::matrix(o, i, t.data().iter().map(|v| v * scale).collect()).expect("dims")
    };
    let stack = match topology {
        Topology::Mlp => {
            if args.layers == 0 {
                bail!("mlp needs at least one layer");
            }
            let layers = (0..args.layers)
                .map(|i| (format!("fc{i}"), mk(&mut rng, args.dim, args.dim)))
                .collect();
            LayerStack::mlp(layers)?
        }
        Topology::Block => {
            let d = args.dim;
            let weights = vec![
                mk(&mut rng, d, d),
                mk(&mut rng, d, d),
                mk(&mut rng, d, d),
                mk(&mut rng, d, d),
                mk(&mut rng, 4 * d, d),
                mk(&mut rng, d, 4 * d),
            ];
            LayerStack::transformer_block(d, weights)?
        }
    };

    let (_, x) = gen_synthetic(&SyntheticSpec {
        c_in: args.dim,
        c_out: 1,
        n_samples: args.samples,
        outlier_channels: outliers,
        seed: args.seed.wrapping_add(1),
    })?;

    stack.to_archive()?.save(&args.out)?;
    let mut calib = TensorArchive::new();
    calib.insert_f32("calib.x", x)?;
    calib.set_meta("seed", &args.seed.to_string());
    calib.save(&args.calib_out)?;
    println!(
        "wrote {} ({} layers, {}) and {} ({} samples)",
        args.out.display(),
        stack.len(),
        topology.name(),
        args.calib_out.display(),
        args.samples
    );
    Ok(())
}

fn load_model_and_calib(model: &Path, calib: &Path) -> Result<(LayerStack, Tensor)> {
    let stack = LayerStack::from_archive(
        &TensorArchive::load(model).with_context(|| format!("loading {}", model.display()))?,
    )?;
    let calib_archive =
        TensorArchive::load(calib).with_context(|| format!("loading {}", calib.display()))?;
    let x = calib_archive.get_f32("calib.x")?;
    Ok((stack, x))
}

fn cmd_quantize(args: QuantizeArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let (stack, x) = load_model_and_calib(&args.input, &args.calib)?;
    let (archive, report) = pipeline::quantize_model(&stack, &x, &cfg)?;

    if cfg.extra_bits > 0.0 {
        let starved: Vec<&str> = report
            .layers
            .iter()
            .filter(|l| l.k == 0)
            .map(|l| l.name.as_str())
            .collect();
        if !starved.is_empty() {
            eprintln!(
                "warning: budget yields k=0 for layer(s) {}; consider a larger --extra-bits",
                starved.join(", ")
            );
        }
    }

    archive.save(&args.out)?;
    let report_path = args.report.unwrap_or_else(|| args.out.with_extension("report.json"));
    std::fs::write(&report_path, report.to_json()?)?;
    println!(
        "quantized {} layers to {:.4} avg bits ({} bytes); end-to-end error {:.6e}",
        report.layers.len(),
        report.realized_avg_bits,
        report.total_bytes,
        report.end_to_end_error
    );
    println!("wrote {} and {}", args.out.display(), report_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (stack, x) = load_model_and_calib(&args.input, &args.calib)?;
    let quantized = TensorArchive::load(&args.quantized)
        .with_context(|| format!("loading {}", args.quantized.display()))?;
    let report = pipeline::evaluate(&stack, &quantized, &x)?;

    println!("layer            k   eff_bits  rtn_error      quantized_error");
    for l in &report.layers {
        println!(
            "{:<16} {:<3} {:<9.4} {:<14.6e} {:.6e}",
            l.name, l.k, l.effective_bits, l.rtn_error, l.quantized_error
        );
    }
    println!(
        "end_to_end_error {:.6e} (relative {:.6e}) over {} samples",
        report.end_to_end_error, report.relative_error, report.eval_samples
    );
    if args.bench {
        bench_kernels(&stack, &quantized, &x)?;
    }
    if let Some(path) = args.report {
        std::fs::write(&path, report.to_json()?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Wall-clock comparison of the mixed kernel against dequantize-then-dense,
/// information only.
fn bench_kernels(stack: &LayerStack, quantized: &TensorArchive, x: &Tensor) -> Result<()> {
    use owq_core::packed::QuantizedLayer;
    use std::time::Instant;
    let reps = 5;
    for i in 0..stack.len() {
        let prefix = stack.prefix(i);
        let layer = QuantizedLayer::from_archive(quantized, &prefix)?;
        let input = if i == 0 {
            x.clone()
        } else {
            // Benchmark every layer on the stack input width it expects.
            let rows = layer.c_in;
            let mut rng = owq_core::rng::seeded(42 + i as u64);
            owq_core::rng::normal_matrix(&mut rng, rows, x.cols())
        };
        let t0 = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(owq_core::mixed_forward(&layer, &input)?);
        }
        let mixed = t0.elapsed();
        let t1 = Instant::now();
        for _ in 0..reps {
            let dense = owq_core::dequantize_layer(&layer)?;
            std::hint::black_box(owq_core::dense_matmul(&dense, &input)?);
        }
        let dense = t1.elapsed();
        println!(
            "bench {prefix}: mixed {:?}/iter, dequantize+dense {:?}/iter ({:.2}x)",
            mixed / reps,
            dense / reps,
            dense.as_secs_f64() / mixed.as_secs_f64().max(1e-12)
        );
    }
    Ok(())
}

fn parse_budgets(spec: &str) -> Result<Vec<f64>> {
    let budgets: Vec<f64> = spec
        .split(',')
        .filter(|p| !p.is_empty())
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad budget '{p}'")))
        .collect::<Result<_>>()?;
    if budgets.is_empty() {
        bail!("--budgets must list at least one value");
    }
    Ok(budgets)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let budgets = parse_budgets(&args.budgets)?;
    let (stack, x) = load_model_and_calib(&args.input, &args.calib)?;

    let table = if args.jobs <= 1 {
        pipeline::sweep(&stack, &x, &cfg, &budgets)?
    } else {
        sweep_parallel(&stack, &x, &cfg, &budgets, args.jobs)?
    };

    let csv = table.to_csv();
    print!("{csv}");
    if let Some(path) = args.out {
        std::fs::write(&path, &csv)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

/// Sweep points are independent runs; spread them over worker threads.
fn sweep_parallel(
    stack: &LayerStack,
    calib: &Tensor,
    cfg: &QuantConfig,
    budgets: &[f64],
    jobs: usize,
) -> Result<SweepTable> {
    let mut rows: Vec<Option<SweepRow>> = vec![None; budgets.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: std::sync::Mutex<Vec<(usize, Result<SweepRow>)>> =
        std::sync::Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(budgets.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= budgets.len() {
                    break;
                }
                let run_cfg = QuantConfig { extra_bits: budgets[i], ..cfg.clone() };
                let row = pipeline::quantize_model(stack, calib, &run_cfg)
                    .map(|(_, report)| SweepRow {
                        extra_bits: budgets[i],
                        effective_bits: report.realized_avg_bits,
                        end_to_end_error: report.end_to_end_error,
                        total_bytes: report.total_bytes,
                    })
                    .map_err(anyhow::Error::from);
                results.lock().unwrap().push((i, row));
            });
        }
    });

    for (i, row) in results.into_inner().unwrap() {
        rows[i] = Some(row?);
    }
    Ok(SweepTable { rows: rows.into_iter().map(|r| r.expect("all points ran")).collect() })
}

fn layer_prefixes(archive: &TensorArchive) -> Vec<String> {
    let mut prefixes: Vec<(usize, String)> = archive
        .metadata()
        .keys()
        .filter_map(|k| {
            let prefix = k.strip_suffix(".meta")?;
            let idx: usize = prefix.split('.').nth(1)?.parse().ok()?;
            Some((idx, prefix.to_string()))
        })
        .collect();
    prefixes.sort();
    prefixes.into_iter().map(|(_, p)| p).collect()
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let archive = TensorArchive::load(&args.input)
        .with_context(|| format!("loading {}", args.input.display()))?;
    let prefixes: Vec<String> = layer_prefixes(&archive)
        .into_iter()
        .filter(|p| args.layer.as_deref().is_none_or(|l| p == l))
        .collect();
    if prefixes.is_empty() {
        bail!("no quantized layers found in {}", args.input.display());
    }

    if args.csv {
        println!("layer,column,lambda,delta_norm,sensitivity,selected");
    }
    for prefix in &prefixes {
        let selected: Vec<u16> = match archive.get(&format!("{prefix}.weak_idx")) {
            Ok(entry) => match &entry.data {
                EntryData::U16(v) => v.clone(),
                _ => bail!("{prefix}.weak_idx has unexpected dtype"),
            },
            Err(_) => Vec::new(),
        };
        let sens = archive.get_f32(&format!("{prefix}.sensitivity")).ok();
        let lambda = archive.get_f32(&format!("{prefix}.lambda")).ok();
        let dnorm = archive.get_f32(&format!("{prefix}.delta_norms")).ok();

        if args.csv {
            if let (Some(s), Some(l), Some(d)) = (&sens, &lambda, &dnorm) {
                for c in 0..s.data().len() {
                    println!(
                        "{prefix},{c},{:e},{:e},{:e},{}",
                        l.data()[c],
                        d.data()[c],
                        s.data()[c],
                        u8::from(selected.binary_search(&(c as u16)).is_ok())
                    );
                }
            }
            continue;
        }

        let idx_text = if selected.is_empty() {
            "none".to_string()
        } else {
            selected.iter().map(u16::to_string).collect::<Vec<_>>().join(", ")
        };
        println!("{prefix}: k={} selected=[{idx_text}]", selected.len());
        match (&sens, &lambda, &dnorm) {
            (Some(s), Some(_), Some(_)) => {
                let mut order: Vec<usize> = (0..s.data().len()).collect();
                order.sort_by(|&a, &b| s.data()[b].total_cmp(&s.data()[a]).then(a.cmp(&b)));
                let shown = order.len().min(8);
                for &c in &order[..shown] {
                    println!(
                        "  col {c:>5}  λ={:<12.5e} ‖ΔW‖²={:<12.5e} sensitivity={:.5e}{}",
                        lambda.as_ref().unwrap().data()[c],
                        dnorm.as_ref().unwrap().data()[c],
                        s.data()[c],
                        if selected.binary_search(&(c as u16)).is_ok() { "  [weak]" } else { "" }
                    );
                }
                // The stored selection should be exactly the top-k by the
                // stored sensitivities.
                let reselect: Vec<u16> = {
                    let mut top: Vec<u16> =
                        order[..selected.len()].iter().map(|&c| c as u16).collect();
                    top.sort_unstable();
                    top
                };
                if reselect != selected {
                    println!("  note: stored selection differs from stored sensitivity top-k");
                }
            }
            _ => println!("  (no sensitivity tensors stored; quantized with extra_bits = 0)"),
        }
    }
    Ok(())
}
