mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wes_core::fixedpoint::{check_model, run_model, CONFORMANCE_STEPS};
use wes_core::metrics::{model_size, overlap_ratio, param_size, size_report};
use wes_core::model::{read_blob, write_blob, ModelGraph};
use wes_core::quantizer::calibrate::DEFAULT_PERCENTILE;
use wes_core::quantizer::{
    prepare_float_model, quantize_model, quantize_weights, LayerRecord, QuantizeOptions, Scheme,
    WeightOptions,
};
use wes_core::tensor::{Layout, Tensor};
use wes_core::wes::channel_ranges;
use wes_core::{load_model, load_quantized, save_model, save_quantized, QuantizedModel};

/// Exit status when `simulate --strict` finds a layer outside tolerance.
const EXIT_NONCONFORMANT: u8 = 2;

#[derive(Parser)]
#[command(name = "wes", version, about = "Post-training uint8 quantization with weight equalizing shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a float model against representative inputs.
    Quantize(QuantizeArgs),
    /// Run a quantized model with integer-only arithmetic.
    Simulate(SimulateArgs),
    /// Describe a float or quantized model, or compare scheme sizes.
    Report(ReportArgs),
    /// Write a small synthetic float model and representative inputs.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Lwq,
    Cwq,
    Wes,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Lwq => Scheme::Lwq,
            SchemeArg::Cwq => Scheme::Cwq,
            SchemeArg::Wes => Scheme::Wes,
        }
    }
}

#[derive(Args)]
struct QuantizeArgs {
    /// Float model directory (or its model.json).
    #[arg(long)]
    model: PathBuf,
    /// Directory with inputs.json and raw f32 input blobs.
    #[arg(long)]
    rep_data: PathBuf,
    /// Output file for the quantized model.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "wes")]
    scheme: SchemeArg,
    /// Search clipping ranges for the weights.
    #[arg(long)]
    clip: bool,
    /// Zero weights with magnitude below this and store kernels sparse.
    #[arg(long)]
    prune_threshold: Option<f32>,
    /// Percentile for activation range calibration.
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
    /// Convergence tolerance of the total-range search.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Use at most this many representative inputs, drawn with --seed.
    #[arg(long)]
    rep_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Quantized model file.
    #[arg(long)]
    model: PathBuf,
    /// Raw f32 input blob in the model's input shape; quantized with the
    /// model's input parameters.
    #[arg(long, required_unless_present = "rep_data", conflicts_with = "rep_data")]
    input: Option<PathBuf>,
    /// Run every input of a representative-data directory instead.
    #[arg(long)]
    rep_data: Option<PathBuf>,
    /// Write the final uint8 output (of the first input) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compare every layer against its float reference.
    #[arg(long)]
    check: bool,
    /// With --check, exit with status 2 if any layer is out of tolerance.
    #[arg(long, requires = "check")]
    strict: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeometryArg {
    /// 3x3 depthwise convolution.
    Dw3x3,
    /// 1x1 point-wise convolution with N inputs.
    Pw1x1,
}

#[derive(Args)]
struct ReportArgs {
    /// Float model directory, model.json, or quantized model file.
    #[arg(long, required_unless_present = "geometry")]
    model: Option<PathBuf>,
    /// For float models: overlap before/after WES, weight MSE and size per scheme.
    #[arg(long)]
    compare: bool,
    /// Size table for a single layer geometry instead of a model.
    #[arg(long, value_enum, conflicts_with = "model")]
    geometry: Option<GeometryArg>,
    /// Channel counts for --geometry.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256, 512, 1024])]
    channels: Vec<usize>,
    /// Fraction of pruned weights, stored sparse.
    #[arg(long)]
    sparsity: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives model/ and rep/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of representative inputs.
    #[arg(long, default_value_t = 32)]
    count: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantize(a) => quantize(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn quantize(a: QuantizeArgs) -> Result<ExitCode> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut rep = data::load_inputs(&a.rep_data)?;
    if let Some(limit) = a.rep_limit {
        rep.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
        rep.truncate(limit.max(1));
    }
    let opts = QuantizeOptions {
        scheme: a.scheme.into(),
        clip: a.clip,
        prune_threshold: a.prune_threshold,
        tol: a.tol,
        max_iter: a.max_iter,
        percentile: a.percentile,
        ..QuantizeOptions::default()
    };
    let q = quantize_model(&model, &opts, &rep)?;
    println!(
        "quantized {} ({} layers, {}, {} calibration inputs)",
        model.name,
        q.records.len(),
        opts.scheme,
        rep.len()
    );
    for r in &q.records {
        println!("{}", format_record(r));
    }
    save_quantized(&q.model, &a.out)?;
    let size = model_size(&q.model)?;
    println!(
        "wrote {} ({} bytes of layer records, {:.0} bytes of weight parameters)",
        a.out.display(),
        size.on_disk_bytes().unwrap_or(0),
        size.total_bytes()
    );
    Ok(ExitCode::SUCCESS)
}

fn format_record(r: &LayerRecord) -> String {
    let mut line = format!("layer {:>2} {:<16} mse {:.3e}", r.index, r.kind, r.weight_mse);
    if let (Some(r_hat), Some(cost), Some(init)) = (r.total_range, r.cost, r.initial_cost) {
        line += &format!(
            "  r_hat {r_hat:.5} cost {cost:.3e} (init {init:.3e}, {} iters)",
            r.iterations
        );
    }
    if let Some(h) = r.shift_histogram {
        let last = h.iter().rposition(|&c| c > 0).unwrap_or(0);
        line += &format!("  shifts {:?}", &h[..=last]);
        if r.clamped_shifts > 0 {
            line += &format!(" ({} clamped)", r.clamped_shifts);
        }
    }
    if let Some((lo, hi)) = r.clip_range {
        line += &format!("  clip [{lo:.5}, {hi:.5}]");
    }
    if let Some(s) = r.sparsity {
        line += &format!("  sparsity {:.1}%", 100.0 * s);
    }
    line
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let model = load_quantized(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let inputs = match (&a.input, &a.rep_data) {
        (Some(path), _) => vec![read_blob::<f32>(path, model.input_shape.to_vec(), Layout::Nhwc)
            .with_context(|| format!("loading {}", path.display()))?],
        (None, Some(dir)) => data::load_inputs(dir)?,
        (None, None) => bail!("either --input or --rep-data is required"),
    };
    let mut worst = vec![0.0f64; model.layers.len()];
    for (i, x) in inputs.iter().enumerate() {
        let qx = model.quantize_input(x)?;
        let outputs = run_model(&model, &qx)?;
        let last = outputs.last().context("model has no layers")?;
        if i == 0 {
            if let Some(out) = &a.out {
                write_blob(out, last)?;
            }
        }
        println!("input {i}: output {}", preview(&model, last));
        if a.check {
            for (w, d) in worst.iter_mut().zip(check_model(&model, &qx)?) {
                *w = w.max(d);
            }
        }
    }
    if !a.check {
        return Ok(ExitCode::SUCCESS);
    }
    let mut conforming = true;
    for (i, &d) in worst.iter().enumerate() {
        let ok = d <= CONFORMANCE_STEPS;
        conforming &= ok;
        println!(
            "layer {i:>2}: max deviation {d:.6} steps {}",
            if ok { "ok" } else { "OUT OF TOLERANCE" }
        );
    }
    Ok(if conforming || !a.strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NONCONFORMANT)
    })
}

fn preview(model: &QuantizedModel, out: &Tensor<u8>) -> String {
    let params = model.layers.last().map(|l| l.output);
    let shown: Vec<String> = out
        .data()
        .iter()
        .take(10)
        .map(|&q| match params {
            Some(p) => format!("{q}({:.3})", p.dequantize(q)),
            None => q.to_string(),
        })
        .collect();
    let more = if out.len() > 10 { " ..." } else { "" };
    format!("{:?} [{}{more}]", out.shape(), shown.join(" "))
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    if let Some(g) = a.geometry {
        geometry_report(g, &a.channels, a.sparsity);
        return Ok(ExitCode::SUCCESS);
    }
    let path = a.model.context("--model is required")?;
    if is_float_model(&path) {
        let model = load_model(&path).with_context(|| format!("loading {}", path.display()))?;
        float_report(&model, a.compare, a.sparsity)?;
    } else {
        let model = load_quantized(&path).with_context(|| format!("loading {}", path.display()))?;
        quantized_report(&model)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn is_float_model(path: &Path) -> bool {
    path.is_dir() || path.extension().is_some_and(|e| e == "json")
}

fn geometry_report(g: GeometryArg, channels: &[usize], sparsity: Option<f64>) {
    println!("{:>6} {:>12} {:>12} {:>12} {:>9} {:>9}", "N", "LWQ bits", "CWQ bits", "WES bits", "CWQ +%", "WES +%");
    for &n in channels {
        let k = match g {
            GeometryArg::Dw3x3 => [3, 3, 1, n],
            GeometryArg::Pw1x1 => [1, 1, n, n],
        };
        let [lwq, cwq, wes] = [Scheme::Lwq, Scheme::Cwq, Scheme::Wes].map(|s| param_size(k, s, sparsity));
        println!(
            "{n:>6} {:>12} {:>12} {:>12} {:>9.3} {:>9.3}",
            lwq.total_bits(),
            cwq.total_bits(),
            wes.total_bits(),
            100.0 * cwq.increase_over(&lwq),
            100.0 * wes.increase_over(&lwq)
        );
    }
}

fn float_report(model: &ModelGraph, compare: bool, sparsity: Option<f64>) -> Result<()> {
    let folded = prepare_float_model(model, None)?;
    println!("{} ({} layers, input {:?}, batch norm folded)", model.name, folded.layers.len(), model.input_shape);
    for (i, l) in folded.layers.iter().enumerate() {
        let (lo, hi) = l.weights.min_max();
        let ranges = channel_ranges(&l.weights);
        let widest = ranges.range.iter().copied().fold(0.0f32, f32::max);
        let narrowest = ranges.range.iter().copied().filter(|&r| r > 0.0).fold(f32::INFINITY, f32::min);
        let overlap = overlap_ratio(&l.weights).map_or("-".into(), |o| format!("{o:.3}"));
        println!(
            "layer {i:>2} {:<16} {:?} weights [{lo:.4}, {hi:.4}] channel range {narrowest:.3e}..{widest:.3e} overlap {overlap}",
            l.kind,
            l.weights.shape()
        );
        if compare {
            let n = l.out_channels();
            let mut parts = Vec::new();
            for scheme in Scheme::ALL {
                let wq = quantize_weights(&l.weights, &l.bias, &WeightOptions::with_scheme(scheme))?;
                if let Some(r) = &wq.wes {
                    if let Ok(after) = overlap_ratio(&r.weights) {
                        parts.push(format!("overlap after WES {after:.3}"));
                    }
                }
                parts.push(format!("{scheme} mse {:.3e}", wq.mse(&l.weights)));
            }
            let shape = l.weights.shape();
            let k = [shape[0], shape[1], shape[2], n];
            for scheme in Scheme::ALL {
                parts.push(format!("{scheme} {} bits", param_size(k, scheme, sparsity).total_bits()));
            }
            println!("         {}", parts.join(", "));
        }
    }
    if compare {
        let kernels: Vec<[usize; 4]> = folded
            .layers
            .iter()
            .map(|l| {
                let s = l.weights.shape();
                [s[0], s[1], s[2], s[3]]
            })
            .collect();
        let lwq = size_report(&kernels, Scheme::Lwq, sparsity);
        for scheme in Scheme::ALL {
            let r = size_report(&kernels, scheme, sparsity);
            println!(
                "total {scheme}: {:.1} bytes ({:+.3}% over LWQ)",
                r.total_bytes(),
                100.0 * (r.total_bits() as f64 / lwq.total_bits() as f64 - 1.0)
            );
        }
    }
    Ok(())
}

fn quantized_report(model: &QuantizedModel) -> Result<()> {
    let size = model_size(model)?;
    println!("{} ({} layers, input {:?})", model.name, model.layers.len(), model.input_shape);
    let on_disk = size.on_disk.clone().unwrap_or_default();
    for (i, (l, s)) in model.layers.iter().zip(&size.layers).enumerate() {
        let shifts = l.shifts.as_ref().map(|s| {
            let h = s.histogram();
            let last = h.iter().rposition(|&c| c > 0).unwrap_or(0);
            format!(" shifts {:?}", &h[..=last])
        });
        println!(
            "layer {i:>2} {:<16} {} {:?} {:?}{} in s={:.4e} z={} out s={:.4e} z={} | {} weight bits + {} parameter bits, {} bytes on disk{}",
            l.kind,
            l.scheme,
            l.kernel_shape,
            l.activation,
            if l.sparse { " sparse" } else { "" },
            l.input.scale,
            l.input.zero_point,
            l.output.scale,
            l.output.zero_point,
            s.weight_bits,
            s.overhead_bits(),
            on_disk.get(i).copied().unwrap_or(0),
            shifts.unwrap_or_default(),
        );
    }
    println!(
        "total: {:.1} bytes of weight parameters, {} bytes of layer records",
        size.total_bytes(),
        size.on_disk_bytes().unwrap_or(0)
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    if a.count == 0 {
        bail!("--count must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = wes_core::synth::mobilenet_like(&mut rng);
    let inputs = wes_core::synth::random_inputs(&mut rng, model.input_shape, a.count);
    let model_dir = a.out.join("model");
    let rep_dir = a.out.join("rep");
    save_model(&model, &model_dir)?;
    data::save_inputs(&rep_dir, &inputs)?;
    println!(
        "wrote {} ({} layers) and {} ({} inputs)",
        model_dir.display(),
        model.layers.len(),
        rep_dir.display(),
        inputs.len()
    );
    Ok(ExitCode::SUCCESS)
}
