//! Post-training quantization of a float model chain into uint8 layers.
//!
//! Per layer: batch-norm fold, optional magnitude pruning, the scheme's
//! weight transform (WES shift, per-channel ranges for CWQ), optional weight
//! clipping, weight quantization, then bias and scale-compound derivation
//! against calibrated activation ranges.

pub mod affine;
pub mod bias;
pub mod calibrate;
pub mod clip;
pub mod compound;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use crate::bnfold::fold_model;
use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, ModelGraph, Padding};
use crate::pruning::prune;
use crate::tensor::Tensor;
use crate::wes::ShiftScales;

pub use affine::{dequantize, fake_quantize, nudged_range, quantize_affine, AffineParams};
pub use bias::quantize_bias;
pub use calibrate::{calibrate_activations, CalibratedRanges, CalibrationStats};
pub use clip::{clip_optimize, ClipRange};
pub use compound::{make_scale_compound, ScaleCompound};
pub use weights::{quantize_weights, WeightOptions, WeightQuantization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// One scale and zero point per layer.
    Lwq,
    /// One scale and zero point per output channel.
    Cwq,
    /// Layer-wise after per-channel power-of-two equalization.
    Wes,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Lwq, Scheme::Cwq, Scheme::Wes];

    pub fn code(self) -> u8 {
        match self {
            Scheme::Lwq => 0,
            Scheme::Cwq => 1,
            Scheme::Wes => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scheme::Lwq),
            1 => Some(Scheme::Cwq),
            2 => Some(Scheme::Wes),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Lwq => "lwq",
            Scheme::Cwq => "cwq",
            Scheme::Wes => "wes",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lwq" => Ok(Scheme::Lwq),
            "cwq" => Ok(Scheme::Cwq),
            "wes" => Ok(Scheme::Wes),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

/// One layer ready for integer execution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub kind: LayerKind,
    pub scheme: Scheme,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
    /// HWIO kernel shape.
    pub kernel_shape: [usize; 4],
    pub weights: Vec<u8>,
    /// Store the kernel in the sparse (mask + packed) form on disk.
    pub sparse: bool,
    pub bias: Vec<i32>,
    /// One entry for LWQ/WES, one per output channel for CWQ.
    pub weight_zero_points: Vec<u8>,
    pub weight_scales: Vec<f32>,
    pub compounds: Vec<ScaleCompound>,
    /// WES only.
    pub shifts: Option<ShiftScales>,
    pub input: AffineParams,
    pub output: AffineParams,
}

impl QuantizedLayer {
    pub fn out_channels(&self) -> usize {
        self.kernel_shape[3]
    }

    fn per_channel<T: Copy>(v: &[T], c: usize) -> T {
        v[if v.len() == 1 { 0 } else { c }]
    }

    pub fn weight_zero_point(&self, c: usize) -> u8 {
        Self::per_channel(&self.weight_zero_points, c)
    }

    pub fn weight_scale(&self, c: usize) -> f32 {
        Self::per_channel(&self.weight_scales, c)
    }

    pub fn compound(&self, c: usize) -> ScaleCompound {
        Self::per_channel(&self.compounds, c)
    }

    pub fn shift(&self, c: usize) -> u8 {
        self.shifts.as_ref().map_or(0, |s| s.0[c])
    }

    /// Check that parameter multiplicities match the scheme: LWQ carries one
    /// (M, s, z) and no shifts, CWQ carries N of each, WES one plus N shifts.
    pub fn check_param_spec(&self) -> Result<()> {
        let n = self.out_channels();
        let per = match self.scheme {
            Scheme::Cwq => n,
            Scheme::Lwq | Scheme::Wes => 1,
        };
        let shifts_ok = match (&self.scheme, &self.shifts) {
            (Scheme::Wes, Some(s)) => s.len() == n && s.0.iter().all(|&x| x <= 15),
            (Scheme::Wes, None) => false,
            (_, s) => s.is_none(),
        };
        let counts_ok = self.weight_zero_points.len() == per
            && self.weight_scales.len() == per
            && self.compounds.len() == per;
        let n_weights: usize = self.kernel_shape.iter().product();
        if !(shifts_ok && counts_ok && self.bias.len() == n && self.weights.len() == n_weights) {
            return Err(Error::Format(format!(
                "{} layer with {n} channels carries {} zero points, {} compounds, {} shifts",
                self.scheme,
                self.weight_zero_points.len(),
                self.compounds.len(),
                self.shifts.as_ref().map_or(0, ShiftScales::len),
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn input_params(&self) -> Option<AffineParams> {
        self.layers.first().map(|l| l.input)
    }

    pub fn check_param_spec(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            l.check_param_spec().map_err(|e| e.at_layer(i))?;
        }
        Ok(())
    }

    /// Quantize a float input with the model's input parameters.
    pub fn quantize_input(&self, x: &Tensor<f32>) -> Result<Tensor<u8>> {
        let p = self
            .input_params()
            .ok_or_else(|| Error::InvalidArgument("model has no layers".into()))?;
        Ok(quantize_affine(x, &p))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuantizeOptions {
    pub scheme: Scheme,
    pub clip: bool,
    pub prune_threshold: Option<f32>,
    pub tol: f64,
    pub max_iter: usize,
    pub percentile: f64,
    pub bits: u8,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Wes,
            clip: false,
            prune_threshold: None,
            tol: 1e-8,
            max_iter: 200,
            percentile: calibrate::DEFAULT_PERCENTILE,
            bits: 8,
        }
    }
}

impl QuantizeOptions {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    fn weight_options(&self) -> WeightOptions {
        WeightOptions {
            scheme: self.scheme,
            bits: self.bits,
            clip: self.clip,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

/// What happened to one layer during quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub index: usize,
    pub kind: LayerKind,
    pub scheme: Scheme,
    pub total_range: Option<f32>,
    pub cost: Option<f64>,
    pub initial_cost: Option<f64>,
    pub iterations: usize,
    pub shift_histogram: Option<[usize; 16]>,
    pub clamped_shifts: usize,
    pub clip_range: Option<(f32, f32)>,
    pub weight_mse: f64,
    pub sparsity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub model: QuantizedModel,
    pub records: Vec<LayerRecord>,
    /// The float model after folding and pruning, as calibrated.
    pub float_model: ModelGraph,
}

/// Fold batch norm and apply optional pruning, producing the float model that
/// calibration and weight quantization see.
pub fn prepare_float_model(model: &ModelGraph, prune_threshold: Option<f32>) -> Result<ModelGraph> {
    model.validate()?;
    let mut m = model.clone();
    fold_model(&mut m)?;
    if let Some(t) = prune_threshold {
        for layer in &mut m.layers {
            layer.weights = prune(&layer.weights, t)?;
        }
    }
    Ok(m)
}

pub fn quantize_model(
    model: &ModelGraph,
    opts: &QuantizeOptions,
    rep_inputs: &[Tensor<f32>],
) -> Result<Quantized> {
    if rep_inputs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let float_model = prepare_float_model(model, opts.prune_threshold)?;
    let ranges = calibrate_activations(&float_model, rep_inputs, opts.percentile)?;

    let mut layers = Vec::with_capacity(float_model.layers.len());
    let mut records = Vec::with_capacity(float_model.layers.len());
    let mut input = ranges.input;
    for (index, layer) in float_model.layers.iter().enumerate() {
        let output = ranges.layers[index];
        let (q, record) = quantize_layer(index, layer, input, output, opts)
            .map_err(|e| e.at_layer(index))?;
        layers.push(q);
        records.push(record);
        input = output;
    }

    let model = QuantizedModel {
        name: float_model.name.clone(),
        input_shape: float_model.input_shape,
        layers,
    };
    model.check_param_spec()?;
    Ok(Quantized {
        model,
        records,
        float_model,
    })
}

fn quantize_layer(
    index: usize,
    layer: &crate::model::LayerSpec,
    input: AffineParams,
    output: AffineParams,
    opts: &QuantizeOptions,
) -> Result<(QuantizedLayer, LayerRecord)> {
    let wq = quantize_weights(&layer.weights, &layer.bias, &opts.weight_options())?;
    let scales = wq.scales();
    let bias = quantize_bias(&wq.bias, input.scale, &scales)?;
    let compounds = scales
        .iter()
        .map(|&s_w| make_scale_compound(input.scale, s_w, output.scale))
        .collect::<Result<Vec<_>>>()?;

    let shape = layer.weights.shape();
    let kernel_shape = [shape[0], shape[1], shape[2], shape[3]];
    let sparsity = opts.prune_threshold.map(|_| {
        let zeros = layer.weights.data().iter().filter(|&&x| x == 0.0).count();
        zeros as f64 / layer.weights.len() as f64
    });

    let record = LayerRecord {
        index,
        kind: layer.kind,
        scheme: opts.scheme,
        total_range: wq.wes.as_ref().map(|r| r.total_range),
        cost: wq.wes.as_ref().map(|r| r.cost),
        initial_cost: wq.wes.as_ref().map(|r| r.initial_cost),
        iterations: wq.wes.as_ref().map_or(0, |r| r.iterations),
        shift_histogram: wq.shifts.as_ref().map(ShiftScales::histogram),
        clamped_shifts: wq.wes.as_ref().map_or(0, |r| r.clamped),
        clip_range: wq.clip.as_ref().and_then(|c| match c.as_slice() {
            [single] => Some((single.min, single.max)),
            _ => None,
        }),
        weight_mse: wq.mse(&layer.weights),
        sparsity,
    };

    let q = QuantizedLayer {
        kind: layer.kind,
        scheme: opts.scheme,
        stride: layer.stride,
        padding: layer.padding,
        activation: layer.activation,
        kernel_shape,
        weights: wq.q.data().to_vec(),
        sparse: opts.prune_threshold.is_some(),
        bias,
        weight_zero_points: wq.zero_points(),
        weight_scales: scales,
        compounds,
        shifts: wq.shifts,
        input,
        output,
    };
    Ok((q, record))
}
