//! Overlap ratio, quantization error and quantized parameter size accounting.

use crate::error::{Error, Result};
use crate::quantizer::{QuantizedModel, Scheme};
use crate::tensor::Tensor;
use crate::wes::channel_ranges;

/// Bit widths of the weight quantization parameters.
pub const MANTISSA_BITS: usize = 32;
pub const EXPONENT_BITS: usize = 6;
pub const ZERO_POINT_BITS: usize = 8;
pub const SHIFT_BITS: usize = 4;
/// Size field written in front of a sparse payload.
pub const SPARSE_COUNT_BITS: usize = 32;

/// Mean over channels of the channel's `[min, max]` width relative to the
/// whole kernel's width.
pub fn overlap_ratio(w: &Tensor<f32>) -> Result<f64> {
    let r = channel_ranges(w);
    let (lo, hi) = w.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateRange(
            "overlap ratio of a constant tensor".into(),
        ));
    }
    let full = hi as f64 - lo as f64;
    let sum: f64 = r
        .min
        .iter()
        .zip(&r.max)
        .map(|(&a, &b)| (b as f64 - a as f64) / full)
        .sum();
    Ok(sum / r.channels() as f64)
}

/// Mean squared error between two tensors of the same shape.
pub fn quant_error(w: &Tensor<f32>, w_star: &Tensor<f32>) -> Result<f64> {
    if w.shape() != w_star.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            w.shape(),
            w_star.shape()
        )));
    }
    let sse: f64 = w
        .data()
        .iter()
        .zip(w_star.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    Ok(sse / w.len() as f64)
}

/// Logical bit counts of one quantized layer's weight parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSize {
    pub scheme: Scheme,
    pub channels: usize,
    pub weight_bits: usize,
    pub compound_bits: usize,
    pub zero_point_bits: usize,
    pub shift_bits: usize,
}

impl LayerSize {
    pub fn overhead_bits(&self) -> usize {
        self.compound_bits + self.zero_point_bits + self.shift_bits
    }

    pub fn total_bits(&self) -> usize {
        self.weight_bits + self.overhead_bits()
    }

    /// Relative size increase over `baseline`, as a fraction.
    pub fn increase_over(&self, baseline: &LayerSize) -> f64 {
        (self.total_bits() as f64 - baseline.total_bits() as f64) / baseline.total_bits() as f64
    }
}

/// Size of a kernel `[kh, kw, in, out]` quantized with `scheme`.
///
/// Dense kernels cost 8 bits per weight. With `sparsity` the kernel is
/// stored as a 1-bit mask, 8 bits per kept weight and a 32-bit count.
pub fn param_size(kernel_shape: [usize; 4], scheme: Scheme, sparsity: Option<f64>) -> LayerSize {
    let n: usize = kernel_shape.iter().product();
    let channels = kernel_shape[3];
    let weight_bits = match sparsity {
        None => 8 * n,
        Some(s) => {
            let kept = (n as f64 * (1.0 - s.clamp(0.0, 1.0))).round() as usize;
            n + 8 * kept + SPARSE_COUNT_BITS
        }
    };
    let sets = if scheme == Scheme::Cwq { channels } else { 1 };
    LayerSize {
        scheme,
        channels,
        weight_bits,
        compound_bits: (MANTISSA_BITS + EXPONENT_BITS) * sets,
        zero_point_bits: ZERO_POINT_BITS * sets,
        shift_bits: if scheme == Scheme::Wes {
            SHIFT_BITS * channels
        } else {
            0
        },
    }
}

/// Per-layer and total sizes for one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSizeReport {
    pub scheme: Scheme,
    pub layers: Vec<LayerSize>,
    /// Serialized bytes per layer record, when measured from a model.
    pub on_disk: Option<Vec<usize>>,
}

impl SchemeSizeReport {
    pub fn total_bits(&self) -> usize {
        self.layers.iter().map(LayerSize::total_bits).sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits() as f64 / 8.0
    }

    pub fn on_disk_bytes(&self) -> Option<usize> {
        self.on_disk.as_ref().map(|v| v.iter().sum())
    }
}

/// Size report for a list of kernel shapes under one scheme.
pub fn size_report(
    kernels: &[[usize; 4]],
    scheme: Scheme,
    sparsity: Option<f64>,
) -> SchemeSizeReport {
    SchemeSizeReport {
        scheme,
        layers: kernels
            .iter()
            .map(|&k| param_size(k, scheme, sparsity))
            .collect(),
        on_disk: None,
    }
}

/// Logical and serialized size of an already quantized model.
pub fn model_size(model: &QuantizedModel) -> Result<SchemeSizeReport> {
    let scheme = model
        .layers
        .first()
        .map_or(Scheme::Lwq, |l| l.scheme);
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut on_disk = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let sparsity = l.sparse.then(|| {
            let zeros = l
                .weights
                .iter()
                .enumerate()
                .filter(|&(i, &q)| q == l.weight_zero_point(i % l.out_channels()))
                .count();
            zeros as f64 / l.weights.len() as f64
        });
        layers.push(param_size(l.kernel_shape, l.scheme, sparsity));
        on_disk.push(crate::qformat::layer_size(l)?);
    }
    Ok(SchemeSizeReport {
        scheme,
        layers,
        on_disk: Some(on_disk),
    })
}
