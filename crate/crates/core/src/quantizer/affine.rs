//! Uniform affine (asymmetric) quantization with zero-point nudging.

use crate::error::{Error, Result};
use crate::tensor::{min_max, Tensor};

/// Round to nearest, ties away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Scale and zero point of a uniform affine quantizer whose range has been
/// nudged so that real 0.0 is exactly representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f32,
    pub zero_point: u8,
    pub nudged_min: f32,
    pub nudged_max: f32,
    pub bits: u8,
}

impl AffineParams {
    /// Rebuild parameters from a stored scale and zero point.
    pub fn from_scale_zero(scale: f32, zero_point: u8, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale {scale} must be positive")));
        }
        let qmax = qmax(bits);
        if u32::from(zero_point) > qmax {
            return Err(Error::InvalidArgument(format!(
                "zero point {zero_point} outside [0, {qmax}] for {bits} bits"
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            nudged_min: -(zero_point as f32) * scale,
            nudged_max: (qmax - u32::from(zero_point)) as f32 * scale,
            bits,
        })
    }

    pub fn qmax(&self) -> u32 {
        qmax(self.bits)
    }

    pub fn quantize(&self, w: f32) -> u8 {
        let x = w.clamp(self.nudged_min, self.nudged_max) as f64;
        let q = round_half_away((x - self.nudged_min as f64) / self.scale as f64);
        q.clamp(0.0, self.qmax() as f64) as u8
    }

    pub fn dequantize(&self, q: u8) -> f32 {
        (i32::from(q) - i32::from(self.zero_point)) as f32 * self.scale
    }

    /// Quantize then dequantize one value.
    pub fn fake(&self, w: f32) -> f32 {
        self.dequantize(self.quantize(w))
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("bit width {bits} not in [2, 8]")))
    }
}

fn qmax(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Derive nudged quantization parameters from a raw `[min, max]` range.
///
/// The range is first extended to contain 0. A constant-zero range yields
/// scale 1 and zero point 0.
pub fn nudged_range(min_raw: f32, max_raw: f32, bits: u8) -> Result<AffineParams> {
    check_bits(bits)?;
    if !(min_raw.is_finite() && max_raw.is_finite()) {
        return Err(Error::NonFinite(format!("range [{min_raw}, {max_raw}]")));
    }
    if min_raw > max_raw {
        return Err(Error::InvalidArgument(format!(
            "range [{min_raw}, {max_raw}] is inverted"
        )));
    }
    let lo = min_raw.min(0.0) as f64;
    let hi = max_raw.max(0.0) as f64;
    if lo == hi {
        return AffineParams::from_scale_zero(1.0, 0, bits);
    }
    let qmax = qmax(bits) as f64;
    let scale = ((hi - lo) / qmax) as f32;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateRange(format!(
            "[{min_raw}, {max_raw}] has no representable step"
        )));
    }
    let z = round_half_away(-lo / scale as f64).clamp(0.0, qmax) as u8;
    AffineParams::from_scale_zero(scale, z, bits)
}

pub fn quantize_affine(w: &Tensor<f32>, p: &AffineParams) -> Tensor<u8> {
    w.map(|x| p.quantize(x))
}

pub fn dequantize(q: &Tensor<u8>, p: &AffineParams) -> Tensor<f32> {
    q.map(|x| p.dequantize(x))
}

/// Quantize-then-dequantize with parameters derived from the tensor's own range.
pub fn fake_quantize(w: &Tensor<f32>, bits: u8) -> Result<(Tensor<f32>, AffineParams)> {
    let (lo, hi) = w.min_max();
    let p = nudged_range(lo, hi, bits)?;
    Ok((w.map(|x| p.fake(x)), p))
}

/// Fake-quantize a slice in place against fixed parameters.
pub fn fake_quantize_slice(values: &mut [f32], p: &AffineParams) {
    for v in values {
        *v = p.fake(*v);
    }
}

/// Fake-quantization parameters for a slice's own range.
pub fn params_for(values: &[f32], bits: u8) -> Result<AffineParams> {
    let (lo, hi) = min_max(values);
    nudged_range(lo, hi, bits)
}
