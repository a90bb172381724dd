//! Integer-only convolution with the WES inverse shift fused into requantization.
//!
//! For output `(x, y, z)` the kernel accumulates
//! `sum (q_in - z_in) * (q_w - z_w)` over the receptive field with 16-bit
//! differences and a 32-bit accumulator, adds the int32 bias, and then
//! requantizes: scale by `M / 2^31 * 2^s`, shift right by the channel's
//! `S_z`, apply the activation in the integer domain, add `z_out` and
//! saturate to uint8.
//!
//! Requantization keeps the exponent shift, the `S_z` shift and the 31-bit
//! mantissa shift together as one right shift of the 64-bit product
//! `acc * M`, rounded once (to nearest, ties away from zero). Rounding after
//! each shift separately would compound into up to a full output step of
//! error; one rounding keeps every output within half a step of the exact
//! real-valued result plus the mantissa budget.

use crate::error::{Error, Result};
use crate::model::{Activation, ConvGeometry, LayerKind};
use crate::quantizer::{QuantizedLayer, QuantizedModel, ScaleCompound};
use crate::reference::{activate_f64, activation_shape};
use crate::tensor::{Layout, Tensor};

/// Activation applied to the requantized value before the zero point is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntActivation {
    None,
    Relu,
    /// Clamp to `[0, ceiling]`, the ceiling being `round(N / s_out)`.
    ReluN(i64),
}

impl IntActivation {
    pub fn for_layer(act: Activation, s_out: f32) -> Self {
        match act {
            Activation::None => IntActivation::None,
            Activation::Relu => IntActivation::Relu,
            Activation::Relu6 => IntActivation::ReluN((6.0 / s_out as f64).round() as i64),
        }
    }

    fn apply(self, v: i128) -> i128 {
        match self {
            IntActivation::None => v,
            IntActivation::Relu => v.max(0),
            IntActivation::ReluN(ceiling) => v.clamp(0, ceiling as i128),
        }
    }
}

/// Arithmetic right shift rounding to nearest, ties away from zero.
pub fn rounding_shift_right(x: i128, k: u32) -> i128 {
    if k == 0 {
        return x;
    }
    if k >= 127 {
        return 0;
    }
    let half = 1i128 << (k - 1);
    if x >= 0 {
        (x + half) >> k
    } else {
        -((-x + half) >> k)
    }
}

/// Total right shift applied to `acc * M`: the mantissa's 31 fractional bits,
/// minus the compound exponent, plus the channel shift.
pub fn requant_shift(compound: ScaleCompound, shift: u8) -> u32 {
    (31 - compound.exponent as i32 + shift as i32) as u32
}

/// Requantize one accumulator value to uint8.
pub fn requantize(acc: i64, compound: ScaleCompound, shift: u8, z_out: u8, act: IntActivation) -> u8 {
    let product = acc as i128 * compound.mantissa as i128;
    let v = rounding_shift_right(product, requant_shift(compound, shift));
    finish(v, z_out, act)
}

fn finish(v: i128, z_out: u8, act: IntActivation) -> u8 {
    (act.apply(v) + z_out as i128).clamp(0, 255) as u8
}

/// Resolved geometry plus input for one layer invocation.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointContext<'a> {
    pub layer: &'a QuantizedLayer,
    pub geometry: ConvGeometry,
    pub input: &'a [u8],
}

impl<'a> FixedPointContext<'a> {
    pub fn new(layer: &'a QuantizedLayer, input: &'a Tensor<u8>) -> Result<Self> {
        let shape = activation_shape(input)?;
        let geometry = ConvGeometry::new(
            layer.kind,
            &layer.kernel_shape,
            layer.stride,
            layer.padding,
            shape,
        )
        .map_err(|e| Error::Geometry(e.to_string()))?;
        layer.check_param_spec()?;
        let taps = geometry.taps() as u64;
        if taps * 255 * 255 >= 1 << 31 {
            return Err(Error::AccumulatorOverflow(format!(
                "{taps} taps of 255 * 255 can exceed int32"
            )));
        }
        Ok(Self {
            layer,
            geometry,
            input: input.data(),
        })
    }

    fn activation(&self) -> IntActivation {
        IntActivation::for_layer(self.layer.activation, self.layer.output.scale)
    }

    /// Accumulator plus bias for every output element.
    pub fn accumulate(&self) -> Result<Vec<i32>> {
        let g = &self.geometry;
        let l = self.layer;
        let z_in = l.input.zero_point as i16;
        let mult = g.depth_multiplier();
        let depthwise = g.kind == LayerKind::DepthwiseConv2d;
        let mut out = Vec::with_capacity(g.output_len());
        for y in 0..g.out_h {
            for x in 0..g.out_w {
                for z in 0..g.out_c {
                    let z_w = l.weight_zero_point(z) as i16;
                    let mut acc32: i32 = 0;
                    let ix_ = (x * g.stride) as isize - g.padding.left as isize;
                    let iy_ = (y * g.stride) as isize - g.padding.top as isize;
                    for j in 0..g.kernel_h {
                        for i in 0..g.kernel_w {
                            let ix = ix_ + i as isize;
                            let iy = iy_ + j as isize;
                            if ix < 0 || iy < 0 || ix >= g.in_w as isize || iy >= g.in_h as isize {
                                continue;
                            }
                            let base = iy as usize * g.in_w * g.in_c + ix as usize * g.in_c;
                            let wbase = j * g.kernel_w * g.kernel_in * g.out_c
                                + i * g.kernel_in * g.out_c;
                            if depthwise {
                                let q_in = self.input[base + z / mult] as i16;
                                let q_w = l.weights[wbase + z] as i16;
                                acc32 += (q_in - z_in) as i32 * (q_w - z_w) as i32;
                            } else {
                                for k in 0..g.in_c {
                                    let q_in = self.input[base + k] as i16;
                                    let q_w = l.weights[wbase + k * g.out_c + z] as i16;
                                    acc32 += (q_in - z_in) as i32 * (q_w - z_w) as i32;
                                }
                            }
                        }
                    }
                    let acc32 = acc32.checked_add(l.bias[z]).ok_or_else(|| {
                        Error::AccumulatorOverflow(format!(
                            "bias {} overflows int32 at channel {z}",
                            l.bias[z]
                        ))
                    })?;
                    out.push(acc32);
                }
            }
        }
        Ok(out)
    }
}

/// WES-coupled fixed-point convolution with fused activation.
pub fn conv_fixed(layer: &QuantizedLayer, input: &Tensor<u8>) -> Result<Tensor<u8>> {
    let ctx = FixedPointContext::new(layer, input)?;
    let acc = ctx.accumulate()?;
    let act = ctx.activation();
    let n = ctx.geometry.out_c;
    let z_out = layer.output.zero_point;
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let c = i % n;
            requantize(a as i64, layer.compound(c), layer.shift(c), z_out, act)
        })
        .collect();
    Tensor::new(ctx.geometry.output_shape().to_vec(), data, Layout::Nhwc)
}

/// Unfused path: the convolution requantized without channel shifts into an
/// exact wide intermediate, followed by an explicit per-channel division by
/// `2^S_i` rounded to nearest (ties away from zero) via integer division.
pub fn conv_two_stage(layer: &QuantizedLayer, input: &Tensor<u8>) -> Result<Tensor<u8>> {
    let ctx = FixedPointContext::new(layer, input)?;
    let acc = ctx.accumulate()?;
    let act = ctx.activation();
    let n = ctx.geometry.out_c;

    // stage one: value = numerator / 2^denominator_bits, shift-free
    let stage_one: Vec<(i128, u32)> = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let m = layer.compound(i % n);
            (a as i128 * m.mantissa as i128, requant_shift(m, 0))
        })
        .collect();

    // stage two: explicit channel-wise rescale by 2^-S
    let data = stage_one
        .into_iter()
        .enumerate()
        .map(|(i, (num, bits))| {
            let den = 1i128 << (bits + layer.shift(i % n) as u32);
            let (q, r) = (num.abs() / den, num.abs() % den);
            let mag = if 2 * r >= den { q + 1 } else { q };
            finish(num.signum() * mag, layer.output.zero_point, act)
        })
        .collect();
    Tensor::new(ctx.geometry.output_shape().to_vec(), data, Layout::Nhwc)
}

/// Float-domain output of a quantized layer computed from dequantized
/// inputs, weights and bias, in f64.
#[derive(Debug, Clone)]
pub struct FloatReference {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

pub fn float_reference(layer: &QuantizedLayer, input: &Tensor<u8>) -> Result<FloatReference> {
    let ctx = FixedPointContext::new(layer, input)?;
    let g = ctx.geometry;
    let n = g.out_c;
    let s_in = layer.input.scale as f64;
    let z_in = layer.input.zero_point as f64;
    let x: Vec<f64> = input.data().iter().map(|&q| s_in * (q as f64 - z_in)).collect();
    let real_weight_scale = |c: usize| layer.weight_scale(c) as f64 * 2f64.powi(-(layer.shift(c) as i32));
    let w: Vec<f64> = layer
        .weights
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let c = i % n;
            real_weight_scale(c) * (q as f64 - layer.weight_zero_point(c) as f64)
        })
        .collect();
    let b: Vec<f64> = (0..n)
        .map(|c| layer.bias[c] as f64 * s_in * real_weight_scale(c))
        .collect();
    let values = crate::reference::conv_f64(&g, &x, &w, &b)
        .into_iter()
        .map(|v| activate_f64(layer.activation, v))
        .collect();
    Ok(FloatReference {
        shape: g.output_shape(),
        values,
    })
}

/// Largest deviation, in output steps, between the integer output and the
/// float reference clamped to the representable output range.
pub fn max_deviation_steps(layer: &QuantizedLayer, reference: &FloatReference, out: &Tensor<u8>) -> f64 {
    let s_out = layer.output.scale as f64;
    let z = layer.output.zero_point as f64;
    reference
        .values
        .iter()
        .zip(out.data())
        .map(|(&r, &q)| {
            let expected = (r / s_out).clamp(-z, 255.0 - z);
            (expected - (q as f64 - z)).abs()
        })
        .fold(0.0, f64::max)
}

/// Tolerance of the conformance check, in output steps.
pub const CONFORMANCE_STEPS: f64 = 0.5 + 1.0 / (1u64 << 20) as f64;

/// Run every layer of a quantized model, returning each layer's output.
pub fn run_model(model: &QuantizedModel, input: &Tensor<u8>) -> Result<Vec<Tensor<u8>>> {
    if activation_shape(input)? != model.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape
        )));
    }
    let mut outs: Vec<Tensor<u8>> = Vec::with_capacity(model.layers.len());
    for (index, layer) in model.layers.iter().enumerate() {
        let x = outs.last().unwrap_or(input);
        let y = conv_fixed(layer, x).map_err(|e| e.at_layer(index))?;
        outs.push(y);
    }
    Ok(outs)
}

/// Per-layer conformance of a model run: each layer is fed the integer
/// output of the previous one and compared against its float reference.
pub fn check_model(model: &QuantizedModel, input: &Tensor<u8>) -> Result<Vec<f64>> {
    let mut x = input.clone();
    let mut deviations = Vec::with_capacity(model.layers.len());
    for (index, layer) in model.layers.iter().enumerate() {
        let y = conv_fixed(layer, &x).map_err(|e| e.at_layer(index))?;
        let r = float_reference(layer, &x).map_err(|e| e.at_layer(index))?;
        deviations.push(max_deviation_steps(layer, &r, &y));
        x = y;
    }
    Ok(deviations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Padding;
    use crate::quantizer::{AffineParams, Scheme};
    use crate::wes::ShiftScales;

    fn unit_compound() -> ScaleCompound {
        ScaleCompound {
            mantissa: 1 << 30,
            exponent: 1,
        }
    }

    fn one_by_one(shift: u8, act: Activation) -> QuantizedLayer {
        QuantizedLayer {
            kind: LayerKind::Conv2d,
            scheme: Scheme::Wes,
            stride: 1,
            padding: Padding::default(),
            activation: act,
            kernel_shape: [1, 1, 1, 1],
            weights: vec![5],
            sparse: false,
            bias: vec![0],
            weight_zero_points: vec![1],
            weight_scales: vec![1.0],
            compounds: vec![unit_compound()],
            shifts: Some(ShiftScales(vec![shift])),
            input: AffineParams::from_scale_zero(1.0, 2, 8).unwrap(),
            output: AffineParams::from_scale_zero(1.0, 3, 8).unwrap(),
        }
    }

    fn single(v: u8) -> Tensor<u8> {
        Tensor::new(vec![1, 1, 1], vec![v], Layout::Nhwc).unwrap()
    }

    #[test]
    fn rounding_shift_is_symmetric() {
        assert_eq!(rounding_shift_right(5, 1), 3);
        assert_eq!(rounding_shift_right(-5, 1), -3);
        assert_eq!(rounding_shift_right(4, 1), 2);
        assert_eq!(rounding_shift_right(-6, 2), -2);
        assert_eq!(rounding_shift_right(-5, 2), -1);
        assert_eq!(rounding_shift_right(7, 0), 7);
        assert_eq!(rounding_shift_right(i64::MAX as i128, 127), 0);
    }

    #[test]
    fn hand_traced_one_by_one() {
        // acc = (12 - 2) * (5 - 1) = 40, compound 1.0, z_out 3
        let out = conv_fixed(&one_by_one(0, Activation::None), &single(12)).unwrap();
        assert_eq!(out.data(), &[43]);
        // S = 2: 40 >> 2 = 10
        let out = conv_fixed(&one_by_one(2, Activation::None), &single(12)).unwrap();
        assert_eq!(out.data(), &[13]);
    }

    #[test]
    fn requantize_examples() {
        let c = ScaleCompound::from_real(0.37).unwrap();
        for s in [0, 5, 15] {
            assert_eq!(requantize(0, c, s, 17, IntActivation::None), 17);
        }
        assert_eq!(requantize(40, unit_compound(), 2, 3, IntActivation::None), 13);
        assert_eq!(requantize(-5, unit_compound(), 0, 10, IntActivation::Relu), 10);
        assert_eq!(requantize(-5, unit_compound(), 0, 10, IntActivation::None), 5);
        assert_eq!(requantize(100, unit_compound(), 0, 10, IntActivation::ReluN(60)), 70);
        assert_eq!(requantize(1_000_000, unit_compound(), 0, 10, IntActivation::None), 255);
        assert_eq!(requantize(-1_000_000, unit_compound(), 0, 10, IntActivation::None), 0);
    }

    #[test]
    fn single_rounding_beats_stepwise_rounding() {
        // compound 0.01 = 0.64 * 2^-6; acc 32 -> exact 0.32 -> 0
        let c = ScaleCompound::from_real(0.01).unwrap();
        assert_eq!(c.exponent, -6);
        assert_eq!(requantize(32, c, 0, 0, IntActivation::None), 0);
    }

    #[test]
    fn zero_signal_gives_zero_point() {
        let mut l = one_by_one(0, Activation::None);
        l.kernel_shape = [3, 3, 2, 4];
        l.weights = (0..72).map(|i| (i * 37 % 256) as u8).collect();
        l.bias = vec![0; 4];
        l.shifts = Some(ShiftScales(vec![0, 1, 2, 3]));
        l.padding = Padding::uniform(1);
        let x = Tensor::filled(vec![4, 4, 2], 2u8, Layout::Nhwc);
        let out = conv_fixed(&l, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 3));
        let r = float_reference(&l, &x).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!(max_deviation_steps(&l, &r, &out), 0.0);
    }

    #[test]
    fn accumulator_precondition() {
        let mut l = one_by_one(0, Activation::None);
        l.kernel_shape = [3, 3, 4000, 1];
        l.weights = vec![0; 36_000];
        let x = Tensor::filled(vec![3, 3, 4000], 0u8, Layout::Nhwc);
        assert!(matches!(
            conv_fixed(&l, &x),
            Err(Error::AccumulatorOverflow(_))
        ));
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let l = one_by_one(0, Activation::None);
        let x = Tensor::filled(vec![2, 2, 3], 0u8, Layout::Nhwc);
        assert!(matches!(conv_fixed(&l, &x), Err(Error::Geometry(_))));
    }

    #[test]
    fn two_stage_agrees_on_hand_case() {
        for s in 0..=15 {
            let l = one_by_one(s, Activation::Relu);
            assert_eq!(
                conv_fixed(&l, &single(200)).unwrap(),
                conv_two_stage(&l, &single(200)).unwrap()
            );
        }
    }
}
