//! Activation range calibration from representative inputs.
//!
//! Each representative input contributes its per-layer output minimum and
//! maximum. The final range takes the `p`-th percentile of the minima as the
//! left edge and the `(1 - p)`-th percentile of the maxima as the right edge.

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quantizer::affine::{nudged_range, AffineParams};
use crate::reference::model_forward;
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 0.01;

/// Linear-interpolated percentile of a sorted slice, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    assert!(!sorted.is_empty());
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    (sorted[i] as f64 + frac * (sorted[i + 1] as f64 - sorted[i] as f64)) as f32
}

pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    percentile_sorted(&v, q)
}

/// Per-sample minima and maxima of one tensor position in the chain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeSamples {
    pub mins: Vec<f32>,
    pub maxs: Vec<f32>,
}

impl RangeSamples {
    pub fn push(&mut self, values: &[f32]) {
        let (lo, hi) = crate::tensor::min_max(values);
        self.mins.push(lo);
        self.maxs.push(hi);
    }

    pub fn count(&self) -> usize {
        self.mins.len()
    }

    pub fn edges(&self, p: f64) -> Result<(f32, f32)> {
        if self.mins.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        Ok((percentile(&self.mins, p), percentile(&self.maxs, 1.0 - p)))
    }

    pub fn finalize(&self, p: f64) -> Result<AffineParams> {
        let (lo, hi) = self.edges(p)?;
        nudged_range(lo, hi.max(lo), 8)
    }
}

/// Samples for the model input and for every layer output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationStats {
    pub input: RangeSamples,
    pub layers: Vec<RangeSamples>,
}

impl CalibrationStats {
    pub fn new(layers: usize) -> Self {
        Self {
            input: RangeSamples::default(),
            layers: vec![RangeSamples::default(); layers],
        }
    }

    pub fn observe(&mut self, model: &ModelGraph, input: &Tensor<f32>) -> Result<()> {
        let outs = model_forward(model, input)?;
        self.input.push(input.data());
        for (samples, out) in self.layers.iter_mut().zip(&outs) {
            samples.push(out.data());
        }
        Ok(())
    }

    /// Combine samples gathered from another batch. Percentiles are order
    /// independent, so merging is associative and commutative.
    pub fn merge(&mut self, other: CalibrationStats) {
        self.input.mins.extend(other.input.mins);
        self.input.maxs.extend(other.input.maxs);
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            a.mins.extend(b.mins);
            a.maxs.extend(b.maxs);
        }
    }

    pub fn finalize(&self, p: f64) -> Result<CalibratedRanges> {
        Ok(CalibratedRanges {
            input: self.input.finalize(p)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, s)| s.finalize(p).map_err(|e| e.at_layer(i)))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedRanges {
    pub input: AffineParams,
    pub layers: Vec<AffineParams>,
}

/// Calibrate the input and every layer output of a float (already folded) model.
pub fn calibrate_activations(
    model: &ModelGraph,
    rep_inputs: &[Tensor<f32>],
    p: f64,
) -> Result<CalibratedRanges> {
    if rep_inputs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if !(0.0..0.5).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} not in [0, 0.5)")));
    }
    let mut stats = CalibrationStats::new(model.layers.len());
    for x in rep_inputs {
        stats.observe(model, x)?;
    }
    stats.finalize(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerKind, LayerSpec, Padding};
    use crate::tensor::Layout;

    fn relu_model() -> ModelGraph {
        ModelGraph {
            name: "relu".into(),
            input_shape: [2, 2, 1],
            layers: vec![LayerSpec {
                kind: LayerKind::Conv2d,
                weights: Tensor::new(vec![1, 1, 1, 2], vec![1.0, -1.0], Layout::Hwio).unwrap(),
                bias: vec![0.0, 0.0],
                stride: 1,
                padding: Padding::default(),
                activation: Activation::Relu,
                bn: None,
            }],
        }
    }

    #[test]
    fn percentile_interpolates_between_order_statistics() {
        let v: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        assert!((percentile(&v, 0.99) - 99.01).abs() < 1e-4);
        assert_eq!(percentile(&v, 1.0), 100.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[4.0], 0.01), 4.0);
    }

    #[test]
    fn single_input_uses_its_own_range() {
        let x = Tensor::new(vec![2, 2, 1], vec![-1.0, 0.5, 2.0, 0.25], Layout::Nhwc).unwrap();
        let mut stats = CalibrationStats::new(1);
        stats.observe(&relu_model(), &x).unwrap();
        assert_eq!(stats.input.edges(0.01).unwrap(), (-1.0, 2.0));
        assert_eq!(stats.layers[0].edges(0.01).unwrap(), (0.0, 2.0));
    }

    #[test]
    fn relu_outputs_calibrate_to_zero_minimum() {
        let inputs: Vec<_> = (0..5)
            .map(|k| {
                Tensor::new(
                    vec![2, 2, 1],
                    vec![k as f32, -(k as f32), 0.5, 1.5],
                    Layout::Nhwc,
                )
                .unwrap()
            })
            .collect();
        let r = calibrate_activations(&relu_model(), &inputs, 0.01).unwrap();
        assert_eq!(r.layers[0].nudged_min, 0.0);
        assert_eq!(r.layers[0].zero_point, 0);
        assert_eq!(r.layers[0].dequantize(r.layers[0].zero_point), 0.0);
    }

    #[test]
    fn right_edge_is_the_99th_percentile_of_maxima() {
        let mut s = RangeSamples::default();
        for i in 1..=100 {
            s.push(&[0.0, i as f32]);
        }
        let (lo, hi) = s.edges(0.01).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 99.0).abs() < 0.05, "{hi}");
    }

    #[test]
    fn merge_is_order_independent() {
        let model = relu_model();
        let xs: Vec<_> = (0..6)
            .map(|k| {
                Tensor::new(
                    vec![2, 2, 1],
                    vec![k as f32 * 0.3 - 1.0, 0.1 * k as f32, -0.2, 0.7],
                    Layout::Nhwc,
                )
                .unwrap()
            })
            .collect();
        let gather = |idx: &[usize]| {
            let mut s = CalibrationStats::new(1);
            for &i in idx {
                s.observe(&model, &xs[i]).unwrap();
            }
            s
        };
        let mut ab = gather(&[0, 1, 2]);
        ab.merge(gather(&[3, 4, 5]));
        let mut ba = gather(&[3, 4, 5]);
        ba.merge(gather(&[0, 1, 2]));
        assert_eq!(ab.finalize(0.01).unwrap(), ba.finalize(0.01).unwrap());
    }

    #[test]
    fn empty_input_set_is_an_error() {
        assert!(matches!(
            calibrate_activations(&relu_model(), &[], 0.01),
            Err(Error::EmptyCalibration)
        ));
    }
}
