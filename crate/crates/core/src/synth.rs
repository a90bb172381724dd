//! Synthetic kernels and models with MobileNet-style heterogeneous channel ranges.

use rand::Rng;

use crate::model::{Activation, BnParams, LayerKind, LayerSpec, ModelGraph, Padding};
use crate::tensor::{Layout, Tensor};

/// HWIO kernel whose per-channel half-widths are drawn log-uniformly over
/// `[max_half_width / spread, max_half_width]`; values are uniform within
/// each channel's symmetric interval.
pub fn log_uniform_kernel<R: Rng>(
    rng: &mut R,
    shape: [usize; 4],
    max_half_width: f32,
    spread: f32,
) -> Tensor<f32> {
    let n = shape[3];
    let halves: Vec<f32> = (0..n)
        .map(|_| max_half_width * spread.powf(-rng.gen::<f32>()))
        .collect();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|i| {
            let h = halves[i % n];
            rng.gen_range(-h..=h)
        })
        .collect();
    Tensor::new(shape.to_vec(), data, Layout::Hwio).expect("shape matches data")
}

fn random_bn<R: Rng>(rng: &mut R, n: usize) -> BnParams {
    BnParams {
        gamma: (0..n).map(|_| 4f32.powf(rng.gen_range(-1.0..1.0))).collect(),
        beta: (0..n).map(|_| rng.gen_range(-0.1..0.2)).collect(),
        mean: (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        var: (0..n).map(|_| rng.gen_range(0.1..0.5)).collect(),
        eps: 1e-3,
    }
}

fn layer<R: Rng>(
    rng: &mut R,
    kind: LayerKind,
    shape: [usize; 4],
    stride: usize,
    pad: usize,
    activation: Activation,
    bn: bool,
) -> LayerSpec {
    let fan_in = (shape[0] * shape[1] * shape[2]) as f32;
    let weights = log_uniform_kernel(rng, shape, 6.0 / fan_in.sqrt(), 100.0);
    let n = shape[3];
    LayerSpec {
        kind,
        weights,
        bias: (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        stride,
        padding: Padding::uniform(pad),
        activation,
        bn: bn.then(|| random_bn(rng, n)),
    }
}

/// A small MobileNet-v1-like chain on a 16x16x3 input: a strided stem, two
/// depthwise-separable blocks and a fully-connected head, all with batch norm
/// and ReLU6 except the head.
pub fn mobilenet_like<R: Rng>(rng: &mut R) -> ModelGraph {
    use Activation::Relu6;
    use LayerKind::*;
    let layers = vec![
        layer(rng, Conv2d, [3, 3, 3, 8], 2, 1, Relu6, true),
        layer(rng, DepthwiseConv2d, [3, 3, 1, 8], 1, 1, Relu6, true),
        layer(rng, Conv2d, [1, 1, 8, 16], 1, 0, Relu6, true),
        layer(rng, DepthwiseConv2d, [3, 3, 1, 16], 2, 1, Relu6, true),
        layer(rng, Conv2d, [1, 1, 16, 32], 1, 0, Relu6, true),
        layer(rng, FullyConnected, [1, 1, 4 * 4 * 32, 10], 1, 0, Activation::None, false),
    ];
    ModelGraph {
        name: "mobilenet-like".into(),
        input_shape: [16, 16, 3],
        layers,
    }
}

/// Inputs with values roughly in `[-1, 1]`.
pub fn random_inputs<R: Rng>(rng: &mut R, shape: [usize; 3], count: usize) -> Vec<Tensor<f32>> {
    let len = shape.iter().product::<usize>();
    (0..count)
        .map(|_| {
            let gain: f32 = rng.gen_range(0.5..1.0);
            let data = (0..len).map(|_| gain * rng.gen_range(-1.0f32..1.0)).collect();
            Tensor::new(shape.to_vec(), data, Layout::Nhwc).expect("shape matches data")
        })
        .collect()
}
