//! Float convolution used for calibration, batch-norm fold checks and as the
//! oracle for the integer kernel. Accumulates in f64.

use crate::error::{Error, Result};
use crate::model::{Activation, ConvGeometry, LayerKind, LayerSpec, ModelGraph};
use crate::tensor::{Layout, Tensor};

/// Pre-activation convolution output, `[out_h, out_w, out_c]` row-major.
pub fn conv_f64(g: &ConvGeometry, input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), g.input_len());
    assert_eq!(weights.len(), g.kernel_h * g.kernel_w * g.kernel_in * g.out_c);
    assert_eq!(bias.len(), g.out_c);
    let mult = g.depth_multiplier();
    let mut out = vec![0.0; g.output_len()];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for oc in 0..g.out_c {
                let mut acc = 0.0;
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding.top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding.left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let pixel = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let tap = (ky * g.kernel_w + kx) * g.kernel_in;
                        if g.kind == LayerKind::DepthwiseConv2d {
                            acc += input[pixel + oc / mult] * weights[tap * g.out_c + oc];
                        } else {
                            for ic in 0..g.in_c {
                                acc += input[pixel + ic] * weights[(tap + ic) * g.out_c + oc];
                            }
                        }
                    }
                }
                out[(oy * g.out_w + ox) * g.out_c + oc] = acc + bias[oc];
            }
        }
    }
    out
}

pub fn activate_f64(act: Activation, x: f64) -> f64 {
    match act {
        Activation::None => x,
        Activation::Relu => x.max(0.0),
        Activation::Relu6 => x.clamp(0.0, 6.0),
    }
}

/// Float output of one layer, batch norm applied unfolded when present.
pub fn layer_forward(layer: &LayerSpec, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = activation_shape(input)?;
    let g = layer.geometry(shape)?;
    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let w: Vec<f64> = layer.weights.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = layer.bias.iter().map(|&v| v as f64).collect();
    let mut y = conv_f64(&g, &x, &w, &b);
    if let Some(bn) = &layer.bn {
        for (i, v) in y.iter_mut().enumerate() {
            let c = i % g.out_c;
            let denom = (bn.var[c] as f64 + bn.eps as f64).sqrt();
            *v = (*v - bn.mean[c] as f64) / denom * bn.gamma[c] as f64 + bn.beta[c] as f64;
        }
    }
    let data = y
        .into_iter()
        .map(|v| activate_f64(layer.activation, v) as f32)
        .collect();
    Tensor::new(g.output_shape().to_vec(), data, Layout::Nhwc)
}

/// Run the whole chain, returning every layer's post-activation output.
pub fn model_forward(model: &ModelGraph, input: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    if activation_shape(input)? != model.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape
        )));
    }
    let mut outs: Vec<Tensor<f32>> = Vec::with_capacity(model.layers.len());
    for (index, layer) in model.layers.iter().enumerate() {
        let x = outs.last().unwrap_or(input);
        let y = layer_forward(layer, x).map_err(|e| e.at_layer(index))?;
        outs.push(y);
    }
    Ok(outs)
}

pub(crate) fn activation_shape<T: crate::tensor::Element>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match *t.shape() {
        [h, w, c] => Ok([h, w, c]),
        [c] => Ok([1, 1, c]),
        ref other => Err(Error::ShapeMismatch(format!(
            "activations must be [h, w, c], got {other:?}"
        ))),
    }
}
