//! Batch-norm folding into the preceding convolution.

use crate::error::{Error, Result};
use crate::model::{BnParams, LayerSpec};
use crate::tensor::Tensor;

/// Fold per-channel batch-norm statistics into HWIO weights and bias.
///
/// With `f = gamma / sqrt(var + eps)`, each output channel's weights are
/// multiplied by `f` and the bias becomes `(b - mean) * f + beta`.
pub fn bn_fold(w: &Tensor<f32>, b: &[f32], bn: &BnParams) -> Result<(Tensor<f32>, Vec<f32>)> {
    let n = w.last_dim();
    if b.len() != n || bn.channels() != n {
        return Err(Error::ShapeMismatch(format!(
            "fold of {n}-channel kernel with {} bias and {} bn entries",
            b.len(),
            bn.channels()
        )));
    }
    let mut factors = Vec::with_capacity(n);
    for c in 0..n {
        let denom = bn.var[c] as f64 + bn.eps as f64;
        if !(denom > 0.0) {
            return Err(Error::InvalidBatchNorm {
                channel: c,
                value: denom as f32,
            });
        }
        factors.push(bn.gamma[c] as f64 / denom.sqrt());
    }

    let mut folded = w.clone();
    for (i, x) in folded.data_mut().iter_mut().enumerate() {
        *x = (*x as f64 * factors[i % n]) as f32;
    }
    let bias = (0..n)
        .map(|c| ((b[c] as f64 - bn.mean[c] as f64) * factors[c] + bn.beta[c] as f64) as f32)
        .collect();
    Ok((folded, bias))
}

/// Fold a layer's batch norm in place, removing it from the layer.
pub fn fold_layer(layer: &mut LayerSpec) -> Result<()> {
    let bn = layer.bn.take().ok_or(Error::AlreadyFolded)?;
    let (w, b) = bn_fold(&layer.weights, &layer.bias, &bn)?;
    layer.weights = w;
    layer.bias = b;
    Ok(())
}

/// Fold every layer that still carries batch norm.
pub fn fold_model(model: &mut crate::model::ModelGraph) -> Result<()> {
    for (index, layer) in model.layers.iter_mut().enumerate() {
        if layer.bn.is_some() {
            fold_layer(layer).map_err(|e| e.at_layer(index))?;
        }
    }
    Ok(())
}
