//! Float model graphs and their on-disk manifest format.
//!
//! A model directory holds `model.json` plus one raw little-endian blob per
//! tensor. The manifest lists the input shape and, per layer, the kind,
//! stride, padding, activation and the blob files backing weights, bias and
//! optional batch-norm statistics:
//!
//! ```text
//! {
//!   "name": "toy",
//!   "input_shape": [8, 8, 3],
//!   "layers": [
//!     { "kind": "conv2d", "stride": 1, "padding": [1, 1, 1, 1],
//!       "activation": "relu",
//!       "weights": { "file": "l0.weights.bin", "shape": [3, 3, 3, 8] },
//!       "bias": "l0.bias.bin",
//!       "bn": { "gamma": "l0.gamma.bin", "beta": "l0.beta.bin",
//!               "mean": "l0.mean.bin", "var": "l0.var.bin", "eps": 0.001 } }
//!   ]
//! }
//! ```
//!
//! Padding is `[top, bottom, left, right]`. Fully-connected weights may be
//! given as `[in, out]`; they are stored internally as a `[1, 1, in, out]`
//! kernel applied to the flattened input.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Layout, Tensor};

pub const MANIFEST_FILE: &str = "model.json";

/// Batch-norm epsilon used when the manifest does not carry one.
pub const DEFAULT_BN_EPS: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    FullyConnected,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv2d => 0,
            LayerKind::DepthwiseConv2d => 1,
            LayerKind::FullyConnected => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Conv2d),
            1 => Some(LayerKind::DepthwiseConv2d),
            2 => Some(LayerKind::FullyConnected),
            _ => None,
        }
    }

    fn parse(name: &str) -> Result<Self> {
        match name {
            "conv2d" | "conv" => Ok(LayerKind::Conv2d),
            "depthwise_conv2d" | "depthwise" => Ok(LayerKind::DepthwiseConv2d),
            "fully_connected" | "fc" | "dense" => Ok(LayerKind::FullyConnected),
            other => Err(Error::UnknownLayerKind(other.to_string())),
        }
    }

    /// Name used in manifests.
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::FullyConnected => "fully_connected",
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Relu6 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Relu6),
            _ => None,
        }
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.top, self.bottom, self.left, self.right]
    }

    pub fn from_array(p: [usize; 4]) -> Self {
        Self {
            top: p[0],
            bottom: p[1],
            left: p[2],
            right: p[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "bn {name} has {} entries, layer has {channels} output channels",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("bn {name}")));
            }
        }
        if let Some(channel) = self.var.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidBatchNorm {
                channel,
                value: self.var[channel] + self.eps,
            });
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("bn eps {}", self.eps)));
        }
        Ok(())
    }
}

/// One layer of a linear model chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// HWIO kernel. Depthwise kernels are `[kh, kw, 1, in_c * multiplier]`;
    /// fully-connected kernels are `[1, 1, in, out]`.
    pub weights: Tensor<f32>,
    /// Always materialized; an absent bias loads as zeros.
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
    pub bn: Option<BnParams>,
}

impl LayerSpec {
    pub fn out_channels(&self) -> usize {
        self.weights.last_dim()
    }

    /// Resolve the layer geometry for an `[h, w, c]` input.
    pub fn geometry(&self, input: [usize; 3]) -> Result<ConvGeometry> {
        ConvGeometry::new(self.kind, self.weights.shape(), self.stride, self.padding, input)
    }
}

/// Fully resolved shape information for one convolution-like layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kind: LayerKind,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Input channels per kernel tap: `in_c` for dense convs, 1 for depthwise.
    pub kernel_in: usize,
    pub out_c: usize,
    pub stride: usize,
    pub padding: Padding,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        kind: LayerKind,
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
        input: [usize; 3],
    ) -> Result<Self> {
        let &[kh, kw, ki, out_c] = kernel_shape else {
            return Err(Error::ShapeMismatch(format!(
                "kernel must be rank 4 (HWIO), got {kernel_shape:?}"
            )));
        };
        if stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let [mut in_h, mut in_w, mut in_c] = input;
        match kind {
            LayerKind::Conv2d => {
                if ki != in_c {
                    return Err(Error::ShapeMismatch(format!(
                        "conv kernel expects {ki} input channels, input has {in_c}"
                    )));
                }
            }
            LayerKind::DepthwiseConv2d => {
                if ki != 1 || out_c % in_c != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "depthwise kernel {kernel_shape:?} inconsistent with {in_c} input channels"
                    )));
                }
            }
            LayerKind::FullyConnected => {
                let flat = in_h * in_w * in_c;
                if kh != 1 || kw != 1 || ki != flat {
                    return Err(Error::ShapeMismatch(format!(
                        "fully-connected kernel {kernel_shape:?} does not take {flat} inputs"
                    )));
                }
                if stride != 1 || padding != Padding::default() {
                    return Err(Error::Geometry(
                        "fully-connected layers take no stride or padding".into(),
                    ));
                }
                (in_h, in_w, in_c) = (1, 1, flat);
            }
        }
        let padded_h = in_h + padding.top + padding.bottom;
        let padded_w = in_w + padding.left + padding.right;
        if padded_h < kh || padded_w < kw {
            return Err(Error::Geometry(format!(
                "kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
            )));
        }
        Ok(Self {
            kind,
            in_h,
            in_w,
            in_c,
            kernel_h: kh,
            kernel_w: kw,
            kernel_in: ki,
            out_c,
            stride,
            padding,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.out_c]
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    /// Multiply-accumulate terms per output element.
    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w * self.kernel_in
    }

    /// Output channels produced from each input channel of a depthwise layer.
    pub fn depth_multiplier(&self) -> usize {
        match self.kind {
            LayerKind::DepthwiseConv2d => self.out_c / self.in_c,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    /// Check every layer invariant and shape compatibility along the chain.
    pub fn validate(&self) -> Result<()> {
        self.geometries().map(|_| ())
    }

    /// Geometry of every layer, in order.
    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        let mut shape = self.input_shape;
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("input shape {shape:?}")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let g = validate_layer(layer, shape).map_err(|e| e.at_layer(index))?;
            shape = g.output_shape();
            out.push(g);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(self
            .geometries()?
            .last()
            .map_or(self.input_shape, ConvGeometry::output_shape))
    }
}

fn validate_layer(layer: &LayerSpec, input: [usize; 3]) -> Result<ConvGeometry> {
    let g = layer.geometry(input)?;
    if layer.bias.len() != g.out_c {
        return Err(Error::ShapeMismatch(format!(
            "bias has {} entries, kernel has {} output channels",
            layer.bias.len(),
            g.out_c
        )));
    }
    if !layer.weights.all_finite() {
        return Err(Error::NonFinite("weights".into()));
    }
    if layer.bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("bias".into()));
    }
    if let Some(bn) = &layer.bn {
        bn.validate(g.out_c)?;
    }
    Ok(g)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    #[serde(default)]
    name: String,
    input_shape: [usize; 3],
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    kind: String,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: [usize; 4],
    #[serde(default)]
    activation: Activation,
    weights: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<ManifestBn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRef {
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestBn {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
}

fn one() -> usize {
    1
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Read a raw little-endian blob of the given shape.
pub fn read_blob<T: Element>(path: &Path, shape: Vec<usize>, layout: Layout) -> Result<Tensor<T>> {
    if !path.is_file() {
        return Err(Error::MissingBlob(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_le_bytes(shape, &bytes, layout)
}

pub fn write_blob<T: Element>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, tensor.to_le_bytes()).map_err(|e| Error::io(path, e))
}

/// Load and validate a model from a manifest file or a directory holding `model.json`.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let manifest = manifest_path(path.as_ref());
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let doc: ManifestDoc =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));

    let mut layers = Vec::with_capacity(doc.layers.len());
    for (index, l) in doc.layers.iter().enumerate() {
        let layer = load_layer(dir, l).map_err(|e| e.at_layer(index))?;
        layers.push(layer);
    }
    let graph = ModelGraph {
        name: doc.name,
        input_shape: doc.input_shape,
        layers,
    };
    graph.validate()?;
    Ok(graph)
}

fn load_layer(dir: &Path, l: &ManifestLayer) -> Result<LayerSpec> {
    let kind = LayerKind::parse(&l.kind)?;
    let mut shape = l.weights.shape.clone();
    if kind == LayerKind::FullyConnected && shape.len() == 2 {
        shape = vec![1, 1, shape[0], shape[1]];
    }
    let weights = read_blob::<f32>(&dir.join(&l.weights.file), shape, Layout::Hwio)?;
    let out_c = weights.last_dim();
    let vec_blob = |file: &str| -> Result<Vec<f32>> {
        Ok(read_blob::<f32>(&dir.join(file), vec![out_c], Layout::Flat)?.into_data())
    };
    let bias = match &l.bias {
        Some(file) => vec_blob(file)?,
        None => vec![0.0; out_c],
    };
    let bn = match &l.bn {
        Some(bn) => Some(BnParams {
            gamma: vec_blob(&bn.gamma)?,
            beta: vec_blob(&bn.beta)?,
            mean: vec_blob(&bn.mean)?,
            var: vec_blob(&bn.var)?,
            eps: bn.eps.unwrap_or(DEFAULT_BN_EPS),
        }),
        None => None,
    };
    Ok(LayerSpec {
        kind,
        weights,
        bias,
        stride: l.stride,
        padding: Padding::from_array(l.padding),
        activation: l.activation,
        bn,
    })
}

/// Write `graph` into `dir` as `model.json` plus one blob per tensor.
pub fn save_model(graph: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let wname = format!("l{i}.weights.bin");
        write_blob(&dir.join(&wname), &layer.weights)?;
        let bname = format!("l{i}.bias.bin");
        write_blob(&dir.join(&bname), &Tensor::vector(layer.bias.clone()))?;
        let bn = match &layer.bn {
            Some(bn) => {
                let mut names = Vec::with_capacity(4);
                for (tag, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("mean", &bn.mean),
                    ("var", &bn.var),
                ] {
                    let name = format!("l{i}.{tag}.bin");
                    write_blob(&dir.join(&name), &Tensor::vector(v.clone()))?;
                    names.push(name);
                }
                let mut it = names.into_iter();
                Some(ManifestBn {
                    gamma: it.next().unwrap(),
                    beta: it.next().unwrap(),
                    mean: it.next().unwrap(),
                    var: it.next().unwrap(),
                    eps: Some(bn.eps),
                })
            }
            None => None,
        };
        layers.push(ManifestLayer {
            kind: layer.kind.name().to_string(),
            stride: layer.stride,
            padding: layer.padding.to_array(),
            activation: layer.activation,
            weights: BlobRef {
                file: wname,
                shape: layer.weights.shape().to_vec(),
            },
            bias: Some(bname),
            bn,
        });
    }
    let doc = ManifestDoc {
        name: graph.name.clone(),
        input_shape: graph.input_shape,
        layers,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(shape: Vec<usize>) -> LayerSpec {
        let n = shape.iter().product();
        let out = *shape.last().unwrap();
        LayerSpec {
            kind: LayerKind::Conv2d,
            weights: Tensor::new(shape, (0..n).map(|i| i as f32 * 0.01).collect(), Layout::Hwio)
                .unwrap(),
            bias: vec![0.0; out],
            stride: 1,
            padding: Padding::default(),
            activation: Activation::None,
            bn: None,
        }
    }

    #[test]
    fn geometry_follows_stride_and_padding() {
        let g = ConvGeometry::new(
            LayerKind::Conv2d,
            &[3, 3, 4, 8],
            2,
            Padding::uniform(1),
            [7, 9, 4],
        )
        .unwrap();
        assert_eq!(g.output_shape(), [4, 5, 8]);
        assert_eq!(g.taps(), 36);
    }

    #[test]
    fn depthwise_multiplier_and_fc_flattening() {
        let dw = ConvGeometry::new(
            LayerKind::DepthwiseConv2d,
            &[3, 3, 1, 8],
            1,
            Padding::uniform(1),
            [5, 5, 4],
        )
        .unwrap();
        assert_eq!(dw.depth_multiplier(), 2);
        assert_eq!(dw.taps(), 9);

        let fc = ConvGeometry::new(
            LayerKind::FullyConnected,
            &[1, 1, 48, 10],
            1,
            Padding::default(),
            [4, 4, 3],
        )
        .unwrap();
        assert_eq!(fc.output_shape(), [1, 1, 10]);
        assert_eq!(fc.in_c, 48);
    }

    #[test]
    fn validation_rejects_channel_contradictions() {
        let graph = ModelGraph {
            name: "bad".into(),
            input_shape: [4, 4, 2],
            layers: vec![conv(vec![1, 1, 2, 3]), conv(vec![1, 1, 2, 3])],
        };
        let err = graph.validate().unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }), "{err}");

        let mut bad_bias = conv(vec![1, 1, 2, 3]);
        bad_bias.bias = vec![0.0; 2];
        let graph = ModelGraph {
            name: "bad".into(),
            input_shape: [4, 4, 2],
            layers: vec![bad_bias],
        };
        assert!(graph.validate().is_err());
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut layer = conv(vec![1, 1, 2, 2]);
        layer.weights.data_mut()[1] = f32::NAN;
        let graph = ModelGraph {
            name: "nan".into(),
            input_shape: [2, 2, 2],
            layers: vec![layer],
        };
        let err = graph.validate().unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }
}
