//! Dense row-major tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Memory layout tag carried alongside the shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Kernel layout: height, width, input channels, output channels.
    Hwio,
    /// Activation layout of a single sample: height, width, channels.
    Nhwc,
    Flat,
}

/// Element types that can be stored in a tensor blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Uint8,
    Int32,
    /// One bit per element, packed LSB-first.
    Int1Mask,
}

/// Scalar types with a fixed little-endian encoding.
pub trait Element: Copy + PartialEq + Default + std::fmt::Debug {
    const DTYPE: DType;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::Float32;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::Uint8;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Element for i32 {
    const DTYPE: DType = DType::Int32;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    layout: Layout,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>, layout: Layout) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            layout,
        })
    }

    pub fn filled(shape: Vec<usize>, value: T, layout: Layout) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            layout,
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            layout: Layout::Flat,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the innermost axis; the output-channel count for HWIO kernels.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            layout: self.layout,
        }
    }

    pub fn reshape(self, shape: Vec<usize>, layout: Layout) -> Result<Self> {
        Tensor::new(shape, self.data, layout)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::SIZE);
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8], layout: Layout) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * T::SIZE {
            return Err(Error::ShapeMismatch(format!(
                "blob of {} bytes does not hold {n} {:?} values of shape {shape:?}",
                bytes.len(),
                T::DTYPE
            )));
        }
        let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
        Tensor::new(shape, data, layout)
    }
}

impl Tensor<f32> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Minimum and maximum element.
    pub fn min_max(&self) -> (f32, f32) {
        min_max(&self.data)
    }
}

/// Minimum and maximum of a slice; `(0, 0)` for an empty slice.
pub fn min_max(values: &[f32]) -> (f32, f32) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}
