//! Magnitude pruning and mask-plus-packed sparse storage.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Zero every element whose magnitude is below `threshold`.
pub fn prune(w: &Tensor<f32>, threshold: f32) -> Result<Tensor<f32>> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prune threshold {threshold} must be finite and non-negative"
        )));
    }
    Ok(w.map(|x| if x.abs() < threshold { 0.0 } else { x }))
}

/// Fraction of exactly-zero elements.
pub fn sparsity(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&x| x == 0.0).count() as f64 / values.len() as f64
}

/// A tensor stored as a 1-bit presence mask and the packed present values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights<T> {
    pub shape: Vec<usize>,
    /// LSB-first bit per element; set where the element is kept.
    pub mask: Vec<u8>,
    pub packed: Vec<T>,
}

impl<T: Element> SparseWeights<T> {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self) -> usize {
        self.packed.len()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.mask[i / 8] >> (i % 8) & 1 == 1
    }

    /// Logical size in bits: one mask bit per element, the packed payload
    /// and a 32-bit count.
    pub fn size_bits(&self) -> usize {
        self.len() + 8 * T::SIZE * self.count() + 32
    }
}

pub fn mask_bytes(n: usize) -> usize {
    n.div_ceil(8)
}

/// Compress against the element type's default (zero).
pub fn compress<T: Element>(w: &Tensor<T>) -> SparseWeights<T> {
    compress_with(w.shape().to_vec(), w.data(), |_| T::default())
}

/// Compress `data`, treating element `i` as absent when it equals `zero(i)`.
pub fn compress_with<T: Element>(
    shape: Vec<usize>,
    data: &[T],
    zero: impl Fn(usize) -> T,
) -> SparseWeights<T> {
    let mut mask = vec![0u8; mask_bytes(data.len())];
    let mut packed = Vec::new();
    for (i, &x) in data.iter().enumerate() {
        if x != zero(i) {
            mask[i / 8] |= 1 << (i % 8);
            packed.push(x);
        }
    }
    SparseWeights {
        shape,
        mask,
        packed,
    }
}

pub fn decompress<T: Element>(s: &SparseWeights<T>) -> Result<Tensor<T>> {
    Tensor::vector(decompress_with(s, |_| T::default())?)
        .reshape(s.shape.clone(), crate::tensor::Layout::Flat)
}

/// Expand, filling absent elements with `zero(i)`.
pub fn decompress_with<T: Element>(s: &SparseWeights<T>, zero: impl Fn(usize) -> T) -> Result<Vec<T>> {
    let n = s.len();
    if s.mask.len() != mask_bytes(n) {
        return Err(Error::CorruptSparse(format!(
            "mask has {} bytes, {n} elements need {}",
            s.mask.len(),
            mask_bytes(n)
        )));
    }
    let set: usize = (0..n).filter(|&i| s.bit(i)).count();
    if set != s.count() {
        return Err(Error::CorruptSparse(format!(
            "mask has {set} set bits but {} packed values",
            s.count()
        )));
    }
    let mut packed = s.packed.iter();
    Ok((0..n)
        .map(|i| if s.bit(i) { *packed.next().unwrap() } else { zero(i) })
        .collect())
}
