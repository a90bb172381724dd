//! Binary container for quantized models.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   "WESQ" | version u16 | layer count u16 | input h, w, c: u32 x 3
//!          | name length u16 | name bytes (utf-8)
//! layer    kind u8 (conv=0, depthwise=1, fc=2) | scheme u8 (LWQ=0, CWQ=1, WES=2)
//!          | activation u8 (none=0, relu=1, relu6=2) | flags u8 (bit 0: sparse)
//!          | stride u16 | padding top, bottom, left, right: u16 x 4
//!          | kernel h u16 | kernel w u16 | kernel in u32 | out channels N u32
//!          | weights: dense  -> h*w*in*N bytes
//!                     sparse -> mask ceil(h*w*in*N / 8) bytes (LSB first)
//!                               | count u32 | count bytes
//!          | q_B: i32 x N
//!          | P = N for CWQ, else 1:
//!            z_w u8 x P | s_w f32 x P | M u32 x P | s i8 x P
//!          | WES only: shift scales, 4 bits each, two per byte, low nibble
//!            first, ceil(N / 2) bytes
//!          | input s f32 | input z u8 | output s f32 | output z u8
//! ```
//!
//! Sparse kernels omit elements equal to their channel's weight zero point.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, Padding};
use crate::pruning::{compress_with, decompress_with, mask_bytes, SparseWeights};
use crate::quantizer::compound::{EXPONENT_MAX, EXPONENT_MIN};
use crate::quantizer::{AffineParams, QuantizedLayer, QuantizedModel, ScaleCompound, Scheme};
use crate::wes::ShiftScales;

pub const MAGIC: &[u8; 4] = b"WESQ";
pub const VERSION: u16 = 1;

const FLAG_SPARSE: u8 = 1;

pub fn encode(model: &QuantizedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u16(
        &mut out,
        u16::try_from(model.layers.len())
            .map_err(|_| Error::Format("more than 65535 layers".into()))?,
    );
    for d in model.input_shape {
        put_u32(&mut out, d as u32);
    }
    let name = model.name.as_bytes();
    put_u16(
        &mut out,
        u16::try_from(name.len()).map_err(|_| Error::Format("model name too long".into()))?,
    );
    out.extend_from_slice(name);
    for (i, layer) in model.layers.iter().enumerate() {
        encode_layer(layer, &mut out).map_err(|e| e.at_layer(i))?;
    }
    Ok(out)
}

/// Serialized size of one layer record in bytes.
pub fn layer_size(layer: &QuantizedLayer) -> Result<usize> {
    let mut buf = Vec::new();
    encode_layer(layer, &mut buf)?;
    Ok(buf.len())
}

fn encode_layer(l: &QuantizedLayer, out: &mut Vec<u8>) -> Result<()> {
    l.check_param_spec()?;
    out.push(l.kind.code());
    out.push(l.scheme.code());
    out.push(l.activation.code());
    out.push(if l.sparse { FLAG_SPARSE } else { 0 });
    put_u16(out, small(l.stride, "stride")?);
    for p in l.padding.to_array() {
        put_u16(out, small(p, "padding")?);
    }
    let [kh, kw, ki, n] = l.kernel_shape;
    put_u16(out, small(kh, "kernel height")?);
    put_u16(out, small(kw, "kernel width")?);
    put_u32(out, ki as u32);
    put_u32(out, n as u32);

    if l.sparse {
        let s = compress_with(vec![l.weights.len()], &l.weights, |i| {
            l.weight_zero_point(i % n)
        });
        out.extend_from_slice(&s.mask);
        put_u32(out, s.count() as u32);
        out.extend_from_slice(&s.packed);
    } else {
        out.extend_from_slice(&l.weights);
    }

    for &b in &l.bias {
        out.extend_from_slice(&b.to_le_bytes());
    }
    out.extend_from_slice(&l.weight_zero_points);
    for &s in &l.weight_scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for c in &l.compounds {
        put_u32(out, c.mantissa);
    }
    for c in &l.compounds {
        out.push(c.exponent as u8);
    }
    if let Some(shifts) = &l.shifts {
        for pair in shifts.0.chunks(2) {
            let hi = pair.get(1).copied().unwrap_or(0);
            out.push((pair[0] & 0x0f) | (hi & 0x0f) << 4);
        }
    }
    for p in [&l.input, &l.output] {
        out.extend_from_slice(&p.scale.to_le_bytes());
        out.push(p.zero_point);
    }
    Ok(())
}

fn small(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u16")))
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("bad magic, expected WESQ".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u16()? as usize;
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("model name is not utf-8".into()))?;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        layers.push(decode_layer(&mut r).map_err(|e| e.at_layer(i))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(QuantizedModel {
        name,
        input_shape,
        layers,
    })
}

fn decode_layer(r: &mut Reader<'_>) -> Result<QuantizedLayer> {
    let kind_code = r.u8()?;
    let kind = LayerKind::from_code(kind_code)
        .ok_or_else(|| Error::Format(format!("unknown layer kind {kind_code}")))?;
    let scheme_code = r.u8()?;
    let scheme = Scheme::from_code(scheme_code)
        .ok_or_else(|| Error::Format(format!("unknown scheme {scheme_code}")))?;
    let act_code = r.u8()?;
    let activation = Activation::from_code(act_code)
        .ok_or_else(|| Error::Format(format!("unknown activation {act_code}")))?;
    let flags = r.u8()?;
    if flags & !FLAG_SPARSE != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    let sparse = flags & FLAG_SPARSE != 0;
    let stride = r.u16()? as usize;
    let padding = Padding::from_array([
        r.u16()? as usize,
        r.u16()? as usize,
        r.u16()? as usize,
        r.u16()? as usize,
    ]);
    let kernel_shape = [
        r.u16()? as usize,
        r.u16()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    ];
    let n = kernel_shape[3];
    let total = kernel_shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&t| t > 0 && t <= r.bytes.len().saturating_mul(8))
        .ok_or_else(|| Error::Format(format!("implausible kernel shape {kernel_shape:?}")))?;
    let per = if scheme == Scheme::Cwq { n } else { 1 };

    enum Stored {
        Dense(Vec<u8>),
        Sparse(SparseWeights<u8>),
    }
    let stored = if sparse {
        let mask = r.take(mask_bytes(total))?.to_vec();
        let count = r.u32()? as usize;
        let packed = r.take(count)?.to_vec();
        Stored::Sparse(SparseWeights {
            shape: vec![total],
            mask,
            packed,
        })
    } else {
        Stored::Dense(r.take(total)?.to_vec())
    };

    let bias = (0..n).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
    let weight_zero_points = r.take(per)?.to_vec();
    let weight_scales = (0..per).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let mantissas = (0..per).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let exponents = r.take(per)?.to_vec();
    let compounds = mantissas
        .into_iter()
        .zip(exponents)
        .map(|(mantissa, e)| {
            let c = ScaleCompound {
                mantissa,
                exponent: e as i8,
            };
            if c.is_normalized() {
                Ok(c)
            } else {
                Err(Error::Format(format!(
                    "scale compound {mantissa}/2^31 * 2^{} outside mantissa [2^30, 2^31) or exponent [{EXPONENT_MIN}, {EXPONENT_MAX}]",
                    e as i8
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let shifts = if scheme == Scheme::Wes {
        let packed = r.take(n.div_ceil(2))?;
        Some(ShiftScales(
            (0..n)
                .map(|c| (packed[c / 2] >> (4 * (c % 2))) & 0x0f)
                .collect(),
        ))
    } else {
        None
    };
    let mut params = || -> Result<AffineParams> {
        let s = r.f32()?;
        let z = r.u8()?;
        AffineParams::from_scale_zero(s, z, 8).map_err(|e| Error::Format(e.to_string()))
    };
    let input = params()?;
    let output = params()?;
    for &s in &weight_scales {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Format(format!("weight scale {s}")));
        }
    }

    let zp = |i: usize| weight_zero_points[if per == 1 { 0 } else { i % n }];
    let weights = match stored {
        Stored::Dense(w) => w,
        Stored::Sparse(s) => decompress_with(&s, zp).map_err(|e| Error::Format(e.to_string()))?,
    };

    let layer = QuantizedLayer {
        kind,
        scheme,
        stride,
        padding,
        activation,
        kernel_shape,
        weights,
        sparse,
        bias,
        weight_zero_points,
        weight_scales,
        compounds,
        shifts,
        input,
        output,
    };
    layer.check_param_spec()?;
    Ok(layer)
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
