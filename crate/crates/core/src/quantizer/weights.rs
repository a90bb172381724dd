//! Scheme-specific weight quantization: layer-wise, channel-wise, and
//! layer-wise after WES equalization.

use crate::error::Result;
use crate::quantizer::affine::{nudged_range, AffineParams};
use crate::quantizer::clip::{clip_optimize, ClipRange};
use crate::quantizer::Scheme;
use crate::tensor::{min_max, Tensor};
use crate::wes::{equalize, ShiftScales, WesOptions, WesResult};

#[derive(Debug, Clone, Copy)]
pub struct WeightOptions {
    pub scheme: Scheme,
    pub bits: u8,
    pub clip: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for WeightOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Wes,
            bits: 8,
            clip: false,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl WeightOptions {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }
}

/// Quantized kernel with its per-layer or per-channel parameters.
#[derive(Debug, Clone)]
pub struct WeightQuantization {
    pub scheme: Scheme,
    pub q: Tensor<u8>,
    /// One entry for LWQ and WES, one per output channel for CWQ.
    pub params: Vec<AffineParams>,
    /// WES only.
    pub shifts: Option<ShiftScales>,
    /// Float bias after the WES shift (unchanged otherwise).
    pub bias: Vec<f32>,
    pub wes: Option<WesResult>,
    /// Clip ranges actually used, one per entry of `params`.
    pub clip: Option<Vec<ClipRange>>,
}

impl WeightQuantization {
    pub fn scales(&self) -> Vec<f32> {
        self.params.iter().map(|p| p.scale).collect()
    }

    pub fn zero_points(&self) -> Vec<u8> {
        self.params.iter().map(|p| p.zero_point).collect()
    }

    /// Dequantized kernel in the original (unshifted) domain.
    pub fn reconstruct(&self) -> Tensor<f32> {
        let n = self.q.last_dim();
        let mut out = Tensor::filled(self.q.shape().to_vec(), 0.0f32, self.q.layout());
        for (i, (o, &q)) in out.data_mut().iter_mut().zip(self.q.data()).enumerate() {
            let c = i % n;
            let p = &self.params[if self.params.len() == 1 { 0 } else { c }];
            let s = self.shifts.as_ref().map_or(0, |s| s.0[c]);
            *o = p.dequantize(q) * 2f32.powi(-(s as i32));
        }
        out
    }

    /// Mean squared error of the reconstruction against `w`.
    pub fn mse(&self, w: &Tensor<f32>) -> f64 {
        crate::metrics::quant_error(w, &self.reconstruct()).expect("same shape")
    }
}

fn range_for(values: &[f32], clip: bool, bits: u8) -> Result<(AffineParams, Option<ClipRange>)> {
    let (lo, hi) = min_max(values);
    if clip && lo < hi {
        let c = clip_optimize(values, bits)?;
        Ok((nudged_range(c.min, c.max, bits)?, Some(c)))
    } else {
        Ok((nudged_range(lo, hi, bits)?, None))
    }
}

pub fn quantize_weights(
    w: &Tensor<f32>,
    bias: &[f32],
    opts: &WeightOptions,
) -> Result<WeightQuantization> {
    let n = w.last_dim();
    match opts.scheme {
        Scheme::Lwq | Scheme::Wes => {
            let (wes, kernel, bias) = if opts.scheme == Scheme::Wes {
                let res = equalize(
                    w,
                    bias,
                    &WesOptions {
                        bits: opts.bits,
                        tol: opts.tol,
                        max_iter: opts.max_iter,
                    },
                )?;
                let (k, b) = (res.weights.clone(), res.bias.clone());
                (Some(res), k, b)
            } else {
                (None, w.clone(), bias.to_vec())
            };
            // clipping happens after the shift, just before layer-wise quantization
            let (p, clip) = range_for(kernel.data(), opts.clip, opts.bits)?;
            let q = kernel.map(|x| p.quantize(x));
            Ok(WeightQuantization {
                scheme: opts.scheme,
                q,
                params: vec![p],
                shifts: wes.as_ref().map(|r| r.shifts.clone()),
                bias,
                wes,
                clip: clip.map(|c| vec![c]),
            })
        }
        Scheme::Cwq => {
            let mut params = Vec::with_capacity(n);
            let mut clips = Vec::new();
            for c in 0..n {
                let values: Vec<f32> = w.data().iter().skip(c).step_by(n).copied().collect();
                let (p, clip) = range_for(&values, opts.clip, opts.bits)?;
                params.push(p);
                clips.extend(clip);
            }
            let mut q = Tensor::filled(w.shape().to_vec(), 0u8, w.layout());
            for (i, (o, &x)) in q.data_mut().iter_mut().zip(w.data()).enumerate() {
                *o = params[i % n].quantize(x);
            }
            Ok(WeightQuantization {
                scheme: Scheme::Cwq,
                q,
                params,
                shifts: None,
                bias: bias.to_vec(),
                wes: None,
                clip: opts.clip.then_some(clips),
            })
        }
    }
}
