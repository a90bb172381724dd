use crate::error::{Error, Result};
use crate::quantizer::affine::round_half_away;

/// Quantize a bias vector to int32 in units of `s_in * s_w`.
///
/// `weight_scales` holds either one layer-wise scale or one scale per channel.
pub fn quantize_bias(bias: &[f32], s_in: f32, weight_scales: &[f32]) -> Result<Vec<i32>> {
    if weight_scales.len() != 1 && weight_scales.len() != bias.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weight scales for {} biases",
            weight_scales.len(),
            bias.len()
        )));
    }
    bias.iter()
        .enumerate()
        .map(|(c, &b)| {
            let s_w = weight_scales[if weight_scales.len() == 1 { 0 } else { c }];
            let unit = s_in as f64 * s_w as f64;
            if !(unit > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bias unit s_in * s_w = {unit} must be positive"
                )));
            }
            let v = round_half_away(b as f64 / unit);
            if v.abs() >= 2f64.powi(31) || !v.is_finite() {
                return Err(Error::BiasOverflow { channel: c, value: v });
            }
            Ok(v as i32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bias() {
        assert_eq!(quantize_bias(&[0.0], 0.1, &[0.01]).unwrap(), vec![0]);
    }

    #[test]
    fn exact_ratio() {
        // 1 / (0.1 * 0.01) = 1000 as a rational; f32 scales land within rounding
        assert_eq!(quantize_bias(&[1.0], 0.1, &[0.01]).unwrap(), vec![1000]);
        assert_eq!(quantize_bias(&[-1.0], 0.1, &[0.01]).unwrap(), vec![-1000]);
    }

    #[test]
    fn per_channel_scales() {
        let q = quantize_bias(&[1.0, 1.0], 0.5, &[0.5, 0.25]).unwrap();
        assert_eq!(q, vec![4, 8]);
    }

    #[test]
    fn overflow_is_reported_with_channel() {
        let err = quantize_bias(&[0.0, 1.0], 1e-5, &[1e-5]).unwrap_err();
        assert!(matches!(err, Error::BiasOverflow { channel: 1, .. }), "{err}");
    }
}
