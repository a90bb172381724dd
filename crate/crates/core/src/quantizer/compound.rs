//! Scale compound `s_in * s_w / s_out` as a 32-bit mantissa and 6-bit exponent.

use crate::error::{Error, Result};

pub const MANTISSA_BITS: u32 = 31;
pub const EXPONENT_MIN: i8 = -32;
pub const EXPONENT_MAX: i8 = 31;

/// `mantissa / 2^31 * 2^exponent`, with the mantissa in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleCompound {
    pub mantissa: u32,
    pub exponent: i8,
}

impl ScaleCompound {
    /// Decompose a positive real into mantissa and exponent.
    pub fn from_real(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale compound {c} must be positive and finite"
            )));
        }
        let (frac, mut exp) = frexp(c);
        let mut mantissa = (frac * (1u64 << MANTISSA_BITS) as f64).round() as u64;
        if mantissa == 1 << MANTISSA_BITS {
            mantissa >>= 1;
            exp += 1;
        }
        if !(EXPONENT_MIN as i32..=EXPONENT_MAX as i32).contains(&exp) {
            return Err(Error::CompoundExponent(c));
        }
        Ok(Self {
            mantissa: mantissa as u32,
            exponent: exp as i8,
        })
    }

    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 / (1u64 << MANTISSA_BITS) as f64 * 2f64.powi(self.exponent as i32)
    }

    pub fn is_normalized(self) -> bool {
        (1 << 30..1 << 31).contains(&self.mantissa)
            && (EXPONENT_MIN..=EXPONENT_MAX).contains(&self.exponent)
    }
}

/// Real value of the requantization multiplier, computed in f64 from f32 scales.
pub fn compound_real(s_in: f32, s_w: f32, s_out: f32) -> f64 {
    s_in as f64 * s_w as f64 / s_out as f64
}

pub fn make_scale_compound(s_in: f32, s_w: f32, s_out: f32) -> Result<ScaleCompound> {
    if !(s_in > 0.0 && s_w > 0.0 && s_out > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scales must be positive: s_in={s_in} s_w={s_w} s_out={s_out}"
        )));
    }
    ScaleCompound::from_real(compound_real(s_in, s_w, s_out))
}

/// Split a positive finite `x` into `frac * 2^exp` with `frac` in `[0.5, 1)`.
fn frexp(x: f64) -> (f64, i32) {
    const EXP_MASK: u64 = 0x7ff << 52;
    let bits = x.to_bits();
    let field = ((bits & EXP_MASK) >> 52) as i32;
    if field == 0 {
        // subnormal: scale into the normal range first
        let (f, e) = frexp(x * 2f64.powi(64));
        return (f, e - 64);
    }
    let frac = f64::from_bits((bits & !EXP_MASK) | (1022u64 << 52));
    (frac, field - 1022)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frexp_brackets_the_fraction() {
        for x in [1e-300, 1e-310, 0.3, 0.5, 1.0, 3.75, 1e200] {
            let (f, e) = frexp(x);
            assert!((0.5..1.0).contains(&f), "{x}: {f}");
            assert_eq!(f * 2f64.powi(e + 100), x * 2f64.powi(100));
        }
    }

    #[test]
    fn half_and_one_are_exact() {
        let c = ScaleCompound::from_real(0.5).unwrap();
        assert_eq!((c.mantissa, c.exponent), (1 << 30, 0));
        let c = ScaleCompound::from_real(1.0).unwrap();
        assert_eq!((c.mantissa, c.exponent), (1 << 30, 1));
    }

    #[test]
    fn three_tenths() {
        let c = ScaleCompound::from_real(0.3).unwrap();
        assert_eq!((c.mantissa, c.exponent), (1_288_490_189, -1));
        assert!(((c.to_f64() - 0.3) / 0.3).abs() <= 2f64.powi(-30));
    }

    #[test]
    fn mantissa_rounding_carry_renormalizes() {
        // just below 1.0: the mantissa rounds up to 2^31
        let c = ScaleCompound::from_real(1.0 - 2f64.powi(-40)).unwrap();
        assert_eq!((c.mantissa, c.exponent), (1 << 30, 1));
        assert!(c.is_normalized());
    }

    #[test]
    fn exponent_range_is_enforced() {
        assert!(ScaleCompound::from_real(2f64.powi(31) * 0.75).is_ok());
        assert!(matches!(
            ScaleCompound::from_real(2f64.powi(31)),
            Err(Error::CompoundExponent(_))
        ));
        assert!(ScaleCompound::from_real(2f64.powi(-33)).is_ok());
        assert!(ScaleCompound::from_real(2f64.powi(-34)).is_err());
        assert!(ScaleCompound::from_real(0.0).is_err());
        assert!(make_scale_compound(0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn from_scales() {
        let c = make_scale_compound(0.5, 0.25, 0.125).unwrap();
        assert_eq!(c.to_f64(), 1.0);
    }
}
