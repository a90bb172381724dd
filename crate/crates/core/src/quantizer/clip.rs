//! Weight clipping range search.
//!
//! The clip edges are percentiles of the weight distribution: `alpha_low`
//! of the mass is clipped at the bottom and `alpha_high` at the top, each in
//! `[0, 0.1]`. The cost is the squared clipping error of values outside the
//! range plus the squared fake-quantization error of values inside it.

use crate::error::{Error, Result};
use crate::nelder_mead::NelderMead;
use crate::quantizer::affine::nudged_range;
use crate::quantizer::calibrate::percentile_sorted;

pub const MAX_CLIP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange {
    pub min: f32,
    pub max: f32,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub cost: f64,
    /// Cost of quantizing over the full `[min, max]`.
    pub unclipped_cost: f64,
}

/// Sum of squared errors of fake-quantizing `values` over `[lo, hi]`.
pub fn clip_cost(values: &[f32], lo: f32, hi: f32, bits: u8) -> Result<f64> {
    let p = nudged_range(lo, hi, bits)?;
    Ok(values
        .iter()
        .map(|&w| {
            let d = w as f64 - p.fake(w) as f64;
            d * d
        })
        .sum())
}

pub fn clip_optimize(values: &[f32], bits: u8) -> Result<ClipRange> {
    clip_optimize_with(values, bits, &NelderMead::default())
}

pub fn clip_optimize_with(values: &[f32], bits: u8, nm: &NelderMead) -> Result<ClipRange> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let (lo, hi) = match (sorted.first(), sorted.last()) {
        (Some(&lo), Some(&hi)) if lo < hi => (lo, hi),
        _ => {
            return Err(Error::DegenerateRange(
                "clipping needs a non-constant tensor".into(),
            ))
        }
    };
    let edges = |a_low: f64, a_high: f64| {
        (
            percentile_sorted(&sorted, a_low),
            percentile_sorted(&sorted, 1.0 - a_high),
        )
    };
    let unclipped_cost = clip_cost(values, lo, hi, bits)?;

    let found = nm.minimize(
        vec![vec![0.0, 0.0], vec![0.01, 0.0], vec![0.0, 0.01]],
        |a| {
            let feasible = |x: f64| (0.0..=MAX_CLIP_FRACTION).contains(&x);
            if !(feasible(a[0]) && feasible(a[1])) {
                return f64::INFINITY;
            }
            let (l, h) = edges(a[0], a[1]);
            clip_cost(values, l, h, bits).unwrap_or(f64::INFINITY)
        },
    );

    if found.cost < unclipped_cost {
        let (min, max) = edges(found.point[0], found.point[1]);
        Ok(ClipRange {
            min,
            max,
            alpha_low: found.point[0],
            alpha_high: found.point[1],
            cost: found.cost,
            unclipped_cost,
        })
    } else {
        Ok(ClipRange {
            min: lo,
            max: hi,
            alpha_low: 0.0,
            alpha_high: 0.0,
            cost: unclipped_cost,
            unclipped_cost,
        })
    }
}
