//! Weight equalizing shift scaler.
//!
//! Every output channel of a kernel is multiplied by a power of two `2^S_i`
//! so that all channel ranges land close to a common total range `r_hat`.
//! The layer is then quantized with one layer-wise scale; the integer kernel
//! undoes the shift with an arithmetic right shift during requantization.
//!
//! `r_hat` starts at the widest channel range and is refined by a
//! one-dimensional Nelder-Mead search over the fake-quantization error.

use crate::error::{Error, Result};
use crate::nelder_mead::NelderMead;
use crate::quantizer::affine::nudged_range;
use crate::tensor::Tensor;

/// Largest shift representable in the 4-bit on-disk field.
pub const MAX_SHIFT: u8 = 15;

/// Per-output-channel extent of an HWIO kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRanges {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    /// Symmetric width `2 * max(|min_i|, |max_i|)`.
    pub range: Vec<f32>,
}

impl ChannelRanges {
    pub fn channels(&self) -> usize {
        self.range.len()
    }
}

/// Per-channel binary shift exponents, each in `[0, 15]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShiftScales(pub Vec<u8>);

impl ShiftScales {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    /// Count of channels per shift value 0..=15.
    pub fn histogram(&self) -> [usize; 16] {
        let mut h = [0; 16];
        for &s in &self.0 {
            h[s as usize] += 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct WesResult {
    pub weights: Tensor<f32>,
    pub bias: Vec<f32>,
    pub shifts: ShiftScales,
    pub total_range: f32,
    /// Fake-quantization MSE at the chosen total range.
    pub cost: f64,
    /// Cost at the deterministic initialization, for comparison.
    pub initial_cost: f64,
    pub iterations: usize,
    /// Channels whose shift hit the 4-bit ceiling.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct WesOptions {
    pub bits: u8,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for WesOptions {
    fn default() -> Self {
        Self {
            bits: 8,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

pub fn channel_ranges(w: &Tensor<f32>) -> ChannelRanges {
    let n = w.last_dim();
    let mut min = vec![f32::INFINITY; n];
    let mut max = vec![f32::NEG_INFINITY; n];
    for (i, &x) in w.data().iter().enumerate() {
        let c = i % n;
        min[c] = min[c].min(x);
        max[c] = max[c].max(x);
    }
    let range = min
        .iter()
        .zip(&max)
        .map(|(lo, hi)| 2.0 * lo.abs().max(hi.abs()))
        .collect();
    ChannelRanges { min, max, range }
}

/// The widest channel range.
pub fn init_total_range(ranges: &ChannelRanges) -> Result<f32> {
    let r = ranges.range.iter().copied().fold(0.0f32, f32::max);
    if r > 0.0 {
        Ok(r)
    } else {
        Err(Error::DegenerateLayer)
    }
}

/// `floor(log2(r_hat / r_i))` clamped into `[0, 15]`; zero for all-zero channels.
pub fn shift_scales(r_hat: f32, ranges: &ChannelRanges) -> ShiftScales {
    ShiftScales(ranges.range.iter().map(|&r| shift_for(r_hat, r)).collect())
}

fn shift_for(r_hat: f32, r: f32) -> u8 {
    if !(r > 0.0) || !(r_hat > 0.0) {
        return 0;
    }
    let (r_hat, r) = (r_hat as f64, r as f64);
    // log2 can be off by one near exact powers of two; settle on the integer
    // k with r * 2^k <= r_hat < r * 2^(k+1) by exact comparisons.
    let mut k = (r_hat / r).log2().floor() as i32;
    while r * 2f64.powi(k) > r_hat {
        k -= 1;
    }
    while r * 2f64.powi(k + 1) <= r_hat {
        k += 1;
    }
    k.clamp(0, MAX_SHIFT as i32) as u8
}

/// Multiply channel `i` of the kernel and bias by `2^S_i`.
pub fn apply_shift(
    w: &Tensor<f32>,
    b: &[f32],
    shifts: &ShiftScales,
) -> Result<(Tensor<f32>, Vec<f32>)> {
    let n = w.last_dim();
    if shifts.len() != n || b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} shifts and {} biases for {n} channels",
            shifts.len(),
            b.len()
        )));
    }
    let factors: Vec<f32> = shifts.0.iter().map(|&s| 2f32.powi(s as i32)).collect();
    let mut out = w.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let c = i % n;
        *x *= factors[c];
        if !x.is_finite() {
            return Err(Error::ShiftOverflow {
                channel: c,
                shift: shifts.0[c],
            });
        }
    }
    let mut bias = Vec::with_capacity(n);
    for c in 0..n {
        let v = b[c] * factors[c];
        if !v.is_finite() {
            return Err(Error::ShiftOverflow {
                channel: c,
                shift: shifts.0[c],
            });
        }
        bias.push(v);
    }
    Ok((out, bias))
}

/// Mean squared error of shift, layer-wise fake quantization and inverse shift
/// at total range `r_hat`.
pub fn wes_cost(w: &Tensor<f32>, r_hat: f32, bits: u8) -> Result<f64> {
    let ranges = channel_ranges(w);
    wes_cost_with(w, &ranges, r_hat, bits)
}

fn wes_cost_with(w: &Tensor<f32>, ranges: &ChannelRanges, r_hat: f32, bits: u8) -> Result<f64> {
    let shifts = shift_scales(r_hat, ranges);
    let n = w.last_dim();
    let up: Vec<f32> = shifts.0.iter().map(|&s| 2f32.powi(s as i32)).collect();
    let down: Vec<f32> = shifts.0.iter().map(|&s| 2f32.powi(-(s as i32))).collect();

    let shifted: Vec<f32> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * up[i % n])
        .collect();
    let (lo, hi) = crate::tensor::min_max(&shifted);
    let p = nudged_range(lo, hi, bits)?;
    let sse: f64 = shifted
        .iter()
        .zip(w.data())
        .enumerate()
        .map(|(i, (&s, &orig))| {
            let back = p.fake(s) * down[i % n];
            let d = orig as f64 - back as f64;
            d * d
        })
        .sum();
    Ok(sse / w.len() as f64)
}

/// Search the total range with a one-dimensional Nelder-Mead started at the
/// widest channel range. Returns `(r_hat, cost, initial_cost, iterations)`.
pub fn optimize_total_range(
    w: &Tensor<f32>,
    tol: f64,
    max_iter: usize,
    bits: u8,
) -> Result<(f32, f64, f64, usize)> {
    let ranges = channel_ranges(w);
    let r0 = init_total_range(&ranges)?;
    let initial_cost = wes_cost_with(w, &ranges, r0, bits)?;
    let floor = r0 as f64 / 65536.0;

    let mut failure = None;
    let nm = NelderMead {
        tol,
        max_iter,
        ..NelderMead::default()
    };
    let found = nm.minimize(vec![vec![r0 as f64], vec![1.05 * r0 as f64]], |x| {
        let r = x[0];
        if !(r > floor) || !r.is_finite() {
            return f64::INFINITY;
        }
        match wes_cost_with(w, &ranges, r as f32, bits) {
            Ok(c) => c,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if found.cost < initial_cost {
        Ok((found.point[0] as f32, found.cost, initial_cost, found.iterations))
    } else {
        Ok((r0, initial_cost, initial_cost, found.iterations))
    }
}

/// Full per-layer WES step: optimize the total range, derive shifts and
/// rescale weights and bias. All-zero layers pass through with zero shifts.
pub fn equalize(w: &Tensor<f32>, b: &[f32], opts: &WesOptions) -> Result<WesResult> {
    let ranges = channel_ranges(w);
    let (total_range, cost, initial_cost, iterations) =
        match optimize_total_range(w, opts.tol, opts.max_iter, opts.bits) {
            Ok(found) => found,
            Err(Error::DegenerateLayer) => (0.0, 0.0, 0.0, 0),
            Err(e) => return Err(e),
        };
    let shifts = if total_range > 0.0 {
        shift_scales(total_range, &ranges)
    } else {
        ShiftScales::zeros(ranges.channels())
    };
    let clamped = ranges
        .range
        .iter()
        .zip(&shifts.0)
        .filter(|(&r, &s)| s == MAX_SHIFT && r > 0.0 && r * 2f32.powi(16) <= total_range)
        .count();
    let (weights, bias) = apply_shift(w, b, &shifts)?;
    Ok(WesResult {
        weights,
        bias,
        shifts,
        total_range,
        cost,
        initial_cost,
        iterations,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::affine::fake_quantize;
    use crate::tensor::Layout;

    fn hwio(values: Vec<f32>, channels: usize) -> Tensor<f32> {
        let per = values.len() / channels;
        Tensor::new(vec![1, 1, per, channels], values, Layout::Hwio).unwrap()
    }

    /// Largest k with r * 2^k <= r_hat, by search.
    fn brute_shift(r_hat: f64, r: f64) -> i32 {
        let mut k = -60;
        while r * 2f64.powi(k + 1) <= r_hat {
            k += 1;
        }
        k
    }

    #[test]
    fn channel_range_formula() {
        // channel 0 = {-1, 0.5}, channel 1 = {0.1, 0.2}, channel 2 = {0, 0}
        let w = hwio(vec![-1.0, 0.1, 0.0, 0.5, 0.2, 0.0], 3);
        let r = channel_ranges(&w);
        assert_eq!(r.min, vec![-1.0, 0.1, 0.0]);
        assert_eq!(r.max, vec![0.5, 0.2, 0.0]);
        assert_eq!(r.range, vec![2.0, 0.4, 0.0]);
    }

    #[test]
    fn total_range_initialization() {
        let mk = |range: Vec<f32>| ChannelRanges {
            min: vec![0.0; range.len()],
            max: vec![0.0; range.len()],
            range,
        };
        assert_eq!(init_total_range(&mk(vec![2.0, 0.5, 0.25])).unwrap(), 2.0);
        assert_eq!(init_total_range(&mk(vec![1.0])).unwrap(), 1.0);
        assert!(matches!(
            init_total_range(&mk(vec![0.0, 0.0])),
            Err(Error::DegenerateLayer)
        ));
    }

    #[test]
    fn shift_examples() {
        assert_eq!(shift_for(8.0, 8.0), 0);
        assert_eq!(shift_for(8.0, 1.0), 3);
        assert_eq!(brute_shift(8.0, 3.0), 1);
        assert_eq!(shift_for(8.0, 3.0), 1);
        assert_eq!(brute_shift(8.0, 1e-6f32 as f64), 22);
        assert_eq!(shift_for(8.0, 1e-6), 15);
        assert_eq!(shift_for(8.0, 0.0), 0);
        // r_hat below r_i clamps to zero
        assert_eq!(shift_for(1.0, 3.0), 0);
    }

    #[test]
    fn shift_matches_brute_force_on_awkward_ratios() {
        for &(r_hat, r) in &[
            (1.0f32, 0.5f32),
            (1.0, 0.500_000_06),
            (1.0, 0.499_999_97),
            (0.3, 0.075),
            (0.3, 0.074_999_99),
            (7.0, 7.0 / 1024.0),
        ] {
            let expected = brute_shift(r_hat as f64, r as f64).clamp(0, 15) as u8;
            assert_eq!(shift_for(r_hat, r), expected, "r_hat={r_hat} r={r}");
        }
    }

    #[test]
    fn apply_shift_scales_by_powers_of_two() {
        let w = hwio(vec![0.5, -0.25], 1);
        let (sw, sb) = apply_shift(&w, &[0.125], &ShiftScales(vec![3])).unwrap();
        assert_eq!(sw.data(), &[4.0, -2.0]);
        assert_eq!(sb, vec![1.0]);

        let (iw, ib) = apply_shift(&w, &[0.125], &ShiftScales::zeros(1)).unwrap();
        assert_eq!(iw, w);
        assert_eq!(ib, vec![0.125]);
    }

    #[test]
    fn apply_shift_is_exactly_invertible() {
        let w = hwio(vec![0.123_456_7, -3.3e-5, 1.1, 9.9e-3, -0.7, 0.0], 2);
        let shifts = ShiftScales(vec![5, 13]);
        let (sw, _) = apply_shift(&w, &[0.0, 0.0], &shifts).unwrap();
        for (i, (&orig, &s)) in w.data().iter().zip(sw.data()).enumerate() {
            let back = s * 2f32.powi(-(shifts.0[i % 2] as i32));
            assert_eq!(back.to_bits(), orig.to_bits());
        }
    }

    #[test]
    fn apply_shift_overflow_is_an_error() {
        let w = hwio(vec![3e38], 1);
        assert!(matches!(
            apply_shift(&w, &[0.0], &ShiftScales(vec![15])),
            Err(Error::ShiftOverflow { channel: 0, shift: 15 })
        ));
    }

    #[test]
    fn single_channel_cost_is_plain_fake_quant_mse() {
        let values: Vec<f32> = (0..50).map(|i| ((i * 37) % 23) as f32 * 0.013 - 0.11).collect();
        let w = hwio(values, 1);
        let (w_star, _) = fake_quantize(&w, 8).unwrap();
        let mse = w
            .data()
            .iter()
            .zip(w_star.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        let r0 = init_total_range(&channel_ranges(&w)).unwrap();
        assert_eq!(wes_cost(&w, r0, 8).unwrap(), mse);
    }

    #[test]
    fn on_grid_single_channel_has_zero_cost() {
        let p = nudged_range(-1.0, 1.0, 8).unwrap();
        let values: Vec<f32> = (0..=255u8).step_by(5).map(|q| p.dequantize(q)).collect();
        let w = hwio(values, 1);
        let (lo, hi) = w.min_max();
        assert_eq!(nudged_range(lo, hi, 8).unwrap(), p);
        let r0 = init_total_range(&channel_ranges(&w)).unwrap();
        assert_eq!(wes_cost(&w, r0, 8).unwrap(), 0.0);
    }

    #[test]
    fn narrow_channel_gains_resolution() {
        // channel 0 spans [-1, 1], channel 1 spans [-0.01, 0.01]
        let mut values = Vec::new();
        for i in 0..64 {
            let t = i as f32 / 63.0 * 2.0 - 1.0;
            values.push(t);
            values.push(t * 0.01 + 0.000_37 * ((i % 7) as f32 - 3.0) / 3.0);
        }
        let w = hwio(values, 2);
        let lwq = wes_cost(&w, 1e-30, 8).unwrap();
        let (w_star, _) = fake_quantize(&w, 8).unwrap();
        let plain = w
            .data()
            .iter()
            .zip(w_star.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        // r_hat below every channel range means no shifts at all
        assert_eq!(lwq, plain);
        let wes = wes_cost(&w, 2.0, 8).unwrap();
        assert!(wes < lwq, "wes {wes} lwq {lwq}");
    }

    #[test]
    fn search_never_worse_than_initialization() {
        let values: Vec<f32> = (0..288)
            .map(|i| {
                let c = i % 32;
                let scale = 100f32.powf(-(c as f32) / 31.0);
                (((i * 7919) % 101) as f32 / 50.0 - 1.0) * scale
            })
            .collect();
        let w = Tensor::new(vec![3, 3, 1, 32], values, Layout::Hwio).unwrap();
        let (r, cost, initial, _) = optimize_total_range(&w, 1e-8, 200, 8).unwrap();
        assert!(cost <= initial);
        assert_eq!(cost, wes_cost(&w, r, 8).unwrap());
    }

    #[test]
    fn equal_ranges_give_zero_shifts() {
        let w = hwio(vec![1.0, -1.0, -0.5, 0.5], 2);
        let res = equalize(&w, &[0.0, 0.0], &WesOptions::default()).unwrap();
        assert_eq!(res.shifts, ShiftScales::zeros(2));
        assert_eq!(res.weights, w);
    }

    #[test]
    fn degenerate_layer_passes_through() {
        let w = hwio(vec![0.0; 4], 2);
        let res = equalize(&w, &[0.5, 0.0], &WesOptions::default()).unwrap();
        assert_eq!(res.shifts, ShiftScales::zeros(2));
        assert_eq!(res.bias, vec![0.5, 0.0]);
    }
}
