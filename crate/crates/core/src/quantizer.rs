//! Unbiased stochastic uniform quantization of accumulated gradients.
//!
//! All participating clients share one round-wide scale (the simulator plays
//! the feedback oracle that reports the largest magnitude), so the receiver
//! can decode the superposed payloads on a single grid and no value is ever
//! clipped. Stochastic rounding makes every payload an unbiased estimator of
//! its input; the variance grows with the squared L2 norm of the input, and
//! [`estimate_q`] measures the proportionality constant empirically.

use crate::error::{Error, Result};
use crate::learnkit::GradientVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const MAX_BITS: u8 = 16;

/// Shared symmetric grid over `[-half_range, +half_range]` with `2^bits`
/// levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScale {
    half_range: f64,
    bits: u8,
}

impl QuantScale {
    pub fn new(half_range: f64, bits: u8) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::Domain(format!("bit width {bits} outside [1, {MAX_BITS}]")));
        }
        if !(half_range > 0.0) || !half_range.is_finite() {
            return Err(Error::Domain(format!("half range {half_range} must be positive")));
        }
        Ok(QuantScale { half_range, bits })
    }

    pub fn half_range(&self) -> f64 {
        self.half_range
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    /// Grid spacing: 2c / (2^b - 1).
    pub fn step(&self) -> f64 {
        2.0 * self.half_range / (self.levels() - 1) as f64
    }

    /// Value of a level index, clamped so rounding error can never push an
    /// endpoint outside `[-half_range, half_range]`.
    pub fn level_value(&self, index: u16) -> f64 {
        (-self.half_range + index as f64 * self.step()).clamp(-self.half_range, self.half_range)
    }
}

/// Per-element level indices plus their shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedUpdate {
    pub levels: Vec<u16>,
    pub scale: QuantScale,
}

impl QuantizedUpdate {
    pub fn dim(&self) -> usize {
        self.levels.len()
    }
}

/// Round-wide common scale: the largest magnitude over all clients and
/// coordinates. Fails when every update is identically zero, in which case
/// callers skip quantization and transmit the reserved zero payload.
pub fn fit_common_scale(updates: &[GradientVector], bits: u8) -> Result<QuantScale> {
    if updates.is_empty() {
        return Err(Error::InvalidSpec("no updates to scale".into()));
    }
    let c = updates.iter().map(GradientVector::max_abs).fold(0.0, f64::max);
    if c == 0.0 {
        return Err(Error::DegenerateScale);
    }
    QuantScale::new(c, bits)
}

/// Stochastic rounding onto the grid. Each coordinate lands on one of its
/// two neighboring levels with probabilities proportional to the opposite
/// distances, so the expectation equals the input exactly.
pub fn quantize(
    x: &GradientVector,
    scale: &QuantScale,
    rng: &mut ChaCha8Rng,
) -> Result<QuantizedUpdate> {
    let step = scale.step();
    let top = (scale.levels() - 1) as u16;
    let mut levels = Vec::with_capacity(x.len());
    for (i, &v) in x.as_slice().iter().enumerate() {
        if v.abs() > scale.half_range() {
            return Err(Error::ClippingForbidden {
                index: i,
                value: v,
                half_range: scale.half_range(),
            });
        }
        let pos = (v + scale.half_range()) / step;
        // snap values that are on a grid level up to rounding error, so grid
        // points map to themselves with probability 1
        let rounded = pos.round();
        let (lower, frac) = if (pos - rounded).abs() <= 1e-9 {
            (rounded.clamp(0.0, top as f64), 0.0)
        } else {
            let fl = pos.floor().clamp(0.0, (top - 1) as f64);
            (fl, pos - fl)
        };
        let up = if frac > 0.0 && rng.random::<f64>() < frac {
            1
        } else {
            0
        };
        levels.push((lower as u16 + up).min(top));
    }
    Ok(QuantizedUpdate {
        levels,
        scale: *scale,
    })
}

/// Inverse map: index -> -c + index * step.
pub fn dequantize(qu: &QuantizedUpdate) -> GradientVector {
    GradientVector(
        qu.levels
            .iter()
            .map(|&idx| qu.scale.level_value(idx))
            .collect(),
    )
}

/// How the scale is chosen when measuring the variance constant.
#[derive(Debug, Clone, Copy)]
pub struct ScaleRegime {
    /// Dimension of each sampled vector.
    pub dim: usize,
    /// Number of clients whose joint max-abs sets the common scale.
    pub clients: usize,
}

/// Empirical estimate of the variance constant `q` in
/// `E||Q(x) - x||^2 = q ||x||^2` under the common-scale regime, together
/// with the standard error of the estimate.
pub fn estimate_q(
    bits: u8,
    regime: ScaleRegime,
    n_trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if n_trials < 10_000 {
        return Err(Error::InvalidSpec(format!(
            "estimate_q needs at least 1e4 trials, got {n_trials}"
        )));
    }
    if regime.dim == 0 || regime.clients == 0 {
        return Err(Error::InvalidSpec("empty scale regime".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let rounds = n_trials.div_ceil(regime.clients);
    for _ in 0..rounds {
        let vectors: Vec<GradientVector> = (0..regime.clients)
            .map(|_| {
                GradientVector(
                    (0..regime.dim)
                        .map(|_| StandardNormal.sample(rng))
                        .collect(),
                )
            })
            .collect();
        let scale = fit_common_scale(&vectors, bits)?;
        for x in &vectors {
            let qu = quantize(x, &scale, rng)?;
            let xq = dequantize(&qu);
            let err: f64 = x
                .as_slice()
                .iter()
                .zip(xq.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let ratio = err / x.norm_sq();
            sum += ratio;
            sum_sq += ratio * ratio;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
    Ok((mean, (var / count as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rng(label: u64) -> ChaCha8Rng {
        SeedTree::new(0xC0FFEE).rng(&[label])
    }

    #[test]
    fn common_scale_is_max_abs() {
        let updates = vec![
            GradientVector(vec![1.0, -2.0]),
            GradientVector(vec![0.5, 0.0]),
        ];
        let s = fit_common_scale(&updates, 4).unwrap();
        assert_eq!(s.half_range(), 2.0);

        let single = vec![GradientVector(vec![-0.25, 0.125, 0.0])];
        assert_eq!(fit_common_scale(&single, 4).unwrap().half_range(), 0.25);
    }

    #[test]
    fn common_scale_permutation_invariant() {
        let a = GradientVector(vec![0.3, -1.7]);
        let b = GradientVector(vec![1.1, 0.2]);
        let s1 = fit_common_scale(&[a.clone(), b.clone()], 4).unwrap();
        let s2 = fit_common_scale(&[b, a], 4).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn all_zero_updates_are_degenerate() {
        let updates = vec![GradientVector::zeros(3), GradientVector::zeros(3)];
        assert!(matches!(
            fit_common_scale(&updates, 4),
            Err(Error::DegenerateScale)
        ));
    }

    #[test]
    fn grid_points_are_fixed_points() {
        let scale = QuantScale::new(3.0, 2).unwrap();
        let mut r = rng(1);
        // every grid level maps to itself with probability 1
        for idx in 0..scale.levels() as u16 {
            let x = GradientVector(vec![scale.level_value(idx)]);
            for _ in 0..50 {
                let qu = quantize(&x, &scale, &mut r).unwrap();
                assert_eq!(qu.levels[0], idx);
            }
        }
    }

    #[test]
    fn dequantize_endpoints_and_interior() {
        let scale = QuantScale::new(3.0, 2).unwrap();
        assert_relative_eq!(scale.level_value(0), -3.0);
        assert_relative_eq!(scale.level_value(3), 3.0);
        // b=2, c=3: step 2, index 1 -> -1
        assert_relative_eq!(scale.level_value(1), -1.0);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let scale = QuantScale::new(1.0, 4).unwrap();
        let mut r = rng(2);
        let err = quantize(&GradientVector(vec![1.5]), &scale, &mut r);
        assert!(matches!(err, Err(Error::ClippingForbidden { index: 0, .. })));
    }

    #[test]
    fn one_bit_zero_input_splits_evenly() {
        let scale = QuantScale::new(1.0, 1).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let mut highs = 0usize;
        for _ in 0..n {
            let qu = quantize(&GradientVector(vec![0.0]), &scale, &mut r).unwrap();
            let v = dequantize(&qu).0[0];
            assert!(v == 1.0 || v == -1.0);
            if v == 1.0 {
                highs += 1;
            }
        }
        let p = highs as f64 / n as f64;
        let se = (0.25f64 / n as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * se, "p = {p}");
    }

    #[test]
    fn monte_carlo_unbiasedness() {
        let mut r = rng(4);
        let x = GradientVector(vec![0.73, -0.21, 0.0, 0.4999]);
        let scale = QuantScale::new(1.0, 2).unwrap();
        let n = 100_000;
        let mut mean = vec![0.0; x.len()];
        let mut mean_sq = vec![0.0; x.len()];
        for _ in 0..n {
            let xq = dequantize(&quantize(&x, &scale, &mut r).unwrap());
            for (j, v) in xq.as_slice().iter().enumerate() {
                mean[j] += v;
                mean_sq[j] += v * v;
            }
        }
        for j in 0..x.len() {
            let m = mean[j] / n as f64;
            let var = mean_sq[j] / n as f64 - m * m;
            let se = (var / n as f64).sqrt();
            assert!(
                (m - x.0[j]).abs() <= 3.0 * se + 1e-12,
                "coord {j}: mean {m} vs {}",
                x.0[j]
            );
        }
    }

    #[test]
    fn estimate_q_decreases_with_bits_and_vanishes_at_16() {
        let regime = ScaleRegime { dim: 8, clients: 4 };
        let mut previous = f64::INFINITY;
        for &bits in &[1u8, 2, 4, 8] {
            let mut r = rng(10 + bits as u64);
            let (q, _) = estimate_q(bits, regime, 20_000, &mut r).unwrap();
            assert!(q < previous, "q({bits}) = {q} not below {previous}");
            previous = q;
        }
        let mut r = rng(32);
        let (q16, _) = estimate_q(16, regime, 20_000, &mut r).unwrap();
        assert!(q16 <= 1e-6, "q(16) = {q16}");
    }

    #[test]
    fn grid_aligned_input_has_zero_variance_contribution() {
        let scale = QuantScale::new(2.0, 3).unwrap();
        let x = GradientVector(vec![scale.level_value(2), scale.level_value(5)]);
        let mut r = rng(33);
        for _ in 0..200 {
            let xq = dequantize(&quantize(&x, &scale, &mut r).unwrap());
            assert_eq!(xq.as_slice(), x.as_slice());
        }
    }

    proptest! {
        #[test]
        fn quantize_deterministic_under_fixed_stream(
            seed in 0u64..1000,
            bits in 1u8..=8,
        ) {
            let x = GradientVector(vec![0.3, -0.9, 0.05]);
            let scale = QuantScale::new(1.0, bits).unwrap();
            let a = quantize(&x, &scale, &mut SeedTree::new(seed).rng(&[1])).unwrap();
            let b = quantize(&x, &scale, &mut SeedTree::new(seed).rng(&[1])).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn dequantized_values_stay_in_range(
            vals in proptest::collection::vec(-1.0f64..1.0, 1..16),
            bits in 1u8..=8,
        ) {
            let x = GradientVector(vals);
            if x.max_abs() == 0.0 {
                return Ok(());
            }
            let scale = fit_common_scale(std::slice::from_ref(&x), bits).unwrap();
            let qu = quantize(&x, &scale, &mut SeedTree::new(7).rng(&[2])).unwrap();
            let xq = dequantize(&qu);
            for v in xq.as_slice() {
                prop_assert!(v.abs() <= scale.half_range() + 1e-12);
            }
            // grid round trip: quantizing a dequantized payload is identity
            let qu2 = quantize(&xq, &scale, &mut SeedTree::new(8).rng(&[3])).unwrap();
            prop_assert_eq!(&qu.levels, &qu2.levels);
        }
    }
}
