//! Rayleigh-faded multi-access channel with threshold power control and the
//! over-the-air aggregation operator.
//!
//! The channel gain `|h|^2` of every client/coordinate pair is an independent
//! Exponential(rate) draw (symbol-level block fading). A client inverts the
//! channel for a coordinate only when its gain clears the threshold
//! `gain_threshold`; the long-run fraction of selected elements is the
//! transmission probability `p = exp(-rate * gain_threshold)`. Selected
//! contributions arrive phase-aligned with power `rho`, superpose in the air,
//! and the receiver rescales by `1 / (sqrt(rho) * p * K)`.
//!
//! With the inversion in place, receiver noise of variance `noise_var` enters
//! the aggregate as `n / sqrt(rho)`, so every closed form below uses the
//! effective noise variance `noise_var / rho`.

use crate::error::{Error, Result};
use crate::learnkit::GradientVector;
use crate::rng::{child_key, rng_from_key};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

/// How the aggregation operator treats the physical layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Exact arithmetic mean; no fading, no noise.
    Ideal,
    /// Closed-form statistical operator: per-coordinate selection plus
    /// Gaussian receiver noise.
    Statistical,
    /// Full symbol path through the modem (QAM superposition + ADC).
    Symbol,
}

/// Static description of the fading channel and the power constraint.
#[derive(Debug, Clone, Copy)]
pub struct ChannelConfig {
    /// Rate of the Exponential distribution of the channel gain (mean gain
    /// is `1/rate`).
    pub rate: f64,
    /// Receiver noise variance (physical units at the antenna).
    pub noise_var: f64,
    /// Post-inversion receive power target; sets the operating SNR.
    pub rho: f64,
    /// Average transmit power budget per device, watts.
    pub power_budget: f64,
    pub mode: ChannelMode,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) {
            return Err(Error::Domain(format!("rate {} must be positive", self.rate)));
        }
        if self.noise_var < 0.0 {
            return Err(Error::Domain("negative noise variance".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Domain(format!("rho {} must be positive", self.rho)));
        }
        if !(self.power_budget > 0.0) {
            return Err(Error::Domain("power budget must be positive".into()));
        }
        Ok(())
    }

    /// Effective noise variance seen by the aggregate after Rx scaling by
    /// `1/sqrt(rho)`.
    pub fn effective_noise_var(&self) -> f64 {
        self.noise_var / self.rho
    }
}

/// Highest transmission probability the power budget allows:
/// `exp(-rate * rho / power_budget)`.
pub fn max_probability(cfg: &ChannelConfig) -> f64 {
    (-cfg.rate * cfg.rho / cfg.power_budget).exp()
}

/// Transmission probability induced by a gain threshold.
pub fn probability_from_threshold(gain_threshold: f64, rate: f64) -> f64 {
    (-rate * gain_threshold).exp()
}

/// Gain threshold achieving a requested transmission probability.
pub fn threshold_from_probability(tx_prob: f64, rate: f64) -> Result<f64> {
    if !(tx_prob > 0.0 && tx_prob <= 1.0) {
        return Err(Error::Domain(format!(
            "transmission probability {tx_prob} outside (0, 1]"
        )));
    }
    Ok(-tx_prob.ln() / rate)
}

/// Threshold power-control policy: gate on the gain, then invert.
#[derive(Debug, Clone, Copy)]
pub struct PowerPolicy {
    gain_threshold: f64,
    tx_prob: f64,
}

impl PowerPolicy {
    /// Policy for a requested transmission probability. In statistical and
    /// symbol modes the probability must respect the power budget
    /// (`tx_prob <= max_probability`); full inversion (`tx_prob = 1`) has
    /// unbounded average power under Rayleigh fading and is only meaningful
    /// for the ideal channel.
    pub fn from_probability(tx_prob: f64, cfg: &ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        if !(tx_prob > 0.0 && tx_prob <= 1.0) {
            return Err(Error::Domain(format!(
                "transmission probability {tx_prob} outside (0, 1]"
            )));
        }
        if cfg.mode != ChannelMode::Ideal {
            let p_max = max_probability(cfg);
            if tx_prob > p_max + 1e-12 {
                return Err(Error::Domain(format!(
                    "transmission probability {tx_prob} exceeds budget-limited maximum {p_max:.6}"
                )));
            }
        }
        Ok(PowerPolicy {
            gain_threshold: threshold_from_probability(tx_prob, cfg.rate)?,
            tx_prob,
        })
    }

    pub fn from_threshold(gain_threshold: f64, cfg: &ChannelConfig) -> Result<Self> {
        if gain_threshold < 0.0 {
            return Err(Error::Domain("negative gain threshold".into()));
        }
        Self::from_probability(probability_from_threshold(gain_threshold, cfg.rate), cfg)
    }

    /// Degenerate always-transmit policy (threshold 0, probability 1). Skips
    /// the power-budget check, which full inversion cannot satisfy under
    /// Rayleigh fading; meant for the ideal channel and noise-free sanity
    /// paths.
    pub fn full_selection() -> Self {
        PowerPolicy {
            gain_threshold: 0.0,
            tx_prob: 1.0,
        }
    }

    pub fn gain_threshold(&self) -> f64 {
        self.gain_threshold
    }

    pub fn tx_prob(&self) -> f64 {
        self.tx_prob
    }
}

/// One draw of the channel gain `|h|^2 ~ Exponential(rate)`.
pub fn draw_gain(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    Exp::new(rate).expect("positive rate").sample(rng)
}

/// Complex channel coefficient with the given gain and a uniform phase.
pub fn draw_coefficient(rate: f64, rng: &mut ChaCha8Rng) -> Complex64 {
    let gain = draw_gain(rate, rng);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    Complex64::from_polar(gain.sqrt(), phase)
}

/// Transmitter scaling factor of the power-control policy:
/// `sqrt(rho) * conj(h) / |h|^2` when the gain clears the threshold, zero
/// otherwise. For a selected coefficient, `h * tx_scale(h) = sqrt(rho)`.
pub fn tx_scale(h: Complex64, gain_threshold: f64, rho: f64) -> Complex64 {
    let gain = h.norm_sqr();
    if gain >= gain_threshold && gain > 0.0 {
        rho.sqrt() * h.conj() / gain
    } else {
        Complex64::ZERO
    }
}

/// Over-the-air aggregate of the input set.
///
/// Per coordinate, each client is selected independently with the policy's
/// probability; the selected values sum and the receiver adds scaled noise:
/// `(1 / (p K)) (sum_selected x + n / sqrt(rho))`. Coordinates use
/// independent substreams of `stream_key`, so any evaluation order (or
/// parallel split) produces identical output. Ideal mode returns the exact
/// mean.
pub fn air_aggregate(
    inputs: &[GradientVector],
    cfg: &ChannelConfig,
    policy: &PowerPolicy,
    stream_key: u64,
) -> Result<GradientVector> {
    let (dim, clients) = check_inputs(inputs)?;
    if cfg.mode == ChannelMode::Ideal {
        return exact_mean(inputs);
    }
    cfg.validate()?;

    let noise = Normal::new(0.0, cfg.noise_var.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let rescale = 1.0 / (policy.tx_prob * clients as f64);
    let mut out = Vec::with_capacity(dim);
    for coord in 0..dim {
        let mut rng = rng_from_key(child_key(stream_key, coord as u64));
        let mut sum = 0.0;
        for x in inputs {
            let gain = draw_gain(cfg.rate, &mut rng);
            if gain >= policy.gain_threshold {
                sum += x.as_slice()[coord];
            }
        }
        if cfg.noise_var > 0.0 {
            sum += noise.sample(&mut rng) / cfg.rho.sqrt();
        }
        out.push(rescale * sum);
    }
    Ok(GradientVector(out))
}

/// Arithmetic mean of the input set, the noise-free reference every
/// transport degenerates to. Both the ideal channel and the orthogonal
/// baselines go through this one implementation so they agree bit for bit.
pub fn exact_mean(inputs: &[GradientVector]) -> Result<GradientVector> {
    let (dim, clients) = check_inputs(inputs)?;
    let mut out = vec![0.0; dim];
    for x in inputs {
        for (o, v) in out.iter_mut().zip(x.as_slice()) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= clients as f64;
    }
    Ok(GradientVector(out))
}

/// Closed-form per-coordinate variance of [`air_aggregate`]:
/// `(1/K^2)(1/p - 1) sum_k x_k^2 + noise_eff / (K^2 p^2)`.
pub fn air_variance(
    inputs: &[GradientVector],
    tx_prob: f64,
    cfg: &ChannelConfig,
) -> Result<Vec<f64>> {
    let (dim, clients) = check_inputs(inputs)?;
    if !(tx_prob > 0.0 && tx_prob <= 1.0) {
        return Err(Error::Domain(format!(
            "transmission probability {tx_prob} outside (0, 1]"
        )));
    }
    let k_sq = (clients * clients) as f64;
    let selection_factor = (1.0 / tx_prob - 1.0) / k_sq;
    let noise_term = cfg.effective_noise_var() / (k_sq * tx_prob * tx_prob);
    Ok((0..dim)
        .map(|coord| {
            let sum_sq: f64 = inputs
                .iter()
                .map(|x| x.as_slice()[coord] * x.as_slice()[coord])
                .sum();
            selection_factor * sum_sq + noise_term
        })
        .collect())
}

fn check_inputs(inputs: &[GradientVector]) -> Result<(usize, usize)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidSpec("empty input set".into()))?;
    let dim = first.len();
    for x in inputs {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: x.len(),
                context: "aggregation inputs",
            });
        }
    }
    Ok((dim, inputs.len()))
}
