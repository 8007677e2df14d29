//! Symbol-level fidelity layer for the over-the-air aggregation path.
//!
//! Two quantized gradient elements ride one square-QAM symbol: the in-phase
//! axis carries one level index, the quadrature axis the other, each as a
//! zero-centered amplitude-shift-keying amplitude with unit spacing. The
//! level-to-amplitude map is shared with the quantizer grid (amplitude `a`
//! represents the value `a * scale.step()`), which keeps the decode linear:
//! selected symbols arrive channel-inverted at `sqrt(rho) * step` volts per
//! amplitude unit, superpose with receiver noise, pass through a mid-tread
//! ADC whose reference is the feedback-derived largest possible aggregate,
//! and the digital Rx scaling `1 / (sqrt(rho) * p * K)` recovers the same
//! estimate the statistical channel operator produces.

use crate::channel::{ChannelConfig, PowerPolicy};
use crate::error::{Error, Result};
use crate::learnkit::GradientVector;
use crate::quantizer::{QuantScale, QuantizedUpdate};
use crate::rng::{child_key, rng_from_key};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

/// One square-QAM symbol: two MASK amplitudes of the same order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqSymbol {
    pub i: f64,
    pub q: f64,
    /// Bits per axis.
    pub bits: u8,
}

/// Zero-centered unit-spacing MASK amplitude of a level index:
/// `index - (2^bits - 1) / 2`.
pub fn mask_amplitude(index: u16, bits: u8) -> f64 {
    index as f64 - ((1u32 << bits) - 1) as f64 / 2.0
}

/// Largest MASK amplitude magnitude for the given order.
pub fn mask_max_amplitude(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64 / 2.0
}

/// Map two level indices onto one symbol. The constellation has
/// `4^bits` points (`2^bits` per axis).
pub fn map_to_symbol(idx_i: u16, idx_q: u16, bits: u8) -> Result<IqSymbol> {
    let levels = 1u32 << bits;
    for idx in [idx_i, idx_q] {
        if idx as u32 >= levels {
            return Err(Error::Domain(format!(
                "level index {idx} outside {levels}-level grid"
            )));
        }
    }
    Ok(IqSymbol {
        i: mask_amplitude(idx_i, bits),
        q: mask_amplitude(idx_q, bits),
        bits,
    })
}

/// Superposition at the sampling instant: coordinatewise sum of all symbols
/// plus independent Gaussian noise on each axis.
pub fn superpose(symbols: &[IqSymbol], noise_std: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if let Some(first) = symbols.first() {
        if symbols.iter().any(|s| s.bits != first.bits) {
            return Err(Error::InvalidSpec("mixed MASK orders in superposition".into()));
        }
    }
    let mut i: f64 = symbols.iter().map(|s| s.i).sum();
    let mut q: f64 = symbols.iter().map(|s| s.q).sum();
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(e.to_string()))?;
        i += noise.sample(rng);
        q += noise.sample(rng);
    }
    Ok((i, q))
}

/// Receiver sampler: uniform mid-tread quantization over
/// `[-reference, +reference]`.
#[derive(Debug, Clone, Copy)]
pub struct AdcConfig {
    pub resolution_bits: u8,
    pub reference: f64,
}

impl AdcConfig {
    pub fn new(resolution_bits: u8, reference: f64) -> Result<Self> {
        if resolution_bits == 0 || resolution_bits > 32 {
            return Err(Error::Domain(format!(
                "ADC resolution {resolution_bits} outside [1, 32]"
            )));
        }
        if !(reference > 0.0) {
            return Err(Error::Domain("ADC reference must be positive".into()));
        }
        Ok(AdcConfig {
            resolution_bits,
            reference,
        })
    }

    /// Reference sized to the feedback-derived largest possible aggregate:
    /// `clients * max_device_amplitude` plus a four-sigma noise margin.
    /// Checks that the resolution can still separate every noise-free sum.
    pub fn for_system(
        resolution_bits: u8,
        clients: usize,
        bits: u8,
        max_device_amplitude: f64,
        noise_std: f64,
    ) -> Result<Self> {
        let needed = bits as u32 + (clients as f64).log2().ceil() as u32;
        if (resolution_bits as u32) < needed {
            return Err(Error::Domain(format!(
                "{resolution_bits}-bit ADC cannot resolve {clients} superposed {bits}-bit payloads"
            )));
        }
        Self::new(
            resolution_bits,
            clients as f64 * max_device_amplitude + 4.0 * noise_std,
        )
    }

    pub fn n_codes(&self) -> u64 {
        1u64 << self.resolution_bits
    }

    /// Analog width of one code.
    pub fn step(&self) -> f64 {
        2.0 * self.reference / (self.n_codes() - 1) as f64
    }

    pub fn code_value(&self, code: u32) -> f64 {
        -self.reference + code as f64 * self.step()
    }
}

/// Digital code with a saturation indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdcCode {
    pub code: u32,
    pub saturated: bool,
}

/// Sample one axis. Overrange inputs clamp to the rails and are flagged.
pub fn adc_sample_axis(sample: f64, adc: &AdcConfig) -> AdcCode {
    let top = (adc.n_codes() - 1) as f64;
    let pos = (sample + adc.reference) / adc.step();
    let saturated = pos < 0.0 || pos > top;
    AdcCode {
        code: pos.round().clamp(0.0, top) as u32,
        saturated,
    }
}

/// Sample both axes of a received point.
pub fn adc_sample(sample: (f64, f64), adc: &AdcConfig) -> (AdcCode, AdcCode) {
    (adc_sample_axis(sample.0, adc), adc_sample_axis(sample.1, adc))
}

/// Decoded aggregate estimate for the two coordinates of one symbol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedPair {
    pub i: f64,
    pub q: f64,
    /// True when either axis clipped at the ADC rails.
    pub saturated: bool,
}

/// Digital-domain recovery of the aggregate: map codes back to volts, divide
/// out the inversion target and the Rx scaling `1/(p K)`, and convert
/// amplitude units to gradient units through the shared grid step.
pub fn decode_aggregate(
    codes: (AdcCode, AdcCode),
    clients: usize,
    tx_prob: f64,
    scale: &QuantScale,
    adc: &AdcConfig,
    rho: f64,
) -> Result<DecodedPair> {
    if clients == 0 {
        return Err(Error::InvalidSpec("no clients".into()));
    }
    if !(tx_prob > 0.0 && tx_prob <= 1.0) {
        return Err(Error::Domain(format!(
            "transmission probability {tx_prob} outside (0, 1]"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::Domain("rho must be positive".into()));
    }
    // volts -> unit MASK amplitudes (selected elements arrive at
    // sqrt(rho) * step volts per amplitude unit), then amplitudes -> gradient
    // units through the shared grid, with the Rx scaling 1/(p K)
    let volts_per_amp = rho.sqrt() * scale.step();
    let amp_to_gradient = scale.step() / (tx_prob * clients as f64);
    let rescale = amp_to_gradient / volts_per_amp;
    Ok(DecodedPair {
        i: adc.code_value(codes.0.code) * rescale,
        q: adc.code_value(codes.1.code) * rescale,
        saturated: codes.0.saturated || codes.1.saturated,
    })
}

/// Full symbol-path aggregation of quantized payloads, the physical twin of
/// the statistical channel operator.
///
/// Every gradient element is gated by its own independent channel gain (the
/// two axes of a symbol carry different elements, so they fade
/// independently); selected elements arrive channel-inverted at
/// `sqrt(rho) * step` volts per amplitude unit. Odd dimensions pad the last
/// symbol with a silent quadrature axis. Optionally taps every received
/// constellation point into `dump`.
pub fn symbol_aggregate(
    payloads: &[QuantizedUpdate],
    cfg: &ChannelConfig,
    policy: &PowerPolicy,
    adc_resolution_bits: u8,
    stream_key: u64,
    mut dump: Option<&mut Vec<ConstellationPoint>>,
) -> Result<GradientVector> {
    cfg.validate()?;
    let first = payloads
        .first()
        .ok_or_else(|| Error::InvalidSpec("empty payload set".into()))?;
    let scale = first.scale;
    let dim = first.dim();
    if payloads
        .iter()
        .any(|p| p.dim() != dim || p.scale != scale)
    {
        return Err(Error::InvalidSpec(
            "payloads must share dimension and common scale".into(),
        ));
    }
    let clients = payloads.len();
    let bits = scale.bits();
    // volts per unit MASK amplitude after channel inversion
    let unit_volts = cfg.rho.sqrt() * scale.step();
    let noise_std = cfg.noise_var.sqrt();
    let adc = AdcConfig::for_system(
        adc_resolution_bits,
        clients,
        bits,
        unit_volts * mask_max_amplitude(bits),
        noise_std,
    )?;
    let exp = Exp::new(cfg.rate).map_err(|e| Error::Domain(e.to_string()))?;

    let mut out = Vec::with_capacity(dim);
    let n_symbols = dim.div_ceil(2);
    for sym in 0..n_symbols {
        let coord_i = 2 * sym;
        let coord_q = 2 * sym + 1;
        let mut rng = rng_from_key(child_key(stream_key, sym as u64));
        let mut volt_i = 0.0;
        let mut volt_q = 0.0;
        for payload in payloads {
            let gain_i = exp.sample(&mut rng);
            if gain_i >= policy.gain_threshold() {
                volt_i += unit_volts * mask_amplitude(payload.levels[coord_i], bits);
            }
            if coord_q < dim {
                let gain_q = exp.sample(&mut rng);
                if gain_q >= policy.gain_threshold() {
                    volt_q += unit_volts * mask_amplitude(payload.levels[coord_q], bits);
                }
            }
        }
        if noise_std > 0.0 {
            let noise = Normal::new(0.0, noise_std).unwrap();
            volt_i += noise.sample(&mut rng);
            volt_q += noise.sample(&mut rng);
        }
        if let Some(rows) = dump.as_deref_mut() {
            rows.push(ConstellationPoint {
                coord: coord_i,
                i: volt_i,
                q: volt_q,
            });
        }
        let codes = adc_sample((volt_i, volt_q), &adc);
        let decoded = decode_aggregate(codes, clients, policy.tx_prob(), &scale, &adc, cfg.rho)?;
        out.push(decoded.i);
        if coord_q < dim {
            out.push(decoded.q);
        }
    }
    Ok(GradientVector(out))
}

/// One received constellation sample (volts at the sampling instant). The
/// `coord` is the gradient element carried on the in-phase axis.
#[derive(Debug, Clone, Copy)]
pub struct ConstellationPoint {
    pub coord: usize,
    pub i: f64,
    pub q: f64,
}
