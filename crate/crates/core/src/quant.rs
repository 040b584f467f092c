//! Fixed-point parameter codec and frozen-prefix intervals.
//!
//! A parameter `theta` living in the range `[-s, s]` is represented on the
//! `n`-bit grid `s * k / 2^n` with integer code `k` in `[-(2^n - 1), 2^n - 1]`.
//! Rounding is half-away-from-zero after clamping `theta / s` to
//! `±(1 - 2^-(n+1))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantization settings shared by every layer of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    /// Total bits `N` per parameter.
    #[serde(default = "QuantConfig::default_total_bits")]
    pub total_bits: u32,
    /// Range constant `C`; a layer with fan-in `n` lives in `[-C/√n, C/√n]`.
    #[serde(default = "QuantConfig::default_range_constant")]
    pub range_constant: f64,
    /// Train through the quantizer with a straight-through estimator.
    #[serde(default)]
    pub ste_enabled: bool,
}

impl QuantConfig {
    fn default_total_bits() -> u32 {
        20
    }

    fn default_range_constant() -> f64 {
        6.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=62).contains(&self.total_bits) {
            return Err(Error::config("quant.total_bits", "must be in [2, 62]"));
        }
        if !(self.range_constant.is_finite() && self.range_constant > 0.0) {
            return Err(Error::config("quant.range_constant", "must be positive"));
        }
        Ok(())
    }

    /// Scale `s = C / √fan_in` of a dense layer.
    pub fn layer_scale(&self, fan_in: usize) -> f64 {
        self.range_constant / (fan_in as f64).sqrt()
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            total_bits: Self::default_total_bits(),
            range_constant: Self::default_range_constant(),
            ste_enabled: false,
        }
    }
}

#[inline]
fn pow2(n: u32) -> f64 {
    (n as f64).exp2()
}

/// Integer grid code of `theta` at `n_bits`.
#[inline]
pub fn quantize_code(theta: f64, n_bits: u32, scale: f64) -> i64 {
    let levels = pow2(n_bits);
    let limit = 1.0 - 0.5 / levels;
    let u = (theta / scale).clamp(-limit, limit);
    let max_code = (1i64 << n_bits) - 1;
    ((u * levels).round() as i64).clamp(-max_code, max_code)
}

#[inline]
fn code_value(code: i64, n_bits: u32, scale: f64) -> f64 {
    scale * (code as f64 / pow2(n_bits))
}

/// `n_bits` quantization of `theta` within the range `±scale`.
///
/// Zero bits map every input to `0`.
pub fn quantize(theta: f64, n_bits: u32, scale: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("parameter"));
    }
    Ok(quantize_unchecked(theta, n_bits, scale))
}

#[inline]
pub(crate) fn quantize_unchecked(theta: f64, n_bits: u32, scale: f64) -> f64 {
    code_value(quantize_code(theta, n_bits, scale), n_bits, scale)
}

/// The set of values whose leading `frozen_bits` may no longer change.
///
/// The interval is the rounding basin of `anchor` on the `frozen_bits` grid:
/// every `theta` inside it quantizes back to exactly `anchor`. Its ends are
/// resolved to the last representable `f64` on each side, so the
/// half-open/open ends of the basin are honoured without a separate
/// shrink margin. With zero frozen bits it is the whole range `[-s, s]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenInterval {
    anchor: f64,
    frozen_bits: u32,
    scale: f64,
    lower: f64,
    upper: f64,
}

impl FrozenInterval {
    /// Builds the interval around an existing grid point.
    pub fn new(anchor: f64, frozen_bits: u32, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config("scale", "must be positive"));
        }
        if frozen_bits > 62 {
            return Err(Error::config("frozen_bits", "must be at most 62"));
        }
        if !anchor.is_finite() {
            return Err(Error::NonFinite("anchor"));
        }
        let code = quantize_code(anchor, frozen_bits, scale);
        if code_value(code, frozen_bits, scale) != anchor {
            return Err(Error::config(
                "anchor",
                format!("{anchor} is not on the {frozen_bits}-bit grid"),
            ));
        }
        let (lower, upper) = basin(code, frozen_bits, scale);
        Ok(FrozenInterval {
            anchor,
            frozen_bits,
            scale,
            lower,
            upper,
        })
    }

    /// Freezes the leading `frozen_bits` of `theta`: the anchor is
    /// `quantize(theta, frozen_bits, scale)`.
    pub fn around(theta: f64, frozen_bits: u32, scale: f64) -> Result<Self> {
        let anchor = quantize(theta, frozen_bits, scale)?;
        Self::new(anchor, frozen_bits, scale)
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn frozen_bits(&self) -> u32 {
        self.frozen_bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Closed float bounds `[lower, upper]` of the interval.
    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Nominal half-width `s·2^-(S+1)` of the basin.
    pub fn radius(&self) -> f64 {
        self.scale * 0.5 / pow2(self.frozen_bits)
    }
}

/// Exact float extent of the rounding basin of `code`, intersected with
/// the range `[-scale, scale]`.
fn basin(code: i64, n_bits: u32, scale: f64) -> (f64, f64) {
    let max_code = (1i64 << n_bits) - 1;
    let step = scale / pow2(n_bits);
    let lower = if code == -max_code {
        -scale
    } else {
        let mut x = step * (code as f64 - 0.5);
        while quantize_code(x, n_bits, scale) != code {
            x = x.next_up();
        }
        while quantize_code(x.next_down(), n_bits, scale) == code {
            x = x.next_down();
        }
        x
    };
    let upper = if code == max_code {
        scale
    } else {
        let mut x = step * (code as f64 + 0.5);
        while quantize_code(x, n_bits, scale) != code {
            x = x.next_down();
        }
        while quantize_code(x.next_up(), n_bits, scale) == code {
            x = x.next_up();
        }
        x
    };
    (lower, upper)
}

/// Clips `theta` into `interval`.
pub fn clip_frozen(theta: f64, interval: &FrozenInterval) -> f64 {
    theta.clamp(interval.lower, interval.upper)
}

/// Shannon entropy in bits; `0·log 0` counts as zero.
pub fn discrete_entropy(pmf: &[f64]) -> Result<f64> {
    if let Some(p) = pmf.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidPmf(format!("negative or non-finite entry {p}")));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPmf(format!("sums to {total}")));
    }
    Ok(pmf.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum())
}

fn normal_upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Probability that `N(0, σ²)` falls in `[a, b]`, computed from whichever
/// tail keeps the subtraction well conditioned.
fn normal_mass(a: f64, b: f64, sigma: f64) -> f64 {
    let (za, zb) = (a / sigma, b / sigma);
    if za >= 0.0 {
        normal_upper_tail(za) - normal_upper_tail(zb)
    } else if zb <= 0.0 {
        normal_upper_tail(-zb) - normal_upper_tail(-za)
    } else {
        1.0 - normal_upper_tail(zb) - normal_upper_tail(-za)
    }
}

/// Entropy in bits of `N(0, σ²)` binned into the `2^N - 1` cells of width
/// `2^-(N-1)` centered at `i / 2^(N-1) - 1`.
pub fn gaussian_bin_entropy(sigma: f64, n_bits: u32) -> Result<f64> {
    check_lemma_domain(sigma, n_bits)?;
    let width = 1.0 / pow2(n_bits - 1);
    let bins = (1u64 << n_bits) - 1;
    let mut h = 0.0;
    for i in 1..=bins {
        let center = i as f64 * width - 1.0;
        let p = normal_mass(center - 0.5 * width, center + 0.5 * width, sigma);
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    Ok(h)
}

fn check_lemma_domain(sigma: f64, n_bits: u32) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    if !(8..=24).contains(&n_bits) {
        return Err(Error::config("n_bits", "must be in [8, 24]"));
    }
    let edge = 1.0 - 1.0 / pow2(n_bits);
    if 2.0 * normal_upper_tail(edge / sigma) >= 1e-12 {
        return Err(Error::SupportEscapesRange);
    }
    Ok(())
}

/// Differential entropy of `N(0, σ²)` in nats.
pub fn gaussian_differential_entropy(sigma: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln()
}

/// Gap between the binned entropy of a Gaussian and the continuous
/// approximation `h/ln 2 + N - 1`, in bits.
pub fn lemma1_gap(sigma: f64, n_bits: u32) -> Result<f64> {
    let discrete = gaussian_bin_entropy(sigma, n_bits)?;
    let predicted = gaussian_differential_entropy(sigma) / std::f64::consts::LN_2 + n_bits as f64 - 1.0;
    Ok((discrete - predicted).abs())
}
