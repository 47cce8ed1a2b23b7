//! Trainable-interval uniform fake quantization.
//!
//! A value `x` with interval `I` maps to `floor(clamp(x / I, qmin, qmax) + 1/2) * I`.
//! Weights use a signed grid `[-2^(k-1), 2^(k-1) - 1]`, activations an
//! unsigned grid `[0, 2^k - 1]`. Rounding is half-up for every sign, so
//! `-1.5` rounds to `-1` and `-2.5` rounds to `-2`.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Smallest interval value the optimizer projection and the min-max
/// initializer will ever produce.
pub const MIN_INTERVAL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signedness {
    Signed,
    Unsigned,
}

/// Bit-width and grid of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub signedness: Signedness,
    pub enabled: bool,
}

impl QuantSpec {
    pub fn new(bits: u32, signedness: Signedness) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(contract_err!("bit-width {} outside 2..=16", bits));
        }
        Ok(QuantSpec {
            bits,
            signedness,
            enabled: true,
        })
    }

    pub fn signed(bits: u32) -> Result<Self> {
        Self::new(bits, Signedness::Signed)
    }

    pub fn unsigned(bits: u32) -> Result<Self> {
        Self::new(bits, Signedness::Unsigned)
    }

    pub fn disabled(self) -> Self {
        QuantSpec {
            enabled: false,
            ..self
        }
    }

    pub fn qmin(&self) -> i64 {
        match self.signedness {
            Signedness::Signed => -(1i64 << (self.bits - 1)),
            Signedness::Unsigned => 0,
        }
    }

    pub fn qmax(&self) -> i64 {
        match self.signedness {
            Signedness::Signed => (1i64 << (self.bits - 1)) - 1,
            Signedness::Unsigned => (1i64 << self.bits) - 1,
        }
    }

    /// Number of grid points.
    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }
}

/// A strictly positive quantization step.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Interval(f64);

impl Interval {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Interval(value))
        } else {
            Err(contract_err!("interval must be positive and finite, got {}", value))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// How the input gradient is passed through the rounding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteMode {
    /// Gradient 1 inside the clamp range, 0 where the input saturates.
    #[default]
    Clipped,
    /// Gradient 1 everywhere.
    Identity,
}

pub fn clamp(x: f64, min: f64, max: f64) -> Result<f64> {
    if min > max {
        return Err(contract_err!("clamp bounds inverted: {} > {}", min, max));
    }
    Ok(clamp_unchecked(x, min, max))
}

#[inline]
fn clamp_unchecked(x: f64, min: f64, max: f64) -> f64 {
    if x > max {
        max
    } else if x < min {
        min
    } else {
        x
    }
}

/// Integer grid level for one element, as `f64`.
#[inline]
fn level(u: f64, qmin: f64, qmax: f64) -> f64 {
    (clamp_unchecked(u, qmin, qmax) + 0.5).floor()
}

/// Quantize-dequantize every element of `x`. A disabled spec is the identity.
pub fn quantize_dequantize(x: &Tensor, interval: Interval, spec: &QuantSpec) -> Tensor {
    if !spec.enabled {
        return x.clone();
    }
    let i = interval.get();
    let (qmin, qmax) = (spec.qmin() as f64, spec.qmax() as f64);
    x.map(|v| level(v / i, qmin, qmax) * i)
}

/// Like [`quantize_dequantize`] but validates a raw interval value first.
pub fn quantize_dequantize_checked(x: &Tensor, interval: f64, spec: &QuantSpec) -> Result<Tensor> {
    Ok(quantize_dequantize(x, Interval::new(interval)?, spec))
}

/// Straight-through backward rule for [`quantize_dequantize`].
///
/// With `u = x / I` and `q` the rounded level, the input gradient is the
/// upstream gradient (gated to the clamp range under [`SteMode::Clipped`]),
/// and the interval gradient sums `upstream * g` where `g = q - u` inside the
/// range and `g = qmin` / `g = qmax` when the input saturates low / high.
pub fn quantize_backward(
    upstream: &Tensor,
    x: &Tensor,
    interval: Interval,
    spec: &QuantSpec,
    ste: SteMode,
) -> Result<(Tensor, f64)> {
    if upstream.shape() != x.shape() {
        return Err(contract_err!(
            "upstream shape {:?} differs from forward input {:?}",
            upstream.shape(),
            x.shape()
        ));
    }
    if !spec.enabled {
        return Ok((upstream.clone(), 0.0));
    }
    let i = interval.get();
    let (qmin, qmax) = (spec.qmin() as f64, spec.qmax() as f64);
    let mut grad_x = Vec::with_capacity(x.numel());
    let mut grad_i = 0.0;
    for (&g, &v) in upstream.data().iter().zip(x.data()) {
        let u = v / i;
        let (pass, slope) = if u < qmin {
            (false, qmin)
        } else if u > qmax {
            (false, qmax)
        } else {
            (true, level(u, qmin, qmax) - u)
        };
        grad_x.push(match ste {
            SteMode::Identity => g,
            SteMode::Clipped if pass => g,
            SteMode::Clipped => 0.0,
        });
        grad_i += g * slope;
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), grad_x), grad_i))
}

/// Interval covering the observed `[min, max]` range without saturating
/// the extreme values where the grid allows it.
///
/// Signed grids use `max(|min| / |qmin|, max / qmax)`; unsigned grids use
/// `max / qmax`. Non-positive results fall back to [`MIN_INTERVAL`].
pub fn interval_from_range(min: f64, max: f64, spec: &QuantSpec) -> f64 {
    let qmax = spec.qmax() as f64;
    let raw = match spec.signedness {
        Signedness::Signed => {
            let qmin = spec.qmin() as f64;
            (min.abs() / qmin.abs()).max(max / qmax)
        }
        Signedness::Unsigned => max / qmax,
    };
    if raw > 0.0 && raw.is_finite() {
        raw
    } else {
        MIN_INTERVAL
    }
}

/// Min-max interval for a tensor of observed values.
pub fn minmax_interval(values: &Tensor, spec: &QuantSpec) -> Result<f64> {
    if values.numel() == 0 {
        return Err(contract_err!("min-max initialization on an empty tensor"));
    }
    let (lo, hi) = values.min_max();
    Ok(interval_from_range(lo, hi, spec))
}
