//! Sinusoidal encodings of scalars.

use serde::{Deserialize, Serialize};

/// Wavelength range of one encoded quantity, in the quantity's own unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub max_wavelength: f64,
    pub min_wavelength: f64,
}

impl Band {
    pub const fn new(max_wavelength: f64, min_wavelength: f64) -> Self {
        Self { max_wavelength, min_wavelength }
    }

    /// Angular frequency of component `k` of `k_total`, from `2π/λ_max`
    /// geometrically up to `2π/λ_min`.
    pub fn omega(&self, k: usize, k_total: usize) -> f64 {
        let base = std::f64::consts::TAU / self.max_wavelength;
        if k_total <= 1 {
            return base;
        }
        let ratio = self.max_wavelength / self.min_wavelength;
        base * ratio.powf(k as f64 / (k_total - 1) as f64)
    }
}

/// Appends `[sin(ω_k v), cos(ω_k v)]` for `k = 0..K` to `out`.
pub fn sincos_into(v: f64, k_total: usize, band: Band, out: &mut Vec<f32>) {
    for k in 0..k_total {
        let (s, c) = (band.omega(k, k_total) * v).sin_cos();
        out.push(s as f32);
        out.push(c as f32);
    }
}

/// Encodes each value with `2K` components, concatenated in input order.
pub fn sincos_encode(values: &[f64], k_total: usize, band: Band) -> Vec<f32> {
    let mut out = Vec::with_capacity(values.len() * 2 * k_total);
    for &v in values {
        sincos_into(v, k_total, band, &mut out);
    }
    out
}
