//! Compression ratio and token rate of a codec configuration, in exact
//! rational arithmetic.

use num_rational::Ratio;
use serde::Serialize;

use crate::codec::CodecConfig;

/// Bits per latent value.
pub const FLOAT_BITS: u64 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateInfo {
    pub f_s: u64,
    /// Latent frame rate `f_s / hop`.
    pub f_z: Ratio<u64>,
    pub d_z: u64,
    pub b_float: u64,
    /// `f_s ceil(log2 f_s) / (f_z d_z b_float)`.
    pub cr: Ratio<u64>,
    pub tps: Ratio<u64>,
}

/// `ceil(log2 n)` for `n >= 1`.
pub fn ceil_log2(n: u64) -> u64 {
    assert!(n > 0, "log2 of zero");
    (64 - (n - 1).leading_zeros()) as u64
}

pub fn rate_info(cfg: &CodecConfig) -> RateInfo {
    let f_s = cfg.sample_rate as u64;
    let f_z = Ratio::new(f_s, cfg.hop() as u64);
    let d_z = cfg.latent_dim as u64;
    let raw = Ratio::from_integer(f_s * ceil_log2(f_s));
    let latent = f_z * Ratio::from_integer(d_z * FLOAT_BITS);
    RateInfo { f_s, f_z, d_z, b_float: FLOAT_BITS, cr: raw / latent, tps: f_z }
}

fn to_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Serializable form: exact fractions as strings next to their values.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub f_s: u64,
    pub f_z: f64,
    pub d_z: u64,
    pub b_float: u64,
    pub cr: f64,
    pub cr_exact: String,
    pub tps: f64,
    pub tps_exact: String,
}

impl RateInfo {
    pub fn report(&self) -> RateReport {
        RateReport {
            f_s: self.f_s,
            f_z: to_f64(&self.f_z),
            d_z: self.d_z,
            b_float: self.b_float,
            cr: to_f64(&self.cr),
            cr_exact: self.cr.to_string(),
            tps: to_f64(&self.tps),
            tps_exact: self.tps.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        assert_eq!([1, 2, 3, 4, 5, 8000, 8192, 8193, 48000].map(ceil_log2), [0, 1, 2, 2, 3, 13, 13, 14, 16]);
    }

    #[test]
    fn paper_and_toy_presets() {
        let p = rate_info(&CodecConfig::paper());
        assert_eq!((p.cr, p.tps), (Ratio::new(15, 2), Ratio::from_integer(25)));
        let t = rate_info(&CodecConfig::toy());
        // 8000 * 13 / (125 * 8 * 32) = 104000 / 32000
        assert_eq!(t.cr, Ratio::new(104_000, 32_000));
        assert_eq!(t.report().cr, 3.25);
    }

    #[test]
    fn doubling_latent_dim_halves_ratio() {
        for mut cfg in [CodecConfig::toy(), CodecConfig::paper()] {
            let a = rate_info(&cfg).cr;
            cfg.latent_dim *= 2;
            assert_eq!(rate_info(&cfg).cr * Ratio::from_integer(2), a);
        }
    }
}
