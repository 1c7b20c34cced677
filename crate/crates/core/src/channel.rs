//! UMi street-canyon link budget, Shannon rate and upload energy.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::payload_bits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Per-device bandwidth `B` in Hz.
    pub bandwidth: f64,
    /// Carrier frequency in GHz.
    pub carrier_ghz: f64,
    /// Noise power spectral density `N0` in W/Hz.
    pub noise_psd: f64,
    pub shadow_sigma_los_db: f64,
    pub shadow_sigma_nlos_db: f64,
    pub los_probability: f64,
    /// Maximum transmit power in W.
    pub p_max: f64,
}

impl Default for ChannelParams {
    /// 1 MHz, 3.5 GHz, -174 dBm/Hz, 4 / 8.2 dB shadowing, 0.2 W.
    fn default() -> Self {
        Self {
            bandwidth: 1.0e6,
            carrier_ghz: 3.5,
            noise_psd: dbm_per_hz_to_watts(-174.0),
            shadow_sigma_los_db: 4.0,
            shadow_sigma_nlos_db: 8.2,
            los_probability: 0.5,
            p_max: 0.2,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bandwidth", self.bandwidth),
            ("carrier frequency", self.carrier_ghz),
            ("noise PSD", self.noise_psd),
            ("p_max", self.p_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.shadow_sigma_los_db >= 0.0 && self.shadow_sigma_nlos_db >= 0.0) {
            return Err(Error::param("shadowing standard deviations must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.los_probability) {
            return Err(Error::param(format!(
                "LOS probability must lie in [0, 1], got {}",
                self.los_probability
            )));
        }
        Ok(())
    }

    /// Noise power over the device bandwidth, `B * N0`.
    pub fn noise_power(&self) -> f64 {
        self.bandwidth * self.noise_psd
    }
}

pub fn dbm_per_hz_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub distance: f64,
    pub is_los: bool,
    pub shadowing_db: f64,
    /// Linear power gain `|h|^2`.
    pub gain: f64,
}

/// Path loss in dB; `d` in meters, `beta` in GHz.
pub fn pathloss_db(d: f64, beta: f64, los: bool) -> f64 {
    let slope = if los { 21.0 } else { 31.9 };
    32.4 + slope * d.log10() + 20.0 * beta.log10()
}

pub fn sample_link<R: Rng + ?Sized>(params: &ChannelParams, d: f64, rng: &mut R) -> Result<LinkState> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::param(format!("distance must be positive, got {d}")));
    }
    let is_los = rng.random::<f64>() < params.los_probability;
    let sigma = if is_los {
        params.shadow_sigma_los_db
    } else {
        params.shadow_sigma_nlos_db
    };
    let shadowing_db = if sigma > 0.0 {
        Normal::new(0.0, sigma)
            .map_err(|e| Error::param(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(link_with(d, params.carrier_ghz, is_los, shadowing_db))
}

/// Deterministic link for a given LOS state and shadowing draw.
pub fn link_with(d: f64, beta: f64, is_los: bool, shadowing_db: f64) -> LinkState {
    let loss = pathloss_db(d, beta, is_los) + shadowing_db;
    LinkState {
        distance: d,
        is_los,
        shadowing_db,
        gain: 10f64.powf(-loss / 10.0),
    }
}

/// Shannon rate `B log2(1 + p |h|^2 / (B N0))` in bits/s.
pub fn transmission_rate(p: f64, link: &LinkState, params: &ChannelParams) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    params.bandwidth * (p * link.gain / params.noise_power()).ln_1p() / std::f64::consts::LN_2
}

/// Energy to push a top-k payload at power `p` and rate `rate`.
pub fn upload_energy(p: f64, k: usize, s: usize, u: u32, rate: f64) -> Result<f64> {
    if k == 0 {
        return Ok(0.0);
    }
    energy_for_bits(p, payload_bits(k, s, u), rate)
}

/// Energy for an arbitrary payload: `p * bits / rate`.
pub fn energy_for_bits(p: f64, bits: f64, rate: f64) -> Result<f64> {
    if bits == 0.0 {
        return Ok(0.0);
    }
    if !(rate > 0.0) {
        return Err(Error::InfeasibleTransmission(format!("{bits} bits at zero rate")));
    }
    Ok(p * bits / rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pathloss_examples() {
        assert!((pathloss_db(1.0, 1.0, true) - 32.4).abs() < 1e-12);
        let los = pathloss_db(100.0, 3.5, true);
        assert!((los - 85.2814).abs() < 1e-3, "{los}");
        let nlos = pathloss_db(100.0, 3.5, false);
        assert!((nlos - los - 21.8).abs() < 1e-9);
    }

    #[test]
    fn pathloss_matches_independent_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let d: f64 = rng.random_range(1.0..2000.0);
            let b: f64 = rng.random_range(0.5..100.0);
            // 20 log10(b) == 10 log10(b^2), 21 log10 d == 2.1 * 10 log10 d
            let los = 32.4 + 2.1 * 10.0 * d.log10() + 10.0 * (b * b).log10();
            let nlos = 32.4 + 3.19 * 10.0 * d.log10() + 10.0 * (b * b).log10();
            assert!((pathloss_db(d, b, true) - los).abs() < 1e-9);
            assert!((pathloss_db(d, b, false) - nlos).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_link_without_shadowing() {
        let params = ChannelParams {
            shadow_sigma_los_db: 0.0,
            los_probability: 1.0,
            carrier_ghz: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let link = sample_link(&params, 1.0, &mut rng).unwrap();
        assert!(link.is_los);
        assert!((link.gain / 10f64.powf(-3.24) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shadowing_is_zero_mean() {
        let params = ChannelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let mut sum_los = 0.0;
        let mut n_los = 0usize;
        let mut sum_nlos = 0.0;
        for _ in 0..n {
            let l = sample_link(&params, 50.0, &mut rng).unwrap();
            if l.is_los {
                sum_los += l.shadowing_db;
                n_los += 1;
            } else {
                sum_nlos += l.shadowing_db;
            }
        }
        let mean_los = sum_los / n_los as f64;
        let mean_nlos = sum_nlos / (n - n_los) as f64;
        assert!(mean_los.abs() < 0.03 * 4.0, "{mean_los}");
        assert!(mean_nlos.abs() < 0.03 * 8.2, "{mean_nlos}");
    }

    #[test]
    fn gain_decreases_with_distance() {
        let mut prev = f64::INFINITY;
        for d in [1.0, 5.0, 20.0, 100.0, 500.0] {
            let g = link_with(d, 3.5, false, 1.5).gain;
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn rate_examples() {
        let params = ChannelParams::default();
        let unit = LinkState {
            distance: 1.0,
            is_los: true,
            shadowing_db: 0.0,
            gain: 1.0,
        };
        assert_eq!(transmission_rate(0.0, &unit, &params), 0.0);
        let p_unit = params.noise_power();
        assert!((transmission_rate(p_unit, &unit, &params) - params.bandwidth).abs() < 1e-6);
        let a = transmission_rate(3.0 * p_unit, &unit, &params);
        assert!((a - 2.0e6).abs() < 1e-6);
    }

    #[test]
    fn rate_is_increasing_and_concave() {
        let params = ChannelParams::default();
        let link = link_with(80.0, 3.5, true, 0.0);
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.001).collect();
        let rates: Vec<f64> = grid
            .iter()
            .map(|&p| transmission_rate(p, &link, &params))
            .collect();
        for w in rates.windows(3) {
            assert!(w[1] > w[0]);
            assert!(w[2] - w[1] <= w[1] - w[0] + 1e-9);
        }
    }

    #[test]
    fn energy_examples() {
        assert!((upload_energy(0.2, 100, 1 << 20, 32, 5200.0).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(upload_energy(0.2, 0, 1 << 20, 32, 0.0).unwrap(), 0.0);
        let e1 = upload_energy(0.1, 50, 1000, 32, 800.0).unwrap();
        let e2 = upload_energy(0.2, 50, 1000, 32, 800.0).unwrap();
        assert_eq!(2.0 * e1, e2);
        assert!(matches!(
            upload_energy(0.2, 1, 1000, 32, 0.0),
            Err(Error::InfeasibleTransmission(_))
        ));
    }
}
