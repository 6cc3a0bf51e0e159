use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::ChannelError;

/// Array sizes, codebook sizes and the link budget.
///
/// The transmit power and noise variance are converted to watts once at
/// construction. A missing noise PSD means a noise-free link (`sigma2 = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSystemConfig", into = "RawSystemConfig")]
pub struct SystemConfig {
    raw: RawSystemConfig,
    tx_power_w: f64,
    noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystemConfig {
    m_t: usize,
    m_r: usize,
    n_t: usize,
    n_r: usize,
    #[serde(default = "half")]
    spacing_over_lambda: f64,
    tx_power_dbm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_psd_dbm_hz: Option<f64>,
    bandwidth_hz: f64,
}

fn half() -> f64 {
    0.5
}

fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl TryFrom<RawSystemConfig> for SystemConfig {
    type Error = ChannelError;

    fn try_from(raw: RawSystemConfig) -> Result<Self, Self::Error> {
        let bad = |msg: String| Err(ChannelError::InvalidConfig(msg));
        if raw.m_t < 2 {
            return bad(format!("m_t must be >= 2, got {}", raw.m_t));
        }
        if raw.m_r < 1 {
            return bad("m_r must be >= 1".into());
        }
        if raw.n_t < raw.m_t {
            return bad(format!("n_t ({}) must be >= m_t ({})", raw.n_t, raw.m_t));
        }
        if raw.m_r > 1 && raw.n_r < raw.m_r {
            return bad(format!("n_r ({}) must be >= m_r ({})", raw.n_r, raw.m_r));
        }
        if !(raw.spacing_over_lambda > 0.0 && raw.spacing_over_lambda.is_finite()) {
            return bad("spacing_over_lambda must be positive".into());
        }
        if !raw.tx_power_dbm.is_finite() {
            return bad("tx_power_dbm must be finite".into());
        }
        if !(raw.bandwidth_hz > 0.0 && raw.bandwidth_hz.is_finite()) {
            return bad("bandwidth_hz must be positive".into());
        }
        let noise_var = match raw.noise_psd_dbm_hz {
            None => 0.0,
            Some(psd) if psd.is_finite() => dbm_to_watts(psd + 10.0 * raw.bandwidth_hz.log10()),
            Some(_) => return bad("noise_psd_dbm_hz must be finite".into()),
        };
        Ok(Self {
            tx_power_w: dbm_to_watts(raw.tx_power_dbm),
            noise_var,
            raw,
        })
    }
}

impl From<SystemConfig> for RawSystemConfig {
    fn from(c: SystemConfig) -> Self {
        c.raw
    }
}

impl SystemConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m_t: usize,
        m_r: usize,
        n_t: usize,
        n_r: usize,
        spacing_over_lambda: f64,
        tx_power_dbm: f64,
        noise_psd_dbm_hz: Option<f64>,
        bandwidth_hz: f64,
    ) -> Result<Self, ChannelError> {
        RawSystemConfig {
            m_t,
            m_r,
            n_t,
            n_r: if m_r == 1 { n_r.max(1) } else { n_r },
            spacing_over_lambda,
            tx_power_dbm,
            noise_psd_dbm_hz,
            bandwidth_hz,
        }
        .try_into()
    }

    /// MISO link: 64 antennas, 128-beam DFT book, 10 dBm, -161 dBm/Hz over 100 MHz.
    pub fn full_miso() -> Self {
        Self::new(64, 1, 128, 1, 0.5, 10.0, Some(-161.0), 100e6).expect("valid preset")
    }

    /// MIMO link: 64x16 antennas, 128/32-beam books, 5 dBm.
    pub fn full_mimo() -> Self {
        Self::new(64, 16, 128, 32, 0.5, 5.0, Some(-161.0), 100e6).expect("valid preset")
    }

    /// Small MISO link for quick runs: 16 antennas, 32 beams.
    pub fn desk_miso() -> Self {
        Self::new(16, 1, 32, 1, 0.5, 10.0, Some(-161.0), 100e6).expect("valid preset")
    }

    /// Small MIMO link for quick runs: 16x4 antennas, 32/8 beams.
    pub fn desk_mimo() -> Self {
        Self::new(16, 4, 32, 8, 0.5, 5.0, Some(-161.0), 100e6).expect("valid preset")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full-miso" => Some(Self::full_miso()),
            "full-mimo" => Some(Self::full_mimo()),
            "desk-miso" => Some(Self::desk_miso()),
            "desk-mimo" => Some(Self::desk_mimo()),
            _ => None,
        }
    }

    /// Same link with a different noise PSD (`None` = noise-free).
    pub fn with_noise_psd(&self, noise_psd_dbm_hz: Option<f64>) -> Result<Self, ChannelError> {
        let mut raw = self.raw.clone();
        raw.noise_psd_dbm_hz = noise_psd_dbm_hz;
        raw.try_into()
    }

    pub fn with_tx_power_dbm(&self, dbm: f64) -> Result<Self, ChannelError> {
        let mut raw = self.raw.clone();
        raw.tx_power_dbm = dbm;
        raw.try_into()
    }

    pub fn m_t(&self) -> usize {
        self.raw.m_t
    }
    pub fn m_r(&self) -> usize {
        self.raw.m_r
    }
    pub fn n_t(&self) -> usize {
        self.raw.n_t
    }
    pub fn n_r(&self) -> usize {
        self.raw.n_r
    }
    pub fn spacing_over_lambda(&self) -> f64 {
        self.raw.spacing_over_lambda
    }
    pub fn tx_power_dbm(&self) -> f64 {
        self.raw.tx_power_dbm
    }
    pub fn noise_psd_dbm_hz(&self) -> Option<f64> {
        self.raw.noise_psd_dbm_hz
    }
    pub fn bandwidth_hz(&self) -> f64 {
        self.raw.bandwidth_hz
    }

    pub fn is_mimo(&self) -> bool {
        self.raw.m_r > 1
    }

    /// Transmit power rho in watts.
    pub fn tx_power(&self) -> f64 {
        self.tx_power_w
    }

    /// Noise variance sigma_n^2 in watts.
    pub fn noise_variance(&self) -> f64 {
        self.noise_var
    }

    /// The pilot symbol `s`.
    pub fn pilot(&self) -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.raw).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ChannelError> {
        toml::from_str(text).map_err(|e| ChannelError::InvalidConfig(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_budget_in_watts() {
        let c = SystemConfig::full_miso();
        // 10 dBm = 10 mW
        assert!((c.tx_power() - 0.01).abs() < 1e-15);
        // -161 dBm/Hz + 80 dB-Hz = -81 dBm
        let expected = 10f64.powf((-81.0 - 30.0) / 10.0);
        assert!((c.noise_variance() / expected - 1.0).abs() < 1e-12);
        assert_eq!(c.with_noise_psd(None).unwrap().noise_variance(), 0.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(SystemConfig::new(1, 1, 4, 1, 0.5, 0.0, None, 1e6).is_err());
        assert!(SystemConfig::new(8, 1, 4, 1, 0.5, 0.0, None, 1e6).is_err());
        assert!(SystemConfig::new(8, 4, 8, 2, 0.5, 0.0, None, 1e6).is_err());
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let c = SystemConfig::desk_mimo().with_noise_psd(Some(-163.3)).unwrap();
        let back = SystemConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert!(SystemConfig::from_toml("m_t = 1\nm_r=1\nn_t=4\nn_r=1\ntx_power_dbm=0\nbandwidth_hz=1").is_err());
    }
}
