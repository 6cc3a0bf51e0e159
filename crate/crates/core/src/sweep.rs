//! Noisy probing sweeps, power feedback and link quality.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{ChannelMatrix, SystemConfig};
use crate::codebook::Beam;

#[derive(Debug, Error, PartialEq)]
pub enum SweepError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("noise variance is zero; SNR is undefined")]
    ZeroNoise,
    #[error("negative SNR {0}")]
    NegativeSnr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Coarse,
    Fine,
}

/// Received powers reported back after a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub z: Vec<f64>,
    pub noise_seed: u64,
    pub tier: Tier,
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), SweepError> {
    if expected == got {
        Ok(())
    } else {
        Err(SweepError::Dimension { what, expected, got })
    }
}

/// `n` draws of `CN(0, sigma2)`.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma2: f64) -> Vec<Complex64> {
    let sd = (sigma2 / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// `sqrt(rho) h^H v s + n` for each beam, given the noise values.
pub fn rx_signal_miso_with_noise(
    h: &[Complex64],
    beams: &[Beam],
    cfg: &SystemConfig,
    noise: &[Complex64],
) -> Result<Vec<Complex64>, SweepError> {
    check("noise", beams.len(), noise.len())?;
    let amp = cfg.tx_power().sqrt() * cfg.pilot();
    beams
        .iter()
        .zip(noise)
        .map(|(v, n)| {
            check("beam length", h.len(), v.len())?;
            let hv: Complex64 = h.iter().zip(v.weights()).map(|(a, b)| a.conj() * b).sum();
            Ok(amp * hv + n)
        })
        .collect()
}

/// MISO sweep with fresh `CN(0, sigma_n^2)` noise per beam.
pub fn rx_signal_miso<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    beams: &[Beam],
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<Complex64>, SweepError> {
    check("receive antennas", 1, h.m_r())?;
    check("transmit antennas", cfg.m_t(), h.m_t())?;
    let noise = draw_noise(rng, beams.len(), cfg.noise_variance());
    rx_signal_miso_with_noise(h.column(0), beams, cfg, &noise)
}

/// `sqrt(rho) w^H H^H v s + w^H n` per pair, given one receive-noise vector
/// (length `m_r`) per pair.
pub fn rx_signal_mimo_with_noise(
    h: &ChannelMatrix,
    pairs: &[(&Beam, &Beam)],
    cfg: &SystemConfig,
    noise: &[Vec<Complex64>],
) -> Result<Vec<Complex64>, SweepError> {
    check("noise", pairs.len(), noise.len())?;
    let amp = cfg.tx_power().sqrt() * cfg.pilot();
    pairs
        .iter()
        .zip(noise)
        .map(|((v, w), n)| {
            check("transmit beam length", h.m_t(), v.len())?;
            check("receive beam length", h.m_r(), w.len())?;
            check("noise length", h.m_r(), n.len())?;
            let x = h.herm_mul(v.weights());
            let sig: Complex64 = w.weights().iter().zip(&x).map(|(a, b)| a.conj() * b).sum();
            let nz: Complex64 = w.weights().iter().zip(n).map(|(a, b)| a.conj() * b).sum();
            Ok(amp * sig + nz)
        })
        .collect()
}

/// MIMO sweep over beam pairs with fresh `CN(0, sigma_n^2 I)` per pair.
pub fn rx_signal_mimo<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    pairs: &[(&Beam, &Beam)],
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<Complex64>, SweepError> {
    let noise: Vec<Vec<Complex64>> = (0..pairs.len())
        .map(|_| draw_noise(rng, h.m_r(), cfg.noise_variance()))
        .collect();
    rx_signal_mimo_with_noise(h, pairs, cfg, &noise)
}

/// `z_i = |y_i|^2`.
pub fn power_feedback(y: &[Complex64], tier: Tier) -> Measurement {
    Measurement {
        z: y.iter().map(|c| c.norm_sqr()).collect(),
        noise_seed: 0,
        tier,
    }
}

/// Noise-free `|w^H H^H v|^2`; `w = None` for MISO.
pub fn beam_gain(h: &ChannelMatrix, v: &Beam, w: Option<&Beam>) -> Result<f64, SweepError> {
    check("transmit beam length", h.m_t(), v.len())?;
    let x = h.herm_mul(v.weights());
    match w {
        None => {
            check("receive antennas", 1, h.m_r())?;
            Ok(x[0].norm_sqr())
        }
        Some(w) => {
            check("receive beam length", h.m_r(), w.len())?;
            Ok(w.weights()
                .iter()
                .zip(&x)
                .map(|(a, b)| a.conj() * b)
                .sum::<Complex64>()
                .norm_sqr())
        }
    }
}

/// Linear SNR `rho |w^H H^H v|^2 / sigma_n^2`.
pub fn snr(h: &ChannelMatrix, v: &Beam, w: Option<&Beam>, cfg: &SystemConfig) -> Result<f64, SweepError> {
    let sigma2 = cfg.noise_variance();
    if sigma2 == 0.0 {
        return Err(SweepError::ZeroNoise);
    }
    Ok(cfg.tx_power() * beam_gain(h, v, w)? / sigma2)
}

/// `log2(1 + snr)` in bits/s/Hz.
pub fn spectral_efficiency(snr: f64) -> Result<f64, SweepError> {
    if snr < 0.0 {
        return Err(SweepError::NegativeSnr(snr));
    }
    Ok((1.0 + snr).log2())
}
