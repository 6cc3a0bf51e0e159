//! Channel realizations, link configuration and datasets.

mod config;
mod format;
mod scenario;

pub use config::SystemConfig;
pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset, FormatError};
pub use format::{FORMAT_VERSION, HEADER_LEN, MAGIC};
pub use scenario::{gen_dataset, split_counts, synth_channel, synth_from_paths, Scenario, UserCluster};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("scenario must have at least one path")]
    NoPaths,
    #[error("empty angle range [{lo}, {hi}] for {what}")]
    EmptyAngleRange { what: &'static str, lo: f64, hi: f64 },
    #[error("channel has no nonzero entry")]
    ZeroChannel,
    #[error("channel contains non-finite entries")]
    NonFinite,
    #[error("dataset needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid system configuration: {0}")]
    InvalidConfig(String),
}

/// Complex `m_t x m_r` channel, stored column-major (one column per receive
/// antenna). For MISO links `m_r == 1` and the matrix is the vector `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    m_t: usize,
    m_r: usize,
    data: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn zeros(m_t: usize, m_r: usize) -> Self {
        Self {
            m_t,
            m_r,
            data: vec![Complex64::new(0.0, 0.0); m_t * m_r],
        }
    }

    /// Builds from column-major data. Panics if the length is not `m_t * m_r`.
    pub fn from_column_major(m_t: usize, m_r: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), m_t * m_r, "channel data length mismatch");
        Self { m_t, m_r, data }
    }

    pub fn from_vector(h: Vec<Complex64>) -> Self {
        let m_t = h.len();
        Self::from_column_major(m_t, 1, h)
    }

    pub fn m_t(&self) -> usize {
        self.m_t
    }

    pub fn m_r(&self) -> usize {
        self.m_r
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Column `r` (the channel seen by receive antenna `r`).
    pub fn column(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.m_t..(r + 1) * self.m_t]
    }

    pub fn get(&self, t: usize, r: usize) -> Complex64 {
        self.data[r * self.m_t + t]
    }

    /// `H^H v`, a length-`m_r` vector.
    pub fn herm_mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(v.len(), self.m_t);
        (0..self.m_r)
            .map(|r| self.column(r).iter().zip(v).map(|(h, x)| h.conj() * x).sum())
            .collect()
    }

    /// `H w`, a length-`m_t` vector.
    pub fn mul(&self, w: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(w.len(), self.m_r);
        let mut out = vec![Complex64::new(0.0, 0.0); self.m_t];
        for (r, wr) in w.iter().enumerate() {
            for (o, h) in out.iter_mut().zip(self.column(r)) {
                *o += h * wr;
            }
        }
        out
    }

    /// Squared Frobenius norm.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// Rounds every entry to 32-bit precision (the on-disk precision).
    pub fn quantize_f32(&mut self) {
        for c in &mut self.data {
            c.re = c.re as f32 as f64;
            c.im = c.im as f32 as f64;
        }
    }
}

/// One propagation path used to synthesize a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathInfo {
    /// Angle of departure at the transmit array, radians.
    pub aod: f64,
    /// Angle of arrival at the receive array, radians.
    pub aoa: f64,
    pub gain: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h: ChannelMatrix,
    /// Paths used for synthesis; empty for ingested data.
    pub paths: Vec<PathInfo>,
    pub sample_id: u64,
}

impl ChannelSample {
    /// Validates the finite/nonzero invariants.
    pub fn new(h: ChannelMatrix, paths: Vec<PathInfo>, sample_id: u64) -> Result<Self, ChannelError> {
        if !h.is_finite() {
            return Err(ChannelError::NonFinite);
        }
        if h.is_zero() {
            return Err(ChannelError::ZeroChannel);
        }
        Ok(Self { h, paths, sample_id })
    }

    pub fn is_mimo(&self) -> bool {
        self.h.m_r() > 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub config: SystemConfig,
    pub samples: Vec<ChannelSample>,
    pub splits: Vec<Split>,
}

impl ChannelDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Positions (not sample ids) of the samples tagged `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&ChannelSample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    /// Keeps only the first `n` samples (split tags travel with them).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            config: self.config.clone(),
            samples: self.samples[..n].to_vec(),
            splits: self.splits[..n].to_vec(),
        }
    }
}

/// Unnormalized ULA response `[1, e^{j 2pi d/lambda sin(angle)}, ...]`.
pub fn array_response(m: usize, spacing_over_lambda: f64, angle: f64) -> Vec<Complex64> {
    let phase = 2.0 * std::f64::consts::PI * spacing_over_lambda * angle.sin();
    (0..m).map(|k| Complex64::from_polar(1.0, phase * k as f64)).collect()
}
