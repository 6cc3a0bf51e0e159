//! Steering vectors, DFT codebooks and hierarchical search codebooks.

mod hierarchy;
mod wide;

pub use hierarchy::{
    build_binary, build_two_tier, ideal_sector_binary, ideal_sector_two_tier, sector_bounds, sector_of_leaf,
    HierarchicalCodebook,
};
pub use wide::{pattern_gain, wide_beam_synthesize, WideBeamOptions};

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodebookError {
    #[error("array size must be at least 1")]
    EmptyArray,
    #[error("codebook size {n} is smaller than the array size {m}")]
    UnderSampled { m: usize, n: usize },
    #[error("empty sector [{lo}, {hi}]")]
    EmptySector { lo: f64, hi: f64 },
    #[error("need 1 <= n_wide <= n_t, got n_wide={n_wide}, n_t={n_t}")]
    BadWideCount { n_wide: usize, n_t: usize },
    #[error("binary search needs a power-of-two codebook size >= 2, got {0}")]
    NotPowerOfTwo(usize),
    #[error("codebook must contain at least one beam")]
    EmptyCodebook,
    #[error("beams of different lengths in one codebook")]
    RaggedCodebook,
    #[error("bad codebook text: {0}")]
    Parse(String),
}

/// Unit-norm beamforming vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Beam {
    weights: Vec<Complex64>,
}

impl Beam {
    /// Constant-modulus beam `(1/sqrt(M)) e^{j phi_k}`.
    pub fn from_phases(phases: &[f64]) -> Self {
        let scale = 1.0 / (phases.len() as f64).sqrt();
        Self {
            weights: phases.iter().map(|&p| Complex64::from_polar(scale, p)).collect(),
        }
    }

    /// Arbitrary weights rescaled to unit norm. Used for test fixtures and
    /// omnidirectional-style references; not constant-modulus in general.
    pub fn normalized(weights: Vec<Complex64>) -> Self {
        let norm = weights.iter().map(|w| w.norm_sqr()).sum::<f64>().sqrt();
        Self {
            weights: weights.into_iter().map(|w| w / norm).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }

    pub fn phases(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.arg()).collect()
    }

    /// Largest `| |w_k| sqrt(M) - 1 |` over the entries.
    pub fn modulus_deviation(&self) -> f64 {
        let s = (self.len() as f64).sqrt();
        self.weights
            .iter()
            .map(|w| (w.norm() * s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_sqr()).sum()
    }

    /// `self^H other`.
    pub fn inner(&self, other: &Beam) -> Complex64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| a.conj() * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookKind {
    Dft,
    Oversampled,
    Wide,
    Probing,
    /// Non-constant-modulus sector beams used as a search test fixture.
    IdealSector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    kind: CodebookKind,
    beams: Vec<Beam>,
}

impl Codebook {
    pub fn new(kind: CodebookKind, beams: Vec<Beam>) -> Result<Self, CodebookError> {
        let first = beams.first().ok_or(CodebookError::EmptyCodebook)?;
        if first.is_empty() {
            return Err(CodebookError::EmptyArray);
        }
        if beams.iter().any(|b| b.len() != first.len()) {
            return Err(CodebookError::RaggedCodebook);
        }
        Ok(Self { kind, beams })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    /// Number of antenna elements.
    pub fn array_size(&self) -> usize {
        self.beams[0].len()
    }

    pub fn beams(&self) -> &[Beam] {
        &self.beams
    }

    pub fn beam(&self, i: usize) -> &Beam {
        &self.beams[i]
    }

    /// Exports as TOML (`kind` plus per-beam `[re, im]` weight lists).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("codebook serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CodebookError> {
        let raw: Codebook = toml::from_str(text).map_err(|e| CodebookError::Parse(e.to_string()))?;
        Codebook::new(raw.kind, raw.beams)
    }
}

/// `(1/sqrt(m)) [1, e^{j omega}, ..., e^{j (m-1) omega}]`.
pub fn steering_vector(m: usize, omega: f64) -> Result<Beam, CodebookError> {
    if m == 0 {
        return Err(CodebookError::EmptyArray);
    }
    let phases: Vec<f64> = (0..m).map(|k| k as f64 * omega).collect();
    Ok(Beam::from_phases(&phases))
}

/// Steering sine of beam `i` (0-based) in an `n`-beam DFT codebook.
pub fn dft_sine(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 - n as f64) / n as f64
}

/// Phase increment of beam `i` (0-based): `2 pi (d/lambda) (2i - n)/n`.
pub fn dft_omega(i: usize, n: usize, spacing_over_lambda: f64) -> f64 {
    2.0 * PI * spacing_over_lambda * dft_sine(i, n)
}

/// `n`-beam DFT codebook for an `m`-element array.
pub fn dft_codebook(m: usize, n: usize, spacing_over_lambda: f64) -> Result<Codebook, CodebookError> {
    if m == 0 {
        return Err(CodebookError::EmptyArray);
    }
    if n < m {
        return Err(CodebookError::UnderSampled { m, n });
    }
    let beams = (0..n)
        .map(|i| steering_vector(m, dft_omega(i, n, spacing_over_lambda)))
        .collect::<Result<Vec<_>, _>>()?;
    Codebook::new(CodebookKind::Dft, beams)
}

/// Default oversampling factor of the direction-finding codebook.
pub const OVERSAMPLING: usize = 4;

/// DFT-style codebook with `n_u` beams used to locate beam directions.
pub fn oversampled_codebook(m: usize, n_u: usize, spacing_over_lambda: f64) -> Result<Codebook, CodebookError> {
    let mut book = dft_codebook(m, n_u, spacing_over_lambda)?;
    book.kind = CodebookKind::Oversampled;
    Ok(book)
}
