use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    array_response, ChannelDataset, ChannelError, ChannelMatrix, ChannelSample, PathInfo, Split, SystemConfig,
};
use crate::rng::{self, Purpose};

/// Angular hotspot of user positions, in degrees at the transmit array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCluster {
    pub center_deg: f64,
    pub spread_deg: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Geometric multipath scenario.
///
/// The dominant path of each user departs toward one of the `clusters`
/// (uniform over `aod_range_deg` when there are none). With probability
/// `los_probability` that path is line-of-sight; otherwise it carries the
/// NLoS attenuation as well. Remaining paths have uniform departure angles
/// and NLoS attenuation. Base gains are uniform in dB over `path_gain_db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Inclusive range of the number of paths `L`.
    pub paths: [usize; 2],
    pub los_probability: f64,
    #[serde(default)]
    pub clusters: Vec<UserCluster>,
    pub aod_range_deg: [f64; 2],
    pub aoa_range_deg: [f64; 2],
    /// Standard deviation of the LoS arrival angle around the departure angle.
    pub los_aoa_spread_deg: f64,
    pub path_gain_db: [f64; 2],
    pub nlos_attenuation_db: [f64; 2],
}

impl Default for Scenario {
    fn default() -> Self {
        Self::urban_clusters()
    }
}

impl Scenario {
    /// Four street-like user hotspots, mostly line-of-sight.
    pub fn urban_clusters() -> Self {
        Self {
            paths: [1, 3],
            los_probability: 0.85,
            clusters: vec![
                UserCluster {
                    center_deg: -48.0,
                    spread_deg: 7.0,
                    weight: 1.0,
                },
                UserCluster {
                    center_deg: -16.0,
                    spread_deg: 6.0,
                    weight: 1.0,
                },
                UserCluster {
                    center_deg: 12.0,
                    spread_deg: 6.0,
                    weight: 1.0,
                },
                UserCluster {
                    center_deg: 42.0,
                    spread_deg: 7.0,
                    weight: 1.0,
                },
            ],
            aod_range_deg: [-80.0, 80.0],
            aoa_range_deg: [-80.0, 80.0],
            los_aoa_spread_deg: 8.0,
            path_gain_db: [-96.0, -82.0],
            nlos_attenuation_db: [6.0, 15.0],
        }
    }

    /// A single line-of-sight path with unit gain toward uniformly drawn angles.
    pub fn single_los_unit_gain() -> Self {
        Self {
            paths: [1, 1],
            los_probability: 1.0,
            clusters: vec![],
            aod_range_deg: [-80.0, 80.0],
            aoa_range_deg: [-80.0, 80.0],
            los_aoa_spread_deg: 0.0,
            path_gain_db: [0.0, 0.0],
            nlos_attenuation_db: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.paths[0] == 0 || self.paths[1] == 0 {
            return Err(ChannelError::NoPaths);
        }
        check_range("path count", self.paths[0] as f64, self.paths[1] as f64)?;
        check_range("aod", self.aod_range_deg[0], self.aod_range_deg[1])?;
        check_range("aoa", self.aoa_range_deg[0], self.aoa_range_deg[1])?;
        check_range("path gain", self.path_gain_db[0], self.path_gain_db[1])?;
        check_range(
            "nlos attenuation",
            self.nlos_attenuation_db[0],
            self.nlos_attenuation_db[1],
        )?;
        if !(0.0..=1.0).contains(&self.los_probability) {
            return Err(ChannelError::InvalidScenario(
                "los_probability must lie in [0, 1]".into(),
            ));
        }
        if self.los_aoa_spread_deg.is_nan() || self.los_aoa_spread_deg < 0.0 {
            return Err(ChannelError::InvalidScenario("los_aoa_spread_deg must be >= 0".into()));
        }
        for c in &self.clusters {
            if !(c.spread_deg >= 0.0 && c.weight > 0.0 && c.center_deg.is_finite()) {
                return Err(ChannelError::InvalidScenario(format!("bad cluster {c:?}")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ChannelError> {
        let s: Self = toml::from_str(text).map_err(|e| ChannelError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

fn check_range(what: &'static str, lo: f64, hi: f64) -> Result<(), ChannelError> {
    if lo.is_finite() && hi.is_finite() && lo <= hi {
        Ok(())
    } else {
        Err(ChannelError::EmptyAngleRange { what, lo, hi })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn clamp_deg(angle: f64, range: [f64; 2]) -> f64 {
    angle.clamp(range[0], range[1])
}

/// `h = sum_l g_l a_t(aod_l) a_r(aoa_l)^H` with unit-modulus array responses.
pub fn synth_from_paths(cfg: &SystemConfig, paths: &[PathInfo], sample_id: u64) -> Result<ChannelSample, ChannelError> {
    if paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    let (m_t, m_r) = (cfg.m_t(), cfg.m_r());
    let d = cfg.spacing_over_lambda();
    let mut h = ChannelMatrix::zeros(m_t, m_r);
    for p in paths {
        let a_t = array_response(m_t, d, p.aod);
        let a_r = array_response(m_r, d, p.aoa);
        for (r, ar) in a_r.iter().enumerate() {
            let coef = p.gain * ar.conj();
            for (t, at) in a_t.iter().enumerate() {
                h.as_mut_slice()[r * m_t + t] += coef * at;
            }
        }
    }
    ChannelSample::new(h, paths.to_vec(), sample_id)
}

/// Draws one multipath realization.
pub fn synth_channel<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    rng: &mut R,
    scenario: &Scenario,
    sample_id: u64,
) -> Result<ChannelSample, ChannelError> {
    scenario.validate()?;
    let n_paths = rng.random_range(scenario.paths[0]..=scenario.paths[1]);
    let los = rng.random_bool(scenario.los_probability);
    let base_db = uniform(rng, scenario.path_gain_db);

    let dominant_deg = if scenario.clusters.is_empty() {
        uniform(rng, scenario.aod_range_deg)
    } else {
        let total: f64 = scenario.clusters.iter().map(|c| c.weight).sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = &scenario.clusters[scenario.clusters.len() - 1];
        for c in &scenario.clusters {
            if pick < c.weight {
                chosen = c;
                break;
            }
            pick -= c.weight;
        }
        let jitter: f64 = StandardNormal.sample(rng);
        clamp_deg(chosen.center_deg + chosen.spread_deg * jitter, scenario.aod_range_deg)
    };

    let mut paths = Vec::with_capacity(n_paths);
    for l in 0..n_paths {
        let (aod_deg, aoa_deg, atten_db) = if l == 0 {
            let atten = if los {
                0.0
            } else {
                uniform(rng, scenario.nlos_attenuation_db)
            };
            let aoa = if los {
                let spread = Normal::new(0.0, scenario.los_aoa_spread_deg).expect("spread validated");
                clamp_deg(dominant_deg + spread.sample(rng), scenario.aoa_range_deg)
            } else {
                uniform(rng, scenario.aoa_range_deg)
            };
            (dominant_deg, aoa, atten)
        } else {
            (
                uniform(rng, scenario.aod_range_deg),
                uniform(rng, scenario.aoa_range_deg),
                uniform(rng, scenario.nlos_attenuation_db),
            )
        };
        let amplitude = 10f64.powf((base_db - atten_db) / 20.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        paths.push(PathInfo {
            aod: aod_deg.to_radians(),
            aoa: aoa_deg.to_radians(),
            gain: Complex64::from_polar(amplitude, phase),
        });
    }
    synth_from_paths(cfg, &paths, sample_id)
}

/// Split sizes `(train, val, test)` for a 60/20/20 split: validation and
/// test take the floor, training takes the remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n / 5;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Minimum dataset size accepted by [`gen_dataset`].
pub const MIN_SAMPLES: usize = 10;

/// Draws `n_samples` independent channels and tags a seeded 60/20/20 split.
///
/// Sample `i` is drawn from its own stream derived from `(seed, i)`, so the
/// result does not depend on generation order. Entries are rounded to the
/// 32-bit on-disk precision so that a save/load round trip is exact.
pub fn gen_dataset(
    cfg: &SystemConfig,
    seed: u64,
    scenario: &Scenario,
    n_samples: usize,
) -> Result<ChannelDataset, ChannelError> {
    if n_samples < MIN_SAMPLES {
        return Err(ChannelError::TooFewSamples {
            min: MIN_SAMPLES,
            got: n_samples,
        });
    }
    scenario.validate()?;
    let samples = (0..n_samples as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = rng::sub_stream(seed, Purpose::Channel, 0, id);
            let mut s = synth_channel(cfg, &mut rng, scenario, id)?;
            s.h.quantize_f32();
            if s.h.is_zero() {
                return Err(ChannelError::ZeroChannel);
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (n_train, n_val, _) = split_counts(n_samples);
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split));
    let mut splits = vec![Split::Test; n_samples];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(ChannelDataset {
        config: cfg.clone(),
        samples,
        splits,
    })
}
