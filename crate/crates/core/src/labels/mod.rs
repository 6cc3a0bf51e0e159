//! Ground-truth labels: noise-free optimal beams and sine-space groups.

mod kmeans;

pub use kmeans::{assign_cluster, elbow_select_g, kmeans, ClusterLabel, ClusterModel};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelDataset, ChannelSample, Split};
use crate::codebook::{dft_sine, oversampled_codebook, Codebook, OVERSAMPLING};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("need at least {g} distinct points, got {distinct}")]
    TooFewDistinct { g: usize, distinct: usize },
    #[error("group count must be at least 1")]
    ZeroGroups,
    #[error("feature dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite feature")]
    NonFinite,
    #[error("elbow candidates must be ascending with at least 3 entries, got {0:?}")]
    Candidates(Vec<usize>),
    #[error("codebook does not match the channel: {0}")]
    Codebook(String),
    #[error("bad label sidecar: {0}")]
    Sidecar(String),
}

/// Optimal transmit beam `i_star` and, for MIMO, receive beam `j_star`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamLabel {
    pub i_star: usize,
    pub j_star: Option<usize>,
}

impl BeamLabel {
    pub fn onehot_t(&self, n_t: usize) -> Vec<f64> {
        onehot(self.i_star, n_t)
    }

    pub fn onehot_r(&self, n_r: usize) -> Option<Vec<f64>> {
        self.j_star.map(|j| onehot(j, n_r))
    }
}

fn onehot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_book(sample: &ChannelSample, tx: &Codebook, rx: Option<&Codebook>) -> Result<(), LabelError> {
    if tx.array_size() != sample.h.m_t() {
        return Err(LabelError::Codebook(format!(
            "transmit beams have {} elements, channel has {}",
            tx.array_size(),
            sample.h.m_t()
        )));
    }
    match rx {
        Some(rx) if rx.array_size() != sample.h.m_r() => Err(LabelError::Codebook(format!(
            "receive beams have {} elements, channel has {}",
            rx.array_size(),
            sample.h.m_r()
        ))),
        None if sample.is_mimo() => Err(LabelError::Codebook("MIMO channel needs a receive codebook".into())),
        _ => Ok(()),
    }
}

fn best_pair(sample: &ChannelSample, tx: &Codebook, rx: Option<&Codebook>) -> (usize, Option<usize>) {
    let h = &sample.h;
    match rx {
        None => {
            let i = argmax_first(tx.beams().iter().map(|v| h.herm_mul(v.weights())[0].norm_sqr()));
            (i, None)
        }
        Some(rx) => {
            let mut best = (0, 0, f64::NEG_INFINITY);
            for (i, v) in tx.beams().iter().enumerate() {
                let x = h.herm_mul(v.weights());
                for (j, w) in rx.beams().iter().enumerate() {
                    let g = w
                        .weights()
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| a.conj() * b)
                        .sum::<Complex64>()
                        .norm_sqr();
                    if g > best.2 {
                        best = (i, j, g);
                    }
                }
            }
            (best.0, Some(best.1))
        }
    }
}

/// Noise-free exhaustive search over the DFT codebook(s); ties go to the
/// lowest index (transmit first, then receive).
pub fn optimal_beam(sample: &ChannelSample, tx: &Codebook, rx: Option<&Codebook>) -> Result<BeamLabel, LabelError> {
    check_book(sample, tx, rx)?;
    let (i_star, j_star) = best_pair(sample, tx, rx);
    Ok(BeamLabel { i_star, j_star })
}

/// Sine coordinates of the noise-free best beam in the oversampled DFT
/// codebooks `u` (transmit) and `t` (receive): `[sin a]` or `[sin a, sin b]`.
pub fn beam_direction(sample: &ChannelSample, u: &Codebook, t: Option<&Codebook>) -> Result<Vec<f64>, LabelError> {
    check_book(sample, u, t)?;
    let (i, j) = best_pair(sample, u, t);
    let mut out = vec![dft_sine(i, u.len())];
    if let (Some(j), Some(t)) = (j, t) {
        out.push(dft_sine(j, t.len()));
    }
    Ok(out)
}

/// Labels for a whole dataset, with the groups fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLabels {
    pub beams: Vec<BeamLabel>,
    pub features: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
    pub model: ClusterModel,
}

impl DatasetLabels {
    pub fn g(&self) -> usize {
        self.model.g()
    }
}

/// How the number of groups is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupCount {
    Fixed(usize),
    Elbow(Vec<usize>),
}

/// Default elbow candidates.
pub fn default_candidates() -> Vec<usize> {
    (2..=8).collect()
}

/// Computes beam labels, directions and cluster groups for every sample.
pub fn label_dataset(ds: &ChannelDataset, groups: &GroupCount, seed: u64) -> Result<DatasetLabels, LabelError> {
    let cfg = &ds.config;
    let d = cfg.spacing_over_lambda();
    let book =
        |m: usize, n: usize| crate::codebook::dft_codebook(m, n, d).map_err(|e| LabelError::Codebook(e.to_string()));
    let over = |m: usize, n: usize| oversampled_codebook(m, n, d).map_err(|e| LabelError::Codebook(e.to_string()));
    let tx = book(cfg.m_t(), cfg.n_t())?;
    let u = over(cfg.m_t(), OVERSAMPLING * cfg.n_t())?;
    let (rx, t) = if cfg.is_mimo() {
        (
            Some(book(cfg.m_r(), cfg.n_r())?),
            Some(over(cfg.m_r(), OVERSAMPLING * cfg.n_r())?),
        )
    } else {
        (None, None)
    };
    let per_sample = ds
        .samples
        .par_iter()
        .map(|s| Ok((optimal_beam(s, &tx, rx.as_ref())?, beam_direction(s, &u, t.as_ref())?)))
        .collect::<Result<Vec<_>, LabelError>>()?;
    let (beams, features): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();

    let (model, groups) = fit_groups(&features, &ds.indices(Split::Train), groups, seed)?;
    Ok(DatasetLabels {
        beams,
        features,
        groups,
        model,
    })
}

/// Fits groups on `features[train]` and assigns every feature vector.
pub fn fit_groups(
    features: &[Vec<f64>],
    train: &[usize],
    groups: &GroupCount,
    seed: u64,
) -> Result<(ClusterModel, Vec<usize>), LabelError> {
    let train: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
    let mut rng = stream(seed, Purpose::Cluster);
    let g = match groups {
        GroupCount::Fixed(g) => *g,
        GroupCount::Elbow(c) => elbow_select_g(&train, c, &mut rng)?,
    };
    let model = kmeans(&train, g, &mut rng, 100)?;
    let assigned = features
        .iter()
        .map(|f| assign_cluster(&model, f).map(|l| l.group))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((model, assigned))
}

/// One row of the label sidecar file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRow {
    pub sample_id: u64,
    pub group: usize,
    pub i_star: usize,
    pub j_star: Option<usize>,
}

impl DatasetLabels {
    pub fn sidecar_rows(&self, ds: &ChannelDataset) -> Vec<SidecarRow> {
        ds.samples
            .iter()
            .zip(&self.beams)
            .zip(&self.groups)
            .map(|((s, b), &group)| SidecarRow {
                sample_id: s.sample_id,
                group,
                i_star: b.i_star,
                j_star: b.j_star,
            })
            .collect()
    }
}

/// Comma-separated `sample_id,group,i_star,j_star` with a header line;
/// `j_star` is empty for MISO.
pub fn write_sidecar(rows: &[SidecarRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["sample_id", "group", "i_star", "j_star"])
        .expect("in-memory csv");
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

pub fn parse_sidecar(text: &str) -> Result<Vec<SidecarRow>, LabelError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| LabelError::Sidecar(e.to_string()))?;
    if headers != vec!["sample_id", "group", "i_star", "j_star"] {
        return Err(LabelError::Sidecar(format!("unexpected header {headers:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| LabelError::Sidecar(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_dataset, synth_from_paths, PathInfo, Scenario, SystemConfig};
    use crate::codebook::dft_codebook;

    fn single_path(cfg: &SystemConfig, sin_aod: f64, sin_aoa: f64) -> ChannelSample {
        let p = PathInfo {
            aod: sin_aod.asin(),
            aoa: sin_aoa.asin(),
            gain: Complex64::new(1e-5, 0.0),
        };
        synth_from_paths(cfg, &[p], 0).unwrap()
    }

    #[test]
    fn on_grid_paths_give_matching_indices() {
        let cfg = SystemConfig::desk_miso();
        let tx = dft_codebook(16, 32, 0.5).unwrap();
        let s = single_path(&cfg, dft_sine(21, 32), 0.0);
        assert_eq!(
            optimal_beam(&s, &tx, None).unwrap(),
            BeamLabel {
                i_star: 21,
                j_star: None
            }
        );

        let cfg = SystemConfig::desk_mimo();
        let rx = dft_codebook(4, 8, 0.5).unwrap();
        let s = single_path(&cfg, dft_sine(5, 32), dft_sine(3, 8));
        assert_eq!(
            optimal_beam(&s, &tx, Some(&rx)).unwrap(),
            BeamLabel {
                i_star: 5,
                j_star: Some(3)
            }
        );
        assert!(optimal_beam(&s, &tx, None).is_err());
    }

    #[test]
    fn direction_on_grid_and_quantization() {
        let cfg = SystemConfig::desk_miso();
        let u = oversampled_codebook(16, 128, 0.5).unwrap();
        assert_eq!(
            beam_direction(&single_path(&cfg, 0.0, 0.0), &u, None).unwrap(),
            vec![0.0]
        );
        let half = 1.0 / 128.0;
        for k in 0..200 {
            // stay clear of the +1 edge, which aliases onto the -1 grid point
            let s = -1.0 + (2.0 - 4.0 / 128.0) * (k as f64 + 0.37) / 200.0;
            let dir = beam_direction(&single_path(&cfg, s, 0.0), &u, None).unwrap();
            assert!((dir[0] - s).abs() <= half + 1e-12, "sin {s} -> {}", dir[0]);
        }
        let cfg = SystemConfig::desk_mimo();
        let t = oversampled_codebook(4, 32, 0.5).unwrap();
        for k in 0..50 {
            let a = -0.9 + 1.8 * k as f64 / 49.0;
            let b = 0.8 - 1.5 * k as f64 / 49.0;
            let dir = beam_direction(&single_path(&cfg, a, b), &u, Some(&t)).unwrap();
            assert!((dir[0] - a).abs() <= half + 1e-12);
            assert!((dir[1] - b).abs() <= 1.0 / 32.0 + 1e-12);
        }
    }

    #[test]
    fn dataset_labels_are_deterministic_and_consistent() {
        let cfg = SystemConfig::desk_miso();
        let ds = gen_dataset(&cfg, 3, &Scenario::default(), 300).unwrap();
        let a = label_dataset(&ds, &GroupCount::Fixed(4), 1).unwrap();
        let b = label_dataset(&ds, &GroupCount::Fixed(4), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.g(), 4);
        assert!(a.features.iter().flatten().all(|x| (-1.0..=1.0).contains(x)));
        let train = ds.indices(Split::Train);
        for (k, &i) in train.iter().enumerate() {
            assert_eq!(a.groups[i], a.model.assignments[k]);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let rows = vec![
            SidecarRow {
                sample_id: 7,
                group: 1,
                i_star: 30,
                j_star: None,
            },
            SidecarRow {
                sample_id: 9,
                group: 0,
                i_star: 2,
                j_star: Some(5),
            },
        ];
        let text = write_sidecar(&rows);
        assert!(text.starts_with("sample_id,group,i_star,j_star\n7,1,30,\n"));
        assert_eq!(parse_sidecar(&text).unwrap(), rows);
        assert!(parse_sidecar("a,b\n1,2\n").is_err());
        assert!(parse_sidecar("sample_id,group,i_star,j_star\nx,1,2,\n").is_err());
    }

    #[test]
    fn onehots() {
        let l = BeamLabel {
            i_star: 2,
            j_star: Some(0),
        };
        assert_eq!(l.onehot_t(4), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(l.onehot_r(2), Some(vec![1.0, 0.0]));
    }
}
