//! Classical searches and learned baselines, all evaluated with the same
//! paired noise streams as the hierarchical networks.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelDataset, ChannelMatrix, ChannelSample, Split, SystemConfig};
use crate::codebook::{
    build_binary, build_two_tier, dft_codebook, sector_bounds, wide_beam_synthesize, Beam, Codebook,
    HierarchicalCodebook, WideBeamOptions,
};
use crate::hban::{
    argmax, batch_noise, new_prober, score_picks, sweep_powers, CurvePoint, EvalResult, HbanModel, HbanShape, Heads,
    LabeledSplit, Link, TrainConfig, TrainReport, VAL_TRIAL,
};
use crate::labels::{fit_groups, BeamLabel, DatasetLabels, GroupCount};
use crate::neural::{power_backward, Adam, InputScaling, Param, Parameters, Prober, Tensor};
use crate::rng::{noise_stream, sub_stream, Purpose, Rng};
use crate::sweep::{draw_noise, rx_signal_mimo, rx_signal_miso};
use crate::{Error, Result};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("{0} needs a MIMO link")]
    NeedsMimo(&'static str),
    #[error("{0} needs a MISO link")]
    NeedsMiso(&'static str),
    #[error("codebook does not match the link: {0}")]
    Mismatch(String),
    #[error("model is not trained")]
    Untrained,
}

/// Closed-form measurement counts.
pub mod counts {
    fn log2(n: usize) -> usize {
        n.trailing_zeros() as usize
    }

    fn child(n: usize, n_wide: usize) -> usize {
        n.div_ceil(n_wide)
    }

    pub fn hban(n1: usize, n2: usize) -> usize {
        n1 + n2
    }

    pub fn exhaustive(n_t: usize, n_r: usize) -> usize {
        n_t * n_r
    }

    pub fn binary_miso(n_t: usize) -> usize {
        2 * log2(n_t)
    }

    /// Joint 4-pair tiers over the shorter tree, then 2 per remaining tier.
    pub fn binary_mimo(n_t: usize, n_r: usize) -> usize {
        let (a, b) = (log2(n_t), log2(n_r));
        4 * a.min(b) + 2 * a.abs_diff(b)
    }

    /// Singleton child groups are not swept.
    pub fn two_tier(n_t: usize, n_wide: usize) -> usize {
        let c = child(n_t, n_wide);
        n_wide + if c > 1 { c } else { 0 }
    }

    pub fn two_tier_joint(n_t: usize, n_r: usize, nw_t: usize, nw_r: usize) -> usize {
        let c = child(n_t, nw_t) * child(n_r, nw_r);
        nw_t * nw_r + if c > 1 { c } else { 0 }
    }

    pub fn two_tier_hybrid(n_t: usize, n_r: usize, nw_t: usize, nw_r: usize) -> usize {
        let side = |c: usize| if c > 1 { c } else { 0 };
        nw_t * nw_r + side(child(n_t, nw_t)) + side(child(n_r, nw_r))
    }
}

/// Outcome of one classical search.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub tx: usize,
    pub rx: Option<usize>,
    /// Scheduled measurement count of the method.
    pub sweep_count: usize,
    /// Measured powers in sweep order.
    pub measurements: Vec<f64>,
}

/// Which classical search to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SearchKind {
    Exhaustive,
    Binary,
    TwoTier { n_wide: usize },
    TwoTierJoint { n_wide_t: usize, n_wide_r: usize },
    TwoTierHybrid { n_wide_t: usize, n_wide_r: usize },
}

/// A search together with its codebooks.
#[derive(Debug, Clone, PartialEq)]
pub enum Search {
    Exhaustive {
        tx: Codebook,
        rx: Option<Codebook>,
    },
    Binary {
        tx: HierarchicalCodebook,
        rx: Option<HierarchicalCodebook>,
    },
    TwoTier {
        tx: HierarchicalCodebook,
    },
    TwoTierJoint {
        tx: HierarchicalCodebook,
        rx: HierarchicalCodebook,
    },
    TwoTierHybrid {
        tx: HierarchicalCodebook,
        rx: HierarchicalCodebook,
    },
}

impl Search {
    pub fn build(kind: &SearchKind, cfg: &SystemConfig, opts: &WideBeamOptions) -> Result<Self> {
        let d = cfg.spacing_over_lambda();
        let opts = WideBeamOptions {
            spacing_over_lambda: d,
            ..opts.clone()
        };
        Ok(match *kind {
            SearchKind::Exhaustive => Search::Exhaustive {
                tx: dft_codebook(cfg.m_t(), cfg.n_t(), d)?,
                rx: cfg
                    .is_mimo()
                    .then(|| dft_codebook(cfg.m_r(), cfg.n_r(), d))
                    .transpose()?,
            },
            SearchKind::Binary => Search::Binary {
                tx: build_binary(cfg.m_t(), cfg.n_t(), &opts)?,
                rx: cfg
                    .is_mimo()
                    .then(|| build_binary(cfg.m_r(), cfg.n_r(), &opts))
                    .transpose()?,
            },
            SearchKind::TwoTier { n_wide } => {
                if cfg.is_mimo() {
                    return Err(BaselineError::NeedsMiso("two-tier search").into());
                }
                Search::TwoTier {
                    tx: build_two_tier(cfg.m_t(), cfg.n_t(), n_wide, &opts)?,
                }
            }
            SearchKind::TwoTierJoint { n_wide_t, n_wide_r } | SearchKind::TwoTierHybrid { n_wide_t, n_wide_r } => {
                if !cfg.is_mimo() {
                    return Err(BaselineError::NeedsMimo("two-tier pair search").into());
                }
                let tx = build_two_tier(cfg.m_t(), cfg.n_t(), n_wide_t, &opts)?;
                let rx = build_two_tier(cfg.m_r(), cfg.n_r(), n_wide_r, &opts)?;
                if matches!(kind, SearchKind::TwoTierJoint { .. }) {
                    Search::TwoTierJoint { tx, rx }
                } else {
                    Search::TwoTierHybrid { tx, rx }
                }
            }
        })
    }

    /// Scheduled measurement count.
    pub fn sweep_count(&self) -> usize {
        let wide = |h: &HierarchicalCodebook| (h.leaf().len(), h.tier(0).len());
        match self {
            Search::Exhaustive { tx, rx } => counts::exhaustive(tx.len(), rx.as_ref().map_or(1, Codebook::len)),
            Search::Binary { tx, rx: None } => counts::binary_miso(tx.leaf().len()),
            Search::Binary { tx, rx: Some(rx) } => counts::binary_mimo(tx.leaf().len(), rx.leaf().len()),
            Search::TwoTier { tx } => {
                let (n, w) = wide(tx);
                counts::two_tier(n, w)
            }
            Search::TwoTierJoint { tx, rx } => {
                let ((nt, wt), (nr, wr)) = (wide(tx), wide(rx));
                counts::two_tier_joint(nt, nr, wt, wr)
            }
            Search::TwoTierHybrid { tx, rx } => {
                let ((nt, wt), (nr, wr)) = (wide(tx), wide(rx));
                counts::two_tier_hybrid(nt, nr, wt, wr)
            }
        }
    }

    pub fn run<R: rand::Rng + ?Sized>(
        &self,
        h: &ChannelMatrix,
        cfg: &SystemConfig,
        rng: &mut R,
    ) -> Result<BaselineResult> {
        let mut res = match self {
            Search::Exhaustive { tx, rx } => exhaustive_search(h, tx, rx.as_ref(), cfg, rng),
            Search::Binary { tx, rx } => binary_search(h, tx, rx.as_ref(), cfg, rng),
            Search::TwoTier { tx } => two_tier_search(h, tx, cfg, rng),
            Search::TwoTierJoint { tx, rx } => two_tier_joint(h, tx, rx, cfg, rng),
            Search::TwoTierHybrid { tx, rx } => two_tier_hybrid(h, tx, rx, cfg, rng),
        }?;
        res.sweep_count = self.sweep_count();
        Ok(res)
    }
}

/// Measures every `(tx, rx)` candidate; `rx` is ignored on MISO links.
struct Meter<'a, R: ?Sized> {
    h: &'a ChannelMatrix,
    cfg: &'a SystemConfig,
    rng: &'a mut R,
    powers: Vec<f64>,
}

impl<R: rand::Rng + ?Sized> Meter<'_, R> {
    fn sweep(&mut self, pairs: &[(&Beam, Option<&Beam>)]) -> Result<Vec<f64>> {
        let y = if self.cfg.is_mimo() {
            let p: Vec<(&Beam, &Beam)> = pairs
                .iter()
                .map(|(v, w)| {
                    w.map(|w| (*v, w))
                        .ok_or(BaselineError::Mismatch("missing receive beam".into()))
                })
                .collect::<Result<_, _>>()?;
            rx_signal_mimo(self.h, &p, self.cfg, self.rng)?
        } else {
            let b: Vec<Beam> = pairs.iter().map(|(v, _)| (*v).clone()).collect();
            rx_signal_miso(self.h, &b, self.cfg, self.rng)?
        };
        let z: Vec<f64> = y.iter().map(|c| c.norm_sqr()).collect();
        self.powers.extend_from_slice(&z);
        Ok(z)
    }

    /// Sweeps `tx_ids x rx_ids` (transmit-major) and returns the best pair.
    fn best_pair(
        &mut self,
        tx: &Codebook,
        tx_ids: &[usize],
        rx: Option<&Codebook>,
        rx_ids: &[usize],
    ) -> Result<(usize, usize)> {
        if tx_ids.len() * rx_ids.len().max(1) == 1 {
            return Ok((tx_ids[0], rx_ids.first().copied().unwrap_or(0)));
        }
        let mut pairs = Vec::new();
        let mut ids = Vec::new();
        for &i in tx_ids {
            match rx {
                Some(rb) => {
                    for &j in rx_ids {
                        pairs.push((tx.beam(i), Some(rb.beam(j))));
                        ids.push((i, j));
                    }
                }
                None => {
                    pairs.push((tx.beam(i), None));
                    ids.push((i, 0));
                }
            }
        }
        let z = self.sweep(&pairs)?;
        Ok(ids[argmax(&z)])
    }
}

fn check_link(h: &ChannelMatrix, tx: usize, rx: Option<usize>, cfg: &SystemConfig) -> Result<()> {
    if h.m_t() != tx || h.m_r() != rx.unwrap_or(1) || cfg.m_t() != tx || cfg.m_r() != rx.unwrap_or(1) {
        return Err(BaselineError::Mismatch(format!(
            "channel {}x{}, codebooks {}x{}",
            h.m_t(),
            h.m_r(),
            tx,
            rx.unwrap_or(1)
        ))
        .into());
    }
    Ok(())
}

/// Noisy sweep of every DFT beam (pair); the strongest measurement wins.
pub fn exhaustive_search<R: rand::Rng + ?Sized>(
    h: &ChannelMatrix,
    tx: &Codebook,
    rx: Option<&Codebook>,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    check_link(h, tx.array_size(), rx.map(Codebook::array_size), cfg)?;
    let mut m = Meter {
        h,
        cfg,
        rng,
        powers: Vec::new(),
    };
    let tx_ids: Vec<usize> = (0..tx.len()).collect();
    let rx_ids: Vec<usize> = rx.map_or(vec![], |r| (0..r.len()).collect());
    let (i, j) = m.best_pair(tx, &tx_ids, rx, &rx_ids)?;
    Ok(BaselineResult {
        tx: i,
        rx: rx.map(|_| j),
        sweep_count: counts::exhaustive(tx.len(), rx.map_or(1, Codebook::len)),
        measurements: m.powers,
    })
}

fn tier_candidates(h: &HierarchicalCodebook, tier: usize, node: Option<usize>) -> Vec<usize> {
    match node {
        None => (0..h.tier(tier).len()).collect(),
        Some(b) => h.children(tier - 1, b).to_vec(),
    }
}

/// Binary tree search. With a receive tree, both sides descend jointly
/// (4 pairs per tier) until the shorter tree ends, then the other side
/// continues alone with its partner beam fixed.
pub fn binary_search<R: rand::Rng + ?Sized>(
    h: &ChannelMatrix,
    tx: &HierarchicalCodebook,
    rx: Option<&HierarchicalCodebook>,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    check_link(h, tx.leaf().array_size(), rx.map(|r| r.leaf().array_size()), cfg)?;
    let mut m = Meter {
        h,
        cfg,
        rng,
        powers: Vec::new(),
    };
    let (lt, lr) = (tx.n_tiers(), rx.map_or(0, HierarchicalCodebook::n_tiers));
    let (mut i, mut j): (Option<usize>, Option<usize>) = (None, None);
    for t in 0..lt.max(lr) {
        let (ti, tj) = (t.min(lt - 1), t.min(lr.saturating_sub(1)));
        let tx_ids = if t < lt {
            tier_candidates(tx, t, i)
        } else {
            vec![i.expect("descended")]
        };
        let rx_ids = match rx {
            Some(r) if t < lr => tier_candidates(r, t, j),
            Some(_) => vec![j.expect("descended")],
            None => vec![],
        };
        let (a, b) = m.best_pair(tx.tier(ti), &tx_ids, rx.map(|r| r.tier(tj)), &rx_ids)?;
        i = Some(a);
        if rx.is_some() {
            j = Some(b);
        }
    }
    Ok(BaselineResult {
        tx: i.expect("at least one tier"),
        rx: j,
        sweep_count: match rx {
            None => counts::binary_miso(tx.leaf().len()),
            Some(r) => counts::binary_mimo(tx.leaf().len(), r.leaf().len()),
        },
        measurements: m.powers,
    })
}

/// Sweeps every wide beam, then the children of the strongest.
pub fn two_tier_search<R: rand::Rng + ?Sized>(
    h: &ChannelMatrix,
    tx: &HierarchicalCodebook,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    check_link(h, tx.leaf().array_size(), None, cfg)?;
    let mut m = Meter {
        h,
        cfg,
        rng,
        powers: Vec::new(),
    };
    let wide: Vec<usize> = (0..tx.tier(0).len()).collect();
    let (a, _) = m.best_pair(tx.tier(0), &wide, None, &[])?;
    let (i, _) = m.best_pair(tx.leaf(), tx.children(0, a), None, &[])?;
    Ok(BaselineResult {
        tx: i,
        rx: None,
        sweep_count: counts::two_tier(tx.leaf().len(), tx.tier(0).len()),
        measurements: m.powers,
    })
}

fn check_two_tier_pair(
    h: &ChannelMatrix,
    tx: &HierarchicalCodebook,
    rx: &HierarchicalCodebook,
    cfg: &SystemConfig,
) -> Result<()> {
    if tx.n_tiers() != 2 || rx.n_tiers() != 2 {
        return Err(BaselineError::Mismatch("two-tier codebooks expected".into()).into());
    }
    check_link(h, tx.leaf().array_size(), Some(rx.leaf().array_size()), cfg)
}

/// All wide pairs, then all child pairs of the best wide pair.
pub fn two_tier_joint<R: rand::Rng + ?Sized>(
    h: &ChannelMatrix,
    tx: &HierarchicalCodebook,
    rx: &HierarchicalCodebook,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    check_two_tier_pair(h, tx, rx, cfg)?;
    let mut m = Meter {
        h,
        cfg,
        rng,
        powers: Vec::new(),
    };
    let wt: Vec<usize> = (0..tx.tier(0).len()).collect();
    let wr: Vec<usize> = (0..rx.tier(0).len()).collect();
    let (a, b) = m.best_pair(tx.tier(0), &wt, Some(rx.tier(0)), &wr)?;
    let (i, j) = m.best_pair(tx.leaf(), tx.children(0, a), Some(rx.leaf()), rx.children(0, b))?;
    Ok(BaselineResult {
        tx: i,
        rx: Some(j),
        sweep_count: counts::two_tier_joint(tx.leaf().len(), rx.leaf().len(), wt.len(), wr.len()),
        measurements: m.powers,
    })
}

/// All wide pairs; then transmit children under the fixed receive wide
/// beam; then receive children under the chosen transmit beam.
pub fn two_tier_hybrid<R: rand::Rng + ?Sized>(
    h: &ChannelMatrix,
    tx: &HierarchicalCodebook,
    rx: &HierarchicalCodebook,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    check_two_tier_pair(h, tx, rx, cfg)?;
    let mut m = Meter {
        h,
        cfg,
        rng,
        powers: Vec::new(),
    };
    let wt: Vec<usize> = (0..tx.tier(0).len()).collect();
    let wr: Vec<usize> = (0..rx.tier(0).len()).collect();
    let (a, b) = m.best_pair(tx.tier(0), &wt, Some(rx.tier(0)), &wr)?;
    let i = {
        let kids = tx.children(0, a);
        if kids.len() == 1 {
            kids[0]
        } else {
            let pairs: Vec<_> = kids
                .iter()
                .map(|&c| (tx.leaf().beam(c), Some(rx.tier(0).beam(b))))
                .collect();
            kids[argmax(&m.sweep(&pairs)?)]
        }
    };
    let j = {
        let kids = rx.children(0, b);
        if kids.len() == 1 {
            kids[0]
        } else {
            let pairs: Vec<_> = kids
                .iter()
                .map(|&c| (tx.leaf().beam(i), Some(rx.leaf().beam(c))))
                .collect();
            kids[argmax(&m.sweep(&pairs)?)]
        }
    };
    Ok(BaselineResult {
        tx: i,
        rx: Some(j),
        sweep_count: counts::two_tier_hybrid(tx.leaf().len(), rx.leaf().len(), wt.len(), wr.len()),
        measurements: m.powers,
    })
}

/// Accuracy and spectral efficiency of a classical search on `split`.
pub fn evaluate_search(
    search: &Search,
    ds: &ChannelDataset,
    labels: &DatasetLabels,
    split: Split,
    trials: usize,
    seed: u64,
) -> Result<EvalResult> {
    let data = LabeledSplit::new(ds, labels, split)?;
    let trials = trials.max(1);
    let mut picks = Vec::with_capacity(data.len() * trials);
    for trial in 0..trials as u64 {
        let part: Vec<(usize, Option<usize>)> = data
            .channels
            .par_iter()
            .zip(&data.sample_ids)
            .map(|(h, &id)| {
                let r = search.run(h, &ds.config, &mut noise_stream(seed, trial, id))?;
                Ok((r.tx, r.rx))
            })
            .collect::<Result<_>>()?;
        picks.extend(part);
    }
    score_picks(&ds.config, &data, &picks, search.sweep_count(), trials)
}

/// Learned one-tier probing codebook followed by a single predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct OneTierModel {
    prober: Prober,
    heads: Heads,
    scaling: InputScaling,
    trained: bool,
}

impl OneTierModel {
    pub fn new(cfg: &SystemConfig, n_probe: usize, scaling: InputScaling, seed: u64) -> Result<Self> {
        if n_probe == 0 {
            return Err(Error::Config(
                "one-tier probing codebook needs at least one beam".into(),
            ));
        }
        let shape = HbanShape::new(cfg, n_probe, n_probe, 1);
        let mut rng = sub_stream(seed, Purpose::Init, 7, 0);
        let prober = new_prober("probe", &shape, n_probe, &mut rng);
        let heads = Heads::new(
            "predictor",
            n_probe,
            cfg.n_t(),
            cfg.is_mimo().then_some(cfg.n_r()),
            &mut rng,
        );
        Ok(Self {
            prober,
            heads,
            scaling,
            trained: false,
        })
    }

    pub fn n_probe(&self) -> usize {
        self.prober.n()
    }

    pub fn prober(&self) -> &Prober {
        &self.prober
    }

    fn predict(
        &self,
        channels: &[&ChannelMatrix],
        noise: &[Complex64],
        link: Link,
    ) -> Result<Vec<(usize, Option<usize>)>> {
        let (_, _, z) = sweep_powers(&self.prober, channels, noise, link)?;
        let (u, _) = self.scaling.forward(&z);
        self.heads.predict(&u)
    }

    fn predict_split(
        &self,
        data: &LabeledSplit,
        link: Link,
        seed: u64,
        trial: u64,
    ) -> Result<Vec<(usize, Option<usize>)>> {
        let per = self.prober.noise_per_sample();
        let chunk = 512;
        let starts: Vec<usize> = (0..data.len()).step_by(chunk).collect();
        let parts: Vec<Result<Vec<_>>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + chunk).min(data.len());
                let noise: Vec<Complex64> = data.sample_ids[s..e]
                    .iter()
                    .flat_map(|&id| draw_noise(&mut noise_stream(seed, trial, id), per, link.noise_var))
                    .collect();
                self.predict(&data.channels[s..e], &noise, link)
            })
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn train(&mut self, ds: &ChannelDataset, labels: &DatasetLabels, cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        let train = LabeledSplit::new(ds, labels, Split::Train)?;
        let val = LabeledSplit::new(ds, labels, Split::Val)?;
        if train.is_empty() {
            return Err(crate::hban::HbanError::EmptySplit(Split::Train).into());
        }
        let val = if val.is_empty() { train.clone() } else { val };
        let link = Link::new(&ds.config);
        let mut rng = sub_stream(cfg.seed, Purpose::Train, 3, 0);
        let mut adam = {
            let mut p = self.prober.params();
            p.extend(self.heads.params());
            Adam::new(
                crate::neural::AdamConfig {
                    lr: cfg.lr,
                    ..Default::default()
                },
                &p,
            )
        };
        let mut report = TrainReport::default();
        let mut best = (f64::NEG_INFINITY, self.prober.clone(), self.heads.clone(), 0);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut stale = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let loss = self.step(&train, batch, link, cfg, &mut rng, &mut adam)?;
                if epoch == 0 && b == 0 {
                    report.initial_loss = loss;
                }
                total += loss * batch.len() as f64;
            }
            let loss = total / train.len() as f64;
            let picks = self.predict_split(&val, link, cfg.seed, VAL_TRIAL)?;
            let acc = hits(&picks, &val.beams) as f64 / val.len() as f64;
            report.curve.push(CurvePoint {
                step: "one-tier".into(),
                epoch,
                loss,
                val_accuracy: acc,
            });
            report.final_loss = loss;
            if acc > best.0 {
                best = (acc, self.prober.clone(), self.heads.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        self.prober = best.1;
        self.heads = best.2;
        report.best_val_accuracy = best.0;
        report.best_epoch = best.3;
        self.trained = true;
        Ok(report)
    }

    fn step(
        &mut self,
        data: &LabeledSplit,
        batch: &[usize],
        link: Link,
        cfg: &TrainConfig,
        rng: &mut Rng,
        adam: &mut Adam,
    ) -> Result<f64> {
        let ch: Vec<&ChannelMatrix> = batch.iter().map(|&i| data.channels[i]).collect();
        let labels: Vec<BeamLabel> = batch.iter().map(|&i| data.beams[i]).collect();
        let noise = batch_noise(rng, ch.len() * self.prober.noise_per_sample(), link, cfg.noisy_training);
        self.prober.zero_grad();
        for p in self.heads.params_mut() {
            p.zero_grad();
        }
        let (y, pcache, z) = sweep_powers(&self.prober, &ch, &noise, link)?;
        let (u, scache) = self.scaling.forward(&z);
        let (loss, du) = self.heads.loss_backward(&u, &labels, cfg.xi)?;
        let dz = self.scaling.backward(&scache, &du);
        self.prober.backward(&pcache, &power_backward(&y, &dz));
        let mut params: Vec<&mut Param> = self.prober.params_mut();
        params.extend(self.heads.params_mut());
        adam.step(&mut params)?;
        Ok(loss)
    }

    /// Parameters as checkpoint tensors.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut p = self.prober.params();
        p.extend(self.heads.params());
        p.into_iter()
            .map(|p| {
                Tensor::new(
                    p.name.clone(),
                    vec![p.values.rows, p.values.cols],
                    p.values.data.clone(),
                )
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        split: Split,
        trials: usize,
        seed: u64,
    ) -> Result<EvalResult> {
        if !self.trained {
            return Err(BaselineError::Untrained.into());
        }
        let data = LabeledSplit::new(ds, labels, split)?;
        let link = Link::new(&ds.config);
        let trials = trials.max(1);
        let mut picks = Vec::with_capacity(data.len() * trials);
        for trial in 0..trials as u64 {
            picks.extend(self.predict_split(&data, link, seed, trial)?);
        }
        score_picks(&ds.config, &data, &picks, self.n_probe(), trials)
    }
}

fn hits(picks: &[(usize, Option<usize>)], labels: &[BeamLabel]) -> usize {
    picks
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.0 == l.i_star && p.1 == l.j_star)
        .count()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sine interval spanned by the training directions of each group (5th to
/// 95th percentile, at least one beamwidth wide).
pub fn group_sectors(ds: &ChannelDataset, labels: &DatasetLabels) -> Vec<[f64; 2]> {
    let width = 2.0 / ds.config.m_t() as f64;
    let train = ds.indices(Split::Train);
    (0..labels.g())
        .map(|k| {
            let mut s: Vec<f64> = train
                .iter()
                .filter(|&&i| labels.groups[i] == k)
                .map(|&i| labels.features[i][0])
                .collect();
            if s.is_empty() {
                let c = labels.model.centers[k][0];
                return [c - width / 2.0, c + width / 2.0];
            }
            s.sort_by(f64::total_cmp);
            let (mut lo, mut hi) = (percentile(&s, 0.05), percentile(&s, 0.95));
            if hi - lo < width {
                let c = 0.5 * (lo + hi);
                lo = c - width / 2.0;
                hi = c + width / 2.0;
            }
            [lo, hi]
        })
        .collect()
}

/// Hierarchical network whose probing codebooks are fixed wide beams: the
/// coarse tier tiles the sine space in `n1` sectors and fine codebook `k`
/// tiles the directions of group `k` in `n2` sectors. Only the selector and
/// predictors are learned.
pub fn amcf_model(
    ds: &ChannelDataset,
    labels: &DatasetLabels,
    n1: usize,
    n2: usize,
    scaling: InputScaling,
    seed: u64,
    opts: &WideBeamOptions,
) -> Result<HbanModel> {
    let cfg = &ds.config;
    if cfg.is_mimo() {
        return Err(BaselineError::NeedsMiso("fixed wide-beam probing").into());
    }
    let m = cfg.m_t();
    let opts = WideBeamOptions {
        spacing_over_lambda: cfg.spacing_over_lambda(),
        ..opts.clone()
    };
    let synth = |sector: [f64; 2], item: u64| {
        let mut rng = sub_stream(opts.seed, Purpose::Codebook, 2_000, item);
        wide_beam_synthesize(m, sector, &opts, &mut rng)
    };
    let coarse = (0..n1)
        .into_par_iter()
        .map(|w| synth(sector_bounds(w, n1, cfg.n_t()), w as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let fine = group_sectors(ds, labels)
        .into_iter()
        .enumerate()
        .map(|(k, [lo, hi])| {
            let step = (hi - lo) / n2 as f64;
            let beams = (0..n2)
                .into_par_iter()
                .map(|b| {
                    let a = lo + step * b as f64;
                    synth([a, a + step], 1_000 * (k as u64 + 1) + b as u64)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((beams, None))
        })
        .collect::<Result<Vec<_>>>()?;
    HbanModel::with_fixed_probes(
        HbanShape::new(cfg, n1, n2, labels.g()),
        scaling,
        seed,
        (&coarse, None),
        &fine,
    )
}

/// Probing sizes of the two independent networks of the separate scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparateBudget {
    pub n1_t: usize,
    pub n2_t: usize,
    pub n1_r: usize,
    pub n2_r: usize,
}

impl SeparateBudget {
    pub fn sweep_count(&self) -> usize {
        self.n1_t + self.n2_t + self.n1_r + self.n2_r
    }

    /// Sizes for a total budget: the reference schedule for even totals 6
    /// to 20, otherwise about two thirds to the transmit side with each side
    /// split coarse/fine so that `n1 <= n2`.
    pub fn split(total: usize) -> Result<Self> {
        const TABLE: [[usize; 4]; 8] = [
            [1, 3, 1, 1],
            [2, 3, 1, 2],
            [2, 4, 2, 2],
            [2, 5, 2, 3],
            [3, 5, 3, 3],
            [4, 6, 3, 3],
            [4, 7, 3, 4],
            [4, 8, 4, 4],
        ];
        if total < 4 {
            return Err(Error::Config(format!(
                "separate search needs a budget of at least 4, got {total}"
            )));
        }
        if total.is_multiple_of(2) && (6..=20).contains(&total) {
            let [n1_t, n2_t, n1_r, n2_r] = TABLE[(total - 6) / 2];
            return Ok(Self { n1_t, n2_t, n1_r, n2_r });
        }
        let t = (2 * total).div_ceil(3).min(total - 2).max(2);
        let r = total - t;
        Ok(Self {
            n1_t: t / 2,
            n2_t: t - t / 2,
            n1_r: r / 2,
            n2_r: r - r / 2,
        })
    }
}

/// Two independent single-side networks: the transmitter aligns first while
/// the receiver listens through a fixed full-sector beam, then the receiver
/// aligns against the chosen transmit beam.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparateHban {
    pub bs: HbanModel,
    pub ue: HbanModel,
    pub ue_wide: Beam,
    cfg_t: SystemConfig,
    cfg_r: SystemConfig,
    tx_book: Codebook,
}

fn side_config(cfg: &SystemConfig, m: usize, n: usize) -> Result<SystemConfig> {
    Ok(SystemConfig::new(
        m,
        1,
        n,
        1,
        cfg.spacing_over_lambda(),
        cfg.tx_power_dbm(),
        cfg.noise_psd_dbm_hz(),
        cfg.bandwidth_hz(),
    )?)
}

fn side_dataset(ds: &ChannelDataset, cfg: SystemConfig, h: Vec<ChannelMatrix>) -> Result<ChannelDataset> {
    let samples = ds
        .samples
        .iter()
        .zip(h)
        .map(|(s, h)| ChannelSample::new(h, vec![], s.sample_id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ChannelDataset {
        config: cfg,
        samples,
        splits: ds.splits.clone(),
    })
}

fn side_labels(
    ds: &ChannelDataset,
    labels: &DatasetLabels,
    side: usize,
    groups: &GroupCount,
    seed: u64,
) -> Result<DatasetLabels> {
    let features: Vec<Vec<f64>> = labels.features.iter().map(|f| vec![f[side]]).collect();
    let (model, assigned) = fit_groups(&features, &ds.indices(Split::Train), groups, seed)?;
    let beams = labels
        .beams
        .iter()
        .map(|b| BeamLabel {
            i_star: if side == 0 { b.i_star } else { b.j_star.unwrap_or(0) },
            j_star: None,
        })
        .collect();
    Ok(DatasetLabels {
        beams,
        features,
        groups: assigned,
        model,
    })
}

fn ue_channels(ds: &ChannelDataset, tx: &Codebook, picks: &[usize]) -> Vec<ChannelMatrix> {
    ds.samples
        .iter()
        .zip(picks)
        .map(|(s, &i)| ChannelMatrix::from_vector(s.h.herm_mul(tx.beam(i).weights())))
        .collect()
}

impl SeparateHban {
    pub fn train(
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        budget: SeparateBudget,
        groups: &GroupCount,
        tc: &TrainConfig,
        opts: &WideBeamOptions,
    ) -> Result<(Self, Vec<TrainReport>)> {
        let cfg = &ds.config;
        if !cfg.is_mimo() {
            return Err(BaselineError::NeedsMimo("separate search").into());
        }
        let cfg_t = side_config(cfg, cfg.m_t(), cfg.n_t())?;
        let cfg_r = side_config(cfg, cfg.m_r(), cfg.n_r())?;
        let opts = WideBeamOptions {
            spacing_over_lambda: cfg.spacing_over_lambda(),
            ..opts.clone()
        };
        let ue_wide = wide_beam_synthesize(
            cfg.m_r(),
            sector_bounds(0, 1, cfg.n_r()),
            &opts,
            &mut sub_stream(opts.seed, Purpose::Codebook, 3_000, 0),
        )?;
        let tx_book = dft_codebook(cfg.m_t(), cfg.n_t(), cfg.spacing_over_lambda())?;

        let bs_h = ds
            .samples
            .iter()
            .map(|s| ChannelMatrix::from_vector(s.h.mul(ue_wide.weights())))
            .collect();
        let bs_ds = side_dataset(ds, cfg_t.clone(), bs_h)?;
        let bs_labels = side_labels(ds, labels, 0, groups, tc.seed)?;
        let mut bs = HbanModel::new(
            HbanShape::new(&cfg_t, budget.n1_t, budget.n2_t, bs_labels.g()),
            tc.scaling.resolve(&bs_ds),
            tc.seed,
        )?;
        let mut reports = vec![bs.train_coarse(&bs_ds, &bs_labels, tc)?];
        reports.push(bs.train_fine(&bs_ds, &bs_labels, tc)?);

        let teacher: Vec<usize> = labels.beams.iter().map(|b| b.i_star).collect();
        let ue_ds = side_dataset(ds, cfg_r.clone(), ue_channels(ds, &tx_book, &teacher))?;
        let ue_labels = side_labels(ds, labels, 1, groups, tc.seed)?;
        let mut ue = HbanModel::new(
            HbanShape::new(&cfg_r, budget.n1_r, budget.n2_r, ue_labels.g()),
            tc.scaling.resolve(&ue_ds),
            tc.seed.wrapping_add(1),
        )?;
        reports.push(ue.train_coarse(&ue_ds, &ue_labels, tc)?);
        reports.push(ue.train_fine(&ue_ds, &ue_labels, tc)?);
        Ok((
            Self {
                bs,
                ue,
                ue_wide,
                cfg_t,
                cfg_r,
                tx_book,
            },
            reports,
        ))
    }

    pub fn sweep_count(&self) -> usize {
        self.bs.shape().sweep_count() + self.ue.shape().sweep_count()
    }

    pub fn evaluate(
        &self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        split: Split,
        trials: usize,
        seed: u64,
    ) -> Result<EvalResult> {
        let data = LabeledSplit::new(ds, labels, split)?;
        let (lt, lr) = (Link::new(&self.cfg_t), Link::new(&self.cfg_r));
        let (bs, ue) = (self.bs.shape(), self.ue.shape());
        let trials = trials.max(1);
        let mut picks = Vec::with_capacity(data.len() * trials);
        for trial in 0..trials as u64 {
            let noise: Vec<[Vec<Complex64>; 4]> = data
                .sample_ids
                .iter()
                .map(|&id| {
                    let mut r = noise_stream(seed, trial, id);
                    [bs.n1, bs.n2, ue.n1, ue.n2].map(|n| draw_noise(&mut r, n, lt.noise_var))
                })
                .collect();
            let bs_h: Vec<ChannelMatrix> = data
                .channels
                .iter()
                .map(|h| ChannelMatrix::from_vector(h.mul(self.ue_wide.weights())))
                .collect();
            let bs_ref: Vec<&ChannelMatrix> = bs_h.iter().collect();
            let bs_noise: Vec<_> = noise.iter().map(|n| (n[0].clone(), n[1].clone())).collect();
            let tx = self.bs.align_with_noise(&bs_ref, &bs_noise, lt, None)?;
            let ue_h: Vec<ChannelMatrix> = data
                .channels
                .iter()
                .zip(&tx)
                .map(|(h, r)| ChannelMatrix::from_vector(h.herm_mul(self.tx_book.beam(r.tx).weights())))
                .collect();
            let ue_ref: Vec<&ChannelMatrix> = ue_h.iter().collect();
            let ue_noise: Vec<_> = noise.iter().map(|n| (n[2].clone(), n[3].clone())).collect();
            let rx = self.ue.align_with_noise(&ue_ref, &ue_noise, lr, None)?;
            picks.extend(tx.iter().zip(&rx).map(|(a, b)| (a.tx, Some(b.tx))));
        }
        score_picks(&ds.config, &data, &picks, self.sweep_count(), trials)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synth_from_paths, PathInfo};
    use crate::codebook::{dft_sine, ideal_sector_binary, ideal_sector_two_tier};
    use crate::labels::optimal_beam;
    use crate::rng::stream;

    fn on_grid(cfg: &SystemConfig, i: usize, j: Option<usize>) -> ChannelSample {
        let path = PathInfo {
            aod: dft_sine(i, cfg.n_t()).asin(),
            aoa: j.map_or(0.0, |j| dft_sine(j, cfg.n_r()).asin()),
            gain: Complex64::new(1e-4, 0.0),
        };
        synth_from_paths(cfg, &[path], 0).unwrap()
    }

    #[test]
    fn closed_forms() {
        assert_eq!(counts::exhaustive(128, 1), 128);
        assert_eq!(counts::exhaustive(128, 32), 4096);
        assert_eq!(counts::two_tier(128, 11), 23);
        assert_eq!(counts::two_tier(128, 128), 128);
        assert_eq!(counts::binary_miso(128), 14);
        assert_eq!(counts::binary_mimo(128, 32), 24);
        assert_eq!(counts::binary_mimo(32, 8), 16);
        assert_eq!(counts::two_tier_joint(128, 32, 16, 4), 128);
        assert_eq!(counts::two_tier_hybrid(128, 32, 16, 4), 80);
    }

    #[test]
    fn searches_find_on_grid_beam_without_noise() {
        let cfg = SystemConfig::new(16, 1, 16, 1, 0.5, 10.0, None, 1e8).unwrap();
        let leaf = dft_codebook(16, 16, 0.5).unwrap();
        let bin = ideal_sector_binary(16, 16, 0.5).unwrap();
        let two = ideal_sector_two_tier(16, 16, 4, 0.5).unwrap();
        let mut rng = stream(0, Purpose::Noise);
        for i in 0..16 {
            let s = on_grid(&cfg, i, None);
            let e = exhaustive_search(&s.h, &leaf, None, &cfg, &mut rng).unwrap();
            assert_eq!((e.tx, e.measurements.len()), (i, 16));
            let b = binary_search(&s.h, &bin, None, &cfg, &mut rng).unwrap();
            assert_eq!((b.tx, b.measurements.len(), b.sweep_count), (i, 8, 8));
            let t = two_tier_search(&s.h, &two, &cfg, &mut rng).unwrap();
            assert_eq!((t.tx, t.measurements.len(), t.sweep_count), (i, 8, 8));
        }
    }

    #[test]
    fn pair_searches_find_on_grid_pair_without_noise() {
        let cfg = SystemConfig::new(8, 4, 8, 4, 0.5, 10.0, None, 1e8).unwrap();
        let (tb, rb) = (dft_codebook(8, 8, 0.5).unwrap(), dft_codebook(4, 4, 0.5).unwrap());
        let (bt, br) = (
            ideal_sector_binary(8, 8, 0.5).unwrap(),
            ideal_sector_binary(4, 4, 0.5).unwrap(),
        );
        let (wt, wr) = (
            ideal_sector_two_tier(8, 8, 4, 0.5).unwrap(),
            ideal_sector_two_tier(4, 4, 2, 0.5).unwrap(),
        );
        let mut rng = stream(1, Purpose::Noise);
        for i in 0..8 {
            for j in 0..4 {
                let s = on_grid(&cfg, i, Some(j));
                let want = optimal_beam(&s, &tb, Some(&rb)).unwrap();
                assert_eq!((want.i_star, want.j_star), (i, Some(j)));
                let e = exhaustive_search(&s.h, &tb, Some(&rb), &cfg, &mut rng).unwrap();
                assert_eq!((e.tx, e.rx, e.measurements.len()), (i, Some(j), 32));
                let b = binary_search(&s.h, &bt, Some(&br), &cfg, &mut rng).unwrap();
                assert_eq!((b.tx, b.rx), (i, Some(j)));
                assert_eq!(b.measurements.len(), counts::binary_mimo(8, 4));
                let jt = two_tier_joint(&s.h, &wt, &wr, &cfg, &mut rng).unwrap();
                assert_eq!((jt.tx, jt.rx, jt.measurements.len()), (i, Some(j), 8 + 4));
                let hy = two_tier_hybrid(&s.h, &wt, &wr, &cfg, &mut rng).unwrap();
                assert_eq!((hy.tx, hy.rx, hy.measurements.len()), (i, Some(j), 8 + 2 + 2));
            }
        }
    }

    #[test]
    fn singleton_groups_skip_fine_sweep() {
        let cfg = SystemConfig::new(8, 1, 8, 1, 0.5, 10.0, None, 1e8).unwrap();
        let two = ideal_sector_two_tier(8, 8, 8, 0.5).unwrap();
        let s = on_grid(&cfg, 5, None);
        let r = two_tier_search(&s.h, &two, &cfg, &mut stream(0, Purpose::Noise)).unwrap();
        assert_eq!((r.tx, r.measurements.len(), r.sweep_count), (5, 8, 8));
    }

    #[test]
    fn separate_budget_split() {
        let b = SeparateBudget::split(12).unwrap();
        assert_eq!((b.n1_t, b.n2_t, b.n1_r, b.n2_r), (2, 5, 2, 3));
        for total in 4..=21 {
            let b = SeparateBudget::split(total).unwrap();
            assert_eq!(b.sweep_count(), total);
            assert!(b.n1_t <= b.n2_t && b.n1_r <= b.n2_r && b.n1_r >= 1);
        }
        assert!(b.n1_t <= b.n2_t && b.n1_r <= b.n2_r && b.n1_r >= 1);
        assert!(SeparateBudget::split(3).is_err());
    }

    #[test]
    fn mismatched_link_is_rejected() {
        let cfg = SystemConfig::desk_miso();
        let h = ChannelMatrix::zeros(8, 1);
        let book = dft_codebook(16, 32, 0.5).unwrap();
        assert!(exhaustive_search(&h, &book, None, &cfg, &mut stream(0, Purpose::Noise)).is_err());
        assert!(Search::build(
            &SearchKind::TwoTierJoint {
                n_wide_t: 4,
                n_wide_r: 2
            },
            &cfg,
            &WideBeamOptions::default()
        )
        .is_err());
    }
}
