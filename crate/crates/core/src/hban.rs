//! Two-tier learned probing networks for MISO and MIMO links.
//!
//! A coarse probing codebook is swept first; its powers feed a selector that
//! picks one of `G` fine probing codebooks. After the fine sweep, the
//! predictor of that group maps `[z_c; z_f]` to likelihoods over the full
//! DFT codebook (and, for MIMO, a second head over the receive codebook).
//!
//! Training runs in two steps: coarse layer plus selector on the cluster
//! labels, then fine layers plus predictors with samples routed by the
//! frozen selector.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelDataset, ChannelMatrix, Split, SystemConfig};
use crate::codebook::{dft_codebook, Beam, Codebook};
use crate::labels::{BeamLabel, DatasetLabels};
use crate::neural::{
    ce_loss, decode_checkpoint, encode_checkpoint, power_backward, power_layer, weighted_ce_loss, Adam, AdamConfig,
    InputScaling, Matrix, Mlp, Param, Parameters, Prober, ProbingLayer, ProbingPair, Tensor,
};
use crate::rng::{noise_stream, stream, sub_stream, Purpose, Rng};
use crate::sweep::{draw_noise, snr, spectral_efficiency};
use crate::{Error, Result};

#[derive(Debug, Error, PartialEq)]
pub enum HbanError {
    #[error("model is not trained: {0}")]
    Untrained(&'static str),
    #[error("fine step needs a trained coarse step")]
    CoarseNotTrained,
    #[error("invalid sizes: {0}")]
    Sizes(String),
    #[error("labels do not match: {0}")]
    LabelMismatch(String),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("bad checkpoint contents: {0}")]
    Checkpoint(String),
}

/// Array, codebook and network sizes of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HbanShape {
    pub m_t: usize,
    pub m_r: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub n1: usize,
    pub n2: usize,
    pub g: usize,
}

impl HbanShape {
    pub fn new(cfg: &SystemConfig, n1: usize, n2: usize, g: usize) -> Self {
        Self {
            m_t: cfg.m_t(),
            m_r: cfg.m_r(),
            n_t: cfg.n_t(),
            n_r: cfg.n_r(),
            n1,
            n2,
            g,
        }
    }

    pub fn is_mimo(&self) -> bool {
        self.m_r > 1
    }

    /// Measurements per alignment.
    pub fn sweep_count(&self) -> usize {
        self.n1 + self.n2
    }

    fn validate(&self) -> Result<(), HbanError> {
        if self.n1 == 0 || self.n2 == 0 || self.g == 0 {
            return Err(HbanError::Sizes(format!(
                "n1={}, n2={}, g={} must all be positive",
                self.n1, self.n2, self.g
            )));
        }
        if self.n1 > self.n2 {
            return Err(HbanError::Sizes(format!("n1={} exceeds n2={}", self.n1, self.n2)));
        }
        Ok(())
    }
}

/// How the network input scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    Raw,
    /// `rho * mean ||H||^2 / (m_t m_r)` over the training split.
    Reference,
    PerSample,
}

impl ScalingMode {
    pub fn resolve(self, ds: &ChannelDataset) -> InputScaling {
        match self {
            ScalingMode::Raw => InputScaling::Raw,
            ScalingMode::PerSample => InputScaling::PerSample,
            ScalingMode::Reference => {
                let train = ds.split_samples(Split::Train);
                let pool = if train.is_empty() {
                    ds.samples.iter().collect()
                } else {
                    train
                };
                let mean = pool.iter().map(|s| s.h.power()).sum::<f64>() / pool.len().max(1) as f64;
                let cfg = &ds.config;
                let p = cfg.tx_power() * mean / (cfg.m_t() * cfg.m_r()) as f64;
                InputScaling::Reference(if p > 0.0 { p } else { 1.0 })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Transmit-head weight of the MIMO loss.
    pub xi: f64,
    pub patience: usize,
    /// Sample fresh probing noise on every forward pass.
    pub noisy_training: bool,
    pub scaling: ScalingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 256,
            epochs: 50,
            lr: 1e-3,
            xi: 0.7,
            patience: 5,
            noisy_training: true,
            scaling: ScalingMode::PerSample,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!("xi must lie in [0, 1], got {}", self.xi)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One row of the training-curve log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Training-curve log as comma-separated text.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

/// Samples of one split together with their labels.
#[derive(Debug, Clone)]
pub struct LabeledSplit<'a> {
    pub channels: Vec<&'a ChannelMatrix>,
    pub sample_ids: Vec<u64>,
    pub groups: Vec<usize>,
    pub beams: Vec<BeamLabel>,
}

impl<'a> LabeledSplit<'a> {
    pub fn new(ds: &'a ChannelDataset, labels: &DatasetLabels, split: Split) -> Result<Self, HbanError> {
        if labels.beams.len() != ds.len() || labels.groups.len() != ds.len() {
            return Err(HbanError::LabelMismatch(format!(
                "{} samples, {} beam labels, {} group labels",
                ds.len(),
                labels.beams.len(),
                labels.groups.len()
            )));
        }
        let idx = ds.indices(split);
        Ok(Self {
            channels: idx.iter().map(|&i| &ds.samples[i].h).collect(),
            sample_ids: idx.iter().map(|&i| ds.samples[i].sample_id).collect(),
            groups: idx.iter().map(|&i| labels.groups[i]).collect(),
            beams: idx.iter().map(|&i| labels.beams[i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> LabeledSplit<'a> {
        LabeledSplit {
            channels: idx.iter().map(|&i| self.channels[i]).collect(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            beams: idx.iter().map(|&i| self.beams[i]).collect(),
        }
    }
}

/// Link constants used by the probing layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub amp: f64,
    pub noise_var: f64,
}

impl Link {
    pub fn new(cfg: &SystemConfig) -> Self {
        Self {
            amp: cfg.tx_power().sqrt() * cfg.pilot().re,
            noise_var: cfg.noise_variance(),
        }
    }
}

/// Outcome of one alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub tx: usize,
    pub rx: Option<usize>,
    pub group: usize,
    pub z_coarse: Vec<f64>,
    pub z_fine: Vec<f64>,
    pub sweep_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of (sample, trial) pairs whose prediction equals the label.
    pub accuracy: f64,
    pub accuracy_tx: f64,
    pub accuracy_rx: Option<f64>,
    /// `None` on a noise-free link.
    pub mean_se: Option<f64>,
    pub sweep_count: usize,
    pub trials: usize,
    pub samples: usize,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictor for one group: a transmit head and, for MIMO, a receive head.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Heads {
    pub tx: Mlp,
    pub rx: Option<Mlp>,
}

impl Heads {
    pub(crate) fn new(name: &str, n_in: usize, n_t: usize, n_r: Option<usize>, rng: &mut Rng) -> Self {
        let sizes = |out: usize| vec![n_in, 2 * n_in, 3 * n_in, out];
        Self {
            tx: Mlp::new(&format!("{name}.t"), &sizes(n_t), rng),
            rx: n_r.map(|n| Mlp::new(&format!("{name}.r"), &sizes(n), rng)),
        }
    }

    /// Predicted `(tx, rx)` per row.
    pub(crate) fn predict(&self, x: &Matrix) -> Result<Vec<(usize, Option<usize>)>> {
        let t = self.tx.forward(x)?;
        let r = self.rx.as_ref().map(|m| m.forward(x)).transpose()?;
        Ok((0..x.rows)
            .map(|i| (argmax(t.logits.row(i)), r.as_ref().map(|r| argmax(r.logits.row(i)))))
            .collect())
    }

    /// Loss on `x`; accumulates grads and returns `(loss, dL/dx)`.
    pub(crate) fn loss_backward(&mut self, x: &Matrix, labels: &[BeamLabel], xi: f64) -> Result<(f64, Matrix)> {
        let yt: Vec<usize> = labels.iter().map(|l| l.i_star).collect();
        let ct = self.tx.forward(x)?;
        match &mut self.rx {
            None => {
                let out = ce_loss(&ct.logits, &yt, ct.logits.cols as f64)?;
                let dx = self.tx.backward(&ct, &out.dlogits);
                Ok((out.loss, dx))
            }
            Some(rx) => {
                let yr: Vec<usize> = labels
                    .iter()
                    .map(|l| {
                        l.j_star
                            .ok_or_else(|| HbanError::LabelMismatch("MIMO model needs receive labels".into()))
                    })
                    .collect::<Result<_, _>>()?;
                let cr = rx.forward(x)?;
                let (loss, dt, dr) = weighted_ce_loss(&ct.logits, &yt, &cr.logits, &yr, xi)?;
                let mut dx = self.tx.backward(&ct, &dt);
                let dxr = rx.backward(&cr, &dr);
                dx.data.iter_mut().zip(&dxr.data).for_each(|(a, b)| *a += b);
                Ok((loss, dx))
            }
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        let mut p = self.tx.params();
        if let Some(r) = &self.rx {
            p.extend(r.params());
        }
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.tx.params_mut();
        if let Some(r) = &mut self.rx {
            p.extend(r.params_mut());
        }
        p
    }
}

/// Forward through a prober and the power layer.
pub(crate) fn sweep_powers(
    prober: &Prober,
    channels: &[&ChannelMatrix],
    noise: &[Complex64],
    link: Link,
) -> Result<(Vec<Complex64>, crate::neural::ProbeCache, Matrix)> {
    let (y, cache) = prober.forward(channels, noise, link.amp)?;
    let z = power_layer(&y, channels.len(), prober.n());
    Ok((y, cache, z))
}

pub(crate) fn batch_noise(rng: &mut Rng, count: usize, link: Link, noisy: bool) -> Vec<Complex64> {
    if noisy {
        draw_noise(rng, count, link.noise_var)
    } else {
        vec![Complex64::new(0.0, 0.0); count]
    }
}

/// Evaluation noise for one sample: the first `first` values, then `second`.
pub(crate) fn eval_noise(
    seed: u64,
    trial: u64,
    sample_id: u64,
    first: usize,
    second: usize,
    link: Link,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut rng = noise_stream(seed, trial, sample_id);
    let a = draw_noise(&mut rng, first, link.noise_var);
    let b = draw_noise(&mut rng, second, link.noise_var);
    (a, b)
}

/// Validation trial index; test trials count up from 0.
pub(crate) const VAL_TRIAL: u64 = u64::MAX;

/// Parameter set updated by one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStep {
    Coarse,
    /// Fine probes and predictor of one group.
    Fine(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HbanModel {
    shape: HbanShape,
    coarse: Prober,
    fine: Vec<Prober>,
    selector: Mlp,
    predictors: Vec<Heads>,
    scaling: InputScaling,
    /// Probing beams are fixed (not trained).
    frozen_probes: bool,
    coarse_trained: bool,
    fine_trained: bool,
}

pub(crate) fn new_prober(name: &str, shape: &HbanShape, n: usize, rng: &mut Rng) -> Prober {
    let tx = ProbingLayer::new(&format!("{name}.theta"), shape.m_t, n, rng);
    if shape.is_mimo() {
        Prober::Mimo(ProbingPair {
            tx,
            rx: ProbingLayer::new(&format!("{name}.phi"), shape.m_r, n, rng),
        })
    } else {
        Prober::Miso(tx)
    }
}

fn fixed_prober(name: &str, tx: &[Beam], rx: Option<&[Beam]>) -> Result<Prober, HbanError> {
    let t = ProbingLayer::from_beams(&format!("{name}.theta"), tx);
    Ok(match rx {
        None => Prober::Miso(t),
        Some(rx) => {
            if rx.len() != tx.len() {
                return Err(HbanError::Sizes(format!(
                    "{} transmit vs {} receive beams",
                    tx.len(),
                    rx.len()
                )));
            }
            Prober::Mimo(ProbingPair {
                tx: t,
                rx: ProbingLayer::from_beams(&format!("{name}.phi"), rx),
            })
        }
    })
}

impl HbanModel {
    /// Randomly initialized model; all randomness comes from `seed`.
    pub fn new(shape: HbanShape, scaling: InputScaling, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = stream(seed, Purpose::Init);
        let coarse = new_prober("coarse", &shape, shape.n1, &mut rng);
        let fine = (0..shape.g)
            .map(|k| new_prober(&format!("fine.{k}"), &shape, shape.n2, &mut rng))
            .collect();
        let selector = Mlp::new("selector", &[shape.n1, shape.n1, shape.g], &mut rng);
        let n_r = shape.is_mimo().then_some(shape.n_r);
        let predictors = (0..shape.g)
            .map(|k| Heads::new(&format!("predictor.{k}"), shape.n1 + shape.n2, shape.n_t, n_r, &mut rng))
            .collect();
        Ok(Self {
            shape,
            coarse,
            fine,
            selector,
            predictors,
            scaling,
            frozen_probes: false,
            coarse_trained: false,
            fine_trained: false,
        })
    }

    /// Model whose probing beams are the given fixed codebooks; only the
    /// selector and predictors are trained.
    pub fn with_fixed_probes(
        shape: HbanShape,
        scaling: InputScaling,
        seed: u64,
        coarse: (&[Beam], Option<&[Beam]>),
        fine: &[(Vec<Beam>, Option<Vec<Beam>>)],
    ) -> Result<Self> {
        let mut model = Self::new(shape, scaling, seed)?;
        if coarse.0.len() != shape.n1 || fine.len() != shape.g || fine.iter().any(|f| f.0.len() != shape.n2) {
            return Err(HbanError::Sizes("fixed probing codebooks do not match the shape".into()).into());
        }
        model.coarse = fixed_prober("coarse", coarse.0, coarse.1)?;
        model.fine = fine
            .iter()
            .enumerate()
            .map(|(k, (t, r))| fixed_prober(&format!("fine.{k}"), t, r.as_deref()))
            .collect::<Result<_, _>>()?;
        model.frozen_probes = true;
        Ok(model)
    }

    pub fn shape(&self) -> &HbanShape {
        &self.shape
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn is_trained(&self) -> bool {
        self.coarse_trained && self.fine_trained
    }

    pub fn coarse_trained(&self) -> bool {
        self.coarse_trained
    }

    pub fn has_frozen_probes(&self) -> bool {
        self.frozen_probes
    }

    pub fn coarse(&self) -> &Prober {
        &self.coarse
    }

    pub fn fine(&self, k: usize) -> &Prober {
        &self.fine[k]
    }

    pub fn selector(&self) -> &Mlp {
        &self.selector
    }

    /// Coarse layer and selector values, in checkpoint order.
    pub fn coarse_values(&self) -> Vec<f64> {
        let mut v = self.coarse.flat_values();
        v.extend(self.selector.flat_values());
        v
    }

    /// Fine layers and predictors values, in checkpoint order.
    pub fn fine_values(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (f, p) in self.fine.iter().zip(&self.predictors) {
            v.extend(f.flat_values());
            v.extend(p.params().iter().flat_map(|x| x.values.data.iter().copied()));
        }
        v
    }

    /// Selector decision from coarse powers: argmax, ties to the lowest index.
    pub fn select_codebook(&self, z_c: &[f64]) -> Result<usize> {
        Ok(self.select_batch(&Matrix::from_vec(1, z_c.len(), z_c.to_vec())?)?[0])
    }

    fn select_batch(&self, z_c: &Matrix) -> Result<Vec<usize>> {
        let (u, _) = self.scaling.forward(z_c);
        let c = self.selector.forward(&u)?;
        Ok((0..u.rows).map(|i| argmax(c.logits.row(i))).collect())
    }

    /// Beam (pair) decision of predictor `k` over the full DFT codebook(s).
    pub fn predict_beam(&self, z_c: &[f64], z_f: &[f64], k: usize) -> Result<(usize, Option<usize>)> {
        if k >= self.shape.g {
            return Err(HbanError::Sizes(format!("group {k} out of range 0..{}", self.shape.g)).into());
        }
        let mut x = z_c.to_vec();
        x.extend_from_slice(z_f);
        let x = Matrix::from_vec(1, x.len(), x)?;
        let (u, _) = self.scaling.forward(&x);
        Ok(self.predictors[k].predict(&u)?[0])
    }

    fn require_trained(&self) -> Result<(), HbanError> {
        if !self.coarse_trained {
            return Err(HbanError::Untrained("coarse step"));
        }
        if !self.fine_trained {
            return Err(HbanError::Untrained("fine step"));
        }
        Ok(())
    }

    /// Coarse sweep, selection, fine sweep and prediction for one channel.
    /// Noise is drawn from `rng`: coarse values first, then fine.
    pub fn align(&self, h: &ChannelMatrix, cfg: &SystemConfig, rng: &mut Rng) -> Result<AlignmentResult> {
        self.require_trained()?;
        let link = Link::new(cfg);
        let m_r = self.shape.m_r;
        let nc = draw_noise(rng, self.shape.n1 * m_r, link.noise_var);
        let nf = draw_noise(rng, self.shape.n2 * m_r, link.noise_var);
        Ok(self.align_with_noise(&[h], &[(nc, nf)], link, None)?.remove(0))
    }

    /// Batched alignment with given per-sample noise; `forced` overrides the
    /// selector decision.
    pub(crate) fn align_with_noise(
        &self,
        channels: &[&ChannelMatrix],
        noise: &[(Vec<Complex64>, Vec<Complex64>)],
        link: Link,
        forced: Option<&[usize]>,
    ) -> Result<Vec<AlignmentResult>> {
        let b = channels.len();
        let nc: Vec<Complex64> = noise.iter().flat_map(|n| n.0.iter().copied()).collect();
        let (_, _, zc) = sweep_powers(&self.coarse, channels, &nc, link)?;
        let groups = match forced {
            Some(f) => f.to_vec(),
            None => self.select_batch(&zc)?,
        };
        let mut out: Vec<Option<AlignmentResult>> = vec![None; b];
        for k in 0..self.shape.g {
            let idx: Vec<usize> = (0..b).filter(|&i| groups[i] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let ch: Vec<&ChannelMatrix> = idx.iter().map(|&i| channels[i]).collect();
            let nf: Vec<Complex64> = idx.iter().flat_map(|&i| noise[i].1.iter().copied()).collect();
            let (_, _, zf) = sweep_powers(&self.fine[k], &ch, &nf, link)?;
            let zc_k = zc.select_rows(&idx);
            let (u, _) = self.scaling.forward(&zc_k.hcat(&zf));
            let preds = self.predictors[k].predict(&u)?;
            for (r, &i) in idx.iter().enumerate() {
                out[i] = Some(AlignmentResult {
                    tx: preds[r].0,
                    rx: preds[r].1,
                    group: k,
                    z_coarse: zc.row(i).to_vec(),
                    z_fine: zf.row(r).to_vec(),
                    sweep_count: self.shape.sweep_count(),
                });
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every sample routed")).collect())
    }

    fn align_split(
        &self,
        data: &LabeledSplit,
        link: Link,
        seed: u64,
        trial: u64,
        forced: Option<&[usize]>,
    ) -> Result<Vec<AlignmentResult>> {
        let m_r = self.shape.m_r;
        let chunk = 512;
        let parts: Vec<Result<Vec<AlignmentResult>>> = (0..data.len())
            .step_by(chunk)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&start| {
                let end = (start + chunk).min(data.len());
                let noise: Vec<_> = data.sample_ids[start..end]
                    .iter()
                    .map(|&id| eval_noise(seed, trial, id, self.shape.n1 * m_r, self.shape.n2 * m_r, link))
                    .collect();
                self.align_with_noise(&data.channels[start..end], &noise, link, forced.map(|f| &f[start..end]))
            })
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn selector_accuracy(&self, data: &LabeledSplit, link: Link, seed: u64) -> Result<f64> {
        let m_r = self.shape.m_r;
        let nc: Vec<Complex64> = data
            .sample_ids
            .iter()
            .flat_map(|&id| eval_noise(seed, VAL_TRIAL, id, self.shape.n1 * m_r, 0, link).0)
            .collect();
        let (_, _, zc) = sweep_powers(&self.coarse, &data.channels, &nc, link)?;
        let sel = self.select_batch(&zc)?;
        Ok(sel.iter().zip(&data.groups).filter(|(a, b)| a == b).count() as f64 / data.len().max(1) as f64)
    }

    /// Step one: coarse probing codebook and selector on the cluster labels.
    pub fn train_coarse(
        &mut self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        cfg: &TrainConfig,
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if labels.g() != self.shape.g {
            return Err(HbanError::LabelMismatch(format!(
                "labels have {} groups, model has {}",
                labels.g(),
                self.shape.g
            ))
            .into());
        }
        let train = LabeledSplit::new(ds, labels, Split::Train)?;
        let val = LabeledSplit::new(ds, labels, Split::Val)?;
        if train.is_empty() {
            return Err(HbanError::EmptySplit(Split::Train).into());
        }
        let val = if val.is_empty() { train.clone() } else { val };
        let link = Link::new(&ds.config);
        let mut rng = sub_stream(cfg.seed, Purpose::Train, 1, 0);
        let mut adam = {
            let params = self.coarse_params();
            Adam::new(cfg.adam(), &params)
        };
        let mut report = TrainReport::default();
        let mut best = (f64::NEG_INFINITY, self.coarse.clone(), self.selector.clone(), 0usize);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut stale = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let loss = self.coarse_step(&train.subset(batch), link, cfg, &mut rng, &mut adam)?;
                if epoch == 0 && total == 0.0 && report.curve.is_empty() {
                    report.initial_loss = loss;
                }
                total += loss * batch.len() as f64;
            }
            let loss = total / train.len() as f64;
            let acc = self.selector_accuracy(&val, link, cfg.seed)?;
            report.curve.push(CurvePoint {
                step: "coarse".into(),
                epoch,
                loss,
                val_accuracy: acc,
            });
            report.final_loss = loss;
            if acc > best.0 {
                best = (acc, self.coarse.clone(), self.selector.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        self.coarse = best.1;
        self.selector = best.2;
        report.best_val_accuracy = best.0;
        report.best_epoch = best.3;
        self.coarse_trained = true;
        Ok(report)
    }

    fn coarse_params(&self) -> Vec<&Param> {
        let mut p = if self.frozen_probes {
            Vec::new()
        } else {
            self.coarse.params()
        };
        p.extend(self.selector.params());
        p
    }

    /// Coarse loss on one batch with the given noise; leaves the gradients of
    /// the step-one parameters in place.
    fn coarse_backward(
        &mut self,
        channels: &[&ChannelMatrix],
        groups: &[usize],
        noise: &[Complex64],
        link: Link,
    ) -> Result<f64> {
        self.coarse.zero_grad();
        self.selector.zero_grad();
        let (y, pcache, z) = sweep_powers(&self.coarse, channels, noise, link)?;
        let (u, scache) = self.scaling.forward(&z);
        let sc = self.selector.forward(&u)?;
        let out = ce_loss(&sc.logits, groups, self.shape.g as f64)?;
        let du = self.selector.backward(&sc, &out.dlogits);
        if !self.frozen_probes {
            let dz = self.scaling.backward(&scache, &du);
            self.coarse.backward(&pcache, &power_backward(&y, &dz));
        }
        Ok(out.loss)
    }

    fn coarse_step(
        &mut self,
        batch: &LabeledSplit,
        link: Link,
        cfg: &TrainConfig,
        rng: &mut Rng,
        adam: &mut Adam,
    ) -> Result<f64> {
        let noise = batch_noise(
            rng,
            batch.len() * self.coarse.noise_per_sample(),
            link,
            cfg.noisy_training,
        );
        let loss = self.coarse_backward(&batch.channels, &batch.groups, &noise, link)?;
        let mut params: Vec<&mut Param> = Vec::new();
        if !self.frozen_probes {
            params.extend(self.coarse.params_mut());
        }
        params.extend(self.selector.params_mut());
        adam.step(&mut params)?;
        Ok(loss)
    }

    /// Step two: fine probing codebooks and predictors, routed by the frozen
    /// selector on noisy coarse measurements. Coarse parameters are not
    /// touched.
    pub fn train_fine(
        &mut self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        cfg: &TrainConfig,
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if !self.coarse_trained {
            return Err(HbanError::CoarseNotTrained.into());
        }
        let train = LabeledSplit::new(ds, labels, Split::Train)?;
        let val = LabeledSplit::new(ds, labels, Split::Val)?;
        if train.is_empty() {
            return Err(HbanError::EmptySplit(Split::Train).into());
        }
        let val = if val.is_empty() { train.clone() } else { val };
        let link = Link::new(&ds.config);
        let mut rng = sub_stream(cfg.seed, Purpose::Train, 2, 0);
        let mut adams: Vec<Adam> = (0..self.shape.g)
            .map(|k| {
                let params = self.group_params(k);
                Adam::new(cfg.adam(), &params)
            })
            .collect();
        let mut report = TrainReport::default();
        let mut best = (f64::NEG_INFINITY, self.fine.clone(), self.predictors.clone(), 0usize);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut stale = 0;
        self.fine_trained = true;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let loss = self.fine_step(&train.subset(batch), link, cfg, &mut rng, &mut adams)?;
                if report.curve.is_empty() && total == 0.0 {
                    report.initial_loss = loss;
                }
                total += loss * batch.len() as f64;
            }
            let loss = total / train.len() as f64;
            let acc = accuracy_of(&self.align_split(&val, link, cfg.seed, VAL_TRIAL, None)?, &val.beams);
            report.curve.push(CurvePoint {
                step: "fine".into(),
                epoch,
                loss,
                val_accuracy: acc,
            });
            report.final_loss = loss;
            if acc > best.0 {
                best = (acc, self.fine.clone(), self.predictors.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        self.fine = best.1;
        self.predictors = best.2;
        report.best_val_accuracy = best.0;
        report.best_epoch = best.3;
        Ok(report)
    }

    fn group_params(&self, k: usize) -> Vec<&Param> {
        let mut p = if self.frozen_probes {
            Vec::new()
        } else {
            self.fine[k].params()
        };
        p.extend(self.predictors[k].params());
        p
    }

    /// Samples routed to each group by the selector on one noisy coarse
    /// sweep of `data`.
    pub fn routing_histogram(
        &self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        split: Split,
        seed: u64,
    ) -> Result<Vec<usize>> {
        let data = LabeledSplit::new(ds, labels, split)?;
        let link = Link::new(&ds.config);
        let mut rng = stream(seed, Purpose::Noise);
        let noise = batch_noise(&mut rng, data.len() * self.coarse.noise_per_sample(), link, true);
        let (_, _, zc) = sweep_powers(&self.coarse, &data.channels, &noise, link)?;
        let mut hist = vec![0; self.shape.g];
        for k in self.select_batch(&zc)? {
            hist[k] += 1;
        }
        Ok(hist)
    }

    /// Loss of group `k` on samples routed to it, given their coarse
    /// measurements; leaves the gradients of the group's parameters in place.
    #[allow(clippy::too_many_arguments)]
    fn fine_backward(
        &mut self,
        k: usize,
        channels: &[&ChannelMatrix],
        zc: &Matrix,
        labels: &[BeamLabel],
        noise: &[Complex64],
        link: Link,
        xi: f64,
    ) -> Result<f64> {
        self.fine[k].zero_grad();
        for p in self.predictors[k].params_mut() {
            p.zero_grad();
        }
        let (y, pcache, zf) = sweep_powers(&self.fine[k], channels, noise, link)?;
        let x = zc.hcat(&zf);
        let (u, scache) = self.scaling.forward(&x);
        let (loss, du) = self.predictors[k].loss_backward(&u, labels, xi)?;
        if !self.frozen_probes {
            let dx = self.scaling.backward(&scache, &du);
            let (_, dzf) = dx.hsplit(self.shape.n1);
            self.fine[k].backward(&pcache, &power_backward(&y, &dzf));
        }
        Ok(loss)
    }

    #[allow(clippy::needless_range_loop)]
    fn fine_step(
        &mut self,
        batch: &LabeledSplit,
        link: Link,
        cfg: &TrainConfig,
        rng: &mut Rng,
        adams: &mut [Adam],
    ) -> Result<f64> {
        let b = batch.len();
        let nc = batch_noise(rng, b * self.coarse.noise_per_sample(), link, cfg.noisy_training);
        let (_, _, zc) = sweep_powers(&self.coarse, &batch.channels, &nc, link)?;
        let groups = self.select_batch(&zc)?;
        let mut total = 0.0;
        for k in 0..self.shape.g {
            let idx: Vec<usize> = (0..b).filter(|&i| groups[i] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let ch: Vec<&ChannelMatrix> = idx.iter().map(|&i| batch.channels[i]).collect();
            let labels: Vec<BeamLabel> = idx.iter().map(|&i| batch.beams[i]).collect();
            let nf = batch_noise(
                rng,
                idx.len() * self.fine[k].noise_per_sample(),
                link,
                cfg.noisy_training,
            );
            let loss = self.fine_backward(k, &ch, &zc.select_rows(&idx), &labels, &nf, link, cfg.xi)?;
            total += loss * idx.len() as f64;
            let mut params: Vec<&mut Param> = Vec::new();
            if !self.frozen_probes {
                params.extend(self.fine[k].params_mut());
            }
            params.extend(self.predictors[k].params_mut());
            adams[k].step(&mut params)?;
        }
        Ok(total / b as f64)
    }

    fn step_params_mut(&mut self, step: TrainStep) -> Vec<&mut Param> {
        let mut p = Vec::new();
        match step {
            TrainStep::Coarse => {
                if !self.frozen_probes {
                    p.extend(self.coarse.params_mut());
                }
                p.extend(self.selector.params_mut());
            }
            TrainStep::Fine(k) => {
                if !self.frozen_probes {
                    p.extend(self.fine[k].params_mut());
                }
                p.extend(self.predictors[k].params_mut());
            }
        }
        p
    }

    /// Flattened values of the parameters a training step updates.
    pub fn step_values(&mut self, step: TrainStep) -> Vec<f64> {
        self.step_params_mut(step)
            .iter()
            .flat_map(|p| p.values.data.iter().copied())
            .collect()
    }

    /// Inverse of [`HbanModel::step_values`].
    pub fn set_step_values(&mut self, step: TrainStep, values: &[f64]) -> Result<()> {
        let mut params = self.step_params_mut(step);
        let n: usize = params.iter().map(|p| p.values.data.len()).sum();
        if n != values.len() {
            return Err(HbanError::Sizes(format!("{} values for {n} parameters", values.len())).into());
        }
        let mut at = 0;
        for p in params.iter_mut() {
            let len = p.values.data.len();
            p.values.data.copy_from_slice(&values[at..at + len]);
            at += len;
        }
        Ok(())
    }

    /// Training loss of `step` on a batch with fixed noise, and its gradient
    /// in [`HbanModel::step_values`] order. For a fine step every sample is
    /// routed to the group; `noise` holds the coarse then the fine draws.
    #[allow(clippy::too_many_arguments)]
    pub fn step_loss_grad(
        &mut self,
        step: TrainStep,
        channels: &[&ChannelMatrix],
        groups: &[usize],
        labels: &[BeamLabel],
        noise: &[Complex64],
        link: Link,
        xi: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let b = channels.len();
        let nc = b * self.coarse.noise_per_sample();
        let loss = match step {
            TrainStep::Coarse => {
                if noise.len() != nc || groups.len() != b {
                    return Err(HbanError::Sizes("batch, groups and noise disagree".into()).into());
                }
                self.coarse_backward(channels, groups, noise, link)?
            }
            TrainStep::Fine(k) => {
                if k >= self.shape.g {
                    return Err(HbanError::Sizes(format!("group {k} of {}", self.shape.g)).into());
                }
                if noise.len() != nc + b * self.fine[k].noise_per_sample() || labels.len() != b {
                    return Err(HbanError::Sizes("batch, labels and noise disagree".into()).into());
                }
                let (_, _, zc) = sweep_powers(&self.coarse, channels, &noise[..nc], link)?;
                self.fine_backward(k, channels, &zc, labels, &noise[nc..], link, xi)?
            }
        };
        let grad = self
            .step_params_mut(step)
            .iter()
            .flat_map(|p| p.grad.data.iter().copied())
            .collect();
        Ok((loss, grad))
    }

    /// Accuracy and spectral efficiency on `split`, with independent noise
    /// per trial.
    pub fn evaluate(
        &self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        split: Split,
        trials: usize,
        seed: u64,
    ) -> Result<EvalResult> {
        self.evaluate_inner(ds, labels, split, trials, seed, false)
    }

    /// As [`HbanModel::evaluate`] with the selector replaced by the true
    /// cluster label.
    pub fn evaluate_pcs(
        &self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        split: Split,
        trials: usize,
        seed: u64,
    ) -> Result<EvalResult> {
        self.evaluate_inner(ds, labels, split, trials, seed, true)
    }

    fn evaluate_inner(
        &self,
        ds: &ChannelDataset,
        labels: &DatasetLabels,
        split: Split,
        trials: usize,
        seed: u64,
        pcs: bool,
    ) -> Result<EvalResult> {
        self.require_trained()?;
        let data = LabeledSplit::new(ds, labels, split)?;
        if data.is_empty() {
            return Err(HbanError::EmptySplit(split).into());
        }
        let link = Link::new(&ds.config);
        let mut picks = Vec::with_capacity(data.len() * trials);
        for trial in 0..trials.max(1) as u64 {
            let forced = pcs.then_some(data.groups.as_slice());
            let res = self.align_split(&data, link, seed, trial, forced)?;
            picks.extend(res.iter().map(|r| (r.tx, r.rx)));
        }
        score_picks(&ds.config, &data, &picks, self.shape.sweep_count(), trials.max(1))
    }

    /// BFNN tensors: parameters plus `hban.shape`, `hban.input_scale` and
    /// `hban.state` metadata.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let s = &self.shape;
        let mut out = vec![
            Tensor::new(
                "hban.shape",
                vec![7],
                [s.m_t, s.m_r, s.n_t, s.n_r, s.n1, s.n2, s.g]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            ),
            Tensor::new("hban.input_scale", vec![2], scaling_to_pair(self.scaling).to_vec()),
            Tensor::new(
                "hban.state",
                vec![3],
                [self.frozen_probes, self.coarse_trained, self.fine_trained]
                    .iter()
                    .map(|&b| b as u8 as f64)
                    .collect(),
            ),
        ];
        for p in self.all_params() {
            out.push(Tensor::new(
                p.name.clone(),
                vec![p.values.rows, p.values.cols],
                p.values.data.clone(),
            ));
        }
        out
    }

    fn all_params(&self) -> Vec<&Param> {
        let mut p = self.coarse.params();
        p.extend(self.selector.params());
        for (f, h) in self.fine.iter().zip(&self.predictors) {
            p.extend(f.params());
            p.extend(h.params());
        }
        p
    }

    fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.coarse.params_mut();
        p.extend(self.selector.params_mut());
        for (f, h) in self.fine.iter_mut().zip(self.predictors.iter_mut()) {
            p.extend(f.params_mut());
            p.extend(h.params_mut());
        }
        p
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| HbanError::Checkpoint(format!("missing tensor {name}")))
        };
        let shape_t = get("hban.shape")?;
        if shape_t.data.len() != 7
            || shape_t
                .data
                .iter()
                .any(|v| !(v.fract() == 0.0 && *v >= 0.0 && *v < 1e9))
        {
            return Err(HbanError::Checkpoint("bad hban.shape".into()).into());
        }
        let d: Vec<usize> = shape_t.data.iter().map(|&v| v as usize).collect();
        let shape = HbanShape {
            m_t: d[0],
            m_r: d[1],
            n_t: d[2],
            n_r: d[3],
            n1: d[4],
            n2: d[5],
            g: d[6],
        };
        if shape.m_t == 0 || shape.m_r == 0 || shape.n_t == 0 || shape.n_r == 0 {
            return Err(HbanError::Checkpoint("zero array or codebook size".into()).into());
        }
        let elems = shape
            .g
            .saturating_mul(shape.n1 + shape.n2)
            .saturating_mul(shape.n_t.max(shape.m_t));
        let total_values: usize = tensors.iter().map(|t| t.data.len()).sum();
        if elems > total_values.saturating_mul(8).max(1 << 20) {
            return Err(HbanError::Checkpoint("shape does not fit the stored tensors".into()).into());
        }
        let scale = get("hban.input_scale")?;
        let scaling =
            scaling_from_pair(&scale.data).ok_or_else(|| HbanError::Checkpoint("bad hban.input_scale".into()))?;
        let state = get("hban.state")?;
        if state.data.len() != 3 {
            return Err(HbanError::Checkpoint("bad hban.state".into()).into());
        }
        let mut model = HbanModel::new(shape, scaling, 0)?;
        for p in model.all_params_mut() {
            let t = get(&p.name)?;
            if t.dims != [p.values.rows, p.values.cols] {
                return Err(HbanError::Checkpoint(format!("tensor {} has dims {:?}", p.name, t.dims)).into());
            }
            p.values.data.copy_from_slice(&t.data);
        }
        model.frozen_probes = state.data[0] != 0.0;
        model.coarse_trained = state.data[1] != 0.0;
        model.fine_trained = state.data[2] != 0.0;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), encode_checkpoint(&self.to_tensors())).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_tensors(&decode_checkpoint(&bytes)?)
    }
}

fn scaling_to_pair(s: InputScaling) -> [f64; 2] {
    match s {
        InputScaling::Raw => [0.0, 1.0],
        InputScaling::Reference(v) => [1.0, v],
        InputScaling::PerSample => [2.0, 1.0],
    }
}

fn scaling_from_pair(v: &[f64]) -> Option<InputScaling> {
    match v {
        [m, _] if *m == 0.0 => Some(InputScaling::Raw),
        [m, s] if *m == 1.0 && *s > 0.0 && s.is_finite() => Some(InputScaling::Reference(*s)),
        [m, _] if *m == 2.0 => Some(InputScaling::PerSample),
        _ => None,
    }
}

pub(crate) fn accuracy_of(results: &[AlignmentResult], labels: &[BeamLabel]) -> f64 {
    let hits = results
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.tx == l.i_star && r.rx == l.j_star)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Scores `(tx, rx)` picks laid out trial-major over `data`.
pub(crate) fn score_picks(
    cfg: &SystemConfig,
    data: &LabeledSplit,
    picks: &[(usize, Option<usize>)],
    sweep_count: usize,
    trials: usize,
) -> Result<EvalResult> {
    let n = data.len();
    let d = cfg.spacing_over_lambda();
    let tx: Codebook = dft_codebook(cfg.m_t(), cfg.n_t(), d)?;
    let rx: Option<Codebook> = if cfg.is_mimo() {
        Some(dft_codebook(cfg.m_r(), cfg.n_r(), d)?)
    } else {
        None
    };
    let (mut hit, mut hit_t, mut hit_r) = (0usize, 0usize, 0usize);
    let mut se_total = 0.0;
    let noisy = cfg.noise_variance() > 0.0;
    for (k, &(t, r)) in picks.iter().enumerate() {
        let i = k % n;
        let l = data.beams[i];
        hit_t += (t == l.i_star) as usize;
        hit_r += (r == l.j_star) as usize;
        hit += (t == l.i_star && r == l.j_star) as usize;
        if noisy {
            let w = match (&rx, r) {
                (Some(book), Some(j)) => Some(book.beam(j)),
                _ => None,
            };
            se_total += spectral_efficiency(snr(data.channels[i], tx.beam(t), w, cfg)?)?;
        }
    }
    let total = picks.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: hit as f64 / total,
        accuracy_tx: hit_t as f64 / total,
        accuracy_rx: cfg.is_mimo().then_some(hit_r as f64 / total),
        mean_se: noisy.then_some(se_total / total),
        sweep_count,
        trials,
        samples: n,
    })
}
