//! Experiment grids: configuration, training/evaluation of every cell and
//! report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{amcf_model, evaluate_search, OneTierModel, Search, SearchKind, SeparateBudget, SeparateHban};
use crate::channel::{gen_dataset, load_dataset, ChannelDataset, Scenario, Split, SystemConfig};
use crate::codebook::WideBeamOptions;
use crate::hban::{curve_csv, EvalResult, HbanModel, HbanShape, TrainConfig, TrainReport};
use crate::labels::{default_candidates, label_dataset, DatasetLabels, GroupCount};
use crate::neural::encode_checkpoint;
use crate::{Error, Result};

/// First line of every emitted table.
pub const REPORT_HEADER: &str = "# hban-report v1";

/// Where the channels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    File {
        path: PathBuf,
    },
    Synthetic {
        samples: usize,
        seed: u64,
        #[serde(default)]
        scenario: Scenario,
    },
}

/// Method evaluated in each cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    Hban,
    /// Same trained network with the true group forced.
    HbanPcs,
    OneTier,
    Amcf,
    Separate,
    Exhaustive,
    Binary,
    TwoTier {
        n_wide: usize,
    },
    TwoTierJoint {
        n_wide_t: usize,
        n_wide_r: usize,
    },
    TwoTierHybrid {
        n_wide_t: usize,
        n_wide_r: usize,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Hban => "hban",
            Method::HbanPcs => "hban-pcs",
            Method::OneTier => "one-tier",
            Method::Amcf => "amcf",
            Method::Separate => "separate",
            Method::Exhaustive => "exhaustive",
            Method::Binary => "binary",
            Method::TwoTier { .. } => "two-tier",
            Method::TwoTierJoint { .. } => "two-tier-joint",
            Method::TwoTierHybrid { .. } => "two-tier-hybrid",
        }
    }

    fn search(&self) -> Option<SearchKind> {
        Some(match *self {
            Method::Exhaustive => SearchKind::Exhaustive,
            Method::Binary => SearchKind::Binary,
            Method::TwoTier { n_wide } => SearchKind::TwoTier { n_wide },
            Method::TwoTierJoint { n_wide_t, n_wide_r } => SearchKind::TwoTierJoint { n_wide_t, n_wide_r },
            Method::TwoTierHybrid { n_wide_t, n_wide_r } => SearchKind::TwoTierHybrid { n_wide_t, n_wide_r },
            _ => return None,
        })
    }
}

/// Parses `name` or `name:arg`, e.g. `two-tier:6` or `two-tier-joint:8x2`.
impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown method {s:?}"));
        let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let pair = |a: Option<&str>| -> Result<(usize, usize)> {
            let (x, y) = a.and_then(|a| a.split_once('x')).ok_or_else(bad)?;
            Ok((num(x)?, num(y)?))
        };
        let m = match name.trim() {
            "hban" => Method::Hban,
            "hban-pcs" => Method::HbanPcs,
            "one-tier" => Method::OneTier,
            "amcf" => Method::Amcf,
            "separate" => Method::Separate,
            "exhaustive" => Method::Exhaustive,
            "binary" => Method::Binary,
            "two-tier" => Method::TwoTier {
                n_wide: num(arg.ok_or_else(bad)?)?,
            },
            "two-tier-joint" => {
                let (n_wide_t, n_wide_r) = pair(arg)?;
                Method::TwoTierJoint { n_wide_t, n_wide_r }
            }
            "two-tier-hybrid" => {
                let (n_wide_t, n_wide_r) = pair(arg)?;
                Method::TwoTierHybrid { n_wide_t, n_wide_r }
            }
            _ => return Err(bad()),
        };
        let takes_arg = matches!(
            m,
            Method::TwoTier { .. } | Method::TwoTierJoint { .. } | Method::TwoTierHybrid { .. }
        );
        if arg.is_some() != takes_arg {
            return Err(bad());
        }
        Ok(m)
    }
}

/// Noise PSD in dBm/Hz, or `"off"` for a noise-free link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseLevel {
    Psd(f64),
    Off(NoiseOff),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseOff {
    Off,
}

impl NoiseLevel {
    pub fn psd(self) -> Option<f64> {
        match self {
            NoiseLevel::Psd(p) => Some(p),
            NoiseLevel::Off(_) => None,
        }
    }

    fn from_psd(p: Option<f64>) -> Self {
        p.map_or(NoiseLevel::Off(NoiseOff::Off), NoiseLevel::Psd)
    }

    fn tag(self) -> String {
        match self.psd() {
            None => "off".into(),
            Some(p) => format!("{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Named link preset; ignored when `system` is given.
    pub preset: String,
    pub system: Option<SystemConfig>,
    pub dataset: DatasetSource,
    pub methods: Vec<Method>,
    /// `(n1, n2)` probing sizes.
    pub budgets: Vec<[usize; 2]>,
    /// Noise levels of the noise sweep; the first is the nominal level of
    /// the budget sweep. Empty means the link's own noise only.
    pub noise_psd: Vec<NoiseLevel>,
    /// Probing sizes of the noise sweep.
    pub noise_budget: [usize; 2],
    pub seeds: Vec<u64>,
    pub trials: usize,
    pub groups: GroupCount,
    pub label_seed: u64,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "desk-miso".into(),
            system: None,
            dataset: DatasetSource::Synthetic {
                samples: 20_000,
                seed: 1,
                scenario: Scenario::default(),
            },
            methods: vec![
                Method::Hban,
                Method::OneTier,
                Method::Exhaustive,
                Method::Binary,
                Method::TwoTier { n_wide: 6 },
            ],
            budgets: vec![[3, 3], [4, 4], [4, 6], [6, 6], [6, 8], [6, 10], [6, 12], [6, 14]],
            noise_psd: vec![],
            noise_budget: [6, 8],
            seeds: vec![0],
            trials: 1,
            groups: GroupCount::Elbow(default_candidates()),
            label_seed: 0,
            train: desk_train_config(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Training settings used by the shipped experiment defaults.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 100,
        patience: 10,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fails when a seed does not fit a TOML integer.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, without the output directory.
    pub fn hash(&self) -> Result<String> {
        let c = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(format!("{:x}", Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn system_config(&self) -> Result<SystemConfig> {
        match &self.system {
            Some(s) => Ok(s.clone()),
            None => SystemConfig::preset(&self.preset)
                .ok_or_else(|| Error::Config(format!("unknown preset {:?}", self.preset))),
        }
    }

    /// Checks everything that can fail before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        for &[n1, n2] in self.budgets.iter().chain(std::iter::once(&self.noise_budget)) {
            if n1 == 0 || n1 > n2 {
                return Err(Error::Config(format!("budget ({n1}, {n2}) needs 0 < n1 <= n2")));
            }
        }
        self.system_config()?;
        self.train.validate()?;
        let data_seed = match self.dataset {
            DatasetSource::Synthetic { seed, .. } => seed,
            DatasetSource::File { .. } => 0,
        };
        let seeds = self
            .seeds
            .iter()
            .chain([&self.label_seed, &self.train.seed, &data_seed]);
        if let Some(s) = seeds.copied().find(|&s| s > i64::MAX as u64) {
            return Err(Error::Config(format!("seed {s} exceeds {}", i64::MAX)));
        }
        if let DatasetSource::File { path } = &self.dataset {
            if !path.is_file() {
                return Err(Error::Config(format!("dataset {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    fn load_data(&self) -> Result<ChannelDataset> {
        let cfg = self.system_config()?;
        match &self.dataset {
            DatasetSource::File { path } => {
                let ds = load_dataset(path)?;
                if ds.config.m_t() != cfg.m_t() || ds.config.m_r() != cfg.m_r() {
                    return Err(Error::Config("dataset arrays do not match the configured link".into()));
                }
                Ok(ChannelDataset { config: cfg, ..ds })
            }
            DatasetSource::Synthetic {
                samples,
                seed,
                scenario,
            } => Ok(gen_dataset(&cfg, *seed, scenario, *samples)?),
        }
    }
}

/// Result of one (method, budget, noise, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub n1: usize,
    pub n2: usize,
    pub noise_psd: Option<f64>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub accuracy_tx: Option<f64>,
    pub accuracy_rx: Option<f64>,
    pub mean_se: Option<f64>,
    pub sweep_count: Option<usize>,
    pub error: Option<String>,
}

impl Cell {
    pub fn budget(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub cells: Vec<Cell>,
}

/// Mean and sample standard deviation of one plotted point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub series: String,
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Which axis a table is plotted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Budget,
    Noise,
}

/// Which cell value a table aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    SpectralEfficiency,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }

    /// Cells of `method` at the given budget/noise.
    pub fn find(&self, method: &str, n1: usize, n2: usize, noise: Option<f64>) -> Vec<&Cell> {
        self.cells
            .iter()
            .filter(|c| c.method == method && c.n1 == n1 && c.n2 == n2 && c.noise_psd == noise)
            .collect()
    }

    /// Mean of `metric` over seeds for `method` at the given budget/noise.
    pub fn mean(&self, method: &str, n1: usize, n2: usize, noise: Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self
            .find(method, n1, n2, noise)
            .iter()
            .filter_map(|c| c.accuracy)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    /// Plot-ready points over seeds. The series is the method name, suffixed
    /// with the other axis value when that axis has several values.
    pub fn series(&self, axis: Axis, metric: Metric) -> Vec<SeriesPoint> {
        let budgets: std::collections::BTreeSet<(usize, usize)> = self.cells.iter().map(|c| (c.n1, c.n2)).collect();
        let noises: Vec<Option<f64>> = self.cells.iter().fold(Vec::new(), |mut acc, c| {
            if !acc.contains(&c.noise_psd) {
                acc.push(c.noise_psd);
            }
            acc
        });
        let mut groups: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
        let mut xs: BTreeMap<(String, u64, String), f64> = BTreeMap::new();
        let mut order: Vec<(String, u64, String)> = Vec::new();
        for c in &self.cells {
            let value = match metric {
                Metric::Accuracy => c.accuracy,
                Metric::SpectralEfficiency => c.mean_se,
            };
            let Some(value) = value else { continue };
            let (x, other, multi) = match axis {
                Axis::Budget => (
                    c.budget() as f64,
                    NoiseLevel::from_psd(c.noise_psd).tag(),
                    noises.len() > 1,
                ),
                Axis::Noise => (
                    c.noise_psd.unwrap_or(f64::NEG_INFINITY),
                    format!("{}+{}", c.n1, c.n2),
                    budgets.len() > 1,
                ),
            };
            let series = if multi {
                format!("{}@{}", c.method, other)
            } else {
                c.method.clone()
            };
            let key = (series, x.to_bits(), format!("{}+{}", c.n1, c.n2));
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            xs.insert(key.clone(), x);
            groups.entry(key).or_default().push(value);
        }
        order
            .into_iter()
            .map(|k| {
                let (mean, stddev) = mean_std(&groups[&k]);
                SeriesPoint {
                    x: xs[&k],
                    series: k.0.clone(),
                    mean,
                    stddev,
                    n: groups[&k].len(),
                }
            })
            .collect()
    }
}

fn shape_for(ds: &ChannelDataset, [n1, n2]: [usize; 2], g: usize) -> HbanShape {
    HbanShape::new(&ds.config, n1, n2, g)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    ds: ChannelDataset,
    labels: &'a DatasetLabels,
    ckpt_dir: Option<PathBuf>,
}

impl Ctx<'_> {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg.train.clone()
        }
    }

    fn persist(&self, key: &str, tensors: Option<Vec<crate::neural::Tensor>>, reports: &[TrainReport]) -> Result<()> {
        let Some(dir) = &self.ckpt_dir else { return Ok(()) };
        if let Some(t) = tensors {
            let p = dir.join(format!("{key}.bfnn"));
            std::fs::write(&p, encode_checkpoint(&t)).map_err(|e| Error::io(&p, e))?;
        }
        let curve: Vec<_> = reports.iter().flat_map(|r| r.curve.iter().cloned()).collect();
        let p = dir.join(format!("{key}.curve.csv"));
        std::fs::write(&p, curve_csv(&curve)).map_err(|e| Error::io(&p, e))
    }

    fn train_hban(&self, budget: [usize; 2], seed: u64, key: &str) -> Result<HbanModel> {
        let tc = self.train_config(seed);
        let mut m = HbanModel::new(
            shape_for(&self.ds, budget, self.labels.g()),
            tc.scaling.resolve(&self.ds),
            seed,
        )?;
        let a = m.train_coarse(&self.ds, self.labels, &tc)?;
        let b = m.train_fine(&self.ds, self.labels, &tc)?;
        self.persist(key, Some(m.to_tensors()), &[a, b])?;
        Ok(m)
    }

    fn run_learned(
        &self,
        method: &Method,
        budget: [usize; 2],
        seed: u64,
        key: &str,
        hban: &mut Option<HbanModel>,
    ) -> Result<EvalResult> {
        let (split, trials) = (Split::Test, self.cfg.trials);
        let tc = self.train_config(seed);
        match method {
            Method::Hban | Method::HbanPcs => {
                if hban.is_none() {
                    *hban = Some(self.train_hban(budget, seed, &format!("hban-{key}"))?);
                }
                let m = hban.as_ref().expect("trained");
                if *method == Method::Hban {
                    m.evaluate(&self.ds, self.labels, split, trials, seed)
                } else {
                    m.evaluate_pcs(&self.ds, self.labels, split, trials, seed)
                }
            }
            Method::OneTier => {
                let mut m = OneTierModel::new(
                    &self.ds.config,
                    budget[0] + budget[1],
                    tc.scaling.resolve(&self.ds),
                    seed,
                )?;
                let r = m.train(&self.ds, self.labels, &tc)?;
                self.persist(&format!("one-tier-{key}"), Some(m.to_tensors()), &[r])?;
                m.evaluate(&self.ds, self.labels, split, trials, seed)
            }
            Method::Amcf => {
                let mut m = amcf_model(
                    &self.ds,
                    self.labels,
                    budget[0],
                    budget[1],
                    tc.scaling.resolve(&self.ds),
                    seed,
                    &WideBeamOptions::default(),
                )?;
                let a = m.train_coarse(&self.ds, self.labels, &tc)?;
                let b = m.train_fine(&self.ds, self.labels, &tc)?;
                self.persist(&format!("amcf-{key}"), Some(m.to_tensors()), &[a, b])?;
                m.evaluate(&self.ds, self.labels, split, trials, seed)
            }
            Method::Separate => {
                let budget = SeparateBudget::split(budget[0] + budget[1])?;
                let (m, reports) = SeparateHban::train(
                    &self.ds,
                    self.labels,
                    budget,
                    &self.cfg.groups,
                    &tc,
                    &WideBeamOptions::default(),
                )?;
                let mut t = m.bs.to_tensors();
                for mut x in m.ue.to_tensors() {
                    x.name = format!("ue.{}", x.name);
                    t.push(x);
                }
                self.persist(&format!("separate-{key}"), Some(t), &reports)?;
                m.evaluate(&self.ds, self.labels, split, trials, seed)
            }
            _ => unreachable!("classical methods are handled separately"),
        }
    }
}

fn cell_from(method: &Method, budget: [usize; 2], noise: NoiseLevel, seed: u64, r: Result<EvalResult>) -> Cell {
    let mut c = Cell {
        method: method.name().into(),
        n1: budget[0],
        n2: budget[1],
        noise_psd: noise.psd(),
        seed,
        accuracy: None,
        accuracy_tx: None,
        accuracy_rx: None,
        mean_se: None,
        sweep_count: None,
        error: None,
    };
    match r {
        Ok(e) => {
            c.accuracy = Some(e.accuracy);
            c.accuracy_tx = Some(e.accuracy_tx);
            c.accuracy_rx = e.accuracy_rx;
            c.mean_se = e.mean_se;
            c.sweep_count = Some(e.sweep_count);
        }
        Err(e) => c.error = Some(e.to_string()),
    }
    c
}

fn run_grid(cfg: &ExperimentConfig, budgets: &[[usize; 2]], noises: &[NoiseLevel]) -> Result<Report> {
    cfg.validate()?;
    let base = cfg.load_data()?;
    let labels = label_dataset(&base, &cfg.groups, cfg.label_seed)?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut cells = Vec::new();
    let mut searches: BTreeMap<usize, Result<Search, String>> = BTreeMap::new();
    for &noise in noises {
        let ds = ChannelDataset {
            config: base.config.with_noise_psd(noise.psd())?,
            ..base.clone()
        };
        let ctx = Ctx {
            cfg,
            ds,
            labels: &labels,
            ckpt_dir: Some(ckpt_dir.clone()),
        };
        for &seed in &cfg.seeds {
            let mut classical: BTreeMap<usize, Result<EvalResult, String>> = BTreeMap::new();
            for &budget in budgets {
                let key = format!("{}-{}-{}-s{}", budget[0], budget[1], noise.tag(), seed);
                let mut hban = None;
                for (mi, method) in cfg.methods.iter().enumerate() {
                    let r = match method.search() {
                        Some(kind) => {
                            let search = searches.entry(mi).or_insert_with(|| {
                                Search::build(&kind, &ctx.ds.config, &WideBeamOptions::default())
                                    .map_err(|e| e.to_string())
                            });
                            let r = classical.entry(mi).or_insert_with(|| match search {
                                Ok(s) => evaluate_search(s, &ctx.ds, &labels, Split::Test, cfg.trials, seed)
                                    .map_err(|e| e.to_string()),
                                Err(e) => Err(e.clone()),
                            });
                            r.clone().map_err(Error::Config)
                        }
                        None => ctx.run_learned(method, budget, seed, &key, &mut hban),
                    };
                    cells.push(cell_from(method, budget, noise, seed, r));
                }
            }
        }
    }
    Ok(Report {
        config_hash: cfg.hash()?,
        cells,
    })
}

fn noise_levels(cfg: &ExperimentConfig) -> Result<Vec<NoiseLevel>> {
    Ok(if cfg.noise_psd.is_empty() {
        vec![NoiseLevel::from_psd(cfg.system_config()?.noise_psd_dbm_hz())]
    } else {
        cfg.noise_psd.clone()
    })
}

/// Every method at every budget and noise level.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let noises = noise_levels(cfg)?;
    run_grid(cfg, &cfg.budgets, &noises)
}

/// Every budget at the nominal noise level.
pub fn budget_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let noises = noise_levels(cfg)?;
    run_grid(cfg, &cfg.budgets, &noises[..1])
}

/// Every noise level at the noise-sweep budget.
pub fn noise_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let noises = noise_levels(cfg)?;
    run_grid(cfg, &[cfg.noise_budget], &noises)
}

fn with_header(body: &str) -> String {
    format!("{REPORT_HEADER}\n{body}")
}

fn to_csv<T: Serialize>(rows: &[T], headers: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(headers).expect("in-memory csv");
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

const CELL_COLUMNS: [&str; 11] = [
    "method",
    "n1",
    "n2",
    "noise_psd",
    "seed",
    "accuracy",
    "accuracy_tx",
    "accuracy_rx",
    "mean_se",
    "sweep_count",
    "error",
];

const SERIES_COLUMNS: [&str; 5] = ["x", "series", "mean", "stddev", "n"];

pub fn cells_csv(cells: &[Cell]) -> String {
    with_header(&to_csv(cells, &CELL_COLUMNS))
}

fn strip_header(text: &str) -> Result<&str, Error> {
    text.strip_prefix(REPORT_HEADER)
        .and_then(|t| t.strip_prefix('\n'))
        .ok_or_else(|| Error::Config(format!("missing {REPORT_HEADER:?} header line")))
}

pub fn parse_cells(text: &str) -> Result<Vec<Cell>> {
    let body = strip_header(text)?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers().map_err(|e| Error::Config(e.to_string()))?.clone();
    if headers.iter().ne(CELL_COLUMNS.iter().copied()) {
        return Err(Error::Config(format!("unexpected columns {headers:?}")));
    }
    r.deserialize()
        .collect::<Result<Vec<Cell>, _>>()
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn series_csv(points: &[SeriesPoint]) -> String {
    with_header(&to_csv(points, &SERIES_COLUMNS))
}

pub fn parse_series(text: &str) -> Result<Vec<SeriesPoint>> {
    let body = strip_header(text)?;
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<Result<Vec<SeriesPoint>, _>>()
        .map_err(|e| Error::Config(e.to_string()))
}

#[derive(Serialize)]
struct Summary<'a> {
    format: &'a str,
    config_hash: &'a str,
    cells: usize,
    failures: usize,
    methods: Vec<String>,
}

/// Writes `cells.csv`, the per-axis tables and `summary.toml`; returns the
/// written paths.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut methods: Vec<String> = Vec::new();
    for c in &report.cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
    }
    let summary = Summary {
        format: REPORT_HEADER.trim_start_matches("# "),
        config_hash: &report.config_hash,
        cells: report.cells.len(),
        failures: report.failures(),
        methods,
    };
    let files = [
        ("cells.csv", cells_csv(&report.cells)),
        (
            "accuracy_vs_budget.csv",
            series_csv(&report.series(Axis::Budget, Metric::Accuracy)),
        ),
        (
            "se_vs_budget.csv",
            series_csv(&report.series(Axis::Budget, Metric::SpectralEfficiency)),
        ),
        (
            "accuracy_vs_noise.csv",
            series_csv(&report.series(Axis::Noise, Metric::Accuracy)),
        ),
        (
            "se_vs_noise.csv",
            series_csv(&report.series(Axis::Noise, Metric::SpectralEfficiency)),
        ),
        ("summary.toml", toml::to_string(&summary).expect("summary serializes")),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

/// Rebuilds a report from an emitted `cells.csv` and `summary.toml`.
pub fn read_report(dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let cells = parse_cells(&read("cells.csv")?)?;
    let summary: toml::Table = toml::from_str(&read("summary.toml")?).map_err(|e| Error::Config(e.to_string()))?;
    let config_hash = summary
        .get("config_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Config("summary has no config_hash".into()))?
        .to_string();
    Ok(Report { config_hash, cells })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    fn cell(method: &str, n1: usize, n2: usize, noise: Option<f64>, seed: u64, acc: f64) -> Cell {
        Cell {
            method: method.into(),
            n1,
            n2,
            noise_psd: noise,
            seed,
            accuracy: Some(acc),
            accuracy_tx: Some(acc),
            accuracy_rx: None,
            mean_se: Some(1.0 + acc),
            sweep_count: Some(n1 + n2),
            error: None,
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default();
        let mut variants = vec![];
        let mut c = base.clone();
        c.trials = 2;
        variants.push(c);
        let mut c = base.clone();
        c.seeds = vec![1];
        variants.push(c);
        let mut c = base.clone();
        c.train.xi = 0.5;
        variants.push(c);
        let mut c = base.clone();
        c.noise_psd = vec![NoiseLevel::Off(NoiseOff::Off)];
        variants.push(c);
        let mut c = base.clone();
        c.methods.pop();
        variants.push(c);
        for v in variants {
            assert_ne!(v.hash().unwrap(), base.hash().unwrap());
        }
        let mut c = base.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(c.hash().unwrap(), base.hash().unwrap());
        c.seeds = vec![u64::MAX];
        assert!(c.validate().is_err() && c.hash().is_err());
    }

    #[test]
    fn noise_levels_parse() {
        let c = ExperimentConfig::from_toml("noise_psd = [\"off\", -161.0, -151]\n").unwrap();
        assert_eq!(
            c.noise_psd.iter().map(|n| n.psd()).collect::<Vec<_>>(),
            vec![None, Some(-161.0), Some(-151.0)]
        );
        assert!(ExperimentConfig::from_toml("noise_psd = [\"loud\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn validation_rules() {
        let mut c = ExperimentConfig::default();
        c.methods.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.budgets = vec![[5, 3]];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.dataset = DatasetSource::File {
            path: "/nonexistent/data.bfch".into(),
        };
        assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.preset = "nope".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn cells_round_trip_exactly() {
        let mut cells = vec![
            cell("hban", 2, 3, Some(-161.0), 0, 0.1 + 0.2),
            cell("exhaustive", 2, 3, None, 1, 1.0),
        ];
        cells[1].mean_se = None;
        cells[1].accuracy_rx = Some(1.0 / 3.0);
        cells.push(Cell {
            error: Some("boom, with comma".into()),
            accuracy: None,
            ..cells[0].clone()
        });
        let text = cells_csv(&cells);
        assert!(text.starts_with("# hban-report v1\nmethod,n1,n2,noise_psd,seed,"));
        assert_eq!(parse_cells(&text).unwrap(), cells);
        assert!(parse_cells(&text[2..]).is_err());
    }

    #[test]
    fn series_aggregate_over_seeds() {
        let r = Report {
            config_hash: "x".into(),
            cells: vec![
                cell("hban", 2, 2, Some(-161.0), 0, 0.4),
                cell("hban", 2, 2, Some(-161.0), 1, 0.6),
                cell("hban", 3, 3, Some(-161.0), 0, 0.7),
                cell("hban", 3, 3, Some(-161.0), 1, 0.7),
            ],
        };
        let s = r.series(Axis::Budget, Metric::Accuracy);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].x, s[0].series.as_str(), s[0].n), (4.0, "hban", 2));
        assert!((s[0].mean - 0.5).abs() < 1e-15);
        assert!((s[0].stddev - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].stddev, 0.0);
        assert_eq!(parse_series(&series_csv(&s)).unwrap(), s);
        assert_eq!(r.mean("hban", 2, 2, Some(-161.0)), Some(0.5));
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("hban".parse::<Method>().unwrap(), Method::Hban);
        assert_eq!("two-tier:6".parse::<Method>().unwrap(), Method::TwoTier { n_wide: 6 });
        assert_eq!(
            "two-tier-hybrid:8x2".parse::<Method>().unwrap(),
            Method::TwoTierHybrid {
                n_wide_t: 8,
                n_wide_r: 2
            }
        );
        for bad in ["two-tier", "hban:3", "two-tier-joint:8", "nope", "two-tier:x"] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
