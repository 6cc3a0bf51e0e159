use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hban_core::channel::{gen_dataset, load_dataset, save_dataset, Scenario, Split, SystemConfig};
use hban_core::harness::{
    budget_sweep, emit_report, noise_sweep, read_report, Axis, DatasetSource, ExperimentConfig, Method, Metric,
    NoiseLevel, Report,
};
use hban_core::hban::{curve_csv, HbanModel, HbanShape, TrainConfig};
use hban_core::labels::{default_candidates, label_dataset, write_sidecar, DatasetLabels, GroupCount};

#[derive(Parser)]
#[command(name = "hban", version, about = "Hierarchical learned beam alignment experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a channel dataset.
    GenData(GenData),
    /// Write the label sidecar of a dataset.
    Labels(LabelArgs),
    /// Train a hierarchical network.
    Train(TrainArgs),
    /// Evaluate a trained network.
    Eval(EvalArgs),
    /// Accuracy and spectral efficiency against the probing budget.
    BudgetSweep(SweepArgs),
    /// Accuracy and spectral efficiency against the noise level.
    NoiseSweep(SweepArgs),
    /// Re-emit and print the tables of an existing report directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "desk-miso")]
    preset: String,
    /// Link TOML overriding the preset.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Scenario TOML; defaults to the clustered urban scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelOpts {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Fixed number of groups; chosen by the elbow rule when absent.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value_t = 0)]
    label_seed: u64,
}

impl LabelOpts {
    fn load(&self) -> Result<(hban_core::channel::ChannelDataset, DatasetLabels)> {
        let ds = load_dataset(&self.data)?;
        let gc = match self.groups {
            Some(g) => GroupCount::Fixed(g),
            None => GroupCount::Elbow(default_candidates()),
        };
        let labels = label_dataset(&ds, &gc, self.label_seed)?;
        Ok((ds, labels))
    }
}

#[derive(Args)]
struct LabelArgs {
    #[command(flatten)]
    labels: LabelOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    labels: LabelOpts,
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    n2: usize,
    /// Training TOML; overrides the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Training-curve log.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    labels: LabelOpts,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force the true group instead of the selector decision.
    #[arg(long)]
    pcs: bool,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment TOML; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Dataset file instead of a synthetic one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Comma-separated, e.g. `hban,one-tier,two-tier:6`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated `n1+n2` pairs, e.g. `2+2,3+3`.
    #[arg(long, value_delimiter = ',', value_parser = parse_budget)]
    budgets: Option<Vec<[usize; 2]>>,
    /// Comma-separated PSDs in dBm/Hz or `off`.
    #[arg(long, value_delimiter = ',', value_parser = parse_noise, allow_hyphen_values = true)]
    noise_psd: Option<Vec<NoiseLevel>>,
    #[arg(long, value_parser = parse_budget)]
    noise_budget: Option<[usize; 2]>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `cells.csv` and `summary.toml`.
    #[arg(long)]
    dir: PathBuf,
    /// Where to write the tables; defaults to `dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn parse_budget(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once('+').ok_or_else(|| format!("expected n1+n2, got {s:?}"))?;
    let n = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok([n(a)?, n(b)?])
}

fn parse_noise(s: &str) -> Result<NoiseLevel, String> {
    if s == "off" {
        return Ok(NoiseLevel::Off(hban_core::harness::NoiseOff::Off));
    }
    s.parse::<f64>().map(NoiseLevel::Psd).map_err(|e| format!("{s:?}: {e}"))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Tables merged key by key; any other value, enums included, is replaced.
const STRUCT_TABLES: [&str; 1] = ["train"];

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if STRUCT_TABLES.contains(&k.as_str()) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Overlays the keys of a TOML file on a serialized value.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T> {
    let Some(file) = file else {
        return Ok(toml::from_str(&toml::to_string(base)?)?);
    };
    let mut table: toml::Table = toml::from_str(&toml::to_string(base)?)?;
    let over: toml::Table = toml::from_str(&read(file)?).with_context(|| format!("parsing {}", file.display()))?;
    merge(&mut table, over);
    Ok(table.try_into()?)
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = match &a.system {
        Some(p) => SystemConfig::from_toml(&read(p)?)?,
        None => SystemConfig::preset(&a.preset).with_context(|| format!("unknown preset {:?}", a.preset))?,
    };
    let scenario = match &a.scenario {
        Some(p) => Scenario::from_toml(&read(p)?)?,
        None => Scenario::default(),
    };
    let ds = gen_dataset(&cfg, a.seed, &scenario, a.samples)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn labels(a: LabelArgs) -> Result<()> {
    let (ds, labels) = a.labels.load()?;
    std::fs::write(&a.out, write_sidecar(&labels.sidecar_rows(&ds)))?;
    println!("{} groups, wrote {}", labels.g(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (ds, labels) = a.labels.load()?;
    let mut tc = hban_core::harness::desk_train_config();
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.patience = a.patience.unwrap_or(tc.patience);
    tc.xi = a.xi.unwrap_or(tc.xi);
    let tc: TrainConfig = overlay(&tc, a.config.as_deref())?;
    let shape = HbanShape::new(&ds.config, a.n1, a.n2, labels.g());
    let mut model = HbanModel::new(shape, tc.scaling.resolve(&ds), tc.seed)?;
    let c = model.train_coarse(&ds, &labels, &tc)?;
    println!(
        "coarse: selector val accuracy {:.4} at epoch {}",
        c.best_val_accuracy, c.best_epoch
    );
    let f = model.train_fine(&ds, &labels, &tc)?;
    println!(
        "fine: val accuracy {:.4} at epoch {}",
        f.best_val_accuracy, f.best_epoch
    );
    model.save(&a.out)?;
    if let Some(p) = &a.curve {
        let points: Vec<_> = c.curve.into_iter().chain(f.curve).collect();
        std::fs::write(p, curve_csv(&points))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ds, labels) = a.labels.load()?;
    let model = HbanModel::load(&a.model)?;
    if model.shape().g != labels.g() {
        bail!("model has {} groups, labels have {}", model.shape().g, labels.g());
    }
    let r = if a.pcs {
        model.evaluate_pcs(&ds, &labels, a.split, a.trials, a.seed)?
    } else {
        model.evaluate(&ds, &labels, a.split, a.trials, a.seed)?
    };
    println!("accuracy {:.4}", r.accuracy);
    if let Some(rx) = r.accuracy_rx {
        println!("accuracy tx {:.4} rx {:.4}", r.accuracy_tx, rx);
    }
    if let Some(se) = r.mean_se {
        println!("spectral efficiency {se:.4} bit/s/Hz");
    }
    println!("measurements {}", r.sweep_count);
    Ok(())
}

fn sweep_config(a: &SweepArgs) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    if let Some(p) = &a.preset {
        c.preset = p.clone();
    }
    if let Some(p) = &a.data {
        c.dataset = DatasetSource::File { path: p.clone() };
    }
    if let DatasetSource::Synthetic { samples, seed, .. } = &mut c.dataset {
        *samples = a.samples.unwrap_or(*samples);
        *seed = a.data_seed.unwrap_or(*seed);
    }
    if let Some(m) = &a.methods {
        c.methods = m.clone();
    }
    if let Some(b) = &a.budgets {
        c.budgets = b.clone();
    }
    if let Some(n) = &a.noise_psd {
        c.noise_psd = n.clone();
    }
    c.noise_budget = a.noise_budget.unwrap_or(c.noise_budget);
    if let Some(s) = &a.seeds {
        c.seeds = s.clone();
    }
    c.trials = a.trials.unwrap_or(c.trials);
    if let Some(g) = a.groups {
        c.groups = GroupCount::Fixed(g);
    }
    if let Some(o) = &a.out {
        c.output_dir = o.clone();
    }
    overlay(&c, a.config.as_deref())
}

fn print_series(report: &Report, axis: Axis) {
    for p in report.series(axis, Metric::Accuracy) {
        println!("{:>8} {:<24} {:.4} ± {:.4}", p.x, p.series, p.mean, p.stddev);
    }
}

fn sweep(a: SweepArgs, noise: bool) -> Result<ExitCode> {
    let cfg = sweep_config(&a)?;
    let report = if noise { noise_sweep(&cfg)? } else { budget_sweep(&cfg)? };
    emit_report(&report, &cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    print_series(&report, if noise { Axis::Noise } else { Axis::Budget });
    for c in report.cells.iter().filter(|c| c.failed()) {
        eprintln!(
            "failed: {} {}+{} seed {}: {}",
            c.method,
            c.n1,
            c.n2,
            c.seed,
            c.error.as_deref().unwrap_or("")
        );
    }
    Ok(if report.failures() > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let r = read_report(&a.dir)?;
    emit_report(&r, a.out.as_ref().unwrap_or(&a.dir))?;
    println!("config {}", r.config_hash);
    print_series(&r, Axis::Budget);
    Ok(if r.failures() > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(a)?,
        Cmd::Labels(a) => labels(a)?,
        Cmd::Train(a) => train(a)?,
        Cmd::Eval(a) => eval(a)?,
        Cmd::BudgetSweep(a) => return sweep(a, false),
        Cmd::NoiseSweep(a) => return sweep(a, true),
        Cmd::Report(a) => return report(a),
    }
    Ok(ExitCode::SUCCESS)
}
