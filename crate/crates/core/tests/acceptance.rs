//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `HBAN_ACCEPTANCE=1,3` runs a subset.

use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use hban_core::baselines::{counts, Search, SearchKind};
use hban_core::channel::{decode_dataset, encode_dataset, gen_dataset, ChannelDataset, Scenario, Split, SystemConfig};
use hban_core::codebook::{build_binary, build_two_tier, dft_codebook, WideBeamOptions};
use hban_core::harness::{
    emit_report, noise_sweep, run_experiment, DatasetSource, ExperimentConfig, Method, NoiseLevel, NoiseOff, Report,
};
use hban_core::hban::{HbanModel, HbanShape, LabeledSplit, Link, ScalingMode, TrainConfig, TrainStep};
use hban_core::labels::{kmeans, label_dataset, optimal_beam, GroupCount};
use hban_core::neural::{decode_checkpoint, encode_checkpoint, finite_diff_check, softmax, InputScaling, Tensor};
use hban_core::rng::{stream, Purpose};
use hban_core::sweep::draw_noise;
use num_complex::Complex64;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn toy_data(m_r: usize, n_r: usize) -> (ChannelDataset, hban_core::labels::DatasetLabels) {
    let cfg = SystemConfig::new(4, m_r, 8, n_r, 0.5, 10.0, Some(-161.0), 1e8).unwrap();
    let ds = gen_dataset(&cfg, 11, &Scenario::default(), 40).unwrap();
    let labels = label_dataset(&ds, &GroupCount::Fixed(2), 0).unwrap();
    (ds, labels)
}

// ---------------------------------------------------------------- 1

fn gradients() -> Verdict {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (m_r, n_r) in [(1, 1), (2, 4)] {
        let (ds, labels) = toy_data(m_r, n_r);
        let shape = HbanShape::new(&ds.config, 2, 3, 2);
        let mut model = HbanModel::new(shape, ScalingMode::PerSample.resolve(&ds), 5).unwrap();
        let data = LabeledSplit::new(&ds, &labels, Split::Train).unwrap();
        let link = Link::new(&ds.config);
        let per = m_r.max(1);
        let b = data.len();
        let mut rng = stream(3, Purpose::Noise);
        for step in [TrainStep::Coarse, TrainStep::Fine(0), TrainStep::Fine(1)] {
            let count = match step {
                TrainStep::Coarse => b * 2 * per,
                TrainStep::Fine(_) => b * 2 * per + b * 3 * per,
            };
            let noise = draw_noise(&mut rng, count, link.noise_var);
            let x = model.step_values(step);
            let (_, grad) = model
                .step_loss_grad(step, &data.channels, &data.groups, &data.beams, &noise, link, 0.7)
                .unwrap();
            let mut probe = model.clone();
            let err = finite_diff_check(
                |v| {
                    probe.set_step_values(step, v).unwrap();
                    probe
                        .step_loss_grad(step, &data.channels, &data.groups, &data.beams, &noise, link, 0.7)
                        .unwrap()
                        .0
                },
                &x,
                &grad,
                1e-6,
                usize::MAX,
                0,
            );
            worst = worst.max(err);
            checked += x.len();
        }
    }
    verdict(
        worst <= 1e-4,
        format!(
            "max relative error {worst:.2e} over {checked} parameters (MISO and MIMO, coarse and both fine groups)"
        ),
    )
}

// ---------------------------------------------------------------- 2

/// `|w^H H^H v|^2` from the raw array phases.
fn oracle_gain(ds: &ChannelDataset, s: usize, i: usize, j: usize) -> f64 {
    let cfg = &ds.config;
    let h = &ds.samples[s].h;
    let d = cfg.spacing_over_lambda();
    let phase = |k: usize, idx: usize, n: usize| 2.0 * PI * d * (2.0 * idx as f64 - n as f64) / n as f64 * k as f64;
    let (m_t, m_r) = (cfg.m_t(), cfg.m_r());
    let mut acc = Complex64::new(0.0, 0.0);
    for r in 0..m_r {
        let w = if m_r == 1 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(1.0 / (m_r as f64).sqrt(), phase(r, j, cfg.n_r()))
        };
        for t in 0..m_t {
            let v = Complex64::from_polar(1.0 / (m_t as f64).sqrt(), phase(t, i, cfg.n_t()));
            acc += w.conj() * h.get(t, r).conj() * v;
        }
    }
    acc.norm_sqr()
}

fn oracle() -> Verdict {
    let mut mismatches = 0;
    for preset in ["desk-miso", "desk-mimo"] {
        let cfg = SystemConfig::preset(preset).unwrap();
        let ds = gen_dataset(&cfg, 21, &Scenario::default(), 200).unwrap();
        let tx = dft_codebook(cfg.m_t(), cfg.n_t(), cfg.spacing_over_lambda()).unwrap();
        let rx = cfg
            .is_mimo()
            .then(|| dft_codebook(cfg.m_r(), cfg.n_r(), cfg.spacing_over_lambda()).unwrap());
        let n_r = if cfg.is_mimo() { cfg.n_r() } else { 1 };
        for s in 0..ds.len() {
            let mut best = (0, 0, f64::NEG_INFINITY);
            for i in 0..cfg.n_t() {
                for j in 0..n_r {
                    let g = oracle_gain(&ds, s, i, j);
                    if g > best.2 {
                        best = (i, j, g);
                    }
                }
            }
            let label = optimal_beam(&ds.samples[s], &tx, rx.as_ref()).unwrap();
            let want_rx = cfg.is_mimo().then_some(best.1);
            if label.i_star != best.0 || label.j_star != want_rx {
                mismatches += 1;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} mismatches over 200 MISO + 200 MIMO samples"),
    )
}

// ---------------------------------------------------------------- 3

fn sweep_counts() -> Verdict {
    let miso = SystemConfig::preset("full-miso").unwrap();
    let mimo = SystemConfig::preset("full-mimo").unwrap();
    let opts = WideBeamOptions {
        iters: 20,
        restarts: 0,
        ..WideBeamOptions::default()
    };
    let built = |kind: SearchKind, cfg: &SystemConfig| Search::build(&kind, cfg, &opts).unwrap().sweep_count();
    let mut rows: Vec<(&str, usize, usize)> = Vec::new();
    for [n1, n2] in [[3, 3], [4, 4], [4, 6], [6, 6], [6, 8], [6, 10], [6, 12], [6, 14]] {
        rows.push(("hban-miso", HbanShape::new(&miso, n1, n2, 4).sweep_count(), n1 + n2));
    }
    rows.push(("hban-mimo", HbanShape::new(&mimo, 4, 16, 4).sweep_count(), 20));
    rows.push(("exhaustive-miso", built(SearchKind::Exhaustive, &miso), 128));
    rows.push(("two-tier-miso", built(SearchKind::TwoTier { n_wide: 11 }, &miso), 23));
    rows.push(("binary-miso", built(SearchKind::Binary, &miso), 14));
    rows.push(("exhaustive-mimo", built(SearchKind::Exhaustive, &mimo), 4096));
    rows.push((
        "two-tier-joint",
        built(
            SearchKind::TwoTierJoint {
                n_wide_t: 16,
                n_wide_r: 4,
            },
            &mimo,
        ),
        128,
    ));
    rows.push((
        "two-tier-hybrid",
        built(
            SearchKind::TwoTierHybrid {
                n_wide_t: 16,
                n_wide_r: 4,
            },
            &mimo,
        ),
        80,
    ));
    rows.push(("binary-mimo", built(SearchKind::Binary, &mimo), 24));
    rows.push(("closed-form two-tier", counts::two_tier(128, 11), 23));
    rows.push(("closed-form binary-mimo", counts::binary_mimo(128, 32), 24));
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| r.1 != r.2)
        .map(|r| format!("{} got {} want {}", r.0, r.1, r.2))
        .collect();
    let ok = bad.is_empty();
    verdict(
        ok,
        if ok {
            format!("{} counts exact (128, 23, 14, 4096, 128, 80, 24, N1+N2)", rows.len())
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 4-6

const REDUCED: [[usize; 2]; 4] = [[2, 2], [3, 3], [4, 4], [4, 6]];

fn desk_experiment(
    preset: &str,
    methods: Vec<Method>,
    budgets: Vec<[usize; 2]>,
    seeds: Vec<u64>,
    dir: &Path,
) -> Report {
    let cfg = ExperimentConfig {
        preset: preset.into(),
        dataset: DatasetSource::Synthetic {
            samples: 20_000,
            seed: 1,
            scenario: Scenario::default(),
        },
        methods,
        budgets,
        seeds,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(
        report.failures(),
        0,
        "failed cells: {:?}",
        report.cells.iter().filter(|c| c.failed()).collect::<Vec<_>>()
    );
    report
}

fn means(report: &Report, method: &str) -> Vec<f64> {
    REDUCED
        .iter()
        .map(|b| report.mean(method, b[0], b[1], Some(-161.0)).unwrap())
        .collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn pcs_dominance(hban: &[f64], pcs: &[f64]) -> Verdict {
    let margin = hban.iter().zip(pcs).map(|(h, p)| p - h).fold(f64::INFINITY, f64::min);
    verdict(
        margin >= -0.01,
        format!(
            "3-seed means, pcs [{}] vs hban [{}], worst pcs - hban {margin:+.4}",
            fmt(pcs),
            fmt(hban)
        ),
    )
}

fn beats_one_tier(hban: &[f64], one: &[f64]) -> Verdict {
    let worst = hban.iter().zip(one).map(|(h, o)| h - o).fold(f64::INFINITY, f64::min);
    let last = hban[hban.len() - 1] - one[one.len() - 1];
    verdict(
        worst >= -0.005 && last >= 0.01,
        format!(
            "hban [{}] vs one-tier [{}], worst gap {worst:+.4}, gap at budget 10 {last:+.4}",
            fmt(hban),
            fmt(one)
        ),
    )
}

fn monotone(hban: &[f64]) -> Verdict {
    let drops: Vec<f64> = hban.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    let ok = drops.len() <= 1 && drops.iter().all(|d| *d <= 0.01);
    verdict(
        ok,
        format!(
            "hban over budgets 4, 6, 8, 10: [{}], {} inversions",
            fmt(hban),
            drops.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn joint_vs_separate(dir: &Path) -> Verdict {
    let report = desk_experiment(
        "desk-mimo",
        vec![Method::Hban, Method::Separate],
        vec![[4, 8]],
        vec![0, 1, 2],
        dir,
    );
    let noise = SystemConfig::preset("desk-mimo").unwrap().noise_psd_dbm_hz();
    let joint = report.mean("hban", 4, 8, noise).unwrap();
    let sep = report.mean("separate", 4, 8, noise).unwrap();
    verdict(
        joint >= sep,
        format!("budget 12, 3-seed means: joint (4, 8) {joint:.4}, separate {sep:.4}"),
    )
}

// ---------------------------------------------------------------- 8

fn noise_trend(dir: &Path) -> Verdict {
    let levels = vec![
        NoiseLevel::Off(NoiseOff::Off),
        NoiseLevel::Psd(-166.0),
        NoiseLevel::Psd(-161.0),
        NoiseLevel::Psd(-156.0),
    ];
    let cfg = ExperimentConfig {
        methods: vec![
            Method::Hban,
            Method::OneTier,
            Method::Exhaustive,
            Method::Binary,
            Method::TwoTier { n_wide: 6 },
        ],
        noise_psd: levels.clone(),
        noise_budget: [4, 6],
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let report = noise_sweep(&cfg).unwrap();
    let mut ok = report.failures() == 0;
    let mut lines = Vec::new();
    for m in &cfg.methods {
        let acc: Vec<f64> = levels
            .iter()
            .map(|l| report.mean(m.name(), 4, 6, l.psd()).unwrap_or(f64::NAN))
            .collect();
        let rises = acc.windows(2).any(|w| w[1].is_nan() || w[1] > w[0] + 0.02);
        ok &= !rises;
        lines.push(format!("{} [{}]", m.name(), fmt(&acc)));
    }
    let exh = report.mean("exhaustive", 4, 6, None).unwrap_or(f64::NAN);
    ok &= exh == 1.0;
    verdict(
        ok,
        format!(
            "off, -166, -161, -156 dBm/Hz: {}; noise-free exhaustive {exh}",
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn bits(ts: &[Tensor], prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
    ts.iter()
        .filter(|t| prefixes.iter().any(|p| t.name.starts_with(p)))
        .map(|t| (t.name.clone(), t.data.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

fn invariants() -> Verdict {
    let mut failed = Vec::new();
    let cfg = SystemConfig::preset("desk-mimo").unwrap();

    // constant modulus
    let opts = WideBeamOptions::default();
    let mut books = vec![dft_codebook(16, 32, 0.5).unwrap(), dft_codebook(4, 8, 0.5).unwrap()];
    books.extend(build_two_tier(16, 32, 6, &opts).unwrap().tiers().iter().cloned());
    books.extend(build_binary(16, 32, &opts).unwrap().tiers().iter().cloned());
    let model = HbanModel::new(HbanShape::new(&cfg, 3, 5, 4), InputScaling::PerSample, 9).unwrap();
    let (t, r) = model.coarse().beams();
    let mut worst = books
        .iter()
        .flat_map(|b| b.beams())
        .map(|b| b.modulus_deviation())
        .fold(0.0, f64::max);
    worst = t
        .iter()
        .chain(r.iter().flatten())
        .map(|b| b.modulus_deviation())
        .fold(worst, f64::max);
    if worst > 1e-9 {
        failed.push(format!("modulus deviation {worst:.1e}"));
    }

    // softmax normalization
    let mut rng = stream(1, Purpose::Init);
    let mut sm = 0.0f64;
    for _ in 0..1000 {
        let scale = 10f64.powi(rng.random_range(-3..4));
        let logits: Vec<f64> = (0..rng.random_range(1..40))
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        sm = sm.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
    }
    if sm > 1e-12 {
        failed.push(format!("softmax sum error {sm:.1e}"));
    }

    // k-means inertia
    let pts: Vec<Vec<f64>> = (0..500)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    for g in 1..8 {
        let km = kmeans(&pts, g, &mut rng, 100).unwrap();
        if km.history.windows(2).any(|w| w[1] > w[0]) {
            failed.push(format!("inertia increased for g={g}"));
        }
    }

    // dataset round trip
    let ds = gen_dataset(&cfg, 2, &Scenario::default(), 600).unwrap();
    let bytes = encode_dataset(&ds);
    if decode_dataset(&bytes).map(|d| encode_dataset(&d)).ok() != Some(bytes) {
        failed.push("dataset round trip".into());
    }

    // freeze contract and checkpoint round trip
    let labels = label_dataset(&ds, &GroupCount::Fixed(3), 0).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let mut m = HbanModel::new(HbanShape::new(&cfg, 3, 5, 3), ScalingMode::PerSample.resolve(&ds), 4).unwrap();
    m.train_coarse(&ds, &labels, &tc).unwrap();
    let frozen = bits(&m.to_tensors(), &["coarse", "selector"]);
    m.train_fine(&ds, &labels, &tc).unwrap();
    let after = bits(&m.to_tensors(), &["coarse", "selector"]);
    if frozen.is_empty() || frozen != after {
        failed.push("coarse parameters changed during fine training".into());
    }
    let ck = encode_checkpoint(&m.to_tensors());
    let back = HbanModel::from_tensors(&decode_checkpoint(&ck).unwrap()).unwrap();
    if encode_checkpoint(&back.to_tensors()) != ck {
        failed.push("checkpoint round trip".into());
    }

    // full-run determinism
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            preset: "desk-mimo".into(),
            dataset: DatasetSource::Synthetic {
                samples: 600,
                seed: 8,
                scenario: Scenario::default(),
            },
            methods: vec![
                Method::Hban,
                Method::HbanPcs,
                Method::OneTier,
                Method::Separate,
                Method::Exhaustive,
                Method::Binary,
            ],
            budgets: vec![[2, 4]],
            seeds: vec![0, 1],
            groups: GroupCount::Fixed(3),
            train: TrainConfig {
                epochs: 2,
                ..tc.clone()
            },
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg).unwrap();
        emit_report(&report, dir.path()).unwrap();
        files(dir.path())
    };
    let (a, b) = (run(), run());
    if a.len() < 8 || a != b {
        failed.push("experiment outputs differ between runs".into());
    }

    let ok = failed.is_empty();
    verdict(
        ok,
        if ok {
            format!(
                "modulus {worst:.1e}, softmax {sm:.1e}, inertia monotone, freeze bitwise, round trips exact, {} output files identical",
                a.len()
            )
        } else {
            failed.join("; ")
        },
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("HBAN_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut all_ok = true;
    let mut report = |n: u32, name: &str, secs: f64, v: Verdict| {
        all_ok &= v.pass;
        println!(
            "criterion {n} {}: {name}: {} [{secs:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    };
    let timed = |f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        (t.elapsed().as_secs_f64(), v)
    };
    let scratch = tempfile::tempdir().unwrap();

    if wanted(1) {
        let (s, v) = timed(&mut gradients);
        report(1, "gradient check", s, v);
    }
    if wanted(2) {
        let (s, v) = timed(&mut oracle);
        report(2, "label oracle", s, v);
    }
    if wanted(3) {
        let (s, v) = timed(&mut sweep_counts);
        report(3, "sweep counts", s, v);
    }
    if wanted(4) || wanted(5) || wanted(6) {
        let t = Instant::now();
        let r = desk_experiment(
            "desk-miso",
            vec![Method::Hban, Method::HbanPcs, Method::OneTier],
            REDUCED.to_vec(),
            vec![0, 1, 2],
            &scratch.path().join("miso"),
        );
        let s = t.elapsed().as_secs_f64();
        let (hban, pcs, one) = (means(&r, "hban"), means(&r, "hban-pcs"), means(&r, "one-tier"));
        if wanted(4) {
            report(4, "perfect selection dominance", s, pcs_dominance(&hban, &pcs));
        }
        if wanted(5) {
            report(5, "hierarchy beats one tier", s, beats_one_tier(&hban, &one));
        }
        if wanted(6) {
            report(6, "monotone budget trend", s, monotone(&hban));
        }
    }
    if wanted(7) {
        let dir = scratch.path().join("mimo");
        let (s, v) = timed(&mut || joint_vs_separate(&dir));
        report(7, "joint beats separate", s, v);
    }
    if wanted(8) {
        let dir = scratch.path().join("noise");
        let (s, v) = timed(&mut || noise_trend(&dir));
        report(8, "noise robustness", s, v);
    }
    if wanted(9) {
        let (s, v) = timed(&mut invariants);
        report(9, "invariant suites", s, v);
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
