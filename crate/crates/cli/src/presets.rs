//! Desk-scale fairness experiments and the rank report.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use verfedsv::trace_io;

use crate::config::{ExperimentConfig, Mode, Schedule, SyntheticClient, ValuationMethod};
use crate::pipeline::{self, Prepared, RankRow, Trained, Valued};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Heterogeneity,
    RandomFeatureSync,
    Frequency,
    RandomFeatureAsync,
    RankReport,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Heterogeneity,
        Preset::RandomFeatureSync,
        Preset::Frequency,
        Preset::RandomFeatureAsync,
        Preset::RankReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Heterogeneity => "heterogeneity",
            Preset::RandomFeatureSync => "random_feature_sync",
            Preset::Frequency => "frequency",
            Preset::RandomFeatureAsync => "random_feature_async",
            Preset::RankReport => "rank_report",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        match Preset::ALL.iter().find(|p| p.name() == s) {
            Some(&p) => Ok(p),
            None => bail!(
                "unknown preset '{s}', expected one of: {}",
                Preset::ALL.map(Preset::name).join(", ")
            ),
        }
    }
}

/// Heterogeneity levels of the noisy clones.
pub const HETEROGENEITY: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
/// Number of synthetic clients in the random-feature and frequency presets.
pub const EXTRA_CLIENTS: usize = 5;

fn desk_sync(cfg: &mut ExperimentConfig) {
    cfg.mode = Mode::Sync;
    cfg.dataset.subsample = Some(5000);
    cfg.sync.rounds = 100;
    cfg.sync.batch_size = 800;
    cfg.sync.learning_rate = 2.0;
    cfg.sync.schedule = Schedule::Constant;
    cfg.completion.rank = Some(10);
    cfg.completion.max_iters = 50;
    cfg.completion.tol = 1e-6;
    cfg.valuation.method = ValuationMethod::Exact;
}

fn desk_async(cfg: &mut ExperimentConfig) {
    cfg.mode = Mode::Async;
    cfg.dataset.subsample = Some(2500);
    cfg.async_.total_time = 2.0;
    cfg.async_.valuation_interval = 0.02;
    cfg.async_.tau = 100;
    cfg.async_.period = 0.01;
    cfg.async_.periods = None;
    cfg.async_.learning_rate = 1.0;
    cfg.async_.participation = 1.0;
    cfg.valuation.method = ValuationMethod::Exact;
}

fn period(i: usize) -> f64 {
    0.01 * i as f64
}

/// The preset's fixed design applied on top of `base`, which keeps its
/// dataset path, seed, output directory and loss.
pub fn preset_config(preset: Preset, base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = base.clone();
    match preset {
        Preset::Heterogeneity => {
            desk_sync(&mut cfg);
            cfg.synthetic = HETEROGENEITY
                .iter()
                .map(|&fraction| SyntheticClient::Clone {
                    source: 0,
                    fraction,
                    noise_std: 1.0,
                    period: None,
                    tau: None,
                })
                .collect();
        }
        Preset::RandomFeatureSync => {
            desk_sync(&mut cfg);
            cfg.synthetic = (1..=EXTRA_CLIENTS)
                .map(|i| SyntheticClient::Random {
                    dim: 10,
                    mean: i as f64,
                    std: i as f64,
                    center: true,
                    period: None,
                    tau: None,
                })
                .collect();
        }
        Preset::Frequency => {
            desk_async(&mut cfg);
            cfg.synthetic = (1..=EXTRA_CLIENTS)
                .map(|i| SyntheticClient::Clone {
                    source: 0,
                    fraction: 0.0,
                    noise_std: 1.0,
                    period: Some(period(i)),
                    tau: None,
                })
                .collect();
        }
        Preset::RandomFeatureAsync => {
            desk_async(&mut cfg);
            cfg.synthetic = (1..=EXTRA_CLIENTS)
                .map(|i| SyntheticClient::Random {
                    dim: 10,
                    mean: 0.0,
                    std: 1.0,
                    center: true,
                    period: Some(period(i)),
                    tau: None,
                })
                .collect();
        }
        Preset::RankReport => {
            cfg.mode = Mode::Sync;
            cfg.dataset.subsample = Some(5000);
            cfg.sync.rounds = 200;
            cfg.sync.batch_size = 800;
            cfg.sync.learning_rate = 2.0;
            cfg.sync.schedule = Schedule::InverseTime;
            cfg.synthetic.clear();
        }
    }
    cfg
}

/// Everything a valuation preset produced.
pub struct Outcome {
    pub data: Prepared,
    pub run: Trained,
    pub valued: Valued,
    pub summary: String,
}

impl Outcome {
    pub fn shares_pct(&self) -> Vec<f64> {
        self.valued.result.shares().iter().map(|s| 100.0 * s).collect()
    }

    /// Summed share of the regular clients, in percent.
    pub fn regular_share_pct(&self) -> f64 {
        self.shares_pct()[..self.data.n_regular].iter().sum()
    }
}

/// `|s_source - s_clone| / |s_source|` for every clone, with its
/// heterogeneity in percent.
pub fn relative_differences(cfg: &ExperimentConfig, values: &[f64], n_regular: usize) -> Vec<(f64, usize, f64)> {
    cfg.synthetic
        .iter()
        .enumerate()
        .filter_map(|(k, s)| match s {
            SyntheticClient::Clone { source, fraction, .. } => {
                let m = n_regular + k;
                let base = values[*source];
                Some((100.0 * fraction, m, (base - values[m]).abs() / base.abs()))
            }
            SyntheticClient::Random { .. } => None,
        })
        .collect()
}

/// Trains and values one preset configuration without writing anything.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let data = pipeline::prepare(cfg)?;
    let run = pipeline::train(cfg, &data)?;
    let valued = pipeline::value(cfg, &run.history, run.truth.as_ref(), &data.train.dims(), &data.train.labels)?;
    let shape = trace_io::EmbeddingShape {
        n_clients: data.train.n_clients(),
        n_samples: data.train.n_samples(),
        channels: run.history.channels(),
        n_rounds: run.history.n_rounds(),
    };
    let mut summary = pipeline::train_summary(cfg, &data, &run);
    summary.push_str(&pipeline::value_summary(cfg, shape, &valued, &data.kinds)[..]);
    Ok(Outcome {
        data,
        run,
        valued,
        summary,
    })
}

fn fmt(x: f64) -> String {
    x.to_string()
}

fn write_preset_table(preset: Preset, dir: &Path, cfg: &ExperimentConfig, out: &Outcome) -> Result<String> {
    let path = dir.join(format!("{}.csv", preset.name()));
    let r = &out.valued.result;
    let shares = out.shares_pct();
    let mut extra = String::new();
    match preset {
        Preset::Heterogeneity => {
            let diffs = relative_differences(cfg, &r.values, out.data.n_regular);
            trace_io::write_table(
                &path,
                &["het_pct", "client_id", "value", "rel_diff"],
                diffs
                    .iter()
                    .map(|&(h, m, d)| vec![fmt(h), m.to_string(), fmt(r.values[m]), fmt(d)]),
            )?;
            for (h, m, d) in diffs {
                let _ = writeln!(extra, "heterogeneity {h}%: client {m}, relative difference {d:.4e}");
            }
        }
        Preset::RandomFeatureSync | Preset::RandomFeatureAsync => {
            trace_io::write_table(
                &path,
                &["client_id", "kind", "value", "share_pct"],
                (0..r.values.len()).map(|m| {
                    vec![m.to_string(), out.data.kinds[m].clone(), fmt(r.values[m]), fmt(shares[m])]
                }),
            )?;
            let regular = out.regular_share_pct();
            let _ = writeln!(extra, "regular clients: {regular:.2}%");
            let _ = writeln!(extra, "random clients: {:.2}%", 100.0 - regular);
        }
        Preset::Frequency => {
            let periods = client_periods(cfg, out.data.n_regular);
            trace_io::write_table(
                &path,
                &["period", "client_id", "kind", "share_pct"],
                (0..r.values.len())
                    .map(|m| vec![fmt(periods[m]), m.to_string(), out.data.kinds[m].clone(), fmt(shares[m])]),
            )?;
        }
        Preset::RankReport => unreachable!("rank report has its own table"),
    }
    Ok(extra)
}

/// Push period of every client in an asynchronous configuration.
pub fn client_periods(cfg: &ExperimentConfig, n_regular: usize) -> Vec<f64> {
    let a = &cfg.async_;
    (0..n_regular)
        .map(|m| a.periods.as_ref().map_or(a.period, |p| p[m]))
        .chain(cfg.synthetic.iter().map(|s| s.period().unwrap_or(a.period)))
        .collect()
}

/// Result of `experiment`.
pub enum PresetReport {
    Valuation(Outcome),
    Ranks(Vec<RankRow>, String),
}

impl PresetReport {
    pub fn summary(&self) -> &str {
        match self {
            PresetReport::Valuation(o) => &o.summary,
            PresetReport::Ranks(_, s) => s,
        }
    }
}

/// Runs a preset with `cfg` already holding the preset design, and writes
/// its table, `values.csv` and a summary into the output directory.
pub fn run_preset(preset: Preset, cfg: &ExperimentConfig) -> Result<PresetReport> {
    if preset == Preset::RankReport {
        let (rows, s) = pipeline::cmd_rank_report(cfg)?;
        return Ok(PresetReport::Ranks(rows, s));
    }
    let mut out = evaluate(cfg)?;
    let dir = &cfg.output;
    std::fs::create_dir_all(dir)?;
    let shape = trace_io::EmbeddingShape {
        n_clients: out.data.train.n_clients(),
        n_samples: out.data.train.n_samples(),
        channels: out.run.history.channels(),
        n_rounds: out.run.history.n_rounds(),
    };
    pipeline::write_valuation(dir, cfg, shape, &out.valued, &out.data.kinds)?;
    let extra = write_preset_table(preset, dir, cfg, &out)?;
    out.summary = format!("preset: {}\n{}{}", preset.name(), out.summary, extra);
    trace_io::write_atomic(&dir.join("summary.txt"), |w| Ok(w.write_all(out.summary.as_bytes())?))?;
    Ok(PresetReport::Valuation(out))
}
