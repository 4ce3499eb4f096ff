//! Data preparation, training, valuation and the artifact directory layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use verfedsv::completion::{
    approx_epsilon_rank, complete_trace_per_client, rank_bound, CompletedEmbeddings,
    CompletionConfig, Init,
};
use verfedsv::data::{
    equal_splits, load_libsvm, make_noisy_clone, make_random_client, partition_vertical,
    train_test_indices, VerticalDataset,
};
use verfedsv::fedsgd::{run_fedsgd, EmbeddingTrace, LearningRate, LossScope, SyncConfig};
use verfedsv::history::{DenseHistory, EmbeddingHistory};
use verfedsv::model::{accuracy, LocalModel};
use verfedsv::shapley::{
    exact_verfedsv, hoeffding_k, max_norm_lipschitz, mc_verfedsv, ErrorBudget, McConfig,
    UtilityEvaluator, ValuationResult,
};
use verfedsv::trace_io::{self, EmbeddingShape};
use verfedsv::vafl::{run_vafl, AsyncConfig, ClientProfile, EventRecord, SnapshotLog};

use crate::config::{ExperimentConfig, InitKind, Mode, Schedule, SyntheticClient, ValuationMethod};

/// Independent seed streams derived from the top-level seed.
pub mod stream {
    pub const SUBSAMPLE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const RANDOM_CLIENT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const COMPLETION: u64 = 6;
    pub const VALUATION: u64 = 7;
    pub const PILOT: u64 = 8;
    pub const CLIENT: u64 = 9;
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train and test rows of the vertically split data, synthetic clients
/// included.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: VerticalDataset,
    pub test: VerticalDataset,
    /// Report label of every client.
    pub kinds: Vec<String>,
    pub n_regular: usize,
}

fn trim(x: f64) -> String {
    let s = format!("{x}");
    s.trim_end_matches(".0").to_string()
}

fn kind_label(s: &SyntheticClient, mode: Mode) -> String {
    match s {
        SyntheticClient::Clone { period: Some(p), .. } if mode == Mode::Async => {
            format!("frequency({})", trim(*p))
        }
        SyntheticClient::Clone { fraction, .. } => format!("clone({}%)", trim((fraction * 100.0).round())),
        SyntheticClient::Random { .. } => "random".into(),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let ds = load_libsvm(&cfg.dataset.path, cfg.dataset.dim)
        .with_context(|| format!("cannot load dataset {}", cfg.dataset.path.display()))?;
    let ds = match cfg.dataset.subsample {
        Some(n) => ds.subsample(n, derive_seed(cfg.seed, stream::SUBSAMPLE)),
        None => ds,
    };
    let splits = match &cfg.dataset.splits {
        Some(s) => s.clone(),
        None => equal_splits(ds.dim(), cfg.dataset.clients)?,
    };
    let mut data = partition_vertical(&ds, &splits)?;
    let n_regular = data.n_clients();
    let n = data.n_samples();
    let mut kinds = vec!["regular".to_string(); n_regular];
    for (k, s) in cfg.synthetic.iter().enumerate() {
        let features = match s {
            SyntheticClient::Clone { source, fraction, noise_std, .. } => {
                ensure!(*source < n_regular, "synthetic client {k}: no regular client {source}");
                let seed = derive_seed(cfg.seed, stream::NOISE);
                make_noisy_clone(&data.clients[*source], *fraction, *noise_std, seed).features
            }
            SyntheticClient::Random { dim, mean, std, center, .. } => {
                let seed = derive_seed(cfg.seed, stream::RANDOM_CLIENT) ^ k as u64;
                let mut f = make_random_client(n, *dim, *mean, *std, seed)?.features;
                if *center {
                    let mu = f.mean_axis(Axis(0)).expect("nonempty block");
                    f -= &mu;
                }
                f
            }
        };
        data.push_client(features)?;
        kinds.push(kind_label(s, cfg.mode));
    }
    if cfg.dataset.normalize {
        data = data.normalized();
    }
    let (train, test) = train_test_indices(n, cfg.dataset.test_fraction, derive_seed(cfg.seed, stream::SPLIT))?;
    Ok(Prepared {
        train: data.select_rows(&train),
        test: data.select_rows(&test),
        kinds,
        n_regular,
    })
}

/// Embedding record of a run.
#[derive(Clone, Debug)]
pub enum History {
    Sync(EmbeddingTrace),
    Async { snapshots: SnapshotLog, events: Vec<EventRecord> },
}

impl History {
    pub fn n_rounds(&self) -> usize {
        match self {
            History::Sync(t) => t.n_rounds(),
            History::Async { snapshots, .. } => snapshots.n_rounds(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            History::Sync(t) => t.channels,
            History::Async { snapshots, .. } => snapshots.channels,
        }
    }
}

/// `(t, loss, scope)` rows of `loss.csv`.
pub type LossRows = Vec<(usize, f64, &'static str)>;

#[derive(Clone, Debug)]
pub struct Trained {
    pub models: Vec<LocalModel>,
    pub history: History,
    pub truth: Option<DenseHistory>,
    pub losses: LossRows,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

fn async_profiles(cfg: &ExperimentConfig, n_regular: usize) -> Result<Vec<ClientProfile>> {
    let a = &cfg.async_;
    if let Some(p) = &a.periods {
        ensure!(
            p.len() == n_regular,
            "[async] periods lists {} values for {n_regular} regular clients",
            p.len()
        );
    }
    let regular = (0..n_regular).map(|m| (a.periods.as_ref().map_or(a.period, |p| p[m]), a.tau));
    let extra = cfg
        .synthetic
        .iter()
        .map(|s| (s.period().unwrap_or(a.period), s.tau().unwrap_or(a.tau)));
    Ok(regular
        .chain(extra)
        .enumerate()
        .map(|(m, (period, tau))| {
            let mut p = ClientProfile::new(m, tau, period, a.learning_rate);
            p.seed = derive_seed(cfg.seed, stream::CLIENT) ^ m as u64;
            p.participation = a.participation;
            p
        })
        .collect())
}

pub fn train(cfg: &ExperimentConfig, data: &Prepared) -> Result<Trained> {
    let seed = derive_seed(cfg.seed, stream::TRAIN);
    let (models, history, truth, losses) = match cfg.mode {
        Mode::Sync => {
            let s = &cfg.sync;
            let lr = match s.schedule {
                Schedule::Constant => LearningRate::Constant(s.learning_rate),
                Schedule::InverseTime => LearningRate::InverseTime(s.learning_rate),
            };
            let batch = s.batch_size.min(data.train.n_samples());
            let mut sc = SyncConfig::new(s.rounds, batch, lr, seed);
            sc.loss = cfg.loss;
            sc.l2 = s.l2;
            sc.record_full = s.record_truth;
            let mut run = run_fedsgd(&data.train, &sc)?;
            let truth = run.trace.full.take();
            let losses = run
                .loss_history
                .iter()
                .map(|r| {
                    let scope = match r.scope {
                        LossScope::Batch => "batch",
                        LossScope::Full => "full",
                    };
                    (r.round, r.loss, scope)
                })
                .collect();
            (run.models, History::Sync(run.trace), truth, losses)
        }
        Mode::Async => {
            let a = &cfg.async_;
            let mut ac = AsyncConfig::new(
                a.total_time,
                a.valuation_interval,
                async_profiles(cfg, data.n_regular)?,
                seed,
            );
            ac.loss = cfg.loss;
            ac.l2 = a.l2;
            let run = run_vafl(&data.train, &ac)?;
            let losses = run.loss_history.iter().map(|&(t, l)| (t, l, "server")).collect();
            let history = History::Async {
                snapshots: run.snapshots,
                events: run.events,
            };
            (run.models, history, None, losses)
        }
    };
    let train_accuracy = accuracy(&models, &data.train)?;
    let test_accuracy = if data.test.n_samples() > 0 {
        Some(accuracy(&models, &data.test)?)
    } else {
        None
    };
    Ok(Trained {
        models,
        history,
        truth,
        losses,
        train_accuracy,
        test_accuracy,
    })
}

/// Completion settings for every client.
pub fn completion_configs(cfg: &ExperimentConfig, dims: &[usize], rounds: usize, n: usize) -> Vec<CompletionConfig> {
    let c = &cfg.completion;
    let seed = derive_seed(cfg.seed, stream::COMPLETION);
    dims.iter()
        .map(|&d_m| {
            let mut cc = CompletionConfig::for_shape(d_m, rounds, n, seed);
            if let Some(r) = c.rank {
                cc.rank = r;
            }
            cc.lambda = c.lambda;
            cc.max_iters = c.max_iters;
            cc.tol = c.tol;
            cc.init = match c.init {
                InitKind::Spectral => Init::Spectral,
                InitKind::Random => Init::Random,
            };
            cc
        })
        .collect()
}

/// Valuation of one embedding history with the configured method.
pub fn value_history(cfg: &ExperimentConfig, history: &dyn EmbeddingHistory, labels: &[usize]) -> Result<ValuationResult> {
    let v = &cfg.valuation;
    let eval = UtilityEvaluator::new(history, labels, &cfg.loss)?;
    let m = eval.n_clients();
    let exact = match v.method {
        ValuationMethod::Exact => true,
        ValuationMethod::MonteCarlo => false,
        ValuationMethod::Auto => m <= v.exact_max_clients,
    };
    if exact {
        return Ok(exact_verfedsv(&eval, false)?);
    }
    let seed = v.seed.unwrap_or_else(|| derive_seed(cfg.seed, stream::VALUATION));
    let permutations = match v.permutations {
        Some(k) => k,
        None => {
            let mut pilot = McConfig::new(v.pilot_permutations.max(1), derive_seed(seed, stream::PILOT));
            pilot.delta = v.delta;
            let p = mc_verfedsv(&eval, &pilot)?;
            let range = p.mc_bound.as_ref().map_or(0.0, |b| b.range);
            let total: f64 = p.values.iter().sum();
            let eps = v.share_error * if total != 0.0 { total.abs() } else { 1.0 };
            let k = hoeffding_k(range, m, eps, v.delta);
            log::info!("pilot range {range:e}, target value error {eps:e}: K = {k}");
            (k.min(v.max_permutations as u64) as usize).max(1)
        }
    };
    let mut mc = McConfig::new(permutations, seed);
    mc.delta = v.delta;
    mc.antithetic = v.antithetic;
    Ok(mc_verfedsv(&eval, &mc)?)
}

#[derive(Clone, Debug)]
pub struct Valued {
    pub result: ValuationResult,
    pub completion: Option<CompletedEmbeddings>,
    pub ranks: Vec<usize>,
}

/// Completes a synchronous trace when needed, then values it.
pub fn value(
    cfg: &ExperimentConfig,
    history: &History,
    truth: Option<&DenseHistory>,
    dims: &[usize],
    labels: &[usize],
) -> Result<Valued> {
    match history {
        History::Sync(trace) => {
            let cfgs = completion_configs(cfg, dims, trace.n_rounds(), trace.n_samples);
            let mut completed = complete_trace_per_client(trace, &cfgs)?;
            if let Some(t) = truth {
                completed.evaluate_against(t)?;
            }
            let mut result = value_history(cfg, &completed, labels)?;
            result.completion_bound = Some(ErrorBudget::from_fits(
                &completed.fits,
                max_norm_lipschitz(&cfg.loss, trace.channels),
            ));
            Ok(Valued {
                result,
                completion: Some(completed),
                ranks: cfgs.iter().map(|c| c.rank).collect(),
            })
        }
        History::Async { snapshots, .. } => Ok(Valued {
            result: value_history(cfg, snapshots, labels)?,
            completion: None,
            ranks: Vec::new(),
        }),
    }
}

/// Contents of `manifest.toml` in a training output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub mode: Mode,
    pub n_clients: usize,
    pub n_samples: usize,
    pub channels: usize,
    pub n_rounds: usize,
    pub dims: Vec<usize>,
    pub kinds: Vec<String>,
    pub has_truth: bool,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn shape(&self) -> EmbeddingShape {
        EmbeddingShape {
            n_clients: self.n_clients,
            n_samples: self.n_samples,
            channels: self.channels,
            n_rounds: self.n_rounds,
        }
    }
}

pub const MANIFEST: &str = "manifest.toml";

fn write_text(path: &Path, text: &str) -> Result<()> {
    trace_io::write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
        .with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn train_summary(cfg: &ExperimentConfig, data: &Prepared, run: &Trained) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", cfg.mode.name());
    let _ = writeln!(s, "T: {}", run.history.n_rounds());
    let _ = writeln!(s, "M: {}", data.train.n_clients());
    let _ = writeln!(s, "N: {}", data.train.n_samples());
    let _ = writeln!(s, "N_test: {}", data.test.n_samples());
    let _ = writeln!(s, "train_accuracy: {:.4}", run.train_accuracy);
    match run.test_accuracy {
        Some(a) => {
            let _ = writeln!(s, "test_accuracy: {a:.4}");
        }
        None => {
            let _ = writeln!(s, "test_accuracy: n/a");
        }
    }
    if let Some(&(t, l, scope)) = run.losses.last() {
        let _ = writeln!(s, "final_loss: {l:.6} ({scope}, t = {t})");
    }
    s
}

/// Writes the training artifacts and returns the manifest.
pub fn write_training(dir: &Path, cfg: &ExperimentConfig, data: &Prepared, run: &Trained) -> Result<Manifest> {
    create_dir(dir)?;
    let manifest = Manifest {
        mode: cfg.mode,
        n_clients: data.train.n_clients(),
        n_samples: data.train.n_samples(),
        channels: run.history.channels(),
        n_rounds: run.history.n_rounds(),
        dims: data.train.dims(),
        kinds: data.kinds.clone(),
        has_truth: run.truth.is_some(),
        train_accuracy: run.train_accuracy,
        test_accuracy: run.test_accuracy,
        config: ExperimentConfig {
            output: PathBuf::from("."),
            ..cfg.clone()
        },
    };
    write_text(&dir.join(MANIFEST), &toml::to_string(&manifest)?)?;
    trace_io::write_labels(&dir.join("labels.csv"), &data.train.labels)?;
    match &run.history {
        History::Sync(trace) => trace_io::write_sync_trace(&dir.join("trace.csv"), trace)?,
        History::Async { snapshots, events } => {
            trace_io::write_snapshot_log(&dir.join("snapshots.csv"), snapshots)?;
            trace_io::write_events(&dir.join("events.csv"), events)?;
        }
    }
    if let Some(truth) = &run.truth {
        trace_io::write_dense_history(&dir.join("truth.csv"), truth)?;
    }
    trace_io::write_table(
        &dir.join("loss.csv"),
        &["t", "loss", "scope"],
        run.losses
            .iter()
            .map(|&(t, l, scope)| vec![t.to_string(), l.to_string(), scope.to_string()]),
    )?;
    write_text(&dir.join("train_summary.txt"), &train_summary(cfg, data, run))?;
    Ok(manifest)
}

/// `train` subcommand.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let run = train(cfg, &data)?;
    write_training(&cfg.output, cfg, &data, &run)?;
    Ok(train_summary(cfg, &data, &run))
}

/// Training artifacts read back from a directory.
pub struct Loaded {
    pub manifest: Manifest,
    pub labels: Vec<usize>,
    pub history: History,
    pub truth: Option<DenseHistory>,
}

pub fn load_training(dir: &Path) -> Result<Loaded> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("cannot read {} (run `verfedsv train` first)", path.display()))?;
    let manifest: Manifest = toml::from_str(&text).with_context(|| format!("invalid {}", path.display()))?;
    let shape = manifest.shape();
    let labels = trace_io::read_labels(&dir.join("labels.csv"))?;
    ensure!(
        labels.len() == manifest.n_samples,
        "labels.csv has {} samples, manifest says {}",
        labels.len(),
        manifest.n_samples
    );
    let history = match manifest.mode {
        Mode::Sync => History::Sync(trace_io::read_sync_trace(&dir.join("trace.csv"), shape)?),
        Mode::Async => History::Async {
            snapshots: trace_io::read_snapshot_log(&dir.join("snapshots.csv"), shape)?,
            events: trace_io::read_events(&dir.join("events.csv"))?,
        },
    };
    let truth = if manifest.has_truth {
        Some(trace_io::read_dense_history(&dir.join("truth.csv"), shape)?)
    } else {
        None
    };
    Ok(Loaded {
        manifest,
        labels,
        history,
        truth,
    })
}

pub fn value_summary(cfg: &ExperimentConfig, shape: EmbeddingShape, valued: &Valued, kinds: &[String]) -> String {
    let r = &valued.result;
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", cfg.mode.name());
    let _ = writeln!(s, "T: {}", shape.n_rounds);
    let _ = writeln!(s, "M: {}", shape.n_clients);
    let _ = writeln!(s, "N: {}", shape.n_samples);
    let _ = writeln!(s, "method: {}", r.method.name());
    if let (Some(k), Some(seed)) = (r.permutations(), r.seed()) {
        let _ = writeln!(s, "K: {k}");
        let _ = writeln!(s, "seed: {seed}");
    }
    match &r.mc_bound {
        Some(b) => {
            let _ = writeln!(
                s,
                "monte_carlo: epsilon = {:e}, delta = {}, range = {:e}",
                b.epsilon, b.delta, b.range
            );
        }
        None => {
            let _ = writeln!(s, "monte_carlo: n/a (exact)");
        }
    }
    match &r.completion_bound {
        Some(b) => {
            let _ = writeln!(
                s,
                "completion: epsilon = {:e} ({:?} residuals), G = {}, 2G epsilon = {:e}",
                b.epsilon, b.source, b.lipschitz, b.budget
            );
        }
        None => {
            let _ = writeln!(s, "completion: n/a (all embeddings observed)");
        }
    }
    if let Some(e) = r.error_bound() {
        let _ = writeln!(s, "error_bound: {e:e}");
    }
    let shares = r.shares();
    for (m, v) in r.values.iter().enumerate() {
        let kind = kinds.get(m).map_or("client", String::as_str);
        let _ = writeln!(s, "client {m} ({kind}): value {v:.6e}, share {:.2}%", 100.0 * shares[m]);
    }
    s
}

/// Writes `values.csv`, `completion_fit.csv` and `value_summary.txt`.
pub fn write_valuation(
    dir: &Path,
    cfg: &ExperimentConfig,
    shape: EmbeddingShape,
    valued: &Valued,
    kinds: &[String],
) -> Result<String> {
    create_dir(dir)?;
    trace_io::write_valuation(&dir.join("values.csv"), &valued.result, kinds)?;
    if let Some(c) = &valued.completion {
        write_completion_fit(&dir.join("completion_fit.csv"), c, &valued.ranks)?;
    }
    let summary = value_summary(cfg, shape, valued, kinds);
    write_text(&dir.join("value_summary.txt"), &summary)?;
    Ok(summary)
}

fn write_completion_fit(path: &Path, c: &CompletedEmbeddings, ranks: &[usize]) -> Result<()> {
    let mut rows = Vec::new();
    for (m, per_channel) in c.factors.iter().enumerate() {
        for (ch, f) in per_channel.iter().enumerate() {
            rows.push(vec![
                m.to_string(),
                ch.to_string(),
                ranks[m].to_string(),
                f.report.iterations.to_string(),
                f.report.converged.to_string(),
                f.report.observed_rmse.to_string(),
                f.report.observed_max_residual.to_string(),
                c.fits[m].heldout_max_residual.map_or_else(String::new, |v| v.to_string()),
            ]);
        }
    }
    trace_io::write_table(
        path,
        &[
            "client_id",
            "channel",
            "rank",
            "iterations",
            "converged",
            "observed_rmse",
            "observed_max_residual",
            "heldout_max_residual",
        ],
        rows,
    )?;
    Ok(())
}

/// `value` subcommand. `cfg` supplies the valuation and completion
/// settings; everything else comes from the training manifest.
pub fn cmd_value(cfg: &ExperimentConfig, trace_dir: &Path, output: Option<&Path>) -> Result<String> {
    let loaded = load_training(trace_dir)?;
    let m = &loaded.manifest;
    let mut vcfg = m.config.clone();
    vcfg.valuation = cfg.valuation.clone();
    vcfg.completion = cfg.completion.clone();
    vcfg.seed = cfg.seed;
    let valued = value(&vcfg, &loaded.history, loaded.truth.as_ref(), &m.dims, &loaded.labels)?;
    let out: PathBuf = output.map_or_else(|| trace_dir.to_path_buf(), Path::to_path_buf);
    write_valuation(&out, &vcfg, m.shape(), &valued, &m.kinds)
}

/// One row of `rank_report.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankRow {
    pub client: usize,
    pub channel: usize,
    pub d_m: usize,
    pub eps_rank: usize,
    pub bound: usize,
}

/// Approximate ranks of every client/channel embedding matrix of a fully
/// recorded synchronous run.
pub fn rank_rows(cfg: &ExperimentConfig, truth: &DenseHistory, dims: &[usize]) -> Vec<RankRow> {
    let r = &cfg.rank_report;
    let rounds = truth.n_rounds();
    let mut rows = Vec::new();
    for (m, &d_m) in dims.iter().enumerate() {
        for c in 0..truth.channels() {
            let matrix = truth.client_channel_matrix(m, c);
            rows.push(RankRow {
                client: m,
                channel: c,
                d_m,
                eps_rank: approx_epsilon_rank(matrix.view(), r.epsilon),
                bound: rank_bound(d_m, r.lipschitz, rounds, r.bound_epsilon),
            });
        }
    }
    rows
}

pub fn write_rank_rows(path: &Path, rows: &[RankRow]) -> Result<()> {
    trace_io::write_table(
        path,
        &["client", "channel", "d_m", "eps_rank", "bound"],
        rows.iter().map(|r| {
            vec![
                r.client.to_string(),
                r.channel.to_string(),
                r.d_m.to_string(),
                r.eps_rank.to_string(),
                r.bound.to_string(),
            ]
        }),
    )?;
    Ok(())
}

/// `rank-report` subcommand: a synchronous run with every embedding
/// recorded, followed by the rank table.
pub fn cmd_rank_report(cfg: &ExperimentConfig) -> Result<(Vec<RankRow>, String)> {
    if cfg.mode != Mode::Sync {
        bail!("rank-report needs mode = \"sync\"");
    }
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.sync.record_truth = true;
    let data = prepare(&cfg)?;
    let run = train(&cfg, &data)?;
    let truth = run.truth.as_ref().expect("truth recorded");
    let rows = rank_rows(&cfg, truth, &data.train.dims());
    create_dir(&cfg.output)?;
    write_rank_rows(&cfg.output.join("rank_report.csv"), &rows)?;
    let mut s = train_summary(&cfg, &data, &run);
    let _ = writeln!(s, "epsilon: {}", cfg.rank_report.epsilon);
    for r in &rows {
        let _ = writeln!(
            s,
            "client {} channel {}: eps-rank {} (d_m {}, bound {})",
            r.client, r.channel, r.eps_rank, r.d_m, r.bound
        );
    }
    write_text(&cfg.output.join("rank_summary.txt"), &s)?;
    Ok((rows, s))
}
