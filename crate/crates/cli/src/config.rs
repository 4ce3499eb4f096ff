//! Experiment configuration read from TOML, with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use verfedsv::model::LossKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Async,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            other => bail!("unknown mode '{other}', expected 'sync' or 'async'"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// LIBSVM file.
    pub path: PathBuf,
    /// Feature dimension; inferred from the file when absent.
    pub dim: Option<usize>,
    /// Rows kept (seeded) before the train/test split.
    pub subsample: Option<usize>,
    pub test_fraction: f64,
    /// Number of equal contiguous feature blocks, used when `splits` is absent.
    pub clients: usize,
    pub splits: Option<Vec<usize>>,
    /// Scale every client's rows to unit norm.
    pub normalize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/adult.libsvm"),
            dim: None,
            subsample: None,
            test_fraction: 0.2,
            clients: 3,
            splits: None,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    InverseTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncSection {
    pub rounds: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub l2: f64,
    /// Also store every embedding at every round (`truth.csv`), used to
    /// measure completion error.
    pub record_truth: bool,
}

impl Default for SyncSection {
    fn default() -> Self {
        Self {
            rounds: 100,
            batch_size: 500,
            learning_rate: 2.0,
            schedule: Schedule::Constant,
            l2: 0.0,
            record_truth: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyncSection {
    /// Simulated seconds.
    pub total_time: f64,
    pub valuation_interval: f64,
    /// Samples per push for regular clients.
    pub tau: usize,
    /// Seconds between pushes for regular clients.
    pub period: f64,
    /// Per regular client; replaces `period` when present.
    pub periods: Option<Vec<f64>>,
    pub learning_rate: f64,
    /// Probability that a scheduled wake-up is used.
    pub participation: f64,
    pub l2: f64,
}

impl Default for AsyncSection {
    fn default() -> Self {
        Self {
            total_time: 2.0,
            valuation_interval: 0.02,
            tau: 100,
            period: 0.01,
            periods: None,
            learning_rate: 1.0,
            participation: 1.0,
            l2: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuationMethod {
    /// Exact up to `exact_max_clients` clients, Monte Carlo above.
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValuationSection {
    pub method: ValuationMethod,
    pub exact_max_clients: usize,
    /// Permutation count; derived from `share_error` when absent.
    pub permutations: Option<usize>,
    /// Permutation seed; derived from the top-level seed when absent.
    pub seed: Option<u64>,
    pub delta: f64,
    /// Target accuracy of the shares used to size `K` from a pilot run.
    pub share_error: f64,
    pub pilot_permutations: usize,
    pub max_permutations: usize,
    pub antithetic: bool,
}

impl Default for ValuationSection {
    fn default() -> Self {
        Self {
            method: ValuationMethod::Auto,
            exact_max_clients: 10,
            permutations: None,
            seed: None,
            delta: 0.05,
            share_error: 0.01,
            pilot_permutations: 200,
            max_permutations: 200_000,
            antithetic: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Spectral,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionSection {
    /// Factor rank; the rank bound of each client when absent.
    pub rank: Option<usize>,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub init: InitKind,
}

impl Default for CompletionSection {
    fn default() -> Self {
        Self {
            rank: None,
            lambda: 1e-2,
            max_iters: 50,
            tol: 1e-6,
            init: InitKind::Spectral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankReportSection {
    /// Singular value threshold relative to the largest one.
    pub epsilon: f64,
    /// Drift constant and accuracy in the rank bound.
    pub lipschitz: f64,
    pub bound_epsilon: f64,
}

impl Default for RankReportSection {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lipschitz: 1.0,
            bound_epsilon: 0.1,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Extra clients appended after the regular ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticClient {
    /// Copy of a regular client with Gaussian noise on a fraction of its
    /// raw features.
    Clone {
        source: usize,
        #[serde(default)]
        fraction: f64,
        #[serde(default = "one")]
        noise_std: f64,
        /// Async push period; the regular period when absent.
        period: Option<f64>,
        tau: Option<usize>,
    },
    /// I.i.d. Gaussian features.
    Random {
        dim: usize,
        mean: f64,
        std: f64,
        /// Subtract the column means of the generated block.
        #[serde(default = "yes")]
        center: bool,
        period: Option<f64>,
        tau: Option<usize>,
    },
}

impl SyntheticClient {
    pub fn period(&self) -> Option<f64> {
        match self {
            SyntheticClient::Clone { period, .. } | SyntheticClient::Random { period, .. } => *period,
        }
    }

    pub fn tau(&self) -> Option<usize> {
        match self {
            SyntheticClient::Clone { tau, .. } | SyntheticClient::Random { tau, .. } => *tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub mode: Mode,
    pub loss: LossKind,
    pub dataset: DatasetConfig,
    pub sync: SyncSection,
    #[serde(rename = "async")]
    pub async_: AsyncSection,
    pub valuation: ValuationSection,
    pub completion: CompletionSection,
    pub rank_report: RankReportSection,
    pub synthetic: Vec<SyntheticClient>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            mode: Mode::Sync,
            loss: LossKind::Multinomial,
            dataset: DatasetConfig::default(),
            sync: SyncSection::default(),
            async_: AsyncSection::default(),
            valuation: ValuationSection::default(),
            completion: CompletionSection::default(),
            rank_report: RankReportSection::default(),
            synthetic: Vec::new(),
        }
    }
}

/// Command-line values that replace configured ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub permutations: Option<usize>,
    pub exact: bool,
    pub subsample: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config file {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.output {
            self.output = out.clone();
        }
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        if let Some(k) = o.permutations {
            self.valuation.permutations = Some(k);
            self.valuation.method = ValuationMethod::MonteCarlo;
        }
        if o.exact {
            self.valuation.method = ValuationMethod::Exact;
        }
        if let Some(n) = o.subsample {
            self.dataset.subsample = Some(n);
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.path.is_file() {
            bail!(
                "dataset file {} does not exist (set [dataset] path in the config)",
                self.dataset.path.display()
            );
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            bail!("[dataset] test_fraction must lie in [0, 1)");
        }
        if self.dataset.splits.is_none() && self.dataset.clients == 0 {
            bail!("[dataset] clients must be at least 1");
        }
        match self.mode {
            Mode::Sync => {
                if self.sync.rounds == 0 {
                    bail!("[sync] rounds must be at least 1");
                }
            }
            Mode::Async => {
                if self.async_.tau == 0 {
                    bail!("[async] tau must be at least 1");
                }
            }
        }
        if !(self.valuation.delta > 0.0 && self.valuation.delta < 1.0) {
            bail!("[valuation] delta must lie in (0, 1)");
        }
        if self.valuation.permutations == Some(0) {
            bail!("[valuation] permutations must be at least 1");
        }
        if self.completion.rank == Some(0) {
            bail!("[completion] rank must be at least 1");
        }
        for (k, s) in self.synthetic.iter().enumerate() {
            if let SyntheticClient::Clone { fraction, .. } = s {
                if !(0.0..=1.0).contains(fraction) {
                    bail!("synthetic client {k}: fraction must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 4
            mode = "async"
            [dataset]
            path = "x.libsvm"
            splits = [3, 4]
            [async]
            tau = 20
            [[synthetic]]
            kind = "clone"
            source = 0
            fraction = 0.2
            period = 0.05
            [[synthetic]]
            kind = "random"
            dim = 5
            mean = 1.0
            std = 2.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.mode, Mode::Async);
        assert_eq!(cfg.dataset.splits, Some(vec![3, 4]));
        assert_eq!(cfg.async_.tau, 20);
        assert_eq!(cfg.async_.period, 0.01);
        assert_eq!(cfg.synthetic[0].period(), Some(0.05));
        assert!(matches!(cfg.synthetic[1], SyntheticClient::Random { center: true, .. }));
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[sync]\nround = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[[synthetic]]\nkind = \"twin\"\n").is_err());
    }

    #[test]
    fn flags_win() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            permutations: Some(50),
            subsample: Some(100),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.valuation.method, ValuationMethod::MonteCarlo);
        assert_eq!(cfg.valuation.permutations, Some(50));
        assert_eq!(cfg.dataset.subsample, Some(100));
        cfg.apply(&Overrides { exact: true, ..Overrides::default() });
        assert_eq!(cfg.valuation.method, ValuationMethod::Exact);
    }
}
