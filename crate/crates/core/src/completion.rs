//! Low-rank completion of partially observed embedding matrices.
//!
//! For every client and channel the `T x N` matrix of embeddings over
//! valuation time-stamps is approximated as `W H^T` by minimizing
//!
//! ```text
//! sum over observed (t, i) of (value - w_t . h_i)^2 + lambda (|W|_F^2 + |H|_F^2)
//! ```
//!
//! with alternating ridge least squares: each half-step solves one `r x r`
//! system per row of `W` (or `H`) exactly, so the objective never increases.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fedsgd::EmbeddingTrace;
use crate::history::{DenseHistory, EmbeddingHistory, State};

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionConfig {
    pub rank: usize,
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease of a sweep falls below this.
    pub tol: f64,
    pub init: Init,
    /// Seed for random initial factors and for directions the spectral
    /// start leaves undetermined.
    pub seed: u64,
}

/// Starting point of the alternating solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Top singular factors of the zero-filled matrix rescaled by the
    /// inverse observed fraction.
    Spectral,
    /// I.i.d. Gaussian factors.
    Random,
}

impl CompletionConfig {
    /// Rank from [`rank_bound`] with `L = 1`, `eps = 0.1`, capped at
    /// `min(T, N, 50)`; `lambda = 1e-2`.
    pub fn for_shape(d_m: usize, rows: usize, cols: usize, seed: u64) -> Self {
        let cap = rows.min(cols).min(50).max(1);
        Self {
            rank: rank_bound(d_m, 1.0, rows, 0.1).min(cap),
            lambda: 1e-2,
            max_iters: 200,
            tol: 1e-8,
            init: Init::Spectral,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("completion rank must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance {} must be positive", self.tol)));
        }
        Ok(())
    }
}

/// Observed entries of a `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Observations {
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(t, i, _)) = entries.iter().find(|&&(t, i, _)| t >= rows || i >= cols) {
            return Err(Error::OutOfRange(format!(
                "entry ({t}, {i}) outside a {rows}x{cols} matrix"
            )));
        }
        if entries.iter().any(|e| !e.2.is_finite()) {
            return Err(Error::Config("observed value is not finite".into()));
        }
        Ok(Self { rows, cols, entries })
    }

    /// Every entry of a dense matrix.
    pub fn full(matrix: ArrayView2<f64>) -> Self {
        let (rows, cols) = matrix.dim();
        let entries = matrix.indexed_iter().map(|((t, i), &v)| (t, i, v)).collect();
        Self { rows, cols, entries }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    /// Objective before the first sweep, then after every sweep.
    pub objective_history: Vec<f64>,
    pub converged: bool,
    pub observed_rmse: f64,
    pub observed_max_residual: f64,
    pub empty_rows: usize,
    pub empty_cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    /// `rows x r`.
    pub w: Array2<f64>,
    /// `cols x r`.
    pub h: Array2<f64>,
    pub report: FitReport,
}

impl Factorization {
    pub fn reconstruct(&self) -> Array2<f64> {
        self.w.dot(&self.h.t())
    }

    pub fn value(&self, t: usize, i: usize) -> f64 {
        self.w.row(t).dot(&self.h.row(i))
    }
}

/// Entries grouped by one index: `groups[a]` lists `(b, value)`.
fn group(entries: &[(usize, usize, f64)], n: usize, by_row: bool) -> Vec<Vec<(usize, f64)>> {
    let mut groups = vec![Vec::new(); n];
    for &(t, i, v) in entries {
        if by_row {
            groups[t].push((i, v));
        } else {
            groups[i].push((t, v));
        }
    }
    groups
}

/// Solves every row of `target` against the fixed `other` factor.
fn ridge_sweep(
    target: &mut Array2<f64>,
    other: &Array2<f64>,
    groups: &[Vec<(usize, f64)>],
    lambda: f64,
    what: &str,
) -> Result<()> {
    let r = other.ncols();
    let solved: Vec<Result<Vec<f64>>> = groups
        .par_iter()
        .enumerate()
        .map(|(a, obs)| {
            let mut gram = DMatrix::<f64>::identity(r, r) * lambda;
            let mut rhs = DVector::<f64>::zeros(r);
            for &(b, v) in obs {
                let f = other.row(b);
                for p in 0..r {
                    rhs[p] += v * f[p];
                    for q in 0..=p {
                        gram[(p, q)] += f[p] * f[q];
                    }
                }
            }
            for p in 0..r {
                for q in 0..p {
                    gram[(q, p)] = gram[(p, q)];
                }
            }
            let chol = gram.cholesky().ok_or_else(|| {
                Error::Singular(format!(
                    "{what} {a}: {} observations, lambda {lambda}",
                    obs.len()
                ))
            })?;
            Ok(chol.solve(&rhs).iter().copied().collect())
        })
        .collect();
    for (mut row, sol) in target.axis_iter_mut(Axis(0)).zip(solved) {
        for (dst, v) in row.iter_mut().zip(sol?) {
            *dst = v;
        }
    }
    Ok(())
}

fn objective(obs: &Observations, w: &Array2<f64>, h: &Array2<f64>, lambda: f64) -> f64 {
    let fit: f64 = obs
        .entries
        .iter()
        .map(|&(t, i, v)| {
            let r = v - w.row(t).dot(&h.row(i));
            r * r
        })
        .sum();
    let reg = w.iter().chain(h.iter()).map(|x| x * x).sum::<f64>();
    fit + lambda * reg
}

fn gaussian(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite scale");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

fn spectral_factors(obs: &Observations, r: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let (rows, cols) = (obs.rows, obs.cols);
    let fraction = obs.entries.len() as f64 / (rows * cols) as f64;
    let mut filled = Array2::<f64>::zeros((rows, cols));
    if fraction > 0.0 {
        for &(t, i, v) in &obs.entries {
            filled[[t, i]] += v / fraction;
        }
    }
    // Eigenvectors of the smaller Gram matrix give one side's singular
    // vectors; the other side follows by projection.
    let wide = rows <= cols;
    let gram = if wide { filled.dot(&filled.t()) } else { filled.t().dot(&filled) };
    let k = gram.nrows();
    let eig = DMatrix::from_fn(k, k, |a, b| gram[[a, b]]).symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0).sqrt();

    let mut w = Array2::zeros((rows, r));
    let mut h = Array2::zeros((cols, r));
    for j in 0..r {
        let sigma = order.get(j).map_or(0.0, |&o| eig.eigenvalues[o].max(0.0).sqrt());
        if sigma > 1e-12 * top && sigma > 0.0 {
            let vec = eig.eigenvectors.column(order[j]);
            let near = ndarray::Array1::from_iter(vec.iter().copied());
            let far = if wide { filled.t().dot(&near) } else { filled.dot(&near) } / sigma;
            let (u, v) = if wide { (near, far) } else { (far, near) };
            w.column_mut(j).assign(&(u * sigma.sqrt()));
            h.column_mut(j).assign(&(v * sigma.sqrt()));
        } else {
            let scale = 1e-3 * top.max(1.0).sqrt();
            w.column_mut(j).assign(&gaussian((rows, 1), scale / (rows as f64).sqrt(), rng).column(0));
            h.column_mut(j).assign(&gaussian((cols, 1), scale / (cols as f64).sqrt(), rng).column(0));
        }
    }
    (w, h)
}

/// Alternating ridge least squares on the observed entries.
pub fn complete(obs: &Observations, cfg: &CompletionConfig) -> Result<Factorization> {
    cfg.validate()?;
    let by_row = group(&obs.entries, obs.rows, true);
    let by_col = group(&obs.entries, obs.cols, false);
    let empty_rows = by_row.iter().filter(|g| g.is_empty()).count();
    let empty_cols = by_col.iter().filter(|g| g.is_empty()).count();
    if empty_rows + empty_cols > 0 {
        if cfg.lambda == 0.0 {
            return Err(Error::Singular(format!(
                "{empty_rows} empty rows and {empty_cols} empty columns with lambda = 0"
            )));
        }
        log::warn!(
            "completion: {empty_rows} rows and {empty_cols} columns have no observation; \
             their factors are set by the regularizer alone"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut w, mut h) = match cfg.init {
        Init::Random => (
            gaussian((obs.rows, cfg.rank), 1.0 / (cfg.rank as f64).sqrt(), &mut rng),
            gaussian((obs.cols, cfg.rank), 1.0 / (cfg.rank as f64).sqrt(), &mut rng),
        ),
        Init::Spectral => spectral_factors(obs, cfg.rank, &mut rng),
    };

    let mut history = vec![objective(obs, &w, &h, cfg.lambda)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        ridge_sweep(&mut w, &h, &by_row, cfg.lambda, "row")?;
        ridge_sweep(&mut h, &w, &by_col, cfg.lambda, "column")?;
        iterations += 1;
        let current = objective(obs, &w, &h, cfg.lambda);
        let previous = *history.last().expect("initial objective");
        history.push(current);
        if current == 0.0 || (previous - current) <= cfg.tol * previous.abs() {
            converged = true;
            break;
        }
    }

    let (sq, max) = obs.entries.iter().fold((0.0, 0.0f64), |(sq, max), &(t, i, v)| {
        let r = v - w.row(t).dot(&h.row(i));
        (sq + r * r, max.max(r.abs()))
    });
    let observed_rmse = if obs.entries.is_empty() {
        0.0
    } else {
        (sq / obs.entries.len() as f64).sqrt()
    };

    Ok(Factorization {
        w,
        h,
        report: FitReport {
            iterations,
            objective_history: history,
            converged,
            observed_rmse,
            observed_max_residual: max,
            empty_rows,
            empty_cols,
        },
    })
}

/// Residual summary of one client's completed embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientFit {
    pub client: usize,
    /// Largest observed-entry residual of the factorization over channels.
    pub observed_max_residual: f64,
    /// Largest error of the completed matrix against known ground truth.
    pub heldout_max_residual: Option<f64>,
}

/// Completed synchronous embedding history.
///
/// The state at time-stamp `t >= 1` is `W H^T` row `t - 1` with observed
/// entries replaced by the values actually uploaded; `t = 0` is the known
/// initial state.
#[derive(Clone, Debug)]
pub struct CompletedEmbeddings {
    n_samples: usize,
    channels: usize,
    initial: State,
    /// `factors[m][c]`.
    pub factors: Vec<Vec<Factorization>>,
    observed: Vec<(Vec<usize>, Vec<Array2<f64>>)>,
    pub fits: Vec<ClientFit>,
}

/// Completes every client/channel matrix of a synchronous trace.
///
/// All matrices share the same factor initialization seed, so clients with
/// identical observations get identical completions.
pub fn complete_trace(trace: &EmbeddingTrace, cfg: &CompletionConfig) -> Result<CompletedEmbeddings> {
    complete_trace_per_client(trace, &vec![cfg.clone(); trace.n_clients()])
}

/// As [`complete_trace`] with `cfgs[m]` used for client `m`.
pub fn complete_trace_per_client(
    trace: &EmbeddingTrace,
    cfgs: &[CompletionConfig],
) -> Result<CompletedEmbeddings> {
    if cfgs.len() != trace.n_clients() {
        return Err(Error::Dimension(format!(
            "{} completion configs for {} clients",
            cfgs.len(),
            trace.n_clients()
        )));
    }
    let rows = trace.n_rounds();
    let n = trace.n_samples;
    let m_count = trace.n_clients();
    let jobs: Vec<(usize, usize)> = (0..m_count)
        .flat_map(|m| (0..trace.channels).map(move |c| (m, c)))
        .collect();
    let solved: Vec<Result<Factorization>> = jobs
        .par_iter()
        .map(|&(m, c)| {
            let entries = trace
                .rows
                .iter()
                .enumerate()
                .flat_map(|(t, row)| {
                    row.batch
                        .iter()
                        .enumerate()
                        .map(move |(k, &i)| (t, i, row.values[m][[k, c]]))
                })
                .collect();
            complete(&Observations::new(rows, n, entries)?, &cfgs[m])
        })
        .collect();

    let mut factors: Vec<Vec<Factorization>> = (0..m_count).map(|_| Vec::new()).collect();
    for ((m, _), f) in jobs.into_iter().zip(solved) {
        factors[m].push(f?);
    }
    let fits = factors
        .iter()
        .enumerate()
        .map(|(m, fs)| ClientFit {
            client: m,
            observed_max_residual: fs
                .iter()
                .map(|f| f.report.observed_max_residual)
                .fold(0.0, f64::max),
            heldout_max_residual: None,
        })
        .collect();

    Ok(CompletedEmbeddings {
        n_samples: n,
        channels: trace.channels,
        initial: trace.initial.clone(),
        factors,
        observed: trace
            .rows
            .iter()
            .map(|r| (r.batch.clone(), r.values.clone()))
            .collect(),
        fits,
    })
}

impl CompletedEmbeddings {
    /// Fills `heldout_max_residual` with the largest entrywise gap between
    /// the completed states and a fully recorded history.
    pub fn evaluate_against(&mut self, truth: &DenseHistory) -> Result<()> {
        if truth.n_rounds() != self.n_rounds() || truth.n_clients() != self.n_clients() {
            return Err(Error::Dimension("ground truth does not match the trace".into()));
        }
        let mut worst = vec![0.0f64; self.n_clients()];
        let mut state = self.initial_state();
        for t in 1..=self.n_rounds() {
            self.advance(t, &mut state);
            for (m, w) in worst.iter_mut().enumerate() {
                let gap = (&state[m] - &truth.states()[t][m])
                    .iter()
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                *w = w.max(gap);
            }
        }
        for (fit, w) in self.fits.iter_mut().zip(worst) {
            fit.heldout_max_residual = Some(w);
        }
        Ok(())
    }
}

impl EmbeddingHistory for CompletedEmbeddings {
    fn n_clients(&self) -> usize {
        self.factors.len()
    }

    fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn n_rounds(&self) -> usize {
        self.observed.len()
    }

    fn initial_state(&self) -> State {
        self.initial.clone()
    }

    fn advance(&self, t: usize, state: &mut State) {
        let (batch, values) = &self.observed[t - 1];
        for (m, fs) in self.factors.iter().enumerate() {
            for (c, f) in fs.iter().enumerate() {
                let coeffs = f.w.row(t - 1);
                let mut column = state[m].column_mut(c);
                for (dst, h) in column.iter_mut().zip(f.h.axis_iter(Axis(0))) {
                    *dst = coeffs.dot(&h);
                }
            }
            for (k, &i) in batch.iter().enumerate() {
                state[m].row_mut(i).assign(&values[m].row(k));
            }
        }
    }
}

/// Number of singular values at least `eps * sigma_1`; 0 for a zero matrix.
///
/// Wide or tall matrices with more than a few million entries go through
/// the eigenvalues of the smaller Gram matrix, which resolves relative
/// thresholds down to about `1e-6`; smaller `eps` always uses a full SVD.
pub fn approx_epsilon_rank(matrix: ArrayView2<f64>, eps: f64) -> usize {
    let (rows, cols) = matrix.dim();
    if rows == 0 || cols == 0 || matrix.iter().all(|&v| v == 0.0) {
        return 0;
    }
    let singular: Vec<f64> = if rows * cols > 4_000_000 && eps >= 1e-6 {
        let gram = if rows <= cols {
            matrix.dot(&matrix.t())
        } else {
            matrix.t().dot(&matrix)
        };
        let k = gram.nrows();
        let dm = DMatrix::from_fn(k, k, |a, b| gram[[a, b]]);
        dm.symmetric_eigenvalues()
            .iter()
            .map(|&l| l.max(0.0).sqrt())
            .collect()
    } else {
        DMatrix::from_fn(rows, cols, |a, b| matrix[[a, b]])
            .singular_values()
            .iter()
            .copied()
            .collect()
    };
    let top = singular.iter().copied().fold(0.0, f64::max);
    singular.iter().filter(|&&s| s >= eps * top).count()
}

/// `min(d_m, ceil(L ln T / eps))`, never below 1.
pub fn rank_bound(d_m: usize, lipschitz: f64, rounds: usize, eps: f64) -> usize {
    let drift = lipschitz * (rounds.max(1) as f64).ln() / eps;
    let drift_rank = if drift.is_finite() {
        drift.ceil().max(0.0) as usize
    } else {
        usize::MAX
    };
    d_m.min(drift_rank).max(1)
}
