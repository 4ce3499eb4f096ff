//! Per-round utilities and the time-averaged Shapley valuation of clients.
//!
//! `U_t(S)` is the drop in mean training loss obtained when only the
//! clients in `S` move from their time `t - 1` embeddings to their time `t`
//! embeddings. A client's value averages its Shapley value under `U_t` over
//! all rounds, either exactly by coalition enumeration or by sampling client
//! permutations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::completion::ClientFit;
use crate::error::{Error, Result};
use crate::history::{EmbeddingHistory, State};
use crate::model::Loss;

/// Largest client count accepted by [`exact_verfedsv`].
pub const EXACT_CLIENT_CAP: usize = 20;
/// Largest client count representable by a [`Coalition`].
pub const COALITION_CAP: usize = 64;
/// Largest client count accepted by exhaustive permutation mode.
pub const EXHAUSTIVE_CLIENT_CAP: usize = 9;

const CHUNK: usize = 512;

/// Set of clients as a bit mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Coalition(pub u64);

impl Coalition {
    pub fn empty() -> Self {
        Coalition(0)
    }

    pub fn full(m: usize) -> Self {
        if m >= 64 {
            Coalition(u64::MAX)
        } else {
            Coalition((1u64 << m) - 1)
        }
    }

    pub fn from_members(members: &[usize]) -> Self {
        Coalition(members.iter().fold(0, |acc, &m| acc | (1u64 << m)))
    }

    pub fn contains(self, m: usize) -> bool {
        self.0 >> m & 1 == 1
    }

    pub fn with(self, m: usize) -> Self {
        Coalition(self.0 | (1u64 << m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in increasing order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let m = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(m)
            }
        })
    }
}

/// Utilities of one round, built from the states at `t - 1` and `t`.
///
/// Only samples whose embedding changed for some client contribute; the
/// mixed embedding of a coalition is the previous total plus the members'
/// changes added in increasing client order.
pub struct RoundUtility<'a> {
    n_samples: usize,
    n_clients: usize,
    channels: usize,
    labels: Vec<usize>,
    base: Vec<f64>,
    base_loss: Vec<f64>,
    deltas: Vec<Vec<f64>>,
    moved: Vec<bool>,
    loss: &'a dyn Loss,
}

impl<'a> RoundUtility<'a> {
    pub fn new(prev: &State, curr: &State, labels: &[usize], loss: &'a dyn Loss) -> Result<Self> {
        let n_clients = prev.len();
        if n_clients == 0 || curr.len() != n_clients {
            return Err(Error::Dimension("states must cover the same clients".into()));
        }
        let (n_samples, channels) = prev[0].dim();
        if prev.iter().chain(curr).any(|a| a.dim() != (n_samples, channels)) {
            return Err(Error::Dimension("client states differ in shape".into()));
        }
        if labels.len() != n_samples {
            return Err(Error::Dimension(format!(
                "{} labels for {n_samples} samples",
                labels.len()
            )));
        }
        let changed: Vec<usize> = (0..n_samples)
            .filter(|&i| prev.iter().zip(curr).any(|(p, c)| p.row(i) != c.row(i)))
            .collect();

        let mut base = vec![0.0; changed.len() * channels];
        let mut deltas = vec![vec![0.0; changed.len() * channels]; n_clients];
        for (k, &i) in changed.iter().enumerate() {
            for c in 0..channels {
                base[k * channels + c] = prev.iter().map(|p| p[[i, c]]).sum();
                for m in 0..n_clients {
                    deltas[m][k * channels + c] = curr[m][[i, c]] - prev[m][[i, c]];
                }
            }
        }
        let labels: Vec<usize> = changed.iter().map(|&i| labels[i]).collect();
        let base_loss = labels
            .iter()
            .enumerate()
            .map(|(k, &y)| loss.value(&base[k * channels..(k + 1) * channels], y))
            .collect();
        let moved = deltas.iter().map(|d| d.iter().any(|&v| v != 0.0)).collect();
        Ok(Self {
            n_samples,
            n_clients,
            channels,
            labels,
            base,
            base_loss,
            deltas,
            moved,
            loss,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    /// Number of samples whose embedding changed in this round.
    pub fn n_changed(&self) -> usize {
        self.labels.len()
    }

    fn chunks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.labels.len())
            .step_by(CHUNK)
            .map(|s| s..(s + CHUNK).min(self.labels.len()))
    }

    /// `U_t(S)`.
    pub fn utility(&self, s: Coalition) -> f64 {
        let c = self.channels;
        let mut buf = vec![0.0; c];
        let mut total = 0.0;
        for range in self.chunks() {
            let mut part = 0.0;
            for k in range {
                buf.copy_from_slice(&self.base[k * c..(k + 1) * c]);
                for m in s.members() {
                    for (b, d) in buf.iter_mut().zip(&self.deltas[m][k * c..(k + 1) * c]) {
                        *b += d;
                    }
                }
                part += self.base_loss[k] - self.loss.value(&buf, self.labels[k]);
            }
            total += part;
        }
        total / self.n_samples as f64
    }

    /// `U_t(S)` for every coalition, indexed by the coalition's bit mask.
    pub fn all_utilities(&self) -> Result<Vec<f64>> {
        if self.n_clients > EXACT_CLIENT_CAP {
            return Err(Error::TooManyClients {
                clients: self.n_clients,
                cap: EXACT_CLIENT_CAP,
            });
        }
        let size = 1usize << self.n_clients;
        let c = self.channels;
        let ranges: Vec<_> = self.chunks().collect();
        let mut table = vec![0.0; size];
        for group in ranges.chunks(rayon::current_num_threads().max(1) * 2) {
            let parts: Vec<Vec<f64>> = group
                .par_iter()
                .map(|range| {
                    let mut tot = vec![0.0; size * c];
                    let mut part = vec![0.0; size];
                    for k in range.clone() {
                        tot[..c].copy_from_slice(&self.base[k * c..(k + 1) * c]);
                        for s in 1..size {
                            let hi = usize::BITS as usize - 1 - s.leading_zeros() as usize;
                            let rest = s & !(1 << hi);
                            let delta = &self.deltas[hi][k * c..(k + 1) * c];
                            for ch in 0..c {
                                tot[s * c + ch] = tot[rest * c + ch] + delta[ch];
                            }
                            part[s] += self.base_loss[k]
                                - self.loss.value(&tot[s * c..(s + 1) * c], self.labels[k]);
                        }
                    }
                    part
                })
                .collect();
            for part in parts {
                // Chunk partials are added in chunk order, as in `utility`.
                for (t, p) in table.iter_mut().zip(part) {
                    *t += p;
                }
            }
        }
        let n = self.n_samples as f64;
        Ok(table.into_iter().map(|v| v / n).collect())
    }

    /// Marginal contributions along one permutation, position by position.
    fn sweep(&self, order: &[usize]) -> Vec<f64> {
        let c = self.channels;
        let mut marginals = vec![0.0; order.len()];
        let mut buf = vec![0.0; c];
        for range in self.chunks() {
            let mut part = vec![0.0; order.len()];
            for k in range {
                buf.copy_from_slice(&self.base[k * c..(k + 1) * c]);
                let mut before = self.base_loss[k];
                for (j, &m) in order.iter().enumerate() {
                    if !self.moved[m] {
                        continue;
                    }
                    for (b, d) in buf.iter_mut().zip(&self.deltas[m][k * c..(k + 1) * c]) {
                        *b += d;
                    }
                    let after = self.loss.value(&buf, self.labels[k]);
                    part[j] += before - after;
                    before = after;
                }
            }
            for (t, p) in marginals.iter_mut().zip(part) {
                *t += p;
            }
        }
        let n = self.n_samples as f64;
        marginals.iter_mut().for_each(|v| *v /= n);
        marginals
    }
}

/// Utilities over a whole embedding history.
pub struct UtilityEvaluator<'a> {
    history: &'a dyn EmbeddingHistory,
    labels: &'a [usize],
    loss: &'a dyn Loss,
}

impl<'a> UtilityEvaluator<'a> {
    pub fn new(history: &'a dyn EmbeddingHistory, labels: &'a [usize], loss: &'a dyn Loss) -> Result<Self> {
        if labels.len() != history.n_samples() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                history.n_samples()
            )));
        }
        if history.n_clients() > COALITION_CAP {
            return Err(Error::TooManyClients {
                clients: history.n_clients(),
                cap: COALITION_CAP,
            });
        }
        Ok(Self { history, labels, loss })
    }

    pub fn n_clients(&self) -> usize {
        self.history.n_clients()
    }

    pub fn n_rounds(&self) -> usize {
        self.history.n_rounds()
    }

    /// `U_t(S)` for `1 <= t <= T`, replaying the history up to `t`.
    pub fn utility(&self, t: usize, s: Coalition) -> Result<f64> {
        if t == 0 || t > self.n_rounds() {
            return Err(Error::OutOfRange(format!(
                "round {t} outside 1..={}",
                self.n_rounds()
            )));
        }
        let prev = self.history.state_at(t - 1);
        let mut curr = prev.clone();
        self.history.advance(t, &mut curr);
        Ok(RoundUtility::new(&prev, &curr, self.labels, self.loss)?.utility(s))
    }

    /// Calls `f(t, round)` for every round in order, keeping two states.
    fn for_each_round(&self, mut f: impl FnMut(usize, &RoundUtility) -> Result<()>) -> Result<()> {
        let mut prev = self.history.initial_state();
        let mut curr = prev.clone();
        for t in 1..=self.n_rounds() {
            curr.iter_mut().zip(&prev).for_each(|(c, p)| c.assign(p));
            self.history.advance(t, &mut curr);
            f(t, &RoundUtility::new(&prev, &curr, self.labels, self.loss)?)?;
            std::mem::swap(&mut prev, &mut curr);
        }
        Ok(())
    }

    fn check_rounds(&self) -> Result<()> {
        if self.n_rounds() == 0 {
            Err(Error::OutOfRange("valuation needs at least one round".into()))
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Exact,
    MonteCarlo { permutations: usize, seed: u64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::MonteCarlo { .. } => "monte_carlo",
        }
    }
}

/// Per-round utilities of the recorded coalitions, `values[t - 1][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityLog {
    pub coalitions: Vec<Coalition>,
    pub values: Vec<Vec<f64>>,
}

/// Sampling accuracy implied by the permutation count.
#[derive(Clone, Debug, PartialEq)]
pub struct McBound {
    /// Empirical range of the round-averaged marginal contributions along
    /// the sampled permutations.
    pub range: f64,
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualSource {
    Heldout,
    Observed,
}

/// `2 G eps` with `eps` the mean per-client completion residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorBudget {
    pub epsilon: f64,
    pub lipschitz: f64,
    pub budget: f64,
    pub source: ResidualSource,
}

impl ErrorBudget {
    /// Uses held-out residuals when every client has one. `lipschitz` is the
    /// constant of the loss with respect to the entrywise maximum norm of
    /// the embedding, see [`max_norm_lipschitz`].
    pub fn from_fits(fits: &[ClientFit], lipschitz: f64) -> Self {
        let heldout: Option<Vec<f64>> = fits.iter().map(|f| f.heldout_max_residual).collect();
        let (residuals, source) = match heldout {
            Some(r) => (r, ResidualSource::Heldout),
            None => (
                fits.iter().map(|f| f.observed_max_residual).collect(),
                ResidualSource::Observed,
            ),
        };
        let epsilon = mean(&residuals);
        Self {
            epsilon,
            lipschitz,
            budget: completion_error_budget(&residuals, lipschitz),
            source,
        }
    }
}

/// `G sqrt(C)`: bounds `|f(a) - f(b)|` by the largest entrywise gap.
pub fn max_norm_lipschitz(loss: &dyn Loss, channels: usize) -> f64 {
    loss.lipschitz() * (channels as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValuationResult {
    pub client_ids: Vec<usize>,
    pub values: Vec<f64>,
    pub method: Method,
    pub n_rounds: usize,
    pub per_round_utilities: Option<UtilityLog>,
    pub mc_bound: Option<McBound>,
    pub completion_bound: Option<ErrorBudget>,
}

impl ValuationResult {
    /// `value / sum of values`; zeros when the values sum to zero.
    pub fn shares(&self) -> Vec<f64> {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            vec![0.0; self.values.len()]
        } else {
            self.values.iter().map(|v| v / total).collect()
        }
    }

    /// Sum of the available bounds on `|value - true value|`.
    pub fn error_bound(&self) -> Option<f64> {
        match (&self.mc_bound, &self.completion_bound) {
            (None, None) => None,
            (mc, comp) => Some(
                mc.as_ref().map_or(0.0, |b| b.epsilon) + comp.as_ref().map_or(0.0, |b| b.budget),
            ),
        }
    }

    pub fn permutations(&self) -> Option<usize> {
        match self.method {
            Method::MonteCarlo { permutations, .. } => Some(permutations),
            Method::Exact => None,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self.method {
            Method::MonteCarlo { seed, .. } => Some(seed),
            Method::Exact => None,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Exact values by enumerating all coalitions once per round.
pub fn exact_verfedsv(eval: &UtilityEvaluator, record_utilities: bool) -> Result<ValuationResult> {
    let m_count = eval.n_clients();
    if m_count > EXACT_CLIENT_CAP {
        return Err(Error::TooManyClients {
            clients: m_count,
            cap: EXACT_CLIENT_CAP,
        });
    }
    eval.check_rounds()?;
    let weights: Vec<f64> = (0..m_count)
        .map(|k| 1.0 / (m_count as f64 * binomial(m_count - 1, k)))
        .collect();
    let mut sums = vec![0.0; m_count];
    let mut log = Vec::new();
    eval.for_each_round(|_, round| {
        let table = round.all_utilities()?;
        for (m, sum) in sums.iter_mut().enumerate() {
            let bit = 1usize << m;
            let mut round_value = 0.0;
            for s in (0..table.len()).filter(|s| s & bit == 0) {
                round_value += weights[s.count_ones() as usize] * (table[s | bit] - table[s]);
            }
            *sum += round_value;
        }
        if record_utilities {
            log.push(table);
        }
        Ok(())
    })?;
    let t = eval.n_rounds() as f64;
    Ok(ValuationResult {
        client_ids: (0..m_count).collect(),
        values: sums.into_iter().map(|s| s / t).collect(),
        method: Method::Exact,
        n_rounds: eval.n_rounds(),
        per_round_utilities: record_utilities.then(|| UtilityLog {
            coalitions: (0..1u64 << m_count).map(Coalition).collect(),
            values: log,
        }),
        mc_bound: None,
        completion_bound: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    /// Number of sampled permutations `K`; ignored in exhaustive mode.
    pub permutations: usize,
    pub seed: u64,
    /// Pair every sampled permutation with its reverse.
    pub antithetic: bool,
    /// Use every permutation of the clients once instead of sampling.
    pub exhaustive: bool,
    /// Failure probability for the reported accuracy.
    pub delta: f64,
    pub record_utilities: bool,
}

impl McConfig {
    pub fn new(permutations: usize, seed: u64) -> Self {
        Self {
            permutations,
            seed,
            antithetic: false,
            exhaustive: false,
            delta: 0.05,
            record_utilities: false,
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// The client permutations used by [`mc_verfedsv`].
pub fn sample_permutations(m: usize, cfg: &McConfig) -> Result<Vec<Vec<usize>>> {
    if cfg.exhaustive {
        if m > EXHAUSTIVE_CLIENT_CAP {
            return Err(Error::TooManyClients {
                clients: m,
                cap: EXHAUSTIVE_CLIENT_CAP,
            });
        }
        let mut p: Vec<usize> = (0..m).collect();
        let mut all = vec![p.clone()];
        while next_permutation(&mut p) {
            all.push(p.clone());
        }
        return Ok(all);
    }
    if cfg.permutations == 0 {
        return Err(Error::Config("permutation count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perms = Vec::with_capacity(cfg.permutations);
    while perms.len() < cfg.permutations {
        let mut p: Vec<usize> = (0..m).collect();
        p.shuffle(&mut rng);
        if cfg.antithetic && perms.len() + 1 < cfg.permutations {
            let mut r = p.clone();
            r.reverse();
            perms.push(p);
            perms.push(r);
        } else {
            perms.push(p);
        }
    }
    Ok(perms)
}

/// Permutation-sampling estimate of the values.
pub fn mc_verfedsv(eval: &UtilityEvaluator, cfg: &McConfig) -> Result<ValuationResult> {
    let m_count = eval.n_clients();
    eval.check_rounds()?;
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::Config(format!("delta {} must lie in (0, 1)", cfg.delta)));
    }
    let perms = sample_permutations(m_count, cfg)?;
    let k = perms.len();
    let use_table = m_count <= EXACT_CLIENT_CAP && (1usize << m_count) <= k * m_count;

    let mut logged: Vec<Coalition> = Vec::new();
    if cfg.record_utilities {
        let mut set = std::collections::BTreeSet::new();
        for p in &perms {
            let mut s = Coalition::empty();
            set.insert(s);
            for &m in p {
                s = s.with(m);
                set.insert(s);
            }
        }
        logged = set.into_iter().collect();
    }

    // Per permutation and position, the marginal summed over rounds.
    let mut acc = vec![vec![0.0; m_count]; k];
    let mut log = Vec::new();
    eval.for_each_round(|_, round| {
        let table = if use_table { Some(round.all_utilities()?) } else { None };
        let marginals: Vec<Vec<f64>> = match &table {
            Some(u) => perms
                .iter()
                .map(|p| {
                    let mut s = 0usize;
                    p.iter()
                        .map(|&m| {
                            let before = u[s];
                            s |= 1 << m;
                            u[s] - before
                        })
                        .collect()
                })
                .collect(),
            None => perms.par_iter().map(|p| round.sweep(p)).collect(),
        };
        for (a, marg) in acc.iter_mut().zip(&marginals) {
            for (slot, &v) in a.iter_mut().zip(marg) {
                *slot += v;
            }
        }
        if cfg.record_utilities {
            log.push(match &table {
                Some(u) => logged.iter().map(|s| u[s.0 as usize]).collect(),
                None => logged.par_iter().map(|&s| round.utility(s)).collect(),
            });
        }
        Ok(())
    })?;

    let t = eval.n_rounds() as f64;
    let mut sums = vec![0.0; m_count];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (p, a) in perms.iter().zip(&acc) {
        for (&m, &v) in p.iter().zip(a) {
            sums[m] += v;
            lo = lo.min(v / t);
            hi = hi.max(v / t);
        }
    }
    let denom = k as f64 * t;
    let range = hi - lo;
    Ok(ValuationResult {
        client_ids: (0..m_count).collect(),
        values: sums.into_iter().map(|s| s / denom).collect(),
        method: Method::MonteCarlo {
            permutations: k,
            seed: cfg.seed,
        },
        n_rounds: eval.n_rounds(),
        per_round_utilities: cfg.record_utilities.then(|| UtilityLog {
            coalitions: logged,
            values: log,
        }),
        mc_bound: Some(McBound {
            range,
            epsilon: hoeffding_epsilon(range, m_count, k, cfg.delta),
            delta: cfg.delta,
        }),
        completion_bound: None,
    })
}

/// Unrounded permutation count `(2 R^2 M / eps^2) ln(2M / delta)`.
pub fn hoeffding_k_real(range: f64, m: usize, eps: f64, delta: f64) -> f64 {
    let m = m as f64;
    2.0 * range * range * m / (eps * eps) * (2.0 * m / delta).ln()
}

/// Permutations needed for accuracy `eps` with probability `1 - delta`.
pub fn hoeffding_k(range: f64, m: usize, eps: f64, delta: f64) -> u64 {
    hoeffding_k_real(range, m, eps, delta).ceil() as u64
}

/// Accuracy reached with `k` permutations, inverting [`hoeffding_k_real`].
pub fn hoeffding_epsilon(range: f64, m: usize, k: usize, delta: f64) -> f64 {
    let mf = m as f64;
    range * (2.0 * mf * (2.0 * mf / delta).ln() / k as f64).sqrt()
}

/// `2 G` times the mean of the per-client maximum residuals.
pub fn completion_error_budget(residuals: &[f64], lipschitz: f64) -> f64 {
    2.0 * lipschitz * mean(residuals)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::DenseHistory;
    use crate::model::{LossKind, SquaredError, SumLoss};
    use ndarray::{array, Array2};
    use rand::Rng;

    fn random_history(m: usize, t: usize, n: usize, c: usize, seed: u64) -> (DenseHistory, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = vec![(0..m).map(|_| Array2::zeros((n, c))).collect::<State>()];
        for _ in 0..t {
            let next = states
                .last()
                .unwrap()
                .iter()
                .map(|a| a.mapv(|v| v + rng.random_range(-0.5..0.5)))
                .collect();
            states.push(next);
        }
        let labels = (0..n).map(|_| rng.random_range(0..c.max(2))).collect();
        (DenseHistory::new(states).unwrap(), labels)
    }

    /// Direct double loop over rounds and coalitions with fresh mixed sums.
    fn naive(h: &DenseHistory, labels: &[usize], loss: &dyn Loss) -> Vec<f64> {
        let m = h.n_clients();
        let n = h.n_samples();
        let c = h.channels();
        let s = h.states();
        let u = |t: usize, set: u64| -> f64 {
            let mut first = 0.0;
            let mut second = 0.0;
            for i in 0..n {
                let old: Vec<f64> = (0..c).map(|ch| (0..m).map(|k| s[t - 1][k][[i, ch]]).sum()).collect();
                let mixed: Vec<f64> = (0..c)
                    .map(|ch| {
                        (0..m)
                            .map(|k| if set >> k & 1 == 1 { s[t][k][[i, ch]] } else { s[t - 1][k][[i, ch]] })
                            .sum()
                    })
                    .collect();
                first += loss.value(&old, labels[i]);
                second += loss.value(&mixed, labels[i]);
            }
            first / n as f64 - second / n as f64
        };
        (0..m)
            .map(|k| {
                let mut total = 0.0;
                for t in 1..=h.n_rounds() {
                    for set in 0..1u64 << m {
                        if set >> k & 1 == 0 {
                            let size = set.count_ones() as usize;
                            total += (u(t, set | 1 << k) - u(t, set)) / binomial(m - 1, size);
                        }
                    }
                }
                total / (m * h.n_rounds()) as f64
            })
            .collect()
    }

    fn max_gap(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn coalition_basics() {
        let s = Coalition::from_members(&[0, 3]);
        assert_eq!(s.members().collect::<Vec<_>>(), vec![0, 3]);
        assert!(s.contains(3) && !s.contains(1));
        assert_eq!(s.with(1).len(), 3);
        assert_eq!(Coalition::full(3), Coalition(7));
        assert!(Coalition::empty().is_empty());
    }

    #[test]
    fn exact_matches_naive_oracle() {
        for seed in 0..4 {
            let (h, y) = random_history(3, 4, 20, 3, seed);
            let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
            let exact = exact_verfedsv(&eval, false).unwrap();
            let oracle = naive(&h, &y, &LossKind::Multinomial);
            assert!(max_gap(&exact.values, &oracle) <= 1e-12, "{:?} {:?}", exact.values, oracle);
        }
    }

    #[test]
    fn utility_edge_coalitions() {
        let (h, y) = random_history(3, 3, 15, 2, 9);
        let loss = LossKind::Multinomial;
        let eval = UtilityEvaluator::new(&h, &y, &loss).unwrap();
        for t in 1..=3 {
            assert_eq!(eval.utility(t, Coalition::empty()).unwrap(), 0.0);
            let mean_loss = |state: &State| {
                (0..15)
                    .map(|i| {
                        let tot: Vec<f64> = (0..2).map(|c| state.iter().map(|a| a[[i, c]]).sum()).collect();
                        loss.value(&tot, y[i])
                    })
                    .sum::<f64>()
                    / 15.0
            };
            let expected = mean_loss(&h.states()[t - 1]) - mean_loss(&h.states()[t]);
            let got = eval.utility(t, Coalition::full(3)).unwrap();
            assert!((got - expected).abs() <= 1e-12);
        }
        assert!(matches!(eval.utility(0, Coalition::empty()), Err(Error::OutOfRange(_))));
        assert!(matches!(eval.utility(4, Coalition::empty()), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn hand_computed_two_client_example() {
        let zero = array![[0.0]];
        let h = DenseHistory::new(vec![
            vec![zero.clone(), zero.clone()],
            vec![array![[1.0]], array![[-1.0]]],
        ])
        .unwrap();
        let y = vec![1];
        let eval = UtilityEvaluator::new(&h, &y, &LossKind::BinaryLogistic).unwrap();
        let ln2 = 2f64.ln();
        let u1 = ln2 - (1.0 + (-1f64).exp()).ln();
        let u2 = ln2 - (1.0 + 1f64.exp()).ln();
        assert!((eval.utility(1, Coalition(1)).unwrap() - u1).abs() <= 1e-15);
        assert!((eval.utility(1, Coalition(2)).unwrap() - u2).abs() <= 1e-15);
        assert!(eval.utility(1, Coalition(3)).unwrap().abs() <= 1e-15);
        let v = exact_verfedsv(&eval, false).unwrap().values;
        assert!((v[0] - 0.5).abs() <= 1e-14 && (v[1] + 0.5).abs() <= 1e-14, "{v:?}");
    }

    #[test]
    fn axioms_hold() {
        let (h, y) = random_history(4, 5, 30, 2, 1);
        // Client 3 copies client 1 and client 2 never moves.
        let states: Vec<State> = h
            .states()
            .iter()
            .map(|s| vec![s[0].clone(), s[1].clone(), h.states()[0][2].clone(), s[1].clone()])
            .collect();
        let h = DenseHistory::new(states).unwrap();
        let loss = LossKind::Multinomial;
        let eval = UtilityEvaluator::new(&h, &y, &loss).unwrap();
        let r = exact_verfedsv(&eval, true).unwrap();
        assert!((r.values[1] - r.values[3]).abs() <= 1e-10);
        assert!(r.values[2].abs() <= 1e-12);
        let log = r.per_round_utilities.as_ref().unwrap();
        let full = log.values.iter().map(|u| u[15]).sum::<f64>() / 5.0;
        assert!((r.values.iter().sum::<f64>() - full).abs() <= 1e-10);

        let sum = SumLoss(LossKind::Multinomial, SquaredError);
        let parts: Vec<Vec<f64>> = [&LossKind::Multinomial as &dyn Loss, &SquaredError, &sum]
            .iter()
            .map(|l| exact_verfedsv(&UtilityEvaluator::new(&h, &y, *l).unwrap(), false).unwrap().values)
            .collect();
        let added: Vec<f64> = parts[0].iter().zip(&parts[1]).map(|(a, b)| a + b).collect();
        assert!(max_gap(&added, &parts[2]) <= 1e-10);
    }

    #[test]
    fn relabeling_permutes_values() {
        let (h, y) = random_history(4, 3, 25, 3, 5);
        let order = [2, 0, 3, 1];
        let p = h.permute_clients(&order);
        let a = exact_verfedsv(&UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap(), false).unwrap();
        let b = exact_verfedsv(&UtilityEvaluator::new(&p, &y, &LossKind::Multinomial).unwrap(), false).unwrap();
        for (k, &m) in order.iter().enumerate() {
            assert!((b.values[k] - a.values[m]).abs() <= 1e-12);
        }
    }

    #[test]
    fn exhaustive_permutations_equal_exact() {
        for m in 1..=5 {
            let (h, y) = random_history(m, 3, 20, 2, m as u64);
            let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
            let exact = exact_verfedsv(&eval, false).unwrap();
            let mut cfg = McConfig::new(1, 0);
            cfg.exhaustive = true;
            let mc = mc_verfedsv(&eval, &cfg).unwrap();
            assert_eq!(mc.permutations(), Some((1..=m).product()));
            assert!(max_gap(&exact.values, &mc.values) <= 1e-12);
        }
    }

    #[test]
    fn single_permutation_telescopes() {
        for m in [3, 7, 12] {
            let (h, y) = random_history(m, 4, 30, 2, 40 + m as u64);
            let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
            let r = mc_verfedsv(&eval, &McConfig::new(1, 17)).unwrap();
            let full: f64 = (1..=4).map(|t| eval.utility(t, Coalition::full(m)).unwrap()).sum::<f64>() / 4.0;
            assert!((r.values.iter().sum::<f64>() - full).abs() <= 1e-12);
        }
    }

    #[test]
    fn sweep_and_table_paths_agree() {
        let (h, y) = random_history(6, 3, 40, 2, 77);
        let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
        // 10 permutations use per-permutation sweeps, 20 use the full table;
        // the first 10 permutations of both runs coincide.
        let a = mc_verfedsv(&eval, &McConfig::new(10, 5)).unwrap();
        let perms = sample_permutations(6, &McConfig::new(20, 5)).unwrap();
        assert_eq!(perms[..10], sample_permutations(6, &McConfig::new(10, 5)).unwrap()[..]);
        let round = |t: usize| {
            let prev = h.states()[t - 1].clone();
            let curr = h.states()[t].clone();
            (prev, curr)
        };
        let mut sums = vec![0.0; 6];
        for t in 1..=3 {
            let (prev, curr) = round(t);
            let r = RoundUtility::new(&prev, &curr, &y, &LossKind::Multinomial).unwrap();
            let u = r.all_utilities().unwrap();
            for p in &perms[..10] {
                let mut s = 0usize;
                for &m in p {
                    let b = u[s];
                    s |= 1 << m;
                    sums[m] += u[s] - b;
                }
            }
        }
        let table: Vec<f64> = sums.iter().map(|s| s / 30.0).collect();
        assert!(max_gap(&a.values, &table) <= 1e-12);
    }

    #[test]
    fn monte_carlo_is_seeded_and_converges() {
        let (h, y) = random_history(6, 3, 30, 2, 3);
        let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
        let exact = exact_verfedsv(&eval, false).unwrap().values;
        let a = mc_verfedsv(&eval, &McConfig::new(50, 8)).unwrap();
        assert_eq!(a, mc_verfedsv(&eval, &McConfig::new(50, 8)).unwrap());
        let errs: Vec<f64> = [20, 2000]
            .iter()
            .map(|&k| {
                (0..5)
                    .map(|s| max_gap(&mc_verfedsv(&eval, &McConfig::new(k, s)).unwrap().values, &exact))
                    .sum::<f64>()
            })
            .collect();
        assert!(errs[1] < errs[0], "{errs:?}");
        let mut anti = McConfig::new(2000, 1);
        anti.antithetic = true;
        let r = mc_verfedsv(&eval, &anti).unwrap();
        let range = exact.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - exact.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(max_gap(&r.values, &exact) <= 0.1 * range);
        let b = r.mc_bound.unwrap();
        assert!(b.range > 0.0 && b.epsilon > 0.0 && b.delta == 0.05);
    }

    #[test]
    fn recorded_utilities_cover_prefixes() {
        let (h, y) = random_history(10, 2, 10, 2, 2);
        let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
        let mut cfg = McConfig::new(3, 4);
        cfg.record_utilities = true;
        let r = mc_verfedsv(&eval, &cfg).unwrap();
        let log = r.per_round_utilities.unwrap();
        assert!(log.coalitions.len() <= 3 * 10 + 1);
        assert_eq!(log.values.len(), 2);
        for (j, &s) in log.coalitions.iter().enumerate() {
            assert!((log.values[1][j] - eval.utility(2, s).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn too_many_clients_is_rejected() {
        let (h, y) = random_history(21, 1, 3, 2, 0);
        let eval = UtilityEvaluator::new(&h, &y, &LossKind::Multinomial).unwrap();
        assert!(matches!(
            exact_verfedsv(&eval, false),
            Err(Error::TooManyClients { clients: 21, cap: 20 })
        ));
        assert!(mc_verfedsv(&eval, &McConfig::new(2, 0)).is_ok());
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_k(1.0, 10, 0.1, 0.1), 10597);
        let ratio = hoeffding_k_real(1.0, 10, 0.05, 0.1) / hoeffding_k_real(1.0, 10, 0.1, 0.1);
        assert!((ratio - 4.0).abs() <= 1e-12);
        assert_eq!(hoeffding_k(0.0, 10, 0.1, 0.1), 0);
        let eps = hoeffding_epsilon(1.0, 10, 10597, 0.1);
        assert!(eps <= 0.1 && eps > 0.0999);
    }

    #[test]
    fn completion_budget_examples() {
        assert_eq!(completion_error_budget(&[0.0, 0.0, 0.0], 1.0), 0.0);
        assert!((completion_error_budget(&[0.1, 0.3], 1.0) - 0.4).abs() <= 1e-15);
        let fits = vec![
            ClientFit { client: 0, observed_max_residual: 0.1, heldout_max_residual: Some(0.2) },
            ClientFit { client: 1, observed_max_residual: 0.3, heldout_max_residual: None },
        ];
        let b = ErrorBudget::from_fits(&fits, 1.0);
        assert_eq!(b.source, ResidualSource::Observed);
        assert!((b.budget - 0.4).abs() <= 1e-15);
    }

    #[test]
    fn perturbed_history_stays_within_budget() {
        let loss = LossKind::Multinomial;
        let g = max_norm_lipschitz(&loss, 2);
        for seed in 0..5 {
            let (h, y) = random_history(3, 4, 40, 2, 100 + seed);
            let exact = exact_verfedsv(&UtilityEvaluator::new(&h, &y, &loss).unwrap(), false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = [0.01, 0.02, 0.03];
            let states: Vec<State> = h
                .states()
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    s.iter()
                        .zip(eps)
                        .map(|(a, e)| {
                            if t == 0 {
                                a.clone()
                            } else {
                                a.mapv(|v| v + if rng.random::<bool>() { e } else { -e })
                            }
                        })
                        .collect()
                })
                .collect();
            let p = DenseHistory::new(states).unwrap();
            let perturbed = exact_verfedsv(&UtilityEvaluator::new(&p, &y, &loss).unwrap(), false).unwrap();
            let budget = completion_error_budget(&eps, g);
            assert!(max_gap(&exact.values, &perturbed.values) <= budget);
        }
    }
}
