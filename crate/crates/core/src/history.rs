//! Time-indexed embedding states consumed by the valuation.
//!
//! A state is one `N x C` matrix per client. Histories are read forward
//! only: valuation starts from [`EmbeddingHistory::initial_state`] and calls
//! [`EmbeddingHistory::advance`] once per time-stamp, so implementations can
//! replay deltas or reconstruct rows lazily instead of materializing
//! `T x M x N x C` values.

use ndarray::Array2;

use crate::error::{Error, Result};

pub type State = Vec<Array2<f64>>;

pub trait EmbeddingHistory: Sync {
    fn n_clients(&self) -> usize;

    fn n_samples(&self) -> usize;

    fn channels(&self) -> usize;

    /// Number of valuation time-stamps `T`; states exist for `0..=T`.
    fn n_rounds(&self) -> usize;

    /// State at time-stamp 0.
    fn initial_state(&self) -> State;

    /// Turns the state at `t - 1` into the state at `t` in place.
    fn advance(&self, t: usize, state: &mut State);

    /// Materializes the state at `t` by replaying from the start.
    fn state_at(&self, t: usize) -> State {
        let mut state = self.initial_state();
        for s in 1..=t.min(self.n_rounds()) {
            self.advance(s, &mut state);
        }
        state
    }
}

/// Fully materialized history, `states[t][m]` is client `m` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHistory {
    states: Vec<State>,
}

impl DenseHistory {
    pub fn new(states: Vec<State>) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Dimension("history needs the state at t = 0".into()))?;
        let m = first.len();
        if m == 0 {
            return Err(Error::Dimension("history has no clients".into()));
        }
        let shape = first[0].dim();
        for (t, state) in states.iter().enumerate() {
            if state.len() != m || state.iter().any(|a| a.dim() != shape) {
                return Err(Error::Dimension(format!(
                    "state {t} does not match {m} clients of shape {shape:?}"
                )));
            }
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    /// Copies an arbitrary history into memory.
    pub fn collect(history: &dyn EmbeddingHistory) -> Self {
        let mut state = history.initial_state();
        let mut states = vec![state.clone()];
        for t in 1..=history.n_rounds() {
            history.advance(t, &mut state);
            states.push(state.clone());
        }
        Self { states }
    }

    /// The history with clients reordered: client `k` of the result is
    /// client `order[k]` of `self`.
    pub fn permute_clients(&self, order: &[usize]) -> Self {
        Self {
            states: self
                .states
                .iter()
                .map(|s| order.iter().map(|&m| s[m].clone()).collect())
                .collect(),
        }
    }

    /// Client `m`'s `T+1 x N` matrix for one channel (row 0 is `t = 0`).
    pub fn client_channel_matrix(&self, m: usize, channel: usize) -> Array2<f64> {
        let n = self.n_samples();
        Array2::from_shape_fn((self.states.len(), n), |(t, i)| self.states[t][m][[i, channel]])
    }
}

impl EmbeddingHistory for DenseHistory {
    fn n_clients(&self) -> usize {
        self.states[0].len()
    }

    fn n_samples(&self) -> usize {
        self.states[0][0].nrows()
    }

    fn channels(&self) -> usize {
        self.states[0][0].ncols()
    }

    fn n_rounds(&self) -> usize {
        self.states.len() - 1
    }

    fn initial_state(&self) -> State {
        self.states[0].clone()
    }

    fn advance(&self, t: usize, state: &mut State) {
        for (dst, src) in state.iter_mut().zip(&self.states[t]) {
            dst.assign(src);
        }
    }

    fn state_at(&self, t: usize) -> State {
        self.states[t].clone()
    }
}
