//! Discrete-event simulation of asynchronous vertical SGD.
//!
//! Each client wakes up on its own period, draws a batch of its upload
//! budget, pushes embeddings to the server, pulls `df/dh` computed from the
//! server's latest (possibly stale) embeddings of the other clients, and
//! steps its model. Simulated time is kept in integer nanoseconds so event
//! and snapshot boundaries compare exactly. Events at the same instant are
//! ordered by client id, then by scheduling sequence. One event is processed
//! whole before the next starts.
//!
//! The server's full embedding state is captured at every valuation
//! time-stamp. States are stored as per-interval deltas (the samples pushed
//! during that interval) and replayed through [`EmbeddingHistory`].

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::VerticalDataset;
use crate::error::{Error, Result};
use crate::fedsgd::{local_step, sample_batch, server_gradients};
use crate::history::{EmbeddingHistory, State};
use crate::model::{mean_loss_of, LocalModel, Loss, LossKind};

const TICKS_PER_SECOND: f64 = 1e9;

/// Simulated time in nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub fn from_secs(secs: f64) -> Result<Self> {
        if !(secs >= 0.0 && secs.is_finite()) {
            return Err(Error::Config(format!("invalid simulated time {secs}")));
        }
        Ok(SimTime((secs * TICKS_PER_SECOND).round() as u64))
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / TICKS_PER_SECOND
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Upload budget per event.
    pub tau: usize,
    /// Simulated seconds between two wake-ups; the first is at `period`.
    pub period: f64,
    pub learning_rate: f64,
    /// Selects this client's random stream under the run seed.
    pub seed: u64,
    /// Probability that a wake-up actually communicates; 1 means always.
    pub participation: f64,
}

impl ClientProfile {
    pub fn new(client_id: usize, tau: usize, period: f64, learning_rate: f64) -> Self {
        Self {
            client_id,
            tau,
            period,
            learning_rate,
            seed: client_id as u64,
            participation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsyncConfig {
    pub total_time: f64,
    /// `T = total_time / valuation_interval` snapshots after the initial one.
    pub valuation_interval: f64,
    pub profiles: Vec<ClientProfile>,
    pub seed: u64,
    pub loss: LossKind,
    pub l2: f64,
}

impl AsyncConfig {
    pub fn new(total_time: f64, valuation_interval: f64, profiles: Vec<ClientProfile>, seed: u64) -> Self {
        Self {
            total_time,
            valuation_interval,
            profiles,
            seed,
            loss: LossKind::Multinomial,
            l2: 0.0,
        }
    }

    /// Number of valuation time-stamps.
    pub fn n_rounds(&self) -> Result<usize> {
        let total = SimTime::from_secs(self.total_time)?;
        let step = SimTime::from_secs(self.valuation_interval)?;
        if step.0 == 0 {
            return Err(Error::Config("valuation interval must be positive".into()));
        }
        if total.0 % step.0 != 0 {
            return Err(Error::Config(format!(
                "valuation interval {} does not divide total time {}",
                self.valuation_interval, self.total_time
            )));
        }
        let rounds = (total.0 / step.0) as usize;
        if rounds == 0 {
            return Err(Error::Config("simulation has no valuation time-stamp".into()));
        }
        Ok(rounds)
    }

    fn validate(&self, data: &VerticalDataset) -> Result<()> {
        if self.profiles.len() != data.n_clients() {
            return Err(Error::Config(format!(
                "{} profiles for {} clients",
                self.profiles.len(),
                data.n_clients()
            )));
        }
        for (m, p) in self.profiles.iter().enumerate() {
            if p.client_id != m {
                return Err(Error::Config(format!("profile {m} has client id {}", p.client_id)));
            }
            if p.tau == 0 || p.tau > data.n_samples() {
                return Err(Error::Config(format!(
                    "client {m}: tau {} must lie in 1..={}",
                    p.tau,
                    data.n_samples()
                )));
            }
            if !(p.period > 0.0) || SimTime::from_secs(p.period)?.0 == 0 {
                return Err(Error::Config(format!("client {m}: period must be positive")));
            }
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::Config(format!("client {m}: learning rate must be positive")));
            }
            if !(0.0..=1.0).contains(&p.participation) {
                return Err(Error::Config(format!("client {m}: participation outside [0, 1]")));
            }
        }
        if self.loss == LossKind::BinaryLogistic && data.n_classes > 2 {
            return Err(Error::Config("binary logistic loss needs two classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Update,
    Query,
    /// Wake-up that did not communicate (participation draw failed).
    Skip,
}

impl Action {
    pub fn name(self) -> &'static str {
        match self {
            Action::Update => "update",
            Action::Query => "query",
            Action::Skip => "skip",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub time: SimTime,
    pub client: usize,
    pub action: Action,
    pub batch: Vec<usize>,
}

/// Samples one client pushed during a valuation interval and their values
/// at the end of it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDelta {
    pub samples: Vec<usize>,
    /// `|samples| x C`.
    pub values: Array2<f64>,
}

/// Server embedding states at every valuation time-stamp, delta encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotLog {
    pub n_samples: usize,
    pub channels: usize,
    pub n_clients: usize,
    /// `intervals[t - 1][m]` turns snapshot `t - 1` into snapshot `t`.
    pub intervals: Vec<Vec<ClientDelta>>,
}

impl SnapshotLog {
    pub fn snapshot(&self, t: usize) -> State {
        self.state_at(t)
    }
}

impl EmbeddingHistory for SnapshotLog {
    fn n_clients(&self) -> usize {
        self.n_clients
    }

    fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn n_rounds(&self) -> usize {
        self.intervals.len()
    }

    fn initial_state(&self) -> State {
        vec![Array2::zeros((self.n_samples, self.channels)); self.n_clients]
    }

    fn advance(&self, t: usize, state: &mut State) {
        for (m, delta) in self.intervals[t - 1].iter().enumerate() {
            for (k, &i) in delta.samples.iter().enumerate() {
                state[m].row_mut(i).assign(&delta.values.row(k));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AsyncRun {
    pub models: Vec<LocalModel>,
    pub snapshots: SnapshotLog,
    /// `(time-stamp, mean loss of the server's latest embeddings)` for
    /// `t = 0..=T`.
    pub loss_history: Vec<(usize, f64)>,
    pub events: Vec<EventRecord>,
    /// Completed update/query cycles per client.
    pub pushes: Vec<usize>,
}

struct ClientState {
    model: LocalModel,
    rng: ChaCha8Rng,
    period: u64,
}

/// Runs the simulation to `cfg.total_time` from zero models.
pub fn run_vafl(data: &VerticalDataset, cfg: &AsyncConfig) -> Result<AsyncRun> {
    cfg.validate(data)?;
    let rounds = cfg.n_rounds()?;
    let step = SimTime::from_secs(cfg.valuation_interval)?.0;
    let n = data.n_samples();
    let m_count = data.n_clients();
    let loss = cfg.loss;
    let channels = loss.channels(data.n_classes);

    let mut clients: Vec<ClientState> = cfg
        .profiles
        .iter()
        .zip(&data.clients)
        .map(|(p, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(p.seed);
            Ok(ClientState {
                model: LocalModel::zeros(channels, c.dim()),
                rng,
                period: SimTime::from_secs(p.period)?.0,
            })
        })
        .collect::<Result<_>>()?;

    let mut server: State = vec![Array2::zeros((n, channels)); m_count];
    let mut dirty: Vec<Vec<bool>> = vec![vec![false; n]; m_count];
    let mut touched: Vec<Vec<usize>> = vec![Vec::new(); m_count];

    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    for (m, c) in clients.iter().enumerate() {
        queue.push(Reverse((c.period, m, seq)));
        seq += 1;
    }

    let mut intervals = Vec::with_capacity(rounds);
    let mut events = Vec::new();
    let mut pushes = vec![0usize; m_count];
    let mut loss_history = vec![(0, mean_server_loss(&server, &data.labels, &loss))];

    for t in 1..=rounds {
        let boundary = step * t as u64;
        while let Some(&Reverse((time, m, _))) = queue.peek() {
            if time > boundary {
                break;
            }
            queue.pop();
            let profile = &cfg.profiles[m];
            let client = &mut clients[m];
            let communicates =
                profile.participation >= 1.0 || client.rng.random::<f64>() < profile.participation;
            if communicates {
                let batch = sample_batch(&mut client.rng, n, profile.tau);
                let x = &data.clients[m].features;
                let fresh = client.model.embed_rows(x.view(), &batch);
                for (k, &i) in batch.iter().enumerate() {
                    server[m].row_mut(i).assign(&fresh.row(k));
                    if !dirty[m][i] {
                        dirty[m][i] = true;
                        touched[m].push(i);
                    }
                }
                events.push(EventRecord {
                    time: SimTime(time),
                    client: m,
                    action: Action::Update,
                    batch: batch.clone(),
                });

                let mut total = Array2::zeros((batch.len(), channels));
                for state in &server {
                    total += &state.select(Axis(0), &batch);
                }
                let (grads, _) = server_gradients(&total, batch.iter().map(|&i| data.labels[i]), &loss);
                events.push(EventRecord {
                    time: SimTime(time),
                    client: m,
                    action: Action::Query,
                    batch: batch.clone(),
                });
                let x_batch = x.select(Axis(0), &batch);
                local_step(&mut client.model, &grads, &x_batch, profile.learning_rate, cfg.l2);
                pushes[m] += 1;
            } else {
                events.push(EventRecord {
                    time: SimTime(time),
                    client: m,
                    action: Action::Skip,
                    batch: Vec::new(),
                });
            }
            queue.push(Reverse((time + client.period, m, seq)));
            seq += 1;
        }

        let deltas = (0..m_count)
            .map(|m| {
                let mut samples = std::mem::take(&mut touched[m]);
                samples.sort_unstable();
                for &i in &samples {
                    dirty[m][i] = false;
                }
                ClientDelta {
                    values: server[m].select(Axis(0), &samples),
                    samples,
                }
            })
            .collect();
        intervals.push(deltas);

        let current = mean_server_loss(&server, &data.labels, &loss);
        if !current.is_finite() {
            return Err(Error::Divergence {
                at: format!("simulated time {:.6}s", SimTime(boundary).as_secs()),
            });
        }
        loss_history.push((t, current));
    }

    Ok(AsyncRun {
        models: clients.into_iter().map(|c| c.model).collect(),
        snapshots: SnapshotLog {
            n_samples: n,
            channels,
            n_clients: m_count,
            intervals,
        },
        loss_history,
        events,
        pushes,
    })
}

fn mean_server_loss(server: &State, labels: &[usize], loss: &dyn Loss) -> f64 {
    let mut total = server[0].clone();
    for s in &server[1..] {
        total += s;
    }
    mean_loss_of(total.view(), labels, loss)
}

/// Samples whose embedding for client `m` differs between two snapshots.
pub fn snapshot_delta(prev: &State, curr: &State, m: usize) -> Vec<usize> {
    prev[m]
        .axis_iter(Axis(0))
        .zip(curr[m].axis_iter(Axis(0)))
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| i)
        .collect()
}
