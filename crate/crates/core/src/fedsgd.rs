//! Synchronous vertical SGD.
//!
//! Every round the server draws one mini-batch shared by all clients. The
//! clients upload embeddings of that batch under their current models, the
//! server returns `df/dh` for each sample, and each client takes a local
//! gradient step. The uploads are the only embeddings the server ever sees,
//! so the resulting [`EmbeddingTrace`] is partially observed: the upload at
//! round `t + 1` reveals the state after `t` updates on that round's batch,
//! and one closing upload after the last round reveals the final state.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::VerticalDataset;
use crate::error::{Error, Result};
use crate::history::{DenseHistory, State};
use crate::model::{mean_loss, LocalModel, Loss, LossKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LearningRate {
    Constant(f64),
    /// `eta / t` at round `t`.
    InverseTime(f64),
}

impl LearningRate {
    pub fn at(self, round: usize) -> f64 {
        match self {
            LearningRate::Constant(eta) => eta,
            LearningRate::InverseTime(eta) => eta / round.max(1) as f64,
        }
    }

    fn base(self) -> f64 {
        match self {
            LearningRate::Constant(eta) | LearningRate::InverseTime(eta) => eta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncConfig {
    /// Training rounds `T`, also the number of valuation time-stamps.
    pub rounds: usize,
    /// Shared batch size, the smallest per-client upload budget.
    pub batch_size: usize,
    pub learning_rate: LearningRate,
    pub seed: u64,
    pub loss: LossKind,
    /// L2 penalty on the local models; 0 disables it.
    pub l2: f64,
    /// Full-training-set loss cadence in rounds; 0 records batch losses only.
    pub eval_every: usize,
    /// Keep every sample's embedding at every round (ground truth for tests
    /// and diagnostics; memory grows as `T * N * C * M`).
    pub record_full: bool,
}

impl SyncConfig {
    pub fn new(rounds: usize, batch_size: usize, learning_rate: LearningRate, seed: u64) -> Self {
        Self {
            rounds,
            batch_size,
            learning_rate,
            seed,
            loss: LossKind::Multinomial,
            l2: 0.0,
            eval_every: 0,
            record_full: false,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={n}",
                self.batch_size
            )));
        }
        let eta = self.learning_rate.base();
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("learning rate {eta} must be positive")));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 strength {} must be >= 0", self.l2)));
        }
        Ok(())
    }
}

/// Embeddings the server observed for one valuation time-stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedRow {
    /// Sorted sample indices.
    pub batch: Vec<usize>,
    /// Per client, `|batch| x C` embeddings in batch order.
    pub values: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTrace {
    pub n_samples: usize,
    pub channels: usize,
    /// Complete state at `t = 0`, one `N x C` matrix per client.
    pub initial: State,
    /// `rows[t - 1]` holds the observations of time-stamp `t`.
    pub rows: Vec<ObservedRow>,
    /// `model_norms[m][t]` is the Frobenius norm of client `m`'s model after
    /// `t` updates.
    pub model_norms: Vec<Vec<f64>>,
    /// Every state `0..=T` when recording was requested.
    pub full: Option<DenseHistory>,
}

impl EmbeddingTrace {
    pub fn n_clients(&self) -> usize {
        self.initial.len()
    }

    pub fn n_rounds(&self) -> usize {
        self.rows.len()
    }

    /// Sample indices observed at each time-stamp `1..=T`.
    pub fn observed_batches(&self) -> impl Iterator<Item = &[usize]> {
        self.rows.iter().map(|r| r.batch.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    /// Mean over the round's mini-batch.
    Batch,
    /// Mean over the whole training set.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// Number of updates the evaluated models had received.
    pub round: usize,
    pub loss: f64,
    pub scope: LossScope,
}

#[derive(Clone, Debug)]
pub struct SyncRun {
    pub models: Vec<LocalModel>,
    pub trace: EmbeddingTrace,
    pub loss_history: Vec<LossRecord>,
}

pub(crate) fn sample_batch<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    let mut batch = rand::seq::index::sample(rng, n, size).into_vec();
    batch.sort_unstable();
    batch
}

/// Gradient step `theta -= eta * (G^T X_B / |B| + l2 * theta)`.
pub(crate) fn local_step(
    model: &mut LocalModel,
    grads: &Array2<f64>,
    x_batch: &Array2<f64>,
    eta: f64,
    l2: f64,
) {
    let scale = eta / grads.nrows() as f64;
    let direction = grads.t().dot(x_batch);
    if l2 > 0.0 {
        model.theta *= 1.0 - eta * l2;
    }
    model.theta.scaled_add(-scale, &direction);
}

/// Server side: `df/dh` for each row of the summed embedding, plus the
/// mean loss over those rows.
pub(crate) fn server_gradients(
    total: &Array2<f64>,
    labels: impl Iterator<Item = usize>,
    loss: &dyn Loss,
) -> (Array2<f64>, f64) {
    let mut grads = Array2::zeros(total.dim());
    let mut sum = 0.0;
    for ((h, mut g), y) in total.axis_iter(Axis(0)).zip(grads.axis_iter_mut(Axis(0))).zip(labels) {
        let h = h.as_slice().expect("row-major");
        sum += loss.value(h, y);
        loss.gradient(h, y, g.as_slice_mut().expect("row-major"));
    }
    (grads, sum / total.nrows().max(1) as f64)
}

fn upload(models: &[LocalModel], data: &VerticalDataset, batch: &[usize]) -> Vec<Array2<f64>> {
    models
        .par_iter()
        .zip(&data.clients)
        .map(|(m, c)| m.embed_rows(c.features.view(), batch))
        .collect()
}

fn full_state(models: &[LocalModel], data: &VerticalDataset) -> State {
    models
        .par_iter()
        .zip(&data.clients)
        .map(|(m, c)| m.embed_all(c.features.view()))
        .collect()
}

/// Runs `cfg.rounds` rounds of synchronous vertical SGD from zero models.
pub fn run_fedsgd(data: &VerticalDataset, cfg: &SyncConfig) -> Result<SyncRun> {
    let n = data.n_samples();
    cfg.validate(n)?;
    let loss = cfg.loss;
    let channels = loss.channels(data.n_classes);
    if loss == LossKind::BinaryLogistic && data.n_classes > 2 {
        return Err(Error::Config(format!(
            "binary logistic loss with {} classes",
            data.n_classes
        )));
    }

    let mut models: Vec<LocalModel> = data
        .clients
        .iter()
        .map(|c| LocalModel::zeros(channels, c.dim()))
        .collect();
    let initial: State = vec![Array2::zeros((n, channels)); data.n_clients()];
    let mut full_states = cfg.record_full.then(|| vec![initial.clone()]);
    let mut model_norms = vec![vec![0.0]; data.n_clients()];
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut loss_history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if cfg.eval_every > 0 {
        loss_history.push(LossRecord {
            round: 0,
            loss: mean_loss(&models, data, &loss)?,
            scope: LossScope::Full,
        });
    }

    if cfg.rounds == 0 {
        return Ok(SyncRun {
            models,
            trace: EmbeddingTrace {
                n_samples: n,
                channels,
                initial,
                rows,
                model_norms,
                full: full_states.map(DenseHistory::new).transpose()?,
            },
            loss_history,
        });
    }

    let mut batch = sample_batch(&mut rng, n, cfg.batch_size);
    for t in 1..=cfg.rounds {
        let uploads = upload(&models, data, &batch);
        let mut total = uploads[0].clone();
        for u in &uploads[1..] {
            total += u;
        }
        let (grads, batch_loss) = server_gradients(&total, batch.iter().map(|&i| data.labels[i]), &loss);
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                at: format!("round {t}"),
            });
        }
        loss_history.push(LossRecord {
            round: t - 1,
            loss: batch_loss,
            scope: LossScope::Batch,
        });
        if t >= 2 {
            rows.push(ObservedRow {
                batch: batch.clone(),
                values: uploads,
            });
        }

        let eta = cfg.learning_rate.at(t);
        models
            .par_iter_mut()
            .zip(&data.clients)
            .for_each(|(model, client)| {
                let x_batch = client.features.select(Axis(0), &batch);
                local_step(model, &grads, &x_batch, eta, cfg.l2);
            });
        for (norms, model) in model_norms.iter_mut().zip(&models) {
            norms.push(model.frobenius_norm());
        }
        if let Some(states) = full_states.as_mut() {
            states.push(full_state(&models, data));
        }
        if cfg.eval_every > 0 && (t % cfg.eval_every == 0 || t == cfg.rounds) {
            let full = mean_loss(&models, data, &loss)?;
            if !full.is_finite() {
                return Err(Error::Divergence {
                    at: format!("round {t}"),
                });
            }
            loss_history.push(LossRecord {
                round: t,
                loss: full,
                scope: LossScope::Full,
            });
        }
        batch = sample_batch(&mut rng, n, cfg.batch_size);
    }
    // closing upload: observes the final models on one more batch
    rows.push(ObservedRow {
        values: upload(&models, data, &batch),
        batch,
    });

    Ok(SyncRun {
        models,
        trace: EmbeddingTrace {
            n_samples: n,
            channels,
            initial,
            rows,
            model_norms,
            full: full_states.map(DenseHistory::new).transpose()?,
        },
        loss_history,
    })
}

/// Per client, a `T x N` mask that is true where time-stamp `t` (row
/// `t - 1`) observed sample `i`.
pub fn observed_mask(trace: &EmbeddingTrace) -> Vec<Array2<bool>> {
    let mut mask = Array2::from_elem((trace.n_rounds(), trace.n_samples), false);
    for (t, row) in trace.rows.iter().enumerate() {
        for &i in &row.batch {
            mask[[t, i]] = true;
        }
    }
    vec![mask; trace.n_clients()]
}
