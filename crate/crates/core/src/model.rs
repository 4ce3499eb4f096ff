//! Linear local models, their embeddings, and the server-side loss.

use std::ops::Deref;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::VerticalDataset;
use crate::error::{Error, Result};

/// A client's linear model: one row of weights per embedding channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalModel {
    pub theta: Array2<f64>,
}

impl LocalModel {
    pub fn zeros(channels: usize, dim: usize) -> Self {
        Self {
            theta: Array2::zeros((channels, dim)),
        }
    }

    pub fn channels(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn embed(&self, x: ArrayView1<f64>) -> Result<Embedding> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "feature vector of length {} for a model of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(Embedding(self.theta.dot(&x).to_vec()))
    }

    /// Embeddings of every row of `x`, one row per sample (`N x C`).
    pub fn embed_all(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.theta.t())
    }

    /// Embeddings of the rows of `x` listed in `rows` (`|rows| x C`).
    pub fn embed_rows(&self, x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
        x.select(Axis(0), rows).dot(&self.theta.t())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.theta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A per-sample score vector, one value per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Server-side loss `f(h; y)` on the summed embedding.
pub trait Loss: Send + Sync {
    /// Embedding width used for a problem with `n_classes` classes.
    fn channels(&self, n_classes: usize) -> usize;

    /// `f(h; y)`; `y` must be a valid class.
    fn value(&self, h: &[f64], y: usize) -> f64;

    /// Writes `df/dh` into `out`.
    fn gradient(&self, h: &[f64], y: usize, out: &mut [f64]);

    /// Bound on the Euclidean norm of `df/dh` over all inputs.
    fn lipschitz(&self) -> f64;
}

/// The two built-in classification losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy, one channel per class.
    Multinomial,
    /// `log(1 + exp(-s h))` with `s = +1` for class 1 and `-1` for class 0.
    BinaryLogistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Multinomial => "multinomial",
            LossKind::BinaryLogistic => "binary_logistic",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(LossKind::Multinomial),
            "binary_logistic" => Ok(LossKind::BinaryLogistic),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

impl Loss for LossKind {
    fn channels(&self, n_classes: usize) -> usize {
        match self {
            LossKind::Multinomial => n_classes,
            LossKind::BinaryLogistic => 1,
        }
    }

    fn value(&self, h: &[f64], y: usize) -> f64 {
        match self {
            LossKind::Multinomial => log_sum_exp(h) - h[y],
            LossKind::BinaryLogistic => softplus(-margin_sign(y) * h[0]),
        }
    }

    fn gradient(&self, h: &[f64], y: usize, out: &mut [f64]) {
        match self {
            LossKind::Multinomial => {
                let lse = log_sum_exp(h);
                for (o, &v) in out.iter_mut().zip(h) {
                    *o = (v - lse).exp();
                }
                out[y] -= 1.0;
            }
            LossKind::BinaryLogistic => {
                let s = margin_sign(y);
                out[0] = -s * sigmoid(-s * h[0]);
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        lipschitz_g(*self)
    }
}

/// `0.5 * ||h - onehot(y)||^2`. Not globally Lipschitz; used to build
/// composite losses in tests of additivity.
#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredError;

impl Loss for SquaredError {
    fn channels(&self, n_classes: usize) -> usize {
        n_classes
    }

    fn value(&self, h: &[f64], y: usize) -> f64 {
        h.iter()
            .enumerate()
            .map(|(c, &v)| {
                let r = v - f64::from(u8::from(c == y));
                0.5 * r * r
            })
            .sum()
    }

    fn gradient(&self, h: &[f64], y: usize, out: &mut [f64]) {
        for (c, (o, &v)) in out.iter_mut().zip(h).enumerate() {
            *o = v - f64::from(u8::from(c == y));
        }
    }

    fn lipschitz(&self) -> f64 {
        f64::INFINITY
    }
}

/// Pointwise sum of two losses over the same channels.
pub struct SumLoss<A, B>(pub A, pub B);

impl<A: Loss, B: Loss> Loss for SumLoss<A, B> {
    fn channels(&self, n_classes: usize) -> usize {
        self.0.channels(n_classes)
    }

    fn value(&self, h: &[f64], y: usize) -> f64 {
        self.0.value(h, y) + self.1.value(h, y)
    }

    fn gradient(&self, h: &[f64], y: usize, out: &mut [f64]) {
        let mut other = vec![0.0; out.len()];
        self.0.gradient(h, y, out);
        self.1.gradient(h, y, &mut other);
        for (o, g) in out.iter_mut().zip(other) {
            *o += g;
        }
    }

    fn lipschitz(&self) -> f64 {
        self.0.lipschitz() + self.1.lipschitz()
    }
}

fn margin_sign(y: usize) -> f64 {
    if y == 1 {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn log_sum_exp(h: &[f64]) -> f64 {
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + h.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_label(h: &[f64], y: usize, kind: LossKind) -> Result<()> {
    let valid = match kind {
        LossKind::Multinomial => y < h.len(),
        LossKind::BinaryLogistic => h.len() == 1 && y < 2,
    };
    if valid {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!(
            "label {y} for a {}-channel {} embedding",
            h.len(),
            kind.name()
        )))
    }
}

/// Checked `f(h; y)`.
pub fn loss(kind: LossKind, h: &Embedding, y: usize) -> Result<f64> {
    check_label(h, y, kind)?;
    Ok(kind.value(h, y))
}

/// Checked `df/dh` at `(h, y)`.
pub fn grad_h(kind: LossKind, h: &Embedding, y: usize) -> Result<Vec<f64>> {
    check_label(h, y, kind)?;
    let mut out = vec![0.0; h.len()];
    kind.gradient(h, y, &mut out);
    Ok(out)
}

/// Global bound on `||df/dh||_2`: `sqrt(2)` for softmax cross-entropy
/// (`||p - e_y||^2 <= 2 (1 - p_y)^2`), `1` for the logistic margin loss.
pub fn lipschitz_g(kind: LossKind) -> f64 {
    match kind {
        LossKind::Multinomial => std::f64::consts::SQRT_2,
        LossKind::BinaryLogistic => 1.0,
    }
}

/// Per-client `N x C` embeddings of every sample.
pub fn embed_dataset(models: &[LocalModel], data: &VerticalDataset) -> Vec<Array2<f64>> {
    models
        .iter()
        .zip(&data.clients)
        .map(|(m, c)| m.embed_all(c.features.view()))
        .collect()
}

/// Sum of per-client embeddings (`N x C`).
pub fn total_embedding(models: &[LocalModel], data: &VerticalDataset) -> Result<Array2<f64>> {
    check_models(models, data)?;
    let mut per_client = embed_dataset(models, data).into_iter();
    let mut total = per_client.next().expect("at least one client");
    for e in per_client {
        total += &e;
    }
    Ok(total)
}

pub(crate) fn check_models(models: &[LocalModel], data: &VerticalDataset) -> Result<()> {
    if models.len() != data.n_clients() {
        return Err(Error::Dimension(format!(
            "{} models for {} clients",
            models.len(),
            data.n_clients()
        )));
    }
    let channels = models[0].channels();
    for (m, (model, client)) in models.iter().zip(&data.clients).enumerate() {
        if model.dim() != client.dim() || model.channels() != channels {
            return Err(Error::Dimension(format!(
                "client {m}: model {}x{} vs data dimension {}",
                model.channels(),
                model.dim(),
                client.dim()
            )));
        }
    }
    Ok(())
}

/// Class predicted from a summed embedding: argmax with ties to the
/// smallest index, or the sign rule (`h > 0` is class 1) for one channel.
pub fn predict(h: &[f64]) -> usize {
    if h.len() == 1 {
        return usize::from(h[0] > 0.0);
    }
    let mut best = 0;
    for (c, &v) in h.iter().enumerate().skip(1) {
        if v > h[best] {
            best = c;
        }
    }
    best
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(models: &[LocalModel], data: &VerticalDataset) -> Result<f64> {
    let total = total_embedding(models, data)?;
    let correct = total
        .axis_iter(Axis(0))
        .zip(&data.labels)
        .filter(|(h, &y)| predict(h.as_slice().expect("row-major")) == y)
        .count();
    Ok(correct as f64 / data.n_samples() as f64)
}

/// Mean loss over the dataset.
pub fn mean_loss(models: &[LocalModel], data: &VerticalDataset, loss: &dyn Loss) -> Result<f64> {
    let total = total_embedding(models, data)?;
    Ok(mean_loss_of(total.view(), &data.labels, loss))
}

pub(crate) fn mean_loss_of(total: ArrayView2<f64>, labels: &[usize], loss: &dyn Loss) -> f64 {
    let sum: f64 = total
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(h, &y)| loss.value(h.as_slice().expect("row-major"), y))
        .sum();
    sum / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_examples() {
        let zero = LocalModel::zeros(3, 4);
        assert_eq!(zero.embed(array![1.0, 2.0, 3.0, 4.0].view()).unwrap().0, vec![0.0; 3]);

        let m = LocalModel { theta: array![[1.0, 2.0]] };
        assert_eq!(m.embed(array![3.0, 4.0].view()).unwrap().0, vec![11.0]);
        assert!(matches!(m.embed(array![1.0].view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn embed_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Array2::from_shape_simple_fn((4, 7), || rng.random_range(-2.0..2.0));
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = LocalModel { theta: theta.clone() };
        let got = model.embed(ArrayView1::from(&x)).unwrap();
        for c in 0..4 {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += theta[[c, j]] * x[j];
            }
            assert!((got[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let mult = LossKind::Multinomial;
        let l = loss(mult, &Embedding(vec![0.0, 0.0]), 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        // exact value is log(1 + e^-1000), below f64 resolution
        let big = loss(mult, &Embedding(vec![1000.0, 0.0]), 0).unwrap();
        assert!(big.is_finite() && big.abs() < 1e-300);
        let big1 = loss(mult, &Embedding(vec![1000.0, 0.0]), 1).unwrap();
        assert!((big1 - 1000.0).abs() < 1e-12);

        let bin = loss(LossKind::BinaryLogistic, &Embedding(vec![0.0]), 1).unwrap();
        assert!((bin - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss(LossKind::BinaryLogistic, &Embedding(vec![800.0]), 0).unwrap().is_finite());

        assert!(matches!(loss(mult, &Embedding(vec![0.0, 0.0]), 2), Err(Error::OutOfRange(_))));
        assert!(grad_h(LossKind::BinaryLogistic, &Embedding(vec![0.0]), 2).is_err());
    }

    #[test]
    fn grad_examples() {
        let g = grad_h(LossKind::Multinomial, &Embedding(vec![0.0, 0.0]), 0).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        let g = grad_h(LossKind::BinaryLogistic, &Embedding(vec![0.0]), 1).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15);
    }

    fn random_h(rng: &mut ChaCha8Rng, c: usize, scale: f64) -> Vec<f64> {
        (0..c).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-6;
        for trial in 0..100 {
            let (kind, c) = if trial % 2 == 0 {
                (LossKind::Multinomial, 2 + trial % 5)
            } else {
                (LossKind::BinaryLogistic, 1)
            };
            let h = random_h(&mut rng, c, 5.0);
            let y = rng.random_range(0..c.max(2));
            let g = grad_h(kind, &Embedding(h.clone()), y).unwrap();
            for k in 0..c {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp[k] += step;
                hm[k] -= step;
                let fd = (kind.value(&hp, y) - kind.value(&hm, y)) / (2.0 * step);
                assert!((fd - g[k]).abs() < 1e-5, "trial {trial} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn multinomial_gradient_sums_to_zero_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let h = random_h(&mut rng, 6, 20.0);
            let y = rng.random_range(0..6);
            let g = grad_h(LossKind::Multinomial, &Embedding(h.clone()), y).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-12);

            let shift = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = h.iter().map(|v| v + shift).collect();
            let a = LossKind::Multinomial.value(&h, y);
            let b = LossKind::Multinomial.value(&shifted, y);
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_norm_never_exceeds_lipschitz_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [LossKind::Multinomial, LossKind::BinaryLogistic] {
            let bound = lipschitz_g(kind);
            for _ in 0..100_000 {
                let c = if kind == LossKind::Multinomial { rng.random_range(2..8) } else { 1 };
                let h = random_h(&mut rng, c, 30.0);
                let y = rng.random_range(0..c.max(2));
                let mut g = vec![0.0; c];
                kind.gradient(&h, y, &mut g);
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= bound + 1e-12);
            }
        }
        assert_eq!(lipschitz_g(LossKind::Multinomial), 2f64.sqrt());
        assert_eq!(lipschitz_g(LossKind::BinaryLogistic), 1.0);
    }

    #[test]
    fn gradient_is_one_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..2000 {
            let h1 = random_h(&mut rng, 4, 10.0);
            let h2 = random_h(&mut rng, 4, 10.0);
            let y = rng.random_range(0..4);
            let mut g1 = vec![0.0; 4];
            let mut g2 = vec![0.0; 4];
            LossKind::Multinomial.gradient(&h1, y, &mut g1);
            LossKind::Multinomial.gradient(&h2, y, &mut g2);
            let dg: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dh: f64 = h1.iter().zip(&h2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dg <= dh + 1e-12);
        }
    }

    #[test]
    fn prediction_ties_go_to_smallest_class() {
        assert_eq!(predict(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(predict(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(predict(&[0.0]), 0);
        assert_eq!(predict(&[0.1]), 1);
    }

    #[test]
    fn zero_models_predict_class_zero() {
        use crate::data::{ClientData, VerticalDataset};
        let data = VerticalDataset::new(
            vec![ClientData::new(0, Array2::ones((4, 2)))],
            vec![0, 1, 1, 0],
            2,
        )
        .unwrap();
        let acc = accuracy(&[LocalModel::zeros(2, 2)], &data).unwrap();
        assert_eq!(acc, 0.5);
        assert!(accuracy(&[LocalModel::zeros(2, 3)], &data).is_err());
    }
}
