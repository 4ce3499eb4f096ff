//! Vertically partitioned datasets.
//!
//! A [`DenseDataset`] is the centralized view (all features, all labels). It
//! is split column-wise into a [`VerticalDataset`] whose clients each own a
//! contiguous block of features for every sample; the labels stay with the
//! server.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Labeled samples with all features in one dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDataset {
    pub features: Array2<f64>,
    /// Class index of every sample, in `0..n_classes`.
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Original label token of each class index, as read from the source.
    pub label_names: Vec<String>,
}

impl DenseDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let label_names = (0..n_classes).map(|c| c.to_string()).collect();
        Self::with_label_names(features, labels, n_classes, label_names)
    }

    pub fn with_label_names(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        label_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::Dimension(format!("empty feature matrix {n}x{d}")));
        }
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::OutOfRange(format!(
                "label {bad} with {n_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature matrix has non-finite entries".into()));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            label_names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> DenseDataset {
        DenseDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            label_names: self.label_names.clone(),
        }
    }

    /// Seeded uniform subsample of `n` rows without replacement. Rows keep
    /// their original relative order. Returns a clone when `n >= N`.
    pub fn subsample(&self, n: usize, seed: u64) -> DenseDataset {
        if n >= self.n_samples() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.n_samples(), n).into_vec();
        picked.sort_unstable();
        self.select_rows(&picked)
    }

    /// Seeded shuffle split into (train, test). The test part holds
    /// `round(test_fraction * N)` rows.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(DenseDataset, DenseDataset)> {
        let (train, test) = train_test_indices(self.n_samples(), test_fraction, seed)?;
        Ok((self.select_rows(&train), self.select_rows(&test)))
    }
}

/// Sorted (train, test) row indices of [`DenseDataset::train_test_split`].
pub fn train_test_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test >= n {
        return Err(Error::Config("test split leaves no training rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// One client's local feature block, rows aligned with the global sample index.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub features: Array2<f64>,
}

impl ClientData {
    pub fn new(client_id: usize, features: Array2<f64>) -> Self {
        Self {
            client_id,
            features,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    /// Local feature dimension `d_m`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Samples shared by all clients, features split between them.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    pub clients: Vec<ClientData>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl VerticalDataset {
    pub fn new(clients: Vec<ClientData>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Config("a vertical dataset needs at least one client".into()));
        }
        for (m, c) in clients.iter().enumerate() {
            if c.client_id != m {
                return Err(Error::Config(format!(
                    "client at position {m} has id {}",
                    c.client_id
                )));
            }
            if c.n_samples() != labels.len() {
                return Err(Error::Dimension(format!(
                    "client {m} has {} rows, expected {}",
                    c.n_samples(),
                    labels.len()
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::OutOfRange(format!(
                "label {bad} with {n_classes} classes"
            )));
        }
        Ok(Self {
            clients,
            labels,
            n_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.clients.iter().map(ClientData::dim).collect()
    }

    /// Appends a client, assigning it the next free id.
    pub fn push_client(&mut self, features: Array2<f64>) -> Result<usize> {
        if features.nrows() != self.n_samples() {
            return Err(Error::Dimension(format!(
                "new client has {} rows, expected {}",
                features.nrows(),
                self.n_samples()
            )));
        }
        let id = self.clients.len();
        self.clients.push(ClientData::new(id, features));
        Ok(id)
    }

    /// Column-wise concatenation of every client block, in client order.
    pub fn reassemble(&self) -> Array2<f64> {
        let views: Vec<_> = self.clients.iter().map(|c| c.features.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("clients share the row count")
    }

    /// Every client's rows scaled to unit norm (zero rows untouched).
    pub fn normalized(&self) -> VerticalDataset {
        VerticalDataset {
            clients: self
                .clients
                .iter()
                .map(|c| normalize_client_features(c).client)
                .collect(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> VerticalDataset {
        VerticalDataset {
            clients: self
                .clients
                .iter()
                .map(|c| ClientData::new(c.client_id, c.features.select(Axis(0), indices)))
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Reads a LIBSVM/SVMlight text file.
///
/// Indices are 1-based in the file and become 0-based dense columns. When
/// `expected_dim` is `None` the dimension is the largest index seen. Labels
/// are remapped to `0..C`: numerically sorted when every token parses as a
/// number, lexicographically otherwise.
pub fn load_libsvm(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<DenseDataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_libsvm(BufReader::new(file), path, expected_dim)
}

pub fn parse_libsvm<R: BufRead>(
    reader: R,
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<DenseDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut raw_labels: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = tokens.next().expect("non-empty line has a token");
        if label.contains(':') {
            return Err(parse_err(lineno, format!("missing label before '{label}'")));
        }
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("expected index:value, got '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature index '{idx}'")))?;
            if idx == 0 {
                return Err(parse_err(lineno, "feature indices are 1-based".into()));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature value '{val}'")))?;
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value '{val}'")));
            }
            if let Some(d) = expected_dim {
                if idx > d {
                    return Err(Error::Dimension(format!(
                        "{}: line {lineno}: feature index {idx} exceeds dimension {d}",
                        path.display()
                    )));
                }
            }
            max_index = max_index.max(idx);
            row.push((idx - 1, val));
        }
        raw_labels.push(label.to_string());
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(parse_err(0, "no samples".into()));
    }
    let dim = expected_dim.unwrap_or(max_index);
    if dim == 0 {
        return Err(Error::Dimension("dataset has no features".into()));
    }

    let label_names = sorted_label_tokens(&raw_labels);
    let labels = raw_labels
        .iter()
        .map(|l| label_names.iter().position(|n| n == l).expect("label collected"))
        .collect();

    let mut features = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row {
            features[[i, j]] = v;
        }
    }
    let n_classes = label_names.len();
    DenseDataset::with_label_names(features, labels, n_classes, label_names)
}

fn sorted_label_tokens(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = raw.iter().collect();
    let mut names: Vec<String> = distinct.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = names.iter().map(|n| n.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, String)> = values.into_iter().zip(names).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        names = paired.into_iter().map(|(_, n)| n).collect();
    }
    names
}

/// Splits feature columns into contiguous client blocks of the given widths.
pub fn partition_vertical(ds: &DenseDataset, splits: &[usize]) -> Result<VerticalDataset> {
    let total: usize = splits.iter().sum();
    if total != ds.dim() {
        return Err(Error::Dimension(format!(
            "splits sum to {total}, dataset has {} features",
            ds.dim()
        )));
    }
    if splits.iter().any(|&w| w == 0) {
        return Err(Error::Dimension("every split must own at least one column".into()));
    }
    let mut start = 0;
    let clients = splits
        .iter()
        .enumerate()
        .map(|(m, &w)| {
            let block = ds.features.slice(s![.., start..start + w]).to_owned();
            start += w;
            ClientData::new(m, block)
        })
        .collect();
    VerticalDataset::new(clients, ds.labels.clone(), ds.n_classes)
}

/// Like [`partition_vertical`], but columns are shuffled with `seed` first.
pub fn partition_vertical_shuffled(
    ds: &DenseDataset,
    splits: &[usize],
    seed: u64,
) -> Result<VerticalDataset> {
    let mut order: Vec<usize> = (0..ds.dim()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let permuted = DenseDataset {
        features: ds.features.select(Axis(1), &order),
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
        label_names: ds.label_names.clone(),
    };
    partition_vertical(&permuted, splits)
}

/// Widths for `m` nearly equal contiguous blocks of `d` columns; the first
/// `d % m` blocks get one extra column.
pub fn equal_splits(d: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > d {
        return Err(Error::Dimension(format!("cannot split {d} columns over {m} clients")));
    }
    Ok((0..m).map(|k| d / m + usize::from(k < d % m)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedClient {
    pub client: ClientData,
    /// Rows with zero norm; they are left as zeros.
    pub zero_rows: Vec<usize>,
}

/// Rescales every nonzero row of the client's block to unit Euclidean norm.
pub fn normalize_client_features(cd: &ClientData) -> NormalizedClient {
    let mut features = cd.features.clone();
    let mut zero_rows = Vec::new();
    for (i, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            zero_rows.push(i);
        } else {
            row /= norm;
        }
    }
    NormalizedClient {
        client: ClientData::new(cd.client_id, features),
        zero_rows,
    }
}

/// Copy of `cd` with Gaussian noise added to `floor(fraction * d_m)` columns.
///
/// The noisy columns are a prefix of a seeded shuffle and the noise for each
/// is drawn column by column from the same stream, so two calls with the
/// same seed and increasing `fraction` perturb nested column sets with
/// identical noise on the shared columns.
pub fn make_noisy_clone(cd: &ClientData, fraction: f64, noise_std: f64, seed: u64) -> ClientData {
    let d = cd.dim();
    let k = ((fraction.clamp(0.0, 1.0) * d as f64).floor() as usize).min(d);
    let mut out = cd.clone();
    if k == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<usize> = (0..d).collect();
    cols.shuffle(&mut rng);
    let normal = Normal::new(0.0, noise_std).expect("finite noise std");
    for &j in &cols[..k] {
        for v in out.features.column_mut(j) {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// An `n x d_m` block of i.i.d. `N(mean, std^2)` entries.
pub fn make_random_client(n: usize, d_m: usize, mean: f64, std: f64, seed: u64) -> Result<ClientData> {
    if n == 0 || d_m == 0 {
        return Err(Error::Dimension(format!("random client of shape {n}x{d_m}")));
    }
    let normal = Normal::new(mean, std)
        .map_err(|e| Error::Config(format!("gaussian({mean}, {std}): {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Array2::from_shape_simple_fn((n, d_m), || normal.sample(&mut rng));
    Ok(ClientData::new(0, features))
}

/// Synthetic classification data: Gaussian features labeled by a random
/// linear teacher with Gaussian logit noise of scale `label_noise`.
pub fn make_teacher_dataset(
    n: usize,
    d: usize,
    n_classes: usize,
    label_noise: f64,
    seed: u64,
) -> Result<DenseDataset> {
    if n_classes < 2 {
        return Err(Error::Config("teacher dataset needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit gaussian");
    let teacher = Array2::from_shape_simple_fn((n_classes, d), || normal.sample(&mut rng));
    let features = Array2::from_shape_simple_fn((n, d), || normal.sample(&mut rng));
    let scores = features.dot(&teacher.t());
    let labels = scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (c, &s) in row.iter().enumerate() {
                let s = s + label_noise * normal.sample(&mut rng);
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            best
        })
        .collect();
    DenseDataset::new(features, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Cursor;

    fn parse(text: &str, dim: Option<usize>) -> Result<DenseDataset> {
        parse_libsvm(Cursor::new(text), Path::new("mem"), dim)
    }

    #[test]
    fn libsvm_line_maps_one_based_indices() {
        let ds = parse("1 3:0.5 7:1.0\n", Some(8)).unwrap();
        assert_eq!(ds.dim(), 8);
        assert_eq!(ds.features.row(0).to_vec(), vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.labels, vec![0]);
        assert_eq!(ds.label_names, vec!["1".to_string()]);
    }

    #[test]
    fn libsvm_labels_are_remapped_numerically() {
        let ds = parse("+1 1:1\n-1 2:1\n+1 1:2\n", None).unwrap();
        assert_eq!(ds.n_classes, 2);
        assert_eq!(ds.label_names, vec!["-1", "+1"]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert_eq!(ds.dim(), 2);
    }

    #[test]
    fn libsvm_reports_line_of_malformed_token() {
        let err = parse("1 1:1\n0 2=3\n", None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("1 0:1\n", None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn libsvm_rejects_index_beyond_expected_dim() {
        assert!(matches!(parse("1 9:1\n", Some(8)), Err(Error::Dimension(_))));
    }

    #[test]
    fn partition_examples() {
        let ds = DenseDataset::new(
            Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64),
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let v = partition_vertical(&ds, &[2, 3]).unwrap();
        assert_eq!(v.dims(), vec![2, 3]);
        assert_eq!(v.clients[0].features, ds.features.slice(s![.., 0..2]));
        assert_eq!(v.clients[1].features, ds.features.slice(s![.., 2..5]));
        assert_eq!(v.reassemble(), ds.features);

        let single = partition_vertical(&ds, &[5]).unwrap();
        assert_eq!(single.clients[0].features, ds.features);

        assert!(matches!(partition_vertical(&ds, &[2, 2]), Err(Error::Dimension(_))));
        assert!(matches!(partition_vertical(&ds, &[5, 0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn equal_splits_cover_all_columns() {
        assert_eq!(equal_splits(123, 3).unwrap(), vec![41, 41, 41]);
        assert_eq!(equal_splits(54, 9).unwrap(), vec![6; 9]);
        assert_eq!(equal_splits(10, 3).unwrap(), vec![4, 3, 3]);
        assert!(equal_splits(2, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let cd = ClientData::new(0, array![[3.0, 4.0], [0.0, 0.0]]);
        let out = normalize_client_features(&cd);
        assert!((out.client.features[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((out.client.features[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(out.client.features.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(out.zero_rows, vec![1]);
    }

    #[test]
    fn random_rows_normalize_to_unit_norm() {
        let cd = make_random_client(10, 5, 0.0, 1.0, 3).unwrap();
        let out = normalize_client_features(&cd);
        for row in out.client.features.axis_iter(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_clone_examples() {
        let cd = make_random_client(20, 6, 0.0, 1.0, 1).unwrap();
        assert_eq!(make_noisy_clone(&cd, 0.0, 1.0, 9), cd);

        let tiny = make_noisy_clone(&cd, 1.0, 1e-9, 9);
        let dev = (&tiny.features - &cd.features).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(dev <= 1e-6);
        assert!(dev > 0.0);

        assert_eq!(make_noisy_clone(&cd, 0.5, 1.0, 4), make_noisy_clone(&cd, 0.5, 1.0, 4));

        // floor(0.5 * 6) = 3 columns change
        let half = make_noisy_clone(&cd, 0.5, 1.0, 4);
        let changed = (0..6).filter(|&j| half.features.column(j) != cd.features.column(j)).count();
        assert_eq!(changed, 3);
    }

    #[test]
    fn noisy_clones_with_shared_seed_are_nested() {
        let cd = make_random_client(15, 10, 0.0, 1.0, 2).unwrap();
        let low = make_noisy_clone(&cd, 0.2, 1.0, 77);
        let high = make_noisy_clone(&cd, 0.4, 1.0, 77);
        for j in 0..10 {
            if low.features.column(j) != cd.features.column(j) {
                assert_eq!(low.features.column(j), high.features.column(j));
            }
        }
    }

    #[test]
    fn random_client_moments() {
        let cd = make_random_client(10_000, 4, 0.0, 1.0, 11).unwrap();
        let n = cd.features.len() as f64;
        let mean = cd.features.sum() / n;
        let var = cd.features.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());

        let flat = make_random_client(50, 3, 2.5, 1e-12, 11).unwrap();
        assert!(flat.features.iter().all(|v| (v - 2.5).abs() < 1e-9));

        assert_ne!(
            make_random_client(5, 3, 0.0, 1.0, 7).unwrap(),
            make_random_client(5, 3, 0.0, 1.0, 8).unwrap()
        );
    }

    #[test]
    fn split_and_subsample_are_seeded() {
        let ds = make_teacher_dataset(100, 4, 3, 0.1, 5).unwrap();
        let (tr, te) = ds.train_test_split(0.2, 1).unwrap();
        assert_eq!((tr.n_samples(), te.n_samples()), (80, 20));
        assert_eq!(ds.train_test_split(0.2, 1).unwrap().0, tr);
        let sub = ds.subsample(30, 4);
        assert_eq!(sub.n_samples(), 30);
        assert_eq!(sub, ds.subsample(30, 4));
        assert_ne!(sub, ds.subsample(30, 5));
    }

    #[test]
    fn vertical_dataset_validates_ids_and_rows() {
        let a = ClientData::new(0, Array2::zeros((3, 2)));
        let b = ClientData::new(2, Array2::zeros((3, 2)));
        assert!(VerticalDataset::new(vec![a.clone(), b], vec![0; 3], 1).is_err());
        let short = ClientData::new(1, Array2::zeros((2, 2)));
        assert!(VerticalDataset::new(vec![a, short], vec![0; 3], 1).is_err());
    }
}
