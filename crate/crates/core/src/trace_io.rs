//! CSV files for labels, embedding traces, event logs and valuations.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! and writing it again reproduces it byte for byte. Every writer goes
//! through a temporary file that is renamed into place.
//!
//! Embedding files share one schema, `client_id,t,sample_id,c0,...`:
//! a synchronous trace lists the entries the server observed at `t`, an
//! asynchronous snapshot log the entries that changed between `t - 1` and
//! `t`, and a dense history every entry. Rows at `t = 0` give nonzero
//! initial values; omitted entries start at zero.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fedsgd::{EmbeddingTrace, ObservedRow};
use crate::history::{DenseHistory, State};
use crate::shapley::ValuationResult;
use crate::vafl::{Action, ClientDelta, EventRecord, SimTime, SnapshotLog};

/// Writes through `<path>.tmp` and renames it over `path`.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        body(&mut out)?;
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a CSV file, checking the header, and hands each record to `f`
/// with its line number.
fn read_records(
    path: &Path,
    expected: &[String],
    mut f: impl FnMut(usize, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Schema(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        f(line, &rec)?;
    }
    Ok(())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, k: usize) -> Result<T> {
    rec.get(k)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| schema(path, line, format!("bad value in column {k}")))
}

fn write_csv(path: &Path, header: &[String], rows: impl FnOnce(&mut csv::Writer<&mut dyn Write>) -> Result<()>) -> Result<()> {
    write_atomic(path, |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header).map_err(|e| csv_error(path, e))?;
        rows(&mut w)?;
        w.flush()?;
        Ok(())
    })
}

/// Writes a plain table of preformatted fields.
pub fn write_table<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    write_csv(path, &self::header(header), |w| {
        for row in rows {
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        Ok(())
    })
}

/// Header and rows of any CSV file, as strings.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn embedding_header(channels: usize) -> Vec<String> {
    ["client_id", "t", "sample_id"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..channels).map(|c| format!("c{c}")))
        .collect()
}

/// One row of an embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingEntry {
    pub client: usize,
    pub t: usize,
    pub sample: usize,
    pub values: Vec<f64>,
}

/// Shape of the embedding data a file must describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingShape {
    pub n_clients: usize,
    pub n_samples: usize,
    pub channels: usize,
    pub n_rounds: usize,
}

pub fn write_embedding_entries(
    path: &Path,
    channels: usize,
    entries: impl IntoIterator<Item = EmbeddingEntry>,
) -> Result<()> {
    write_csv(path, &embedding_header(channels), |w| {
        for e in entries {
            let mut rec = vec![e.client.to_string(), e.t.to_string(), e.sample.to_string()];
            rec.extend(e.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|err| csv_error(path, err))?;
        }
        Ok(())
    })
}

pub fn read_embedding_entries(path: &Path, shape: EmbeddingShape) -> Result<Vec<EmbeddingEntry>> {
    let mut entries = Vec::new();
    read_records(path, &embedding_header(shape.channels), |line, rec| {
        let e = EmbeddingEntry {
            client: field(path, line, rec, 0)?,
            t: field(path, line, rec, 1)?,
            sample: field(path, line, rec, 2)?,
            values: (0..shape.channels)
                .map(|c| field(path, line, rec, 3 + c))
                .collect::<Result<_>>()?,
        };
        if e.client >= shape.n_clients || e.sample >= shape.n_samples || e.t > shape.n_rounds {
            return Err(schema(
                path,
                line,
                format!(
                    "entry (client {}, t {}, sample {}) outside {} clients, {} samples, {} rounds",
                    e.client, e.t, e.sample, shape.n_clients, shape.n_samples, shape.n_rounds
                ),
            ));
        }
        entries.push(e);
        Ok(())
    })?;
    Ok(entries)
}

fn initial_entries(initial: &State) -> impl Iterator<Item = EmbeddingEntry> + '_ {
    initial.iter().enumerate().flat_map(|(m, a)| {
        a.outer_iter().enumerate().filter_map(move |(i, row)| {
            row.iter().any(|&v| v != 0.0).then(|| EmbeddingEntry {
                client: m,
                t: 0,
                sample: i,
                values: row.to_vec(),
            })
        })
    })
}

fn initial_from(entries: &[EmbeddingEntry], shape: EmbeddingShape) -> State {
    let mut state = vec![Array2::zeros((shape.n_samples, shape.channels)); shape.n_clients];
    for e in entries.iter().filter(|e| e.t == 0) {
        for (c, &v) in e.values.iter().enumerate() {
            state[e.client][[e.sample, c]] = v;
        }
    }
    state
}

pub fn write_sync_trace(path: &Path, trace: &EmbeddingTrace) -> Result<()> {
    let observed = trace.rows.iter().enumerate().flat_map(|(t, row)| {
        (0..trace.n_clients()).flat_map(move |m| {
            row.batch.iter().enumerate().map(move |(k, &i)| EmbeddingEntry {
                client: m,
                t: t + 1,
                sample: i,
                values: row.values[m].row(k).to_vec(),
            })
        })
    });
    write_embedding_entries(path, trace.channels, initial_entries(&trace.initial).chain(observed))
}

/// Reads a synchronous trace. Model norms and the full history are not
/// stored and come back empty.
pub fn read_sync_trace(path: &Path, shape: EmbeddingShape) -> Result<EmbeddingTrace> {
    let entries = read_embedding_entries(path, shape)?;
    let initial = initial_from(&entries, shape);
    let mut per_round: Vec<Vec<&EmbeddingEntry>> = vec![Vec::new(); shape.n_rounds];
    for e in entries.iter().filter(|e| e.t > 0) {
        per_round[e.t - 1].push(e);
    }
    let mut rows = Vec::with_capacity(shape.n_rounds);
    for (t, list) in per_round.iter().enumerate() {
        let mut batch: Vec<usize> = list.iter().map(|e| e.sample).collect();
        batch.sort_unstable();
        batch.dedup();
        let mut values = vec![Array2::from_elem((batch.len(), shape.channels), f64::NAN); shape.n_clients];
        for e in list {
            let k = batch.binary_search(&e.sample).expect("sample is in the batch");
            for (c, &v) in e.values.iter().enumerate() {
                values[e.client][[k, c]] = v;
            }
        }
        if values.iter().any(|a| a.iter().any(|v| v.is_nan())) {
            return Err(Error::Schema(format!(
                "{}: round {} does not list every client for every observed sample",
                path.display(),
                t + 1
            )));
        }
        rows.push(ObservedRow { batch, values });
    }
    Ok(EmbeddingTrace {
        n_samples: shape.n_samples,
        channels: shape.channels,
        initial,
        rows,
        model_norms: vec![Vec::new(); shape.n_clients],
        full: None,
    })
}

pub fn write_snapshot_log(path: &Path, log: &SnapshotLog) -> Result<()> {
    let entries = log.intervals.iter().enumerate().flat_map(|(t, deltas)| {
        deltas.iter().enumerate().flat_map(move |(m, d)| {
            d.samples.iter().enumerate().map(move |(k, &i)| EmbeddingEntry {
                client: m,
                t: t + 1,
                sample: i,
                values: d.values.row(k).to_vec(),
            })
        })
    });
    write_embedding_entries(path, log.channels, entries)
}

pub fn read_snapshot_log(path: &Path, shape: EmbeddingShape) -> Result<SnapshotLog> {
    let entries = read_embedding_entries(path, shape)?;
    if entries.iter().any(|e| e.t == 0) {
        return Err(Error::Schema(format!(
            "{}: snapshot logs start from zero embeddings and have no t = 0 rows",
            path.display()
        )));
    }
    let mut grouped: Vec<Vec<Vec<&EmbeddingEntry>>> = vec![vec![Vec::new(); shape.n_clients]; shape.n_rounds];
    for e in &entries {
        grouped[e.t - 1][e.client].push(e);
    }
    let intervals = grouped
        .into_iter()
        .map(|clients| {
            clients
                .into_iter()
                .map(|mut list| {
                    list.sort_by_key(|e| e.sample);
                    let mut values = Array2::zeros((list.len(), shape.channels));
                    for (k, e) in list.iter().enumerate() {
                        for (c, &v) in e.values.iter().enumerate() {
                            values[[k, c]] = v;
                        }
                    }
                    ClientDelta {
                        samples: list.iter().map(|e| e.sample).collect(),
                        values,
                    }
                })
                .collect()
        })
        .collect();
    Ok(SnapshotLog {
        n_samples: shape.n_samples,
        channels: shape.channels,
        n_clients: shape.n_clients,
        intervals,
    })
}

/// Writes every entry at every time-stamp.
pub fn write_dense_history(path: &Path, history: &DenseHistory) -> Result<()> {
    let entries = history.states().iter().enumerate().flat_map(|(t, state)| {
        state.iter().enumerate().flat_map(move |(m, a)| {
            a.outer_iter().enumerate().map(move |(i, row)| EmbeddingEntry {
                client: m,
                t,
                sample: i,
                values: row.to_vec(),
            })
        })
    });
    let channels = history.states()[0][0].ncols();
    write_embedding_entries(path, channels, entries)
}

pub fn read_dense_history(path: &Path, shape: EmbeddingShape) -> Result<DenseHistory> {
    let entries = read_embedding_entries(path, shape)?;
    let mut states =
        vec![vec![Array2::zeros((shape.n_samples, shape.channels)); shape.n_clients]; shape.n_rounds + 1];
    for e in &entries {
        for (c, &v) in e.values.iter().enumerate() {
            states[e.t][e.client][[e.sample, c]] = v;
        }
    }
    DenseHistory::new(states)
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_csv(path, &header(&["sample_id", "label"]), |w| {
        for (i, y) in labels.iter().enumerate() {
            w.write_record([i.to_string(), y.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        Ok(())
    })
}

/// Reads labels, which must list samples `0..N` in order.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    read_records(path, &header(&["sample_id", "label"]), |line, rec| {
        let i: usize = field(path, line, rec, 0)?;
        if i != labels.len() {
            return Err(schema(path, line, format!("expected sample {}, found {i}", labels.len())));
        }
        labels.push(field(path, line, rec, 1)?);
        Ok(())
    })?;
    Ok(labels)
}

fn parse_action(s: &str) -> Option<Action> {
    [Action::Update, Action::Query, Action::Skip]
        .into_iter()
        .find(|a| a.name() == s)
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    write_csv(path, &header(&["time_ns", "client_id", "action", "batch"]), |w| {
        for e in events {
            let batch = e.batch.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([e.time.0.to_string(), e.client.to_string(), e.action.name().to_string(), batch])
                .map_err(|err| csv_error(path, err))?;
        }
        Ok(())
    })
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let mut events = Vec::new();
    read_records(path, &header(&["time_ns", "client_id", "action", "batch"]), |line, rec| {
        let action = parse_action(&rec[2]).ok_or_else(|| schema(path, line, "unknown action"))?;
        let batch = if rec[3].is_empty() {
            Vec::new()
        } else {
            rec[3]
                .split(';')
                .map(|s| s.parse().map_err(|_| schema(path, line, "bad batch index")))
                .collect::<Result<_>>()?
        };
        events.push(EventRecord {
            time: SimTime(field(path, line, rec, 0)?),
            client: field(path, line, rec, 1)?,
            action,
            batch,
        });
        Ok(())
    })?;
    Ok(events)
}

/// One line of a valuation table.
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationRow {
    pub client_id: usize,
    pub kind: String,
    pub value: f64,
    pub share: f64,
    pub share_pct: f64,
    pub method: String,
    pub permutations: Option<usize>,
    pub seed: Option<u64>,
    pub error_bound: Option<f64>,
}

const VALUATION_HEADER: [&str; 9] = [
    "client_id",
    "kind",
    "value",
    "share",
    "share_pct",
    "method",
    "K",
    "seed",
    "error_bound",
];

/// Rows for a result; `kinds[m]` labels client `m` (defaults to "client").
pub fn valuation_rows(result: &ValuationResult, kinds: &[String]) -> Vec<ValuationRow> {
    let shares = result.shares();
    result
        .values
        .iter()
        .enumerate()
        .map(|(m, &value)| ValuationRow {
            client_id: result.client_ids[m],
            kind: kinds.get(m).cloned().unwrap_or_else(|| "client".into()),
            value,
            share: shares[m],
            share_pct: 100.0 * shares[m],
            method: result.method.name().into(),
            permutations: result.permutations(),
            seed: result.seed(),
            error_bound: result.error_bound(),
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn write_valuation_rows(path: &Path, rows: &[ValuationRow]) -> Result<()> {
    write_csv(path, &header(&VALUATION_HEADER), |w| {
        for r in rows {
            w.write_record([
                r.client_id.to_string(),
                r.kind.clone(),
                r.value.to_string(),
                r.share.to_string(),
                r.share_pct.to_string(),
                r.method.clone(),
                opt(r.permutations),
                opt(r.seed),
                opt(r.error_bound),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        Ok(())
    })
}

pub fn write_valuation(path: &Path, result: &ValuationResult, kinds: &[String]) -> Result<()> {
    write_valuation_rows(path, &valuation_rows(result, kinds))
}

pub fn read_valuation(path: &Path) -> Result<Vec<ValuationRow>> {
    fn optional<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<Option<T>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| schema(path, line, format!("bad value '{s}'")))
        }
    }
    let mut rows = Vec::new();
    read_records(path, &header(&VALUATION_HEADER), |line, rec| {
        rows.push(ValuationRow {
            client_id: field(path, line, rec, 0)?,
            kind: rec[1].to_string(),
            value: field(path, line, rec, 2)?,
            share: field(path, line, rec, 3)?,
            share_pct: field(path, line, rec, 4)?,
            method: rec[5].to_string(),
            permutations: optional(path, line, &rec[6])?,
            seed: optional(path, line, &rec[7])?,
            error_bound: optional(path, line, &rec[8])?,
        });
        Ok(())
    })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{equal_splits, make_teacher_dataset, partition_vertical};
    use crate::fedsgd::{run_fedsgd, LearningRate, SyncConfig};
    use crate::history::EmbeddingHistory;
    use crate::shapley::{mc_verfedsv, McConfig, UtilityEvaluator};
    use crate::vafl::{run_vafl, AsyncConfig, ClientProfile};
    use crate::model::LossKind;
    use proptest::prelude::*;

    fn toy() -> crate::data::VerticalDataset {
        let ds = make_teacher_dataset(60, 6, 3, 0.1, 1).unwrap();
        partition_vertical(&ds, &equal_splits(6, 3).unwrap()).unwrap()
    }

    fn bytes(p: &Path) -> Vec<u8> {
        fs::read(p).unwrap()
    }

    #[test]
    fn sync_trace_round_trips() {
        let data = toy();
        let mut cfg = SyncConfig::new(5, 8, LearningRate::Constant(0.5), 3);
        cfg.record_full = true;
        let run = run_fedsgd(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        write_sync_trace(&p, &run.trace).unwrap();
        let shape = EmbeddingShape { n_clients: 3, n_samples: 60, channels: 3, n_rounds: 5 };
        let back = read_sync_trace(&p, shape).unwrap();
        assert_eq!(back.rows, run.trace.rows);
        assert_eq!(back.initial, run.trace.initial);
        let q = dir.path().join("again.csv");
        write_sync_trace(&q, &back).unwrap();
        assert_eq!(bytes(&p), bytes(&q));

        let truth = run.trace.full.unwrap();
        let h = dir.path().join("truth.csv");
        write_dense_history(&h, &truth).unwrap();
        assert_eq!(read_dense_history(&h, shape).unwrap(), truth);
        assert!(!dir.path().join("truth.csv.tmp").exists());
    }

    #[test]
    fn snapshot_log_and_events_round_trip() {
        let data = toy();
        let profiles = (0..3).map(|m| ClientProfile::new(m, 5, 0.1 * (m + 1) as f64, 0.3)).collect();
        let run = run_vafl(&data, &AsyncConfig::new(2.0, 0.5, profiles, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snap.csv");
        write_snapshot_log(&p, &run.snapshots).unwrap();
        let shape = EmbeddingShape { n_clients: 3, n_samples: 60, channels: 3, n_rounds: 4 };
        let back = read_snapshot_log(&p, shape).unwrap();
        assert_eq!(back, run.snapshots);
        for t in 0..=4 {
            assert_eq!(back.state_at(t), run.snapshots.state_at(t));
        }
        let e = dir.path().join("events.csv");
        write_events(&e, &run.events).unwrap();
        assert_eq!(read_events(&e).unwrap(), run.events);
    }

    #[test]
    fn labels_and_valuation_round_trip() {
        let data = toy();
        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("labels.csv");
        write_labels(&l, &data.labels).unwrap();
        assert_eq!(read_labels(&l).unwrap(), data.labels);

        let run = run_fedsgd(&data, &SyncConfig::new(4, 10, LearningRate::Constant(0.5), 1)).unwrap();
        let mut cfg = SyncConfig::new(4, 10, LearningRate::Constant(0.5), 1);
        cfg.record_full = true;
        let full = run_fedsgd(&data, &cfg).unwrap().trace.full.unwrap();
        let eval = UtilityEvaluator::new(&full, &data.labels, &LossKind::Multinomial).unwrap();
        let res = mc_verfedsv(&eval, &McConfig::new(30, 2)).unwrap();
        let v = dir.path().join("values.csv");
        write_valuation(&v, &res, &["regular".into()]).unwrap();
        let rows = read_valuation(&v).unwrap();
        assert_eq!(rows, valuation_rows(&res, &["regular".into()]));
        assert_eq!(rows[1].kind, "client");
        assert!((rows.iter().map(|r| r.share_pct).sum::<f64>() - 100.0).abs() <= 1e-9);
        let w = dir.path().join("values2.csv");
        write_valuation_rows(&w, &rows).unwrap();
        assert_eq!(bytes(&v), bytes(&w));
        drop(run);
    }

    #[test]
    fn schema_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "client_id,t,sample_id,c0\n0,1,7,0.5\n").unwrap();
        let shape = EmbeddingShape { n_clients: 1, n_samples: 5, channels: 1, n_rounds: 1 };
        assert!(matches!(read_sync_trace(&p, shape), Err(Error::Parse { line: 2, .. })));
        let shape2 = EmbeddingShape { channels: 2, ..shape };
        assert!(matches!(read_sync_trace(&p, shape2), Err(Error::Schema(_))));
        fs::write(&p, "sample_id,label\n0,1\n2,0\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Parse { line: 3, .. })));
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("e.csv");
            let entries: Vec<EmbeddingEntry> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| EmbeddingEntry { client: 0, t: 1, sample: i, values: vec![v] })
                .collect();
            write_embedding_entries(&p, 1, entries.clone()).unwrap();
            let shape = EmbeddingShape { n_clients: 1, n_samples: values.len(), channels: 1, n_rounds: 1 };
            prop_assert_eq!(read_embedding_entries(&p, shape).unwrap(), entries);
        }
    }
}
