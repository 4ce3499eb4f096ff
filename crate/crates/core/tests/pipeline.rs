use verfedsv::completion::{complete_trace, CompletionConfig, Init};
use verfedsv::data::{equal_splits, make_teacher_dataset, partition_vertical, VerticalDataset};
use verfedsv::fedsgd::{run_fedsgd, LearningRate, SyncConfig};
use verfedsv::history::EmbeddingHistory;
use verfedsv::model::LossKind;
use verfedsv::shapley::{exact_verfedsv, max_norm_lipschitz, ErrorBudget, ResidualSource, UtilityEvaluator};
use verfedsv::vafl::{run_vafl, AsyncConfig, ClientProfile};

fn toy(n: usize, d: usize, m: usize, seed: u64) -> VerticalDataset {
    let ds = make_teacher_dataset(n, d, 2, 0.3, seed).unwrap();
    partition_vertical(&ds, &equal_splits(d, m).unwrap()).unwrap()
}

#[test]
fn completed_sync_values_stay_within_completion_budget() {
    for seed in 0..3 {
        let data = toy(200, 9, 3, seed);
        let mut cfg = SyncConfig::new(40, 50, LearningRate::Constant(0.5), seed);
        cfg.record_full = true;
        let run = run_fedsgd(&data, &cfg).unwrap();
        let truth = run.trace.full.clone().unwrap();

        let ccfg = CompletionConfig::for_shape(3, 40, 200, 7);
        assert_eq!((ccfg.rank, ccfg.init), (3, Init::Spectral));
        let mut completed = complete_trace(&run.trace, &ccfg).unwrap();
        completed.evaluate_against(&truth).unwrap();

        let loss = LossKind::Multinomial;
        let reference = exact_verfedsv(&UtilityEvaluator::new(&truth, &data.labels, &loss).unwrap(), false).unwrap();
        let estimate =
            exact_verfedsv(&UtilityEvaluator::new(&completed, &data.labels, &loss).unwrap(), false).unwrap();
        let budget = ErrorBudget::from_fits(&completed.fits, max_norm_lipschitz(&loss, 2));
        assert_eq!(budget.source, ResidualSource::Heldout);
        let gap = reference
            .values
            .iter()
            .zip(&estimate.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        eprintln!("seed {seed}: gap {gap:e}, eps {:e}, budget {:e}", budget.epsilon, budget.budget);
        assert!(gap <= budget.budget);
    }
}

#[test]
fn completion_reproduces_observed_entries_exactly() {
    let data = toy(120, 6, 2, 4);
    let mut cfg = SyncConfig::new(15, 30, LearningRate::Constant(0.3), 4);
    cfg.record_full = true;
    let run = run_fedsgd(&data, &cfg).unwrap();
    let ccfg = CompletionConfig::for_shape(3, 15, 120, 1);
    let completed = complete_trace(&run.trace, &ccfg).unwrap();
    let truth = run.trace.full.unwrap();
    for t in 1..=15 {
        let state = completed.state_at(t);
        for &i in &run.trace.rows[t - 1].batch {
            for m in 0..2 {
                assert_eq!(state[m].row(i), truth.states()[t][m].row(i));
            }
        }
    }
}

#[test]
fn zero_noise_clone_gets_identical_sync_value() {
    let mut data = toy(150, 8, 2, 2);
    let copy = data.clients[0].features.clone();
    data.push_client(copy).unwrap();
    let run = run_fedsgd(&data, &SyncConfig::new(20, 40, LearningRate::Constant(0.5), 3)).unwrap();
    let completed = complete_trace(&run.trace, &CompletionConfig::for_shape(4, 20, 150, 5)).unwrap();
    let r = exact_verfedsv(
        &UtilityEvaluator::new(&completed, &data.labels, &LossKind::Multinomial).unwrap(),
        false,
    )
    .unwrap();
    assert!((r.values[0] - r.values[2]).abs() <= 1e-10 * r.values[0].abs());
}

#[test]
fn async_values_follow_update_frequency() {
    let mut data = toy(200, 8, 2, 6);
    let copy = data.clients[0].features.clone();
    data.push_client(copy).unwrap();
    let profiles = vec![
        ClientProfile::new(0, 10, 0.1, 0.2),
        ClientProfile::new(1, 10, 0.1, 0.2),
        ClientProfile::new(2, 10, 0.4, 0.2),
    ];
    let run = run_vafl(&data, &AsyncConfig::new(8.0, 0.8, profiles, 1)).unwrap();
    let r = exact_verfedsv(
        &UtilityEvaluator::new(&run.snapshots, &data.labels, &LossKind::Multinomial).unwrap(),
        false,
    )
    .unwrap();
    assert!(r.values[0] > r.values[2], "{:?}", r.values);
}
