use greensim::bioenv::Scenario;
use greensim::estimators::EstimatorKind;
use greensim::harness::{run_comparison, write_comparison, CompareConfig};
use greensim::trainer::TrainConfig;

fn tiny(estimators: Vec<EstimatorKind>) -> CompareConfig {
    CompareConfig {
        train: TrainConfig {
            periods: 2,
            iterations_per_period: 2,
            real_data_per_period: 4,
            ..TrainConfig::default()
        },
        estimators,
        replications: vec![3],
        macros: 2,
        r_test: 8,
        summary_window: 2,
        seed: 11,
    }
}

#[test]
fn one_cell_bookkeeping() {
    let cells = run_comparison(&Scenario::default(), &tiny(vec![EstimatorKind::Mlr])).unwrap();
    assert_eq!(cells.len(), 1);
    let data = cells[0].outcome.as_ref().unwrap();
    assert_eq!(data.curve.len(), 4);
    assert_eq!(data.macros.len(), 2);
    assert!(data.macros.iter().all(|m| m.rewards.len() == 4));
    let dir = tempfile::tempdir().unwrap();
    write_comparison(&cells, dir.path()).unwrap();
    let curve = std::fs::read_to_string(dir.path().join("curves/mlr_3.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "iteration,mean,se,lo,hi");
    assert_eq!(curve.lines().count(), 1 + 4);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("estimator,n_i,mean,se\nmlr,3,"));
    assert!(!dir.path().join("failures.csv").exists());
}

#[test]
fn duplicated_cell_is_bit_identical() {
    let cells = run_comparison(&Scenario::default(), &tiny(vec![EstimatorKind::Ilr, EstimatorKind::Ilr])).unwrap();
    assert_eq!(cells[0].outcome, cells[1].outcome);
}

#[test]
fn macros_share_seeds_across_estimators() {
    let cells = run_comparison(&Scenario::default(), &tiny(vec![EstimatorKind::Pg, EstimatorKind::Tlr])).unwrap();
    let seeds = |i: usize| -> Vec<u64> { cells[i].outcome.as_ref().unwrap().macros.iter().map(|m| m.seed).collect() };
    assert_eq!(seeds(0), seeds(1));
    assert_ne!(seeds(0)[0], seeds(0)[1]);
}

#[test]
fn invalid_grid_is_rejected_before_running() {
    let mut cfg = tiny(vec![EstimatorKind::Pg]);
    cfg.macros = 1;
    assert!(run_comparison(&Scenario::default(), &cfg).is_err());
}
