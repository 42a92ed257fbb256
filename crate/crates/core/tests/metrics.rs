use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedsim::aggregation::{AggregationConfig, Strategy};
use fedsim::engine::{run_experiment, ExperimentConfig, RoundRecord};
use fedsim::metrics::{communication_cost, compare, convergence_stat, CommCostModel};
use fedsim::partition::PartitionConfig;
use fedsim::selection::SchedulerConfig;
use fedsim::Error;

fn tiny(rounds: u32, fraction: f64) -> ExperimentConfig {
    ExperimentConfig {
        rounds,
        partition: PartitionConfig {
            num_collaborators: 10,
            total_samples: 300,
            ..Default::default()
        },
        scheduler: SchedulerConfig {
            window_fraction: fraction,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn with_accuracy(template: &RoundRecord, points: &[(u32, f64)]) -> Vec<RoundRecord> {
    points
        .iter()
        .map(|&(round, acc)| RoundRecord {
            round,
            val_acc: Some(acc),
            val_loss: Some(1.0 - acc),
            ..template.clone()
        })
        .collect()
}

#[test]
fn full_participation_costs_one() {
    let r = run_experiment(tiny(3, 1.0), 0).unwrap();
    assert_eq!(communication_cost(&r.records, r.roster.len()).unwrap(), 1.0);

    let cfg = ExperimentConfig {
        partition: PartitionConfig {
            num_collaborators: 1,
            total_samples: 50,
            ..Default::default()
        },
        scheduler: SchedulerConfig {
            window_fraction: 0.2,
            ..Default::default()
        },
        ..tiny(4, 0.2)
    };
    let r = run_experiment(cfg, 0).unwrap();
    assert_eq!(communication_cost(&r.records, 1).unwrap(), 1.0);
    assert!(matches!(
        communication_cost(&[], 3),
        Err(Error::EmptyRecords)
    ));
}

#[test]
fn cost_is_monotone_in_window_fraction() {
    let mut last = 0.0;
    for f in [0.1, 0.2, 0.35, 0.5, 0.8, 1.0] {
        let r = run_experiment(tiny(5, f), 0).unwrap();
        let c = communication_cost(&r.records, r.roster.len()).unwrap();
        assert!(c >= last, "fraction {f}: {c} < {last}");
        last = c;
    }
}

#[test]
fn comm_model_counts_bytes() {
    let r = run_experiment(tiny(4, 0.3), 0).unwrap();
    let m = CommCostModel::new(&r.final_params, r.roster.len(), r.records.len()).unwrap();
    assert!(m.per_update_payload > 8 * r.final_params.num_elements() as u64);
    assert_eq!(m.total_possible, 40);
    assert_eq!(
        m.bytes_transferred(&r.records),
        2 * 4 * 3 * m.per_update_payload
    );
}

#[test]
fn convergence_examples() {
    let template = run_experiment(tiny(1, 0.3), 0).unwrap().records.remove(0);
    let constant = with_accuracy(&template, &(1..=10).map(|r| (r, 0.8)).collect::<Vec<_>>());
    let s = convergence_stat(&constant, 0.9).unwrap();
    assert!((s.accuracy_auc - 0.8).abs() < 1e-15);
    assert_eq!(s.rounds_to_threshold, None);

    let rising = with_accuracy(
        &template,
        &(0..=20)
            .map(|r| (r + 1, r as f64 / 20.0))
            .collect::<Vec<_>>(),
    );
    let s = convergence_stat(&rising, 0.5).unwrap();
    assert!((s.accuracy_auc - 0.5).abs() < 1e-15);
    assert_eq!(s.rounds_to_threshold, Some(11));
}

#[test]
fn convergence_matches_trapezoid_oracle() {
    let template = run_experiment(tiny(1, 0.3), 0).unwrap().records.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let mut round = 0;
        let points: Vec<(u32, f64)> = (0..rng.random_range(2..30))
            .map(|_| {
                round += rng.random_range(1..4);
                (round, rng.random_range(0.0..1.0))
            })
            .collect();
        let s = convergence_stat(&with_accuracy(&template, &points), 0.7).unwrap();
        let (r0, rn) = (points[0].0 as f64, points.last().unwrap().0 as f64);
        let mut area = 0.0;
        for i in 1..points.len() {
            let x0 = (points[i - 1].0 as f64 - r0) / (rn - r0);
            let x1 = (points[i].0 as f64 - r0) / (rn - r0);
            area += (x1 - x0) * 0.5 * (points[i - 1].1 + points[i].1);
        }
        assert!((s.accuracy_auc - area).abs() <= 1e-12);
        assert!((0.0..=1.0).contains(&s.accuracy_auc));
        let first = points.iter().find(|p| p.1 >= 0.7).map(|p| p.0);
        assert_eq!(s.rounds_to_threshold, first);
    }
}

#[test]
fn self_comparison_is_identical() {
    let cfg = tiny(3, 0.3);
    let rows = compare(&[("a".into(), cfg.clone()), ("b".into(), cfg)], &[0, 1], 0).unwrap();
    let strip = |r: &fedsim::metrics::ComparisonRow| {
        (
            r.final_val_loss.clone(),
            r.final_val_acc.clone(),
            r.loss,
            r.accuracy,
            r.accuracy_auc,
            r.communication_cost,
        )
    };
    assert_eq!(strip(&rows[0]), strip(&rows[1]));
}

#[test]
fn onset_shows_up_in_comparison() {
    let cfg = |strategy| ExperimentConfig {
        aggregation: AggregationConfig::with_strategy(strategy),
        ..tiny(10, 0.3)
    };
    let rows = compare(
        &[
            ("simagg".into(), cfg(Strategy::SimAgg)),
            ("regsimagg".into(), cfg(Strategy::RegSimAgg)),
        ],
        &[3],
        0,
    )
    .unwrap();
    assert_eq!(rows[0].final_val_loss, rows[1].final_val_loss);
    assert_eq!(rows[0].accuracy_auc, rows[1].accuracy_auc);
}

#[test]
fn comparison_std_uses_sample_formula() {
    let rows = compare(&[("x".into(), tiny(3, 0.3))], &[0, 1, 2], 0).unwrap();
    let v = &rows[0].final_val_loss;
    assert_eq!(v.len(), 3);
    let mean = (v[0] + v[1] + v[2]) / 3.0;
    let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2) + (v[2] - mean).powi(2)) / 2.0;
    assert!((rows[0].loss.mean - mean).abs() <= 1e-15);
    assert!((rows[0].loss.std - var.sqrt()).abs() <= 1e-15);
    assert!(rows[0].loss.std > 0.0);
}

#[test]
fn incomparable_runs_are_refused() {
    let a = tiny(3, 0.3);
    let b = tiny(4, 0.3);
    assert!(matches!(
        compare(&[("a".into(), a), ("b".into(), b)], &[0], 0),
        Err(Error::IncomparableConfigs(_))
    ));
}
