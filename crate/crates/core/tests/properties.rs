use proptest::prelude::*;

use lesslab::assign::{column_deficit, sinkhorn_knopp};
use lesslab::numerics::Matrix;
use lesslab::refine::{rule_of_three_test, History, RefinerConfig, ThresholdState};
use lesslab::runner::ExperimentConfig;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn sinkhorn_rows_are_distributions(s in (2usize..20, 2usize..8).prop_flat_map(|(r, c)| matrix(r, c)), iters in 1usize..10) {
        let q = sinkhorn_knopp(&s, 0.05, iters).unwrap();
        for (row, sum) in q.q.row_iter().zip(q.q.row_sums()) {
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        prop_assert!(column_deficit(&q.balanced) < 1e-9);
    }

    #[test]
    fn thresholds_stay_in_bounds(steps in prop::collection::vec(prop::collection::vec(0usize..20, 4), 1..200)) {
        let mut ts = ThresholdState::constant(0.95, vec![0.25; 4]).unwrap();
        for counts in &steps {
            let total: usize = counts.iter().sum();
            ts.update(counts, total.max(1)).unwrap();
            prop_assert!(ts.tau_c.iter().all(|&t| (ts.tau_min..=ts.tau_max).contains(&t)));
            prop_assert!(ts.p_c.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn short_or_mixed_histories_never_promote(n in 1usize..30, class in 0usize..3) {
        let cfg = RefinerConfig::default();
        let mut h = History::new(3, 64);
        for _ in 0..n {
            h.push(class, true);
        }
        prop_assert!(!rule_of_three_test(&h, &cfg).accept);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), epochs in 0usize..500, tau in 0.21f64..1.0, mu in 1usize..10) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.epochs = epochs;
        cfg.tau = vec![tau];
        cfg.set("mu_ratio", &mu.to_string()).unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_kv()).unwrap();
        prop_assert_eq!(back.to_kv(), cfg.to_kv());
        prop_assert_eq!(back.tau, cfg.tau);
    }
}
