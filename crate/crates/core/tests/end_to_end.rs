use std::fs;

use halftrack::bench::{
    cons, emit_csv, run_experiment, DatasetSource, ExperimentSpec, ReferenceTable,
};
use halftrack::dataio::{load_orlib, split, to_returns, Layout};
use halftrack::pipeline::{track, Model};
use halftrack::portfolio::TrackerConfig;
use halftrack::synthetic::{market_like, to_orlib_text, to_price_panel};
use proptest::prelude::*;

#[test]
fn file_to_tracked_portfolio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.txt");
    let panel = to_price_panel(&market_like(120, 20, 1e-3, 4)).unwrap();
    fs::write(&path, to_orlib_text(&panel, Layout::PeriodIndexLast)).unwrap();

    let data = split(
        &to_returns(&load_orlib(&path, Layout::PeriodIndexLast).unwrap()),
        60,
    )
    .unwrap();
    assert_eq!(
        (data.n_stocks(), data.train_rows, data.test_rows),
        (20, 60, 60)
    );
    let cfg = TrackerConfig::with_k(6);
    for model in [Model::L12, Model::L1] {
        let r = track(model, &data, &cfg).unwrap();
        assert_eq!(r.support.len(), 6, "{model}");
        assert!(r.weights.satisfies(cfg.bounds, 6, 1e-10));
        assert!(r.qp_kkt_residual < 1e-8);
    }
}

#[test]
fn sweep_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("indtrack1.txt");
    let panel = to_price_panel(&market_like(291, 31, 1e-3, 6)).unwrap();
    fs::write(&path, to_orlib_text(&panel, Layout::default())).unwrap();
    let mut spec = ExperimentSpec::new(
        vec![DatasetSource {
            path,
            layout: Layout::default(),
        }],
        (5..=10).collect(),
        vec![Model::L12],
    );
    spec.split_count = Some(145);
    spec.reference = Some(ReferenceTable::builtin());
    let rows = run_experiment(&spec).unwrap();
    let csv = dir.path().join("out.csv");
    emit_csv(&rows, &csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 7);
    for (line, row) in text.lines().skip(1).zip(&rows) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 11);
        let tei: f64 = f[4].parse().unwrap();
        let teo: f64 = f[5].parse().unwrap();
        assert!((tei / row.tei.unwrap() - 1.0).abs() < 1e-5);
        assert_eq!(row.cons.unwrap(), cons(row.tei.unwrap(), row.teo.unwrap()));
        assert!((teo / row.teo.unwrap() - 1.0).abs() < 1e-5);
        assert!(!f[7].is_empty());
        assert!(f[10].is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tracked_weights_always_feasible(seed in 0u64..10_000, k in 2usize..8) {
        let data = split(&market_like(50, 12, 1e-3, seed), 25).unwrap();
        let cfg = TrackerConfig::with_k(k);
        for model in [Model::L12, Model::L1] {
            let r = track(model, &data, &cfg).unwrap();
            prop_assert!(r.support.len() <= k);
            prop_assert!(r.weights.satisfies(cfg.bounds, k, 1e-10));
            prop_assert!(r.tei >= 0.0 && r.teo >= 0.0);
        }
    }
}
