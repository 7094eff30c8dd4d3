//! Generator-level checks that rely on the independent centroid oracle.

mod common;

use common::{is_acyclic_by_toposort, oracle_holdout_accuracy};
use stdagcn::data_io::{generate_synthetic, SyntheticSpec};

#[test]
fn kappa_one_carries_no_class_signal() {
    // identical class distributions: oracle accuracy must sit at chance
    let spec = SyntheticSpec {
        kappa: 1.0,
        ..SyntheticSpec::default()
    };
    let out = generate_synthetic(&spec).unwrap();
    assert_eq!(out.dataset.len(), 200);
    let acc = oracle_holdout_accuracy(&out.dataset);
    assert!((acc - 0.5).abs() <= 0.05, "oracle accuracy {acc} at kappa=1");
}

#[test]
fn default_kappa_separates_classes_for_the_oracle() {
    let spec = SyntheticSpec::default();
    let out = generate_synthetic(&spec).unwrap();
    let acc = oracle_holdout_accuracy(&out.dataset);
    assert!(acc >= 0.90, "oracle accuracy {acc} below calibration target");
}

#[test]
fn ground_truth_graph_is_acyclic() {
    for seed in [0, 1, 2, 7] {
        let spec = SyntheticSpec {
            seed,
            subjects_per_class: 1,
            t_total: 8,
            ..SyntheticSpec::default()
        };
        let out = generate_synthetic(&spec).unwrap();
        assert!(is_acyclic_by_toposort(&out.truth, spec.n), "seed {seed}");
    }
}
