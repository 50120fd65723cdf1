use anisoperc::coupling::*;
use anisoperc::lattice::LatticeConfig;
use anisoperc::sampling::Params;

#[test]
fn domination_in_the_nonvacuous_window() {
    let spec = exploration_spec(2, 24, 1).unwrap();
    let params = Params::for_spec(&spec, 0.49, 0.35).unwrap();
    let report = domination_experiment(&spec, &params, 0.5, 3000, 17).unwrap();
    assert!(report.chain.holds);
    assert!(report.dominates_p, "{report:?}");
    assert!(report.consistent_with_r, "{report:?}");
    assert_eq!(report.outcomes.values().sum::<u64>(), 3000);
    assert!(!report.outcomes.contains_key("WindowExhausted"));
}

#[test]
fn collapsed_multigraph_has_the_plain_law() {
    let spec = LatticeConfig::new(1, 1, 2, 2).build().unwrap();
    let params = Params::for_spec(&spec, 0.5, 0.3).unwrap();
    let report = equivalence_check(&spec, &params, 100_000, 4).unwrap();
    assert!(report.exact);
    assert!(report.tv_distance < 0.01, "{report:?}");
    assert!(report.p_value > 1e-4, "{report:?}");
    // Law of a 4-cycle with two D edges (p) and two verticals (q).
    assert!((report.plain_law.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn layered_runs_are_lawful() {
    for layers in 1..=3 {
        let spec = LatticeConfig::new(2, 1, 20, 0).layered(layers).build().unwrap();
        let params = Params::for_spec(&spec, 0.4, 0.5).unwrap();
        for i in 0..200 {
            let run = explore_coupled(&spec, &params, 6, i, 400).unwrap();
            assert!(run.state.explored.iter().all(|&(_, t)| t <= layers));
            let report = verify_trace(&run);
            assert!(report.passed(), "l = {layers}, run {i}: {:?}", report.failures().collect::<Vec<_>>());
        }
    }
}
