//! Transition logs written by the simulator are read back and refitted.

use netdiff::abm::{run, InitSpec, ModelAssignment, SimSpec};
use netdiff::graph::generate;
use netdiff::rum::{fit_mle, read_transition_log, write_transition_log};
use netdiff::*;

fn three_state_truth() -> ChoiceModel {
    ChoiceModel::new(
        StateSpace::three_state(),
        FeatureMapSpec::parse_list("constant,fraction:T,state:T", 0).unwrap(),
        // slots T, H against the reference D
        vec![0.3, 1.5, 1.0, 0.2, -0.5, -0.8],
    )
    .unwrap()
}

#[test]
fn replayed_log_recovers_generator() {
    let mut spec = GraphGenSpec::new(GraphModel::Er, 300).with_seed(8);
    spec.er_p = 0.02;
    let g = generate(&spec).unwrap();
    let truth = three_state_truth();
    let mut sim = SimSpec::sequential(ModelAssignment::single(truth.clone()), 40_000, 5);
    sim.log_transitions = true;
    let res = run(&g, &InitSpec::random(vec![0.2, 0.3, 0.5]), &sim).unwrap();
    assert_eq!(res.transitions.len(), 40_000);

    let mut buf = Vec::new();
    write_transition_log(&mut buf, truth.space(), &res.transitions).unwrap();
    let replayed = read_transition_log(buf.as_slice(), truth.space()).unwrap();
    assert_eq!(replayed, res.transitions);

    let (fitted, report) = fit_mle(&replayed, truth.features(), truth.space(), 0.0).unwrap();
    assert!(report.converged && !report.separated);
    for (got, want) in fitted.coeffs().iter().zip(truth.coeffs()) {
        assert!(
            (got - want).abs() < 0.15,
            "{:?} vs {:?}",
            fitted.coeffs(),
            truth.coeffs()
        );
    }
    assert!(fitted.log_likelihood(&replayed).unwrap() >= truth.log_likelihood(&replayed).unwrap());
}
