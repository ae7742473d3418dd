//! Fits both kernel estimators to a simulated transition log and writes the
//! log in the JSONL format the `fit` subcommand reads.
//!
//! cargo run --release --example fit_kernel

use netdiff::abm::{run, InitSpec, ModelAssignment, SimSpec};
use netdiff::graph::generate;
use netdiff::rum::{fit_mle, fit_plugin, write_transition_log};
use netdiff::{ChoiceModel, FeatureMapSpec, GraphGenSpec, GraphModel, StateSpace};

fn main() -> netdiff::Result<()> {
    let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 500).with_seed(6))?;
    let features = FeatureMapSpec::parse_list("constant,state:T,fraction:T", 0)?;
    let truth = ChoiceModel::new(StateSpace::two_state(), features.clone(), vec![-1.5, 2.5, 2.0])?;

    let mut sim = SimSpec::sequential(ModelAssignment::single(truth.clone()), 20_000, 1);
    sim.log_transitions = true;
    let res = run(&g, &InitSpec::random(vec![0.1, 0.9]), &sim)?;

    let (fitted, report) = fit_mle(&res.transitions, &features, truth.space(), 0.0)?;
    println!("true coefficients   {:?}", truth.coeffs());
    println!("fitted coefficients {:.3?}", fitted.coeffs());
    println!("{report:?}");

    let plugin = fit_plugin(&res.transitions, truth.space(), 4)?;
    for bin in 0..=plugin.buckets() {
        println!(
            "plug-in bin {bin}: from T {:.3?}  from H {:.3?}",
            plugin.row(bin, 0),
            plugin.row(bin, 1)
        );
    }

    let mut head = Vec::new();
    write_transition_log(&mut head, truth.space(), &res.transitions[..3])?;
    print!("{}", String::from_utf8_lossy(&head));
    Ok(())
}
