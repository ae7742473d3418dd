//! Agent-based runs in both update modes, averaged over seeds.
//!
//! cargo run --release --example simulate

use netdiff::abm::{run_many, InitSpec, ModelAssignment, Placement, SimSpec};
use netdiff::graph::generate;
use netdiff::{AffineLogit, GraphGenSpec, GraphModel, Trajectory, TwoStateLogits};

fn main() -> netdiff::Result<()> {
    let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 1000).with_seed(2))?;
    let logits = TwoStateLogits::new(AffineLogit::new(-0.5, 0.0, 2.0), AffineLogit::new(0.2, 0.0, 1.5));
    let init = InitSpec::new(vec![0.35, 0.65], Placement::Random);
    let seeds: Vec<u64> = (0..10).collect();

    let edges = g.edge_count() as u64;
    let mut seq = SimSpec::sequential(ModelAssignment::single(logits), 10 * edges, 0);
    seq.record_every = edges;
    let par = SimSpec::parallel(ModelAssignment::single(logits), 10, 0);

    for (name, spec) in [("sequential", seq), ("parallel", par)] {
        let runs = run_many(&g, &init, &spec, &seeds)?;
        let mean = Trajectory::mean(&runs.iter().map(|r| r.trajectory.clone()).collect::<Vec<_>>())?;
        println!("{name}:");
        for (t, row) in mean.times().iter().zip(mean.states()) {
            println!("  t={t:>5.2}  T={:.4}", row[0]);
        }
    }
    Ok(())
}
