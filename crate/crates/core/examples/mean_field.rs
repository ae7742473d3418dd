//! Mean-field prediction next to the simulated average.
//!
//! cargo run --release --example mean_field

use netdiff::abm::{run_many, InitSpec, ModelAssignment, SimSpec};
use netdiff::graph::generate;
use netdiff::mfd::{integrate, theta_path, Activation, OdeSpec, PopulationVector};
use netdiff::{AffineLogit, GraphGenSpec, GraphModel, JointDegreeDistribution, Trajectory, TwoStateLogits};

fn main() -> netdiff::Result<()> {
    let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 1000).with_seed(9))?;
    let q = JointDegreeDistribution::from_graph(&g);
    let logits = TwoStateLogits::new(AffineLogit::new(-0.5, 0.0, 2.0), AffineLogit::new(0.2, 0.0, 1.5));

    let edges = g.edge_count() as u64;
    let mut sim = SimSpec::sequential(ModelAssignment::single(logits), 15 * edges, 0);
    sim.record_every = edges;
    let runs = run_many(
        &g,
        &InitSpec::random(vec![0.35, 0.65]),
        &sim,
        &(0..20).collect::<Vec<_>>(),
    )?;
    let abm = Trajectory::mean(&runs.iter().map(|r| r.trajectory.clone()).collect::<Vec<_>>())?;

    // one unit of ODE time is |E| edge events, so agents activate at rate l
    let ode = OdeSpec::new(15.0)
        .with_activation(Activation::InDegree)
        .with_output_times(abm.times().to_vec());
    let rho0 = PopulationVector::uniform(&q, &[0.35, 0.65])?;
    let mfd = integrate(&q, &rho0, &logits, vec!["T".into(), "H".into()], &ode)?;
    let theta = theta_path(&q, &mfd)?;

    println!("   t    abm T   mfd T  theta_T");
    for (((t, a), m), th) in abm.times().iter().zip(abm.states()).zip(mfd.states()).zip(&theta) {
        println!("{t:>4.1}  {:.4}  {:.4}  {:.4}", a[0], m[0], th[0]);
    }
    Ok(())
}
