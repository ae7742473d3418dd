//! Generates each graph family and prints its degree summary.
//!
//! cargo run --example generate_graph

use netdiff::graph::generate;
use netdiff::{GraphGenSpec, GraphModel, JointDegreeDistribution};

fn main() -> netdiff::Result<()> {
    for model in [
        GraphModel::Powerlaw,
        GraphModel::Ba,
        GraphModel::Er,
        GraphModel::Chain,
        GraphModel::Tree,
    ] {
        let g = generate(&GraphGenSpec::new(model, 1000).with_seed(7))?;
        let q = JointDegreeDistribution::from_graph(&g);
        let sources = g.in_degrees().iter().filter(|&&l| l == 0).count();
        println!(
            "{model:?}: {} edges, mean degree {:.3}, max in {}, max out {}, {sources} pure influencers",
            g.edge_count(),
            q.mean_in_degree(),
            q.l_max(),
            q.m_max(),
        );
    }

    let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 200).with_seed(1))?;
    let weights = JointDegreeDistribution::from_graph(&g).edge_source_weights()?;
    println!("edge-source weight by in-degree: {weights:?}");
    Ok(())
}
