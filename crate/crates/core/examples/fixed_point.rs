//! Fixed point of the two-state map with its contraction and
//! comparative-statics diagnostics.
//!
//! cargo run --example fixed_point

use netdiff::graph::generate;
use netdiff::twostate::{check_assumptions, comparative_statics, contraction_check, solve_fixed_point};
use netdiff::{AffineLogit, GraphGenSpec, GraphModel, JointDegreeDistribution, PhiContext, TwoStateLogits};

fn main() -> netdiff::Result<()> {
    let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 2000).with_seed(4))?;
    let q = JointDegreeDistribution::from_graph(&g);
    let logits = TwoStateLogits::new(AffineLogit::new(-1.0, 0.6, 2.0), AffineLogit::new(0.0, 0.6, 1.5));
    let base = PhiContext::new(&q, logits, 0.0)?;
    println!("assumptions: {:?}", check_assumptions(&base));

    let c = contraction_check(&base)?;
    println!(
        "S_H={} S_T={} eta={:.4} bound={:.4} measured={:.4}",
        c.s_h, c.s_t, c.eta, c.bound, c.measured_lipschitz
    );

    for u in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let ctx = base.with_control(u);
        let fp = solve_fixed_point(&ctx)?;
        let cs = comparative_statics(&ctx, fp.theta_star)?;
        println!(
            "u={u:.1}  theta*={:.5}  dtheta/du={:.5}  ({:?})",
            fp.theta_star, cs.dtheta_du, fp.method
        );
    }

    // pure influencers never update in the simulator; pin them at their start
    let frozen = base.with_static_isolated(0.35)?;
    println!(
        "with frozen sources: theta*={:.5}",
        solve_fixed_point(&frozen)?.theta_star
    );
    Ok(())
}
