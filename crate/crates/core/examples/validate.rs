//! Fit on the first 150 transitions, predict the rest, and score.
//!
//! cargo run --release --example validate

use netdiff::abm::{InitSpec, ModelAssignment, SimSpec};
use netdiff::graph::generate;
use netdiff::metrics::{validate_protocol, ValidationSpec};
use netdiff::mfd::FitMethod;
use netdiff::{AffineLogit, FeatureMapSpec, GraphGenSpec, GraphModel, TwoStateLogits};

fn main() -> netdiff::Result<()> {
    let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 100).with_seed(10))?;
    let logits = TwoStateLogits::new(AffineLogit::new(-1.5, 0.0, 2.0), AffineLogit::new(1.0, 0.0, 2.0));
    let sim = SimSpec::sequential(ModelAssignment::single(logits), 2000, 0);
    let init = InitSpec::random(vec![0.1, 0.9]);

    let methods = [
        FitMethod::Rum {
            features: FeatureMapSpec::parse_list("constant,state:T,fraction:T", 0)?,
            l2: 0.0,
        },
        FitMethod::Plugin { buckets: 4 },
    ];
    for method in methods {
        let r = validate_protocol(&g, &init, &sim, &ValidationSpec::new(method, 10))?;
        println!(
            "{:>6}: correlation {:.4} ± {:.4}, KL {:.4} ± {:.4}",
            r.method, r.correlation_mean, r.correlation_std, r.kl_mean, r.kl_std
        );
    }
    Ok(())
}
