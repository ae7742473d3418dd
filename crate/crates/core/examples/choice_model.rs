//! A three-state logit kernel: deterministic utilities, choice
//! probabilities, and the Gumbel-argmax draw they describe.
//!
//! cargo run --example choice_model

use netdiff::rum::{sample_gumbel_argmax, NeighborComposition};
use netdiff::{ChoiceModel, FeatureMapSpec, StateSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> netdiff::Result<()> {
    let features = FeatureMapSpec::parse_list("constant,control,fraction:T,state:T", 0)?;
    // rows for T and H; D is the reference alternative
    let model = ChoiceModel::new(
        StateSpace::three_state(),
        features,
        vec![0.2, 0.8, 1.5, 1.0, -0.3, -0.5, 0.4, -1.0],
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (u, counts, prev) in [(0.0, [0, 3, 1], 1), (1.0, [0, 3, 1], 1), (0.0, [4, 0, 0], 0)] {
        let comp = NeighborComposition::new(counts.to_vec());
        let r = model.utilities(u, &comp, None, prev)?;
        let p = model.choice_probs(u, &comp, None, prev)?;
        let mut freq = [0usize; 3];
        for _ in 0..50_000 {
            freq[sample_gumbel_argmax(&r, &mut rng)] += 1;
        }
        println!("u={u} n={counts:?} prev={prev}");
        println!("  probs  {:.4?}", p);
        println!("  gumbel {:.4?}", freq.map(|c| c as f64 / 50_000.0));
    }
    Ok(())
}
