//! A recipe sweeping the placement of the truthful quota, run end to end.
//! Results land in a temporary directory; the summary is printed.
//!
//! cargo run --release --example placement_sweep

use netdiff::recipe::{parse_config, run_recipe};

const RECIPE: &str = r#"{
    "graph": {"model": "powerlaw", "node_count": 1000},
    "model": {"delta_h": {"c0": -2.0, "cu": 0.0, "cq": 3.0},
              "delta_t": {"c0": 0.0, "cu": 0.0, "cq": 3.0}},
    "init": {"distribution": [0.2, 0.8], "placement": "random"},
    "sweep": {"placement": ["top_in_degree", "top_out_degree", "random"]},
    "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    "output_dir": "placement"
}"#;

fn main() -> netdiff::Result<()> {
    let recipe = parse_config(RECIPE)?;
    let base = std::env::temp_dir().join("netdiff-placement-sweep");
    let outcome = run_recipe(&recipe, &base)?;
    for cell in &outcome.cells {
        let (mean, sd) = cell.terminal[0];
        println!("{:<40} terminal T = {mean:.4} ± {sd:.4}", cell.cell.stem());
    }
    println!("files in {}", outcome.output_dir.display());
    Ok(())
}
