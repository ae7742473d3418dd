//! Experiment recipes: a JSON file describing a graph, a kernel, an initial
//! state and sweep axes, expanded into a grid of simulation cells.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{self, InitSpec, Mode, ModelAssignment, Placement, SimSpec};
use crate::error::{Error, Result};
use crate::graph::{generate, DirectedGraph, GraphGenSpec, GraphModel};
use crate::kernel::Kernel;
use crate::metrics::mean_std;
use crate::rum::write_transition_log;

fn default_gamma() -> f64 {
    2.7
}

fn default_edge_clip() -> usize {
    50
}

fn default_er_p() -> f64 {
    0.05
}

fn default_branching() -> usize {
    2
}

fn default_rounds() -> u64 {
    10
}

fn default_record_every() -> u64 {
    1
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Either a graph file or generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<GraphModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_count: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_edge_clip")]
    pub edge_clip: usize,
    #[serde(default = "default_er_p")]
    pub er_p: f64,
    #[serde(default = "default_branching")]
    pub tree_branching: usize,
    #[serde(default)]
    pub seed: u64,
    /// Draw a fresh graph for every simulation seed (graph seed + run seed).
    #[serde(default, skip_serializing_if = "is_false")]
    pub resample_per_seed: bool,
}

impl GraphSection {
    fn gen_spec(&self) -> Result<GraphGenSpec> {
        let (Some(model), Some(node_count)) = (self.model, self.node_count) else {
            return Err(Error::InvalidSpec(
                "graph needs `path` or both `model` and `node_count`".into(),
            ));
        };
        let spec = GraphGenSpec {
            model,
            node_count,
            gamma: self.gamma,
            edge_clip: self.edge_clip,
            er_p: self.er_p,
            tree_branching: self.tree_branching,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        match (&self.path, self.model.is_some() || self.node_count.is_some()) {
            (Some(_), true) => Err(Error::InvalidSpec(
                "graph takes `path` or generator fields, not both".into(),
            )),
            (Some(_), false) => Ok(()),
            (None, _) => self.gen_spec().map(|_| ()),
        }
    }

    fn build(&self, base: &Path, run_seed: u64) -> Result<DirectedGraph> {
        match &self.path {
            Some(p) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                DirectedGraph::from_json(&text)
            }
            None => {
                let mut spec = self.gen_spec()?;
                if self.resample_per_seed {
                    spec.seed = spec.seed.wrapping_add(run_seed);
                }
                generate(&spec)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub steps: u64,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default)]
    pub log_transitions: bool,
}

fn default_mode() -> Mode {
    Mode::Parallel
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: default_mode(),
            steps: 0,
            rounds: default_rounds(),
            record_every: default_record_every(),
            log_transitions: false,
        }
    }
}

/// Values to sweep; an absent axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_model: Option<Vec<GraphModel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_count: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Vec<Placement>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecipe {
    pub graph: GraphSection,
    /// Single kernel for every node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Kernel>,
    /// Kernel file, relative to the recipe's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    /// Capability classes; replaces `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<ModelAssignment>,
    /// Defaults to 35% truthful with the rest split evenly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub sim: RunSection,
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Parses and validates a recipe; errors carry the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentRecipe> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let recipe: ExperimentRecipe = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    recipe.validate()?;
    Ok(recipe)
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentRecipe {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate().map_err(|e| config_err("graph", e.to_string()))?;
        let sources = [self.model.is_some(), self.model_path.is_some(), self.classes.is_some()];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return Err(config_err(
                "model",
                "give exactly one of `model`, `model_path`, `classes`",
            ));
        }
        if let Some(c) = &self.classes {
            c.num_states().map_err(|e| config_err("classes", e.to_string()))?;
            let total: f64 = c.classes.iter().map(|c| c.share).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(config_err("classes", format!("shares sum to {total}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.sim.record_every == 0 {
            return Err(config_err("sim.record_every", "must be positive"));
        }
        if !self.u.is_finite() {
            return Err(config_err("u", "must be finite"));
        }
        let s = &self.sweep;
        let lens = [
            ("sweep.graph_model", s.graph_model.as_ref().map(Vec::len)),
            ("sweep.node_count", s.node_count.as_ref().map(Vec::len)),
            ("sweep.gamma", s.gamma.as_ref().map(Vec::len)),
            ("sweep.placement", s.placement.as_ref().map(Vec::len)),
            ("sweep.u", s.u.as_ref().map(Vec::len)),
        ];
        for (path, len) in lens {
            if len == Some(0) {
                return Err(config_err(path, "sweep axes must be non-empty lists"));
            }
        }
        if s.node_count.as_ref().is_some_and(|v| v.contains(&0)) {
            return Err(config_err("sweep.node_count", "node counts must be at least 1"));
        }
        if self.graph.path.is_some() && (s.graph_model.is_some() || s.node_count.is_some() || s.gamma.is_some()) {
            return Err(config_err("sweep", "graph axes cannot be swept over a graph file"));
        }
        Ok(())
    }

    fn models(&self, base: &Path) -> Result<ModelAssignment> {
        if let Some(c) = &self.classes {
            return Ok(c.clone());
        }
        let kernel = match (&self.model, &self.model_path) {
            (Some(k), _) => k.clone(),
            (None, Some(p)) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                serde_json::from_str(&text)?
            }
            (None, None) => return Err(Error::InvalidSpec("recipe has no model".into())),
        };
        Ok(ModelAssignment::single(kernel))
    }

    fn default_init(k: usize) -> InitSpec {
        let rest = 0.65 / (k - 1) as f64;
        let mut dist = vec![rest; k];
        dist[0] = 0.35;
        InitSpec::random(dist)
    }

    /// Cartesian product of the sweep axes, in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell {
            index: 0,
            coordinates: Vec::new(),
            graph: self.graph.clone(),
            placement: None,
            u: self.u,
        }];
        fn expand<T: Clone>(
            cells: Vec<Cell>,
            axis: &Option<Vec<T>>,
            name: &str,
            show: impl Fn(&T) -> String,
            set: impl Fn(&mut Cell, &T),
        ) -> Vec<Cell> {
            let Some(values) = axis else { return cells };
            cells
                .into_iter()
                .flat_map(|c| {
                    values
                        .iter()
                        .map(|v| {
                            let mut c = c.clone();
                            c.coordinates.push((name.to_string(), show(v)));
                            set(&mut c, v);
                            c
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        let s = &self.sweep;
        cells = expand(
            cells,
            &s.graph_model,
            "graph_model",
            |m| format!("{m:?}").to_lowercase(),
            |c, m| c.graph.model = Some(*m),
        );
        cells = expand(
            cells,
            &s.node_count,
            "node_count",
            |n| n.to_string(),
            |c, n| c.graph.node_count = Some(*n),
        );
        cells = expand(cells, &s.gamma, "gamma", |g| g.to_string(), |c, g| c.graph.gamma = *g);
        cells = expand(cells, &s.placement, "placement", placement_name, |c, p| {
            c.placement = Some(p.clone())
        });
        cells = expand(cells, &s.u, "u", |u| u.to_string(), |c, u| c.u = *u);
        for (i, c) in cells.iter_mut().enumerate() {
            c.index = i;
        }
        cells
    }
}

fn placement_name(p: &Placement) -> String {
    match p {
        Placement::Random => "random".into(),
        Placement::TopInDegree => "top_in_degree".into(),
        Placement::TopOutDegree => "top_out_degree".into(),
        Placement::ChainHead => "chain_head".into(),
        Placement::TreeRoot => "tree_root".into(),
        Placement::Explicit(v) => format!("explicit{}", v.len()),
    }
}

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub coordinates: Vec<(String, String)>,
    pub graph: GraphSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    pub u: f64,
}

impl Cell {
    /// File-name stem built from the cell's coordinates.
    pub fn stem(&self) -> String {
        let mut s = format!("cell{:03}", self.index);
        for (k, v) in &self.coordinates {
            let v: String = v
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            s.push_str(&format!("_{k}-{v}"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub init: Option<InitSpec>,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub labels: Vec<String>,
    /// Mean and standard deviation of the terminal fraction per state.
    pub terminal: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellOutcome {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn terminal_mean(&self, label: &str) -> Option<f64> {
        let z = self.labels.iter().position(|l| l == label)?;
        self.terminal.get(z).map(|t| t.0)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    recipe: &'a ExperimentRecipe,
    output_dir: String,
    cells: &'a [CellOutcome],
}

#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    pub output_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl RecipeOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| !c.ok()).count()
    }
}

/// Init, files and labels with the terminal (mean, sd) per state; on failure
/// the init if it was resolved, and the message.
type CellResult =
    std::result::Result<(InitSpec, Vec<String>, Vec<String>, Vec<(f64, f64)>), (Option<InitSpec>, String)>;

fn run_cell(
    recipe: &ExperimentRecipe,
    models: &Result<ModelAssignment>,
    cell: &Cell,
    base: &Path,
    out: &Path,
) -> CellResult {
    let models = models.as_ref().map_err(|e| (None, e.to_string()))?;
    let k = models.num_states().map_err(|e| (None, e.to_string()))?;
    let mut init = recipe.init.clone().unwrap_or_else(|| ExperimentRecipe::default_init(k));
    if let Some(p) = &cell.placement {
        init.placement = p.clone();
    }
    let fail = |e: Error| (Some(init.clone()), e.to_string());
    let labels = models.classes[0].kernel.labels();
    let mut files = Vec::new();
    let mut terminal: Vec<Vec<f64>> = vec![Vec::new(); k];
    for &seed in &recipe.seeds {
        let graph = cell.graph.build(base, seed).map_err(fail)?;
        let sim = SimSpec {
            mode: recipe.sim.mode,
            steps: recipe.sim.steps,
            rounds: recipe.sim.rounds,
            u: cell.u,
            seed,
            log_transitions: recipe.sim.log_transitions,
            record_every: recipe.sim.record_every,
            record_per_degree: false,
            models: models.clone(),
        };
        let res = abm::run(&graph, &init, &sim).map_err(fail)?;
        let name = format!("{}_seed{seed}.csv", cell.stem());
        let path = out.join(&name);
        let file = fs::File::create(&path).map_err(|e| fail(Error::io(&path, e)))?;
        res.trajectory.write_csv(BufWriter::new(file)).map_err(fail)?;
        files.push(name);
        if recipe.sim.log_transitions {
            let name = format!("{}_seed{seed}.jsonl", cell.stem());
            let path = out.join(&name);
            let file = fs::File::create(&path).map_err(|e| fail(Error::io(&path, e)))?;
            let space = models.classes[0].kernel.space();
            write_transition_log(BufWriter::new(file), &space, &res.transitions).map_err(fail)?;
            files.push(name);
        }
        for (z, x) in res.trajectory.last().unwrap_or_default().iter().enumerate() {
            terminal[z].push(*x);
        }
    }
    Ok((init, labels, files, terminal.iter().map(|v| mean_std(v)).collect()))
}

/// Runs every cell × seed, writing one trajectory CSV per run plus
/// `summary.csv` and `manifest.json` into the output directory. A failing
/// cell is recorded and the others still run.
pub fn run_recipe(recipe: &ExperimentRecipe, base: &Path) -> Result<RecipeOutcome> {
    recipe.validate()?;
    let out = base.join(&recipe.output_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let models = recipe.models(base);
    let cells: Vec<CellOutcome> = recipe
        .cells()
        .into_par_iter()
        .map(|cell| match run_cell(recipe, &models, &cell, base, &out) {
            Ok((init, labels, files, terminal)) => CellOutcome {
                cell,
                init: Some(init),
                seeds: recipe.seeds.clone(),
                files,
                labels,
                terminal,
                error: None,
            },
            Err((init, message)) => CellOutcome {
                cell,
                init,
                seeds: recipe.seeds.clone(),
                files: Vec::new(),
                labels: Vec::new(),
                terminal: Vec::new(),
                error: Some(message),
            },
        })
        .collect();

    write_summary(&out.join("summary.csv"), recipe, &cells)?;
    let manifest = Manifest {
        recipe,
        output_dir: out.display().to_string(),
        cells: &cells,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(RecipeOutcome { output_dir: out, cells })
}

fn write_summary(path: &Path, recipe: &ExperimentRecipe, cells: &[CellOutcome]) -> Result<()> {
    let axes: Vec<String> = cells
        .first()
        .map(|c| c.cell.coordinates.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let labels: Vec<String> = cells
        .iter()
        .find(|c| c.ok())
        .map(|c| c.labels.clone())
        .unwrap_or_default();
    let mut text = String::from("cell");
    for a in &axes {
        text.push_str(&format!(",{a}"));
    }
    text.push_str(",status,seeds");
    for l in &labels {
        text.push_str(&format!(",{l}_mean,{l}_std"));
    }
    text.push('\n');
    for c in cells {
        text.push_str(&c.cell.index.to_string());
        for (_, v) in &c.cell.coordinates {
            text.push_str(&format!(",{v}"));
        }
        text.push_str(if c.ok() { ",ok" } else { ",error" });
        text.push_str(&format!(",{}", recipe.seeds.len()));
        for i in 0..labels.len() {
            match c.terminal.get(i) {
                Some((m, s)) => text.push_str(&format!(",{m},{s}")),
                None => text.push_str(",,"),
            }
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a recipe file; relative paths inside resolve against its directory.
pub fn load_recipe(path: &Path) -> Result<(ExperimentRecipe, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((parse_config(&text)?, base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twostate::{AffineLogit, TwoStateLogits};

    const MINIMAL: &str = r#"{
        "graph": {"model": "powerlaw", "node_count": 100},
        "model": {"delta_h": {"c0": -1.0, "cu": 0.0, "cq": 2.0},
                  "delta_t": {"c0": 0.5, "cu": 0.0, "cq": 1.0}}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let r = parse_config(MINIMAL).unwrap();
        assert_eq!(r.graph.gamma, 2.7);
        assert_eq!(r.graph.edge_clip, 50);
        assert_eq!(r.sim.rounds, 10);
        assert_eq!(r.sim.mode, Mode::Parallel);
        assert_eq!(r.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.cells().len(), 1);
    }

    #[test]
    fn unknown_key_named() {
        let text = MINIMAL.replace("\"node_count\": 100", "\"node_count\": 100, \"gama\": 2.5");
        match parse_config(&text) {
            Err(Error::Config { path, message }) => {
                assert_eq!(path, "graph.gama");
                assert!(message.contains("gama"), "{message}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
        let text = MINIMAL.replace("\"graph\"", "\"gama\": 1, \"graph\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
    }

    #[test]
    fn zero_nodes_rejected() {
        let text = MINIMAL.replace("100", "0");
        assert!(matches!(parse_config(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn type_mismatch_has_key_path() {
        let text = MINIMAL.replace("\"node_count\": 100", "\"node_count\": \"many\"");
        match parse_config(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "graph.node_count"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let mut r = parse_config(MINIMAL).unwrap();
        r.sweep.u = Some(vec![0.0, 0.5]);
        r.sweep.placement = Some(vec![Placement::Random, Placement::TopInDegree]);
        r.init = Some(InitSpec::random(vec![0.2, 0.8]));
        let again = parse_config(&r.to_json().unwrap()).unwrap();
        assert_eq!(again, r);
        assert_eq!(r.cells().len(), 4);
        assert_eq!(r.cells()[3].stem(), "cell003_placement-top_in_degree_u-0.5");
    }

    #[test]
    fn one_cell_one_seed_writes_one_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = parse_config(MINIMAL).unwrap();
        r.seeds = vec![7];
        r.output_dir = "out".into();
        let res = run_recipe(&r, dir.path()).unwrap();
        assert_eq!(res.failed(), 0);
        let mut names: Vec<String> = fs::read_dir(dir.path().join("out"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["cell000_seed7.csv", "manifest.json", "summary.csv"]);
    }

    #[test]
    fn reruns_are_bit_identical_and_errors_are_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let kernel = TwoStateLogits::new(AffineLogit::new(-1.0, 1.0, 2.0), AffineLogit::new(0.0, 1.0, 1.0));
        let mut r = parse_config(MINIMAL).unwrap();
        r.model = Some(kernel.into());
        r.sweep.u = Some(vec![0.0, 1.0]);
        // an explicit list of the wrong length fails only its own cell
        r.sweep.placement = Some(vec![Placement::Random, Placement::Explicit(vec![1, 2])]);
        r.seeds = vec![0, 1];
        let a = run_recipe(&r, dir.path()).unwrap();
        let first = fs::read(dir.path().join("results/summary.csv")).unwrap();
        let b = run_recipe(&r, dir.path()).unwrap();
        let second = fs::read(dir.path().join("results/summary.csv")).unwrap();
        assert_eq!(first, second);
        assert_eq!(a.failed(), 2);
        assert_eq!(b.cells.len(), 4);
        assert!(a.cells.iter().filter(|c| c.ok()).all(|c| c.files.len() == 2));
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("results/manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["cells"].as_array().unwrap().len(), 4);
        assert!(manifest["cells"][2]["error"].is_string());
    }

    #[test]
    fn missing_graph_file_is_a_cell_error() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace(r#""model": "powerlaw", "node_count": 100"#, r#""path": "nope.json""#);
        let r = parse_config(&text).unwrap();
        let res = run_recipe(&r, dir.path()).unwrap();
        assert_eq!(res.failed(), 1);
        assert!(res.cells[0].error.as_ref().unwrap().contains("nope.json"));
    }
}
