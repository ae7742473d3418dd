//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::abm::{self, InitSpec, Mode, ModelAssignment, Placement, SimSpec};
use crate::error::{Error, Result};
use crate::graph::{generate, DirectedGraph, GraphGenSpec, GraphModel, JointDegreeDistribution};
use crate::kernel::Kernel;
use crate::metrics::{mean_kl, pearson_correlation, validate_protocol, ValidationSpec, DEFAULT_EPS};
use crate::mfd::{integrate, Activation, FitMethod, OdeSpec, PopulationVector};
use crate::recipe::{load_recipe, run_recipe};
use crate::rum::{read_transition_log, write_transition_log, FeatureMapSpec, StateSpace};
use crate::trajectory::Trajectory;
use crate::twostate::{
    check_assumptions, comparative_statics, contraction_check, solve_fixed_point, AssumptionReport, PhiContext,
    TwoStateLogits,
};

#[derive(Debug, Parser)]
#[command(
    name = "netdiff",
    version,
    about = "Mean-field and agent-based dynamics of truthfulness on directed networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a directed graph.
    GenGraph(GenGraphArgs),
    /// Run the agent-based simulation.
    Simulate(SimulateArgs),
    /// Fit a kernel to a transition log.
    Fit(FitArgs),
    /// Integrate the mean-field ODE.
    Predict(PredictArgs),
    /// Two-state fixed point, contraction and comparative statics.
    FixedPoint(FixedPointArgs),
    /// Compare an empirical and a predicted trajectory.
    Compare(CompareArgs),
    /// Fit-then-predict validation over several seeds.
    Validate(ValidateArgs),
    /// Execute an experiment recipe.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct GenGraphArgs {
    #[arg(long, value_parser = parse_from_str::<GraphModel>)]
    pub model: GraphModel,
    #[arg(long = "n")]
    pub node_count: usize,
    #[arg(long, default_value_t = 2.7)]
    pub gamma: f64,
    #[arg(long, default_value_t = 50)]
    pub clip: usize,
    #[arg(long, default_value_t = 0.05)]
    pub er_p: f64,
    #[arg(long, default_value_t = 2)]
    pub branching: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the joint degree distribution here.
    #[arg(long)]
    pub degree_dist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Initial state fractions, e.g. `0.35,0.35,0.3`.
    #[arg(long, value_parser = parse_floats)]
    pub init: Floats,
    #[arg(long, default_value = "random", value_parser = parse_from_str::<Placement>)]
    pub placement: Placement,
    #[arg(long, default_value = "sequential", value_parser = parse_from_str::<Mode>)]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub steps: u64,
    #[arg(long, default_value_t = 10)]
    pub rounds: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub u: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub record_every: u64,
    #[arg(long)]
    pub per_degree: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the transition log (JSONL) here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Rum,
    Plugin,
}

#[derive(Debug, Args)]
pub struct FitSettings {
    #[arg(long, value_enum, default_value_t = Method::Rum)]
    pub method: Method,
    /// Comma-separated features for the RUM fit.
    #[arg(long, default_value = "constant,fraction:T")]
    pub features: String,
    #[arg(long, default_value_t = 0)]
    pub context_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 4)]
    pub buckets: usize,
}

impl FitSettings {
    fn method(&self) -> Result<FitMethod> {
        Ok(match self.method {
            Method::Rum => FitMethod::Rum {
                features: FeatureMapSpec::parse_list(&self.features, self.context_dim)?,
                l2: self.l2,
            },
            Method::Plugin => FitMethod::Plugin { buckets: self.buckets },
        })
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// State labels; the last one is the reference alternative.
    #[arg(long, default_value = "T,H,D")]
    pub states: String,
    #[command(flatten)]
    pub fit: FitSettings,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DegreeSource {
    #[arg(long, conflicts_with = "degree_dist")]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub degree_dist: Option<PathBuf>,
}

impl DegreeSource {
    fn load(&self) -> Result<JointDegreeDistribution> {
        match (&self.graph, &self.degree_dist) {
            (Some(g), _) => Ok(JointDegreeDistribution::from_graph(&read_graph(g)?)),
            (None, Some(d)) => Ok(serde_json::from_str(&read(d)?)?),
            (None, None) => Err(Error::InvalidSpec("pass --graph or --degree-dist".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub degrees: DegreeSource,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_floats)]
    pub init: Floats,
    #[arg(long)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0.01)]
    pub h: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub u: f64,
    #[arg(long, default_value = "unit", value_parser = parse_from_str::<Activation>)]
    pub activation: Activation,
    /// Report every k-th step only.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixedPointArgs {
    #[command(flatten)]
    pub degrees: DegreeSource,
    /// `c0H,cuH,cqH,c0T,cuT,cqT`
    #[arg(long, allow_hyphen_values = true, value_parser = parse_from_str::<TwoStateLogits>)]
    pub logits: TwoStateLogits,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub u: f64,
    #[arg(long)]
    pub check_contraction: bool,
    #[arg(long)]
    pub comparative_statics: bool,
    /// Hold in-degree-0 nodes at this truthful share.
    #[arg(long)]
    pub isolated_share: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub empirical: PathBuf,
    #[arg(long)]
    pub predicted: PathBuf,
    #[arg(long, default_value = "T")]
    pub state: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = parse_floats)]
    pub init: Floats,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 150)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub u: f64,
    #[command(flatten)]
    pub fit: FitSettings,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub recipe: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Floats(pub Vec<f64>);

fn parse_floats(s: &str) -> std::result::Result<Floats, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Floats)
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_graph(path: &Path) -> Result<DirectedGraph> {
    DirectedGraph::from_json(&read(path)?)
}

fn read_kernel(path: &Path) -> Result<Kernel> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Trajectory::read_csv(BufReader::new(file))
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut file = io::BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?);
            write(&mut file)?;
            file.flush().map_err(|e| Error::io(p, e))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    }
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    emit(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w).map_err(|e| Error::io("<output>", e))
    })
}

#[derive(Serialize)]
struct FixedPointJson {
    theta_star: f64,
    residual: f64,
    method: crate::twostate::SolveMethod,
    bracketed_roots: Vec<f64>,
    #[serde(rename = "S_H")]
    s_h: Option<f64>,
    #[serde(rename = "S_T")]
    s_t: Option<f64>,
    eta: Option<f64>,
    bound: Option<f64>,
    is_contraction: Option<bool>,
    measured_lipschitz: Option<f64>,
    dtheta_du: Option<f64>,
    assumptions: AssumptionReport,
}

#[derive(Serialize)]
struct CompareJson {
    state: String,
    correlation: f64,
    mean_kl: f64,
}

fn gen_graph(a: &GenGraphArgs) -> Result<()> {
    let spec = GraphGenSpec {
        model: a.model,
        node_count: a.node_count,
        gamma: a.gamma,
        edge_clip: a.clip,
        er_p: a.er_p,
        tree_branching: a.branching,
        seed: a.seed,
    };
    let g = generate(&spec)?;
    if let Some(p) = &a.degree_dist {
        emit_json(Some(p), &JointDegreeDistribution::from_graph(&g))?;
    }
    let text = g.to_json()?;
    emit(a.out.as_deref(), |w| {
        writeln!(w, "{text}").map_err(|e| Error::io("<output>", e))
    })
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let kernel = read_kernel(&a.model)?;
    let space = kernel.space();
    let sim = SimSpec {
        mode: a.mode,
        steps: a.steps,
        rounds: a.rounds,
        u: a.u,
        seed: a.seed,
        log_transitions: a.log.is_some(),
        record_every: a.record_every,
        record_per_degree: a.per_degree,
        models: ModelAssignment::single(kernel),
    };
    let init = InitSpec::new(a.init.0.clone(), a.placement.clone());
    let res = abm::run(&g, &init, &sim)?;
    if let Some(p) = &a.log {
        emit(Some(p), |w| write_transition_log(w, &space, &res.transitions))?;
    }
    emit(a.out.as_deref(), |w| res.trajectory.write_csv(w))
}

fn fit(a: &FitArgs) -> Result<()> {
    let labels: Vec<String> = a.states.split(',').map(|s| s.trim().to_string()).collect();
    let reference = labels.len().saturating_sub(1);
    let space = StateSpace::new(labels, reference)?;
    let file = fs::File::open(&a.log).map_err(|e| Error::io(&a.log, e))?;
    let records = read_transition_log(BufReader::new(file), &space)?;
    let kernel = a.fit.method()?.fit(&records, &space)?;
    emit_json(a.out.as_deref(), &kernel)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let q = a.degrees.load()?;
    let kernel = read_kernel(&a.model)?;
    let rho0 = PopulationVector::uniform(&q, &a.init.0)?;
    let ode = OdeSpec::new(a.t_end)
        .with_h(a.h)
        .with_u(a.u)
        .with_activation(a.activation);
    let mut traj = integrate(&q, &rho0, &kernel, kernel.labels(), &ode)?;
    if a.every > 1 {
        let times: Vec<f64> = traj
            .times()
            .iter()
            .enumerate()
            .filter(|(i, _)| i % a.every == 0 || *i + 1 == traj.len())
            .map(|(_, &t)| t)
            .collect();
        traj = integrate(&q, &rho0, &kernel, kernel.labels(), &ode.with_output_times(times))?;
    }
    emit(a.out.as_deref(), |w| traj.write_csv(w))
}

fn fixed_point(a: &FixedPointArgs) -> Result<()> {
    let q = a.degrees.load()?;
    let mut ctx = PhiContext::new(&q, a.logits, a.u)?;
    if let Some(share) = a.isolated_share {
        ctx = ctx.with_static_isolated(share)?;
    }
    let fp = solve_fixed_point(&ctx)?;
    let contraction = a.check_contraction.then(|| contraction_check(&ctx)).transpose()?;
    let statics = a
        .comparative_statics
        .then(|| comparative_statics(&ctx, fp.theta_star))
        .transpose()?;
    let report = FixedPointJson {
        theta_star: fp.theta_star,
        residual: fp.residual,
        method: fp.method,
        bracketed_roots: fp.bracketed_roots,
        s_h: contraction.as_ref().map(|c| c.s_h),
        s_t: contraction.as_ref().map(|c| c.s_t),
        eta: contraction.as_ref().map(|c| c.eta),
        bound: contraction.as_ref().map(|c| c.bound),
        is_contraction: contraction.as_ref().map(|c| c.is_contraction),
        measured_lipschitz: contraction.as_ref().map(|c| c.measured_lipschitz),
        dtheta_du: statics.map(|s| s.dtheta_du),
        assumptions: check_assumptions(&ctx),
    };
    emit_json(a.out.as_deref(), &report)
}

fn compare(a: &CompareArgs) -> Result<()> {
    let emp = read_trajectory(&a.empirical)?;
    let pred = read_trajectory(&a.predicted)?;
    let report = CompareJson {
        state: a.state.clone(),
        correlation: pearson_correlation(&emp, &pred, &a.state)?,
        mean_kl: mean_kl(&emp, &pred, DEFAULT_EPS)?,
    };
    emit_json(a.out.as_deref(), &report)
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let kernel = read_kernel(&a.model)?;
    let mut sim = SimSpec::sequential(ModelAssignment::single(kernel), a.steps, 0);
    sim.u = a.u;
    let mut spec = ValidationSpec::new(a.fit.method()?, a.seeds as usize);
    spec.fit_window = a.window;
    let report = validate_protocol(&g, &InitSpec::random(a.init.0.clone()), &sim, &spec)?;
    emit_json(a.out.as_deref(), &report)
}

fn run_cmd(a: &RunArgs) -> Result<bool> {
    let (recipe, base) = load_recipe(&a.recipe)?;
    let outcome = run_recipe(&recipe, &base)?;
    for c in outcome.cells.iter().filter(|c| !c.ok()) {
        eprintln!("cell {}: {}", c.cell.index, c.error.as_deref().unwrap_or_default());
    }
    eprintln!(
        "{} cells, {} failed; results in {}",
        outcome.cells.len(),
        outcome.failed(),
        outcome.output_dir.display()
    );
    Ok(outcome.failed() == 0)
}

/// Executes a parsed command; `Ok(false)` means partial failure.
pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenGraph(a) => gen_graph(a),
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::FixedPoint(a) => fixed_point(a),
        Command::Compare(a) => compare(a),
        Command::Validate(a) => validate(a),
        Command::Run(a) => return run_cmd(a),
    }
    .map(|()| true)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
