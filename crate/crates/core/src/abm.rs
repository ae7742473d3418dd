//! Agent-based simulation of the network.
//!
//! Sequential mode fires one uniformly sampled edge per step; the listener
//! then looks at the states of all of its influencers and re-draws its own
//! state from its kernel. Parallel mode updates every node with at least one
//! influencer simultaneously from the previous round's states. Nodes without
//! influencers never change.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sample_edge, DirectedGraph};
use crate::kernel::{sample_categorical, Kernel, TransitionKernel};
use crate::rum::TransitionRecord;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkState {
    pub states: Vec<usize>,
    pub step: u64,
    pub round: u64,
}

/// Which nodes receive the first-listed state's quota.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Random,
    TopInDegree,
    TopOutDegree,
    /// Closest to the nodes without influencers first (breadth-first).
    ChainHead,
    TreeRoot,
    Explicit(Vec<usize>),
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => Placement::Random,
            "top_in_degree" => Placement::TopInDegree,
            "top_out_degree" => Placement::TopOutDegree,
            "chain_head" => Placement::ChainHead,
            "tree_root" => Placement::TreeRoot,
            other => {
                let nodes = other
                    .split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse(format!("unknown placement `{other}`")))?;
                Placement::Explicit(nodes)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub distribution: Vec<f64>,
    #[serde(default)]
    pub placement: Placement,
}

impl InitSpec {
    pub fn new(distribution: Vec<f64>, placement: Placement) -> Self {
        InitSpec {
            distribution,
            placement,
        }
    }

    pub fn random(distribution: Vec<f64>) -> Self {
        InitSpec::new(distribution, Placement::Random)
    }
}

/// Largest-remainder rounding of `shares · n`; ties go to the lower index.
pub fn quotas(shares: &[f64], n: usize) -> Result<Vec<usize>> {
    check_simplex(shares)?;
    let exact: Vec<f64> = shares.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &z in order.iter().take(n.saturating_sub(assigned)) {
        counts[z] += 1;
    }
    Ok(counts)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("{p:?} is not a probability vector")));
    }
    Ok(())
}

fn depth_order(g: &DirectedGraph) -> Vec<usize> {
    let n = g.node_count();
    let out = g.out_neighbors();
    let mut depth = vec![usize::MAX; n];
    let mut queue: VecDeque<usize> = g
        .in_degrees()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(v, _)| v)
        .collect();
    for &v in &queue {
        depth[v] = 0;
    }
    while let Some(v) = queue.pop_front() {
        for &w in &out[v] {
            if depth[w] == usize::MAX {
                depth[w] = depth[v] + 1;
                queue.push_back(w);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (depth[v], v));
    order
}

fn by_degree_desc(degrees: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..degrees.len()).collect();
    order.sort_by(|&a, &b| degrees[b].cmp(&degrees[a]).then(a.cmp(&b)));
    order
}

/// Assigns each node a class index so that class `c` receives
/// `quotas(shares)[c]` nodes. Class 0 goes to the placement's preferred
/// nodes; the rest are spread uniformly at random.
pub fn assign_by_quota<R: Rng + ?Sized>(
    g: &DirectedGraph,
    shares: &[f64],
    placement: &Placement,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = g.node_count();
    let counts = quotas(shares, n)?;
    let mut labels = vec![usize::MAX; n];
    let rest: Vec<usize> = match placement {
        Placement::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            perm
        }
        other => {
            let preferred: Vec<usize> = match other {
                Placement::TopInDegree => by_degree_desc(&g.in_degrees()),
                Placement::TopOutDegree => by_degree_desc(&g.out_degrees()),
                Placement::ChainHead | Placement::TreeRoot => depth_order(g),
                Placement::Explicit(nodes) => {
                    if nodes.len() != counts[0] {
                        return Err(Error::InvalidSpec(format!(
                            "explicit placement lists {} nodes but the quota is {}",
                            nodes.len(),
                            counts[0]
                        )));
                    }
                    let mut seen = vec![false; n];
                    for &v in nodes {
                        if v >= n || std::mem::replace(&mut seen[v], true) {
                            return Err(Error::InvalidSpec(format!(
                                "explicit placement node {v} is out of range or repeated"
                            )));
                        }
                    }
                    nodes.clone()
                }
                Placement::Random => unreachable!(),
            };
            for &v in preferred.iter().take(counts[0]) {
                labels[v] = 0;
            }
            let mut rest: Vec<usize> = (0..n).filter(|&v| labels[v] == usize::MAX).collect();
            rest.shuffle(rng);
            let mut order: Vec<usize> = preferred[..counts[0]].to_vec();
            order.append(&mut rest);
            order
        }
    };
    let mut cursor = 0;
    for (class, &count) in counts.iter().enumerate() {
        for &v in &rest[cursor..cursor + count] {
            labels[v] = class;
        }
        cursor += count;
    }
    Ok(labels)
}

pub fn init_states<R: Rng + ?Sized>(g: &DirectedGraph, init: &InitSpec, rng: &mut R) -> Result<NetworkState> {
    Ok(NetworkState {
        states: assign_by_quota(g, &init.distribution, &init.placement, rng)?,
        step: 0,
        round: 0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Mode::Sequential),
            "parallel" => Ok(Mode::Parallel),
            other => Err(Error::Parse(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelClass {
    pub kernel: Kernel,
    pub share: f64,
}

/// Partition of nodes into capability classes, each with its own kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelAssignment {
    pub classes: Vec<ModelClass>,
    #[serde(default)]
    pub placement: Placement,
}

impl ModelAssignment {
    pub fn single(kernel: impl Into<Kernel>) -> Self {
        ModelAssignment {
            classes: vec![ModelClass {
                kernel: kernel.into(),
                share: 1.0,
            }],
            placement: Placement::Random,
        }
    }

    pub fn num_states(&self) -> Result<usize> {
        let first = self
            .classes
            .first()
            .ok_or_else(|| Error::InvalidSpec("model assignment has no classes".into()))?;
        let k = first.kernel.num_states();
        if self.classes.iter().any(|c| c.kernel.num_states() != k) {
            return Err(Error::InvalidSpec("model classes disagree on the state count".into()));
        }
        Ok(k)
    }

    pub fn kernels(&self) -> Vec<Kernel> {
        self.classes.iter().map(|c| c.kernel.clone()).collect()
    }

    /// Class index per node.
    pub fn assign<R: Rng + ?Sized>(&self, g: &DirectedGraph, rng: &mut R) -> Result<Vec<usize>> {
        self.num_states()?;
        if self.classes.len() == 1 {
            return Ok(vec![0; g.node_count()]);
        }
        let shares: Vec<f64> = self.classes.iter().map(|c| c.share).collect();
        assign_by_quota(g, &shares, &self.placement, rng)
    }
}

fn default_rounds() -> u64 {
    10
}

fn default_record_every() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default)]
    pub mode: Mode,
    /// Edge events in sequential mode.
    #[serde(default)]
    pub steps: u64,
    /// Synchronous sweeps in parallel mode.
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub log_transitions: bool,
    /// Record the population state every this many steps (sequential only).
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default)]
    pub record_per_degree: bool,
    pub models: ModelAssignment,
}

impl SimSpec {
    pub fn sequential(models: ModelAssignment, steps: u64, seed: u64) -> Self {
        SimSpec {
            mode: Mode::Sequential,
            steps,
            rounds: default_rounds(),
            u: 0.0,
            seed,
            log_transitions: false,
            record_every: 1,
            record_per_degree: false,
            models,
        }
    }

    pub fn parallel(models: ModelAssignment, rounds: u64, seed: u64) -> Self {
        SimSpec {
            mode: Mode::Parallel,
            rounds,
            ..SimSpec::sequential(models, 0, seed)
        }
    }
}

/// Graph plus per-node kernels, ready to step.
pub struct Simulator<'a> {
    graph: &'a DirectedGraph,
    in_neighbors: Vec<Vec<usize>>,
    kernels: Vec<Kernel>,
    class_of: Vec<usize>,
    u: f64,
    k: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(graph: &'a DirectedGraph, kernels: Vec<Kernel>, class_of: Vec<usize>, u: f64) -> Result<Self> {
        let k = kernels
            .first()
            .ok_or_else(|| Error::InvalidSpec("no kernels".into()))?
            .num_states();
        if kernels.iter().any(|m| m.num_states() != k) {
            return Err(Error::InvalidSpec("kernels disagree on the state count".into()));
        }
        if class_of.len() != graph.node_count() || class_of.iter().any(|&c| c >= kernels.len()) {
            return Err(Error::InvalidSpec("class assignment does not match the graph".into()));
        }
        Ok(Simulator {
            graph,
            in_neighbors: graph.in_neighbors(),
            kernels,
            class_of,
            u,
            k,
        })
    }

    pub fn num_states(&self) -> usize {
        self.k
    }

    /// State counts among the influencers of `node`.
    pub fn composition(&self, states: &[usize], node: usize) -> Vec<u32> {
        let mut n = vec![0u32; self.k];
        for &j in &self.in_neighbors[node] {
            n[states[j]] += 1;
        }
        n
    }

    fn draw<R: Rng + ?Sized>(&self, states: &[usize], node: usize, rng: &mut R) -> Result<(Vec<u32>, usize)> {
        let n = self.composition(states, node);
        let probs = self.kernels[self.class_of[node]].transition_probs(self.u, &n, states[node])?;
        Ok((n, sample_categorical(&probs, rng)))
    }

    /// Fires one edge. Returns the listener, its previous state and the
    /// transition record when `log` is set.
    pub fn step_sequential<R: Rng + ?Sized>(
        &self,
        state: &mut NetworkState,
        rng: &mut R,
        log: bool,
    ) -> Result<(usize, usize, Option<TransitionRecord>)> {
        let (listener, _) = sample_edge(self.graph, rng)?;
        let prev = state.states[listener];
        let (n, next) = self.draw(&state.states, listener, rng)?;
        state.states[listener] = next;
        let record = log.then(|| TransitionRecord {
            step: state.step,
            node: listener,
            u: self.u,
            l: n.iter().sum(),
            n,
            w: None,
            prev,
            next,
        });
        state.step += 1;
        Ok((listener, prev, record))
    }

    /// Synchronous update of every node that has influencers.
    pub fn step_parallel_round<R: Rng + ?Sized>(
        &self,
        state: &mut NetworkState,
        rng: &mut R,
        log: bool,
    ) -> Result<Vec<TransitionRecord>> {
        let previous = state.states.clone();
        let mut records = Vec::new();
        for node in 0..previous.len() {
            if self.in_neighbors[node].is_empty() {
                continue;
            }
            let (n, next) = self.draw(&previous, node, rng)?;
            state.states[node] = next;
            if log {
                records.push(TransitionRecord {
                    step: state.round,
                    node,
                    u: self.u,
                    l: n.iter().sum(),
                    n,
                    w: None,
                    prev: previous[node],
                    next,
                });
            }
        }
        state.round += 1;
        Ok(records)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationState {
    pub overall: Vec<f64>,
    pub per_degree: BTreeMap<usize, Vec<f64>>,
}

/// Overall state fractions and per-in-degree fractions ρ^l.
pub fn population_state(states: &[usize], g: &DirectedGraph, k: usize) -> PopulationState {
    let tally = Tally::new(states, g, k);
    tally.population()
}

/// Share of edges whose influencer is in `state`.
pub fn edge_weighted_fraction(states: &[usize], g: &DirectedGraph, state: usize) -> Result<f64> {
    if g.edge_count() == 0 {
        return Err(Error::EmptyEdgeSet);
    }
    let hits = g.edges().iter().filter(|&&(_, j)| states[j] == state).count();
    Ok(hits as f64 / g.edge_count() as f64)
}

/// Running state counts, overall and per in-degree.
struct Tally {
    n: usize,
    overall: Vec<usize>,
    in_degree: Vec<usize>,
    per_degree: BTreeMap<usize, Vec<usize>>,
}

impl Tally {
    fn new(states: &[usize], g: &DirectedGraph, k: usize) -> Self {
        let in_degree = g.in_degrees();
        let mut overall = vec![0; k];
        let mut per_degree: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (v, &z) in states.iter().enumerate() {
            overall[z] += 1;
            per_degree.entry(in_degree[v]).or_insert_with(|| vec![0; k])[z] += 1;
        }
        Tally {
            n: states.len(),
            overall,
            in_degree,
            per_degree,
        }
    }

    fn update(&mut self, node: usize, prev: usize, next: usize) {
        if prev == next {
            return;
        }
        self.overall[prev] -= 1;
        self.overall[next] += 1;
        let row = self
            .per_degree
            .get_mut(&self.in_degree[node])
            .expect("every node's in-degree is tallied");
        row[prev] -= 1;
        row[next] += 1;
    }

    fn population(&self) -> PopulationState {
        let frac = |counts: &[usize]| {
            let total: usize = counts.iter().sum();
            counts.iter().map(|&c| c as f64 / total as f64).collect::<Vec<_>>()
        };
        debug_assert_eq!(self.overall.iter().sum::<usize>(), self.n);
        PopulationState {
            overall: frac(&self.overall),
            per_degree: self.per_degree.iter().map(|(&l, c)| (l, frac(c))).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub trajectory: Trajectory,
    pub transitions: Vec<TransitionRecord>,
    pub final_state: NetworkState,
    /// Class index per node.
    pub classes: Vec<usize>,
}

struct Recorder {
    per_degree: bool,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    degrees: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl Recorder {
    fn push(&mut self, t: f64, pop: PopulationState) {
        self.times.push(t);
        self.states.push(pop.overall);
        if self.per_degree {
            for (l, rho) in pop.per_degree {
                self.degrees.entry(l).or_default().push(rho);
            }
        }
    }
}

/// Runs one seeded simulation and records ρ(t).
///
/// Sequential time is `step / |E|`, so every edge fires once per unit time
/// on average; parallel time counts rounds.
pub fn run(g: &DirectedGraph, init: &InitSpec, sim: &SimSpec) -> Result<SimResult> {
    let k = sim.models.num_states()?;
    if init.distribution.len() != k {
        return Err(Error::DimensionMismatch {
            what: "initial distribution",
            expected: k,
            actual: init.distribution.len(),
        });
    }
    if sim.record_every == 0 {
        return Err(Error::InvalidSpec("record_every must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut state = init_states(g, init, &mut rng)?;
    let classes = sim.models.assign(g, &mut rng)?;
    let simulator = Simulator::new(g, sim.models.kernels(), classes.clone(), sim.u)?;
    let mut tally = Tally::new(&state.states, g, k);
    let mut rec = Recorder {
        per_degree: sim.record_per_degree,
        times: Vec::new(),
        states: Vec::new(),
        degrees: BTreeMap::new(),
    };
    rec.push(0.0, tally.population());
    let mut transitions = Vec::new();

    match sim.mode {
        Mode::Sequential => {
            let edges = g.edge_count() as f64;
            for step in 1..=sim.steps {
                let (node, prev, record) = simulator.step_sequential(&mut state, &mut rng, sim.log_transitions)?;
                tally.update(node, prev, state.states[node]);
                transitions.extend(record);
                if step % sim.record_every == 0 || step == sim.steps {
                    rec.push(step as f64 / edges, tally.population());
                }
            }
        }
        Mode::Parallel => {
            for round in 1..=sim.rounds {
                let records = simulator.step_parallel_round(&mut state, &mut rng, sim.log_transitions)?;
                tally = Tally::new(&state.states, g, k);
                transitions.extend(records);
                rec.push(round as f64, tally.population());
            }
        }
    }

    let labels = sim
        .models
        .classes
        .first()
        .map(|c| c.kernel.labels())
        .unwrap_or_default();
    let trajectory = Trajectory::with_per_degree(labels, rec.times, rec.states, rec.degrees)?;
    Ok(SimResult {
        trajectory,
        transitions,
        final_state: state,
        classes,
    })
}

/// Independent runs, one per seed, merged in seed order.
pub fn run_many(g: &DirectedGraph, init: &InitSpec, sim: &SimSpec, seeds: &[u64]) -> Result<Vec<SimResult>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let spec = SimSpec { seed, ..sim.clone() };
            run(g, init, &spec)
        })
        .collect()
}
