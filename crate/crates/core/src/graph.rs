//! Directed influence networks and their joint degree distributions.
//!
//! An edge `(listener, influencer)` means the influencer's state is visible
//! to the listener. In-degree counts influencers, out-degree counts
//! listeners.

use std::collections::{BTreeMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct DirectedGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawGraph> for DirectedGraph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        DirectedGraph::new(raw.node_count, raw.edges)
    }
}

impl DirectedGraph {
    /// Builds a graph from `(listener, influencer)` pairs, rejecting
    /// self-loops, duplicates and out-of-range indices.
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidGraph("node_count must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(listener, influencer) in &edges {
            if listener >= node_count || influencer >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge ({listener}, {influencer}) out of range for {node_count} nodes"
                )));
            }
            if listener == influencer {
                return Err(Error::InvalidGraph(format!("self-loop at node {listener}")));
            }
            if !seen.insert((listener, influencer)) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge ({listener}, {influencer})"
                )));
            }
        }
        Ok(DirectedGraph { node_count, edges })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(listener, _) in &self.edges {
            deg[listener] += 1;
        }
        deg
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(_, influencer) in &self.edges {
            deg[influencer] += 1;
        }
        deg
    }

    /// Influencers of every node, in edge-list order.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(listener, influencer) in &self.edges {
            adj[listener].push(influencer);
        }
        adj
    }

    /// Listeners of every node, in edge-list order.
    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(listener, influencer) in &self.edges {
            adj[influencer].push(listener);
        }
        adj
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Empirical joint law `Q(l, m)` of (in-degree, out-degree).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDegreeDistribution", into = "RawDegreeDistribution")]
pub struct JointDegreeDistribution {
    entries: BTreeMap<(usize, usize), f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDegreeDistribution {
    entries: Vec<DegreeMass>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DegreeMass {
    l: usize,
    m: usize,
    p: f64,
}

impl TryFrom<RawDegreeDistribution> for JointDegreeDistribution {
    type Error = Error;

    fn try_from(raw: RawDegreeDistribution) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for DegreeMass { l, m, p } in raw.entries {
            *entries.entry((l, m)).or_insert(0.0) += p;
        }
        JointDegreeDistribution::new(entries)
    }
}

impl From<JointDegreeDistribution> for RawDegreeDistribution {
    fn from(q: JointDegreeDistribution) -> Self {
        RawDegreeDistribution {
            entries: q
                .entries
                .into_iter()
                .map(|((l, m), p)| DegreeMass { l, m, p })
                .collect(),
        }
    }
}

impl JointDegreeDistribution {
    pub fn new(entries: BTreeMap<(usize, usize), f64>) -> Result<Self> {
        let mut total = 0.0;
        for (&(l, m), &p) in &entries {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "Q({l},{m}) = {p} is not a nonnegative mass"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!("masses sum to {total}, expected 1")));
        }
        let entries = entries.into_iter().filter(|&(_, p)| p > 0.0).collect();
        Ok(JointDegreeDistribution { entries })
    }

    /// Q(l, m) = #{nodes with in-degree l and out-degree m} / N.
    pub fn from_graph(g: &DirectedGraph) -> Self {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (l, m) in g.in_degrees().into_iter().zip(g.out_degrees()) {
            *counts.entry((l, m)).or_default() += 1;
        }
        let n = g.node_count() as f64;
        JointDegreeDistribution {
            entries: counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &p)| (k, p))
    }

    pub fn mass(&self, l: usize, m: usize) -> f64 {
        self.entries.get(&(l, m)).copied().unwrap_or(0.0)
    }

    pub fn l_max(&self) -> usize {
        self.entries.keys().map(|&(l, _)| l).max().unwrap_or(0)
    }

    pub fn m_max(&self) -> usize {
        self.entries.keys().map(|&(_, m)| m).max().unwrap_or(0)
    }

    /// Marginal law of the in-degree, P(l).
    pub fn in_degree_marginal(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for (&(l, _), &p) in &self.entries {
            *out.entry(l).or_insert(0.0) += p;
        }
        out
    }

    pub fn out_degree_marginal(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for (&(_, m), &p) in &self.entries {
            *out.entry(m).or_insert(0.0) += p;
        }
        out
    }

    /// Q(l | m); empty when m has zero marginal mass.
    pub fn in_given_out(&self, m: usize) -> BTreeMap<usize, f64> {
        let marginal: f64 = self
            .entries
            .iter()
            .filter(|(&(_, mm), _)| mm == m)
            .map(|(_, &p)| p)
            .sum();
        if marginal <= 0.0 {
            return BTreeMap::new();
        }
        self.entries
            .iter()
            .filter(|(&(_, mm), _)| mm == m)
            .map(|(&(l, _), &p)| (l, p / marginal))
            .collect()
    }

    /// In-degrees carrying positive node mass.
    pub fn in_degree_support(&self) -> Vec<usize> {
        self.in_degree_marginal().into_keys().collect()
    }

    pub fn mean_in_degree(&self) -> f64 {
        self.entries.iter().map(|(&(l, _), &p)| l as f64 * p).sum()
    }

    pub fn mean_out_degree(&self) -> f64 {
        self.entries.iter().map(|(&(_, m), &p)| m as f64 * p).sum()
    }

    /// Out-degree weight carried by each in-degree class, Σ_m m Q(l, m).
    /// Normalised to sum to one; errors when the graph has no edges.
    pub fn edge_source_weights(&self) -> Result<BTreeMap<usize, f64>> {
        let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
        for (&(l, m), &p) in &self.entries {
            *weights.entry(l).or_insert(0.0) += m as f64 * p;
        }
        let total: f64 = weights.values().sum();
        if total <= 0.0 {
            return Err(Error::ZeroEdgeWeight);
        }
        for w in weights.values_mut() {
            *w /= total;
        }
        Ok(weights)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphModel {
    Powerlaw,
    Ba,
    Er,
    Chain,
    Tree,
}

impl std::str::FromStr for GraphModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "powerlaw" => Ok(GraphModel::Powerlaw),
            "ba" => Ok(GraphModel::Ba),
            "er" => Ok(GraphModel::Er),
            "chain" => Ok(GraphModel::Chain),
            "tree" => Ok(GraphModel::Tree),
            other => Err(Error::Parse(format!("unknown graph model `{other}`"))),
        }
    }
}

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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphGenSpec {
    pub model: GraphModel,
    pub node_count: usize,
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
}

impl GraphGenSpec {
    pub fn new(model: GraphModel, node_count: usize) -> Self {
        GraphGenSpec {
            model,
            node_count,
            gamma: default_gamma(),
            edge_clip: default_edge_clip(),
            er_p: default_er_p(),
            tree_branching: default_branching(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::InvalidSpec("node_count must be at least 1".into()));
        }
        if !(self.gamma > 1.0) {
            return Err(Error::InvalidSpec(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if self.edge_clip == 0 {
            return Err(Error::InvalidSpec("edge_clip must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.er_p) {
            return Err(Error::InvalidSpec(format!(
                "er_p must lie in [0, 1], got {}",
                self.er_p
            )));
        }
        if self.tree_branching == 0 {
            return Err(Error::InvalidSpec("tree_branching must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn generate(spec: &GraphGenSpec) -> Result<DirectedGraph> {
    spec.validate()?;
    let n = spec.node_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let edges = match spec.model {
        GraphModel::Powerlaw => powerlaw_edges(n, spec.gamma, spec.edge_clip, &mut rng),
        GraphModel::Ba => ba_edges(n, &mut rng),
        GraphModel::Er => {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < spec.er_p {
                        edges.push((i, j));
                    }
                }
            }
            edges
        }
        GraphModel::Chain => (1..n).map(|i| (i, i - 1)).collect(),
        GraphModel::Tree => (1..n).map(|i| (i, (i - 1) / spec.tree_branching)).collect(),
    };
    DirectedGraph::new(n, edges)
}

/// Out-degree drawn from P(k) ∝ k^-gamma on {1..clip}; listeners are
/// distinct nodes chosen uniformly by rejection.
fn powerlaw_edges(n: usize, gamma: f64, clip: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let clip = clip.min(n - 1);
    if clip == 0 {
        return Vec::new();
    }
    let weights: Vec<f64> = (1..=clip).map(|k| (k as f64).powf(-gamma)).collect();
    let degree_law = WeightedIndex::new(&weights).expect("power-law weights are positive");
    let mut edges = Vec::new();
    let mut chosen = HashSet::new();
    for influencer in 0..n {
        let out_degree = degree_law.sample(rng) + 1;
        chosen.clear();
        while chosen.len() < out_degree {
            let listener = rng.random_range(0..n);
            if listener != influencer && chosen.insert(listener) {
                edges.push((listener, influencer));
            }
        }
    }
    edges
}

/// Preferential attachment with one link per new node, seeded by the pair
/// (0, 1). The newcomer listens to the node it attaches to.
fn ba_edges(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let mut edges = vec![(1, 0)];
    // every edge contributes both endpoints, so a uniform pick is degree-biased
    let mut endpoints = vec![0, 1];
    for newcomer in 2..n {
        let target = endpoints[rng.random_range(0..endpoints.len())];
        edges.push((newcomer, target));
        endpoints.push(newcomer);
        endpoints.push(target);
    }
    edges
}

/// Uniform draw from the edge list.
pub fn sample_edge<R: Rng + ?Sized>(g: &DirectedGraph, rng: &mut R) -> Result<(usize, usize)> {
    if g.edges.is_empty() {
        return Err(Error::EmptyEdgeSet);
    }
    Ok(g.edges[rng.random_range(0..g.edges.len())])
}
