//! Randomized-utility choice model: utilities θᵀφ_z plus Gumbel noise,
//! which yields a multinomial-logit transition kernel. Also the two
//! estimators used downstream: penalised maximum likelihood and the
//! Laplace-smoothed plug-in table.
//!
//! State index 0 is the "truthful" state by convention; the plug-in
//! estimator buckets on its neighbor fraction.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{check_counts, check_state, sample_categorical, TransitionKernel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStateSpace")]
pub struct StateSpace {
    labels: Vec<String>,
    reference: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStateSpace {
    labels: Vec<String>,
    reference: usize,
}

impl TryFrom<RawStateSpace> for StateSpace {
    type Error = Error;

    fn try_from(raw: RawStateSpace) -> Result<Self> {
        StateSpace::new(raw.labels, raw.reference)
    }
}

impl StateSpace {
    pub fn new(labels: Vec<String>, reference: usize) -> Result<Self> {
        let k = labels.len();
        if !(2..=8).contains(&k) {
            return Err(Error::InvalidSpec(format!("state count {k} outside 2..=8")));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::InvalidSpec(format!("duplicate state label `{a}`")));
            }
        }
        if reference >= k {
            return Err(Error::InvalidSpec(format!("reference state {reference} out of range")));
        }
        Ok(StateSpace { labels, reference })
    }

    /// T, H, D with "don't know" pinned to zero utility.
    pub fn three_state() -> Self {
        StateSpace {
            labels: vec!["T".into(), "H".into(), "D".into()],
            reference: 2,
        }
    }

    /// T, H with H as the reference, so r_T is the T-vs-H logit.
    pub fn two_state() -> Self {
        StateSpace {
            labels: vec!["T".into(), "H".into()],
            reference: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Parse(format!("unknown state label `{label}`")))
    }

    /// Position of a non-reference state among the free alternatives.
    fn slot(&self, state: usize) -> Option<usize> {
        match state.cmp(&self.reference) {
            std::cmp::Ordering::Less => Some(state),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(state - 1),
        }
    }
}

impl Default for StateSpace {
    fn default() -> Self {
        StateSpace::three_state()
    }
}

/// One scalar regressor; every free alternative gets its own coefficient
/// for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Feature {
    Constant,
    Control,
    /// n_z / l, zero when l = 0.
    Fraction {
        state: String,
    },
    /// n_z.
    Count {
        state: String,
    },
    /// 1{z₁ = z}.
    CurrentState {
        state: String,
    },
    /// ln(1 + l).
    LogInDegree,
    /// w[index].
    Context {
        index: usize,
    },
    /// u · n_z / l.
    ControlFraction {
        state: String,
    },
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Constant => write!(f, "constant"),
            Feature::Control => write!(f, "control"),
            Feature::Fraction { state } => write!(f, "fraction:{state}"),
            Feature::Count { state } => write!(f, "count:{state}"),
            Feature::CurrentState { state } => write!(f, "state:{state}"),
            Feature::LogInDegree => write!(f, "log_degree"),
            Feature::Context { index } => write!(f, "context:{index}"),
            Feature::ControlFraction { state } => write!(f, "control_fraction:{state}"),
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a.to_string())),
            None => (s, None),
        };
        let need = |arg: Option<String>| arg.ok_or_else(|| Error::Parse(format!("feature `{head}` needs an argument")));
        Ok(match head {
            "constant" => Feature::Constant,
            "control" => Feature::Control,
            "log_degree" => Feature::LogInDegree,
            "fraction" => Feature::Fraction { state: need(arg)? },
            "count" => Feature::Count { state: need(arg)? },
            "state" => Feature::CurrentState { state: need(arg)? },
            "control_fraction" => Feature::ControlFraction { state: need(arg)? },
            "context" => Feature::Context {
                index: need(arg)?
                    .parse()
                    .map_err(|e| Error::Parse(format!("context index: {e}")))?,
            },
            other => return Err(Error::Parse(format!("unknown feature `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapSpec {
    pub terms: Vec<Feature>,
    #[serde(default)]
    pub context_dim: usize,
}

impl FeatureMapSpec {
    pub fn new(terms: Vec<Feature>) -> Self {
        FeatureMapSpec { terms, context_dim: 0 }
    }

    /// Comma-separated list such as `constant,state:T,fraction:T`.
    pub fn parse_list(text: &str, context_dim: usize) -> Result<Self> {
        let terms = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Feature::from_str)
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMapSpec { terms, context_dim })
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    fn compile(&self, space: &StateSpace) -> Result<Vec<Compiled>> {
        self.terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Feature::Constant => Compiled::Constant,
                    Feature::Control => Compiled::Control,
                    Feature::Fraction { state } => Compiled::Fraction(space.index_of(state)?),
                    Feature::Count { state } => Compiled::Count(space.index_of(state)?),
                    Feature::CurrentState { state } => Compiled::CurrentState(space.index_of(state)?),
                    Feature::LogInDegree => Compiled::LogInDegree,
                    Feature::Context { index } => {
                        if *index >= self.context_dim {
                            return Err(Error::InvalidSpec(format!(
                                "context index {index} >= context_dim {}",
                                self.context_dim
                            )));
                        }
                        Compiled::Context(*index)
                    }
                    Feature::ControlFraction { state } => Compiled::ControlFraction(space.index_of(state)?),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Compiled {
    Constant,
    Control,
    Fraction(usize),
    Count(usize),
    CurrentState(usize),
    LogInDegree,
    Context(usize),
    ControlFraction(usize),
}

fn fraction(counts: &[u32], z: usize, l: u32) -> f64 {
    if l == 0 {
        0.0
    } else {
        counts[z] as f64 / l as f64
    }
}

fn eval_features(compiled: &[Compiled], u: f64, counts: &[u32], w: &[f64], prev: usize, out: &mut Vec<f64>) {
    let l: u32 = counts.iter().sum();
    out.clear();
    out.extend(compiled.iter().map(|c| match *c {
        Compiled::Constant => 1.0,
        Compiled::Control => u,
        Compiled::Fraction(z) => fraction(counts, z, l),
        Compiled::Count(z) => counts[z] as f64,
        Compiled::CurrentState(z) => (prev == z) as u8 as f64,
        Compiled::LogInDegree => (1.0 + l as f64).ln(),
        Compiled::Context(k) => w[k],
        Compiled::ControlFraction(z) => u * fraction(counts, z, l),
    }));
}

/// Multinomial-logit model with the reference state's utility pinned at 0.
///
/// `coeffs` is laid out alternative-major: the block for the `s`-th
/// non-reference state occupies `coeffs[s*d .. (s+1)*d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChoiceModelFile", into = "ChoiceModelFile")]
pub struct ChoiceModel {
    space: StateSpace,
    features: FeatureMapSpec,
    coeffs: Vec<f64>,
    context: Option<Vec<f64>>,
    compiled: Vec<Compiled>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChoiceModelFile {
    labels: Vec<String>,
    reference: String,
    features: FeatureMapSpec,
    coeffs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<Vec<f64>>,
}

impl TryFrom<ChoiceModelFile> for ChoiceModel {
    type Error = Error;

    fn try_from(file: ChoiceModelFile) -> Result<Self> {
        let reference = file
            .labels
            .iter()
            .position(|l| *l == file.reference)
            .ok_or_else(|| Error::Parse(format!("reference `{}` not a label", file.reference)))?;
        let space = StateSpace::new(file.labels, reference)?;
        let model = ChoiceModel::new(space, file.features, file.coeffs)?;
        match file.context {
            Some(w) => model.with_context(w),
            None => Ok(model),
        }
    }
}

impl From<ChoiceModel> for ChoiceModelFile {
    fn from(m: ChoiceModel) -> Self {
        ChoiceModelFile {
            reference: m.space.labels[m.space.reference].clone(),
            labels: m.space.labels,
            features: m.features,
            coeffs: m.coeffs,
            context: m.context,
        }
    }
}

impl ChoiceModel {
    pub fn new(space: StateSpace, features: FeatureMapSpec, coeffs: Vec<f64>) -> Result<Self> {
        let compiled = features.compile(&space)?;
        let expected = features.dim() * (space.len() - 1);
        if coeffs.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "coefficient vector",
                expected,
                actual: coeffs.len(),
            });
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec(format!("coefficient {i} is not finite")));
        }
        Ok(ChoiceModel {
            space,
            features,
            coeffs,
            context: None,
            compiled,
        })
    }

    /// Fixes the context vector used when the model acts as a kernel.
    pub fn with_context(mut self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.features.context_dim {
            return Err(Error::DimensionMismatch {
                what: "context vector",
                expected: self.features.context_dim,
                actual: w.len(),
            });
        }
        self.context = Some(w);
        Ok(self)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn features(&self) -> &FeatureMapSpec {
        &self.features
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    /// Coefficient of feature `j` in the utility of `state`; zero for the
    /// reference state.
    pub fn coeff(&self, state: usize, j: usize) -> f64 {
        match self.space.slot(state) {
            Some(s) => self.coeffs[s * self.features.dim() + j],
            None => 0.0,
        }
    }

    fn check_inputs(&self, comp: &[u32], w: Option<&[f64]>, prev: usize) -> Result<()> {
        check_counts(comp, self.num_states())?;
        check_state(prev, self.num_states())?;
        let got = w.map_or(0, <[f64]>::len);
        if got != self.features.context_dim {
            return Err(Error::DimensionMismatch {
                what: "context vector",
                expected: self.features.context_dim,
                actual: got,
            });
        }
        Ok(())
    }

    fn utilities_from_features(&self, x: &[f64]) -> Vec<f64> {
        let d = self.features.dim();
        (0..self.num_states())
            .map(|z| match self.space.slot(z) {
                Some(s) => dot(&self.coeffs[s * d..(s + 1) * d], x),
                None => 0.0,
            })
            .collect()
    }

    /// Deterministic utilities r_z = θ_zᵀφ(u, l, n, w, z₁).
    pub fn utilities(&self, u: f64, comp: &NeighborComposition, w: Option<&[f64]>, prev: usize) -> Result<Vec<f64>> {
        self.check_inputs(comp.counts(), w, prev)?;
        let mut x = Vec::with_capacity(self.features.dim());
        eval_features(&self.compiled, u, comp.counts(), w.unwrap_or(&[]), prev, &mut x);
        Ok(self.utilities_from_features(&x))
    }

    pub fn choice_probs(&self, u: f64, comp: &NeighborComposition, w: Option<&[f64]>, prev: usize) -> Result<Vec<f64>> {
        softmax(&self.utilities(u, comp, w, prev)?)
    }

    pub fn sample_next_state<R: Rng + ?Sized>(
        &self,
        u: f64,
        comp: &NeighborComposition,
        w: Option<&[f64]>,
        prev: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let probs = self.choice_probs(u, comp, w, prev)?;
        Ok(sample_categorical(&probs, rng))
    }

    /// Log-likelihood Σ log κ_{prev,next} over `records`.
    pub fn log_likelihood(&self, records: &[TransitionRecord]) -> Result<f64> {
        let mut total = 0.0;
        for r in records {
            let p = self.choice_probs(r.u, &r.composition(), r.w.as_deref(), r.prev)?;
            total += p[r.next].ln();
        }
        Ok(total)
    }
}

impl TransitionKernel for ChoiceModel {
    fn num_states(&self) -> usize {
        self.space.len()
    }

    fn transition_probs(&self, u: f64, counts: &[u32], prev: usize) -> Result<Vec<f64>> {
        self.check_inputs(counts, self.context.as_deref(), prev)?;
        let mut x = Vec::with_capacity(self.features.dim());
        let w = self.context.as_deref().unwrap_or(&[]);
        eval_features(&self.compiled, u, counts, w, prev, &mut x);
        softmax(&self.utilities_from_features(&x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax.
pub fn softmax(utilities: &[f64]) -> Result<Vec<f64>> {
    if let Some(state) = utilities.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFiniteUtility { state });
    }
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = utilities.iter().map(|r| (r - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// argmax_z (r_z + ε_z) with ε_z ~ Gumbel(0, 1).
pub fn sample_gumbel_argmax<R: Rng + ?Sized>(utilities: &[f64], rng: &mut R) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (z, r) in utilities.iter().enumerate() {
        // open interval (0, 1) keeps both logarithms finite
        let uniform: f64 = loop {
            let v: f64 = rng.random();
            if v > 0.0 {
                break v;
            }
        };
        let value = r - (-uniform.ln()).ln();
        if value > best_value {
            best_value = value;
            best = z;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborComposition(Vec<u32>);

impl NeighborComposition {
    pub fn new(counts: Vec<u32>) -> Self {
        NeighborComposition(counts)
    }

    pub fn zeros(k: usize) -> Self {
        NeighborComposition(vec![0; k])
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// One observed agent update.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub step: u64,
    pub node: usize,
    pub u: f64,
    pub l: u32,
    pub n: Vec<u32>,
    pub w: Option<Vec<f64>>,
    pub prev: usize,
    pub next: usize,
}

impl TransitionRecord {
    pub fn composition(&self) -> NeighborComposition {
        NeighborComposition(self.n.clone())
    }

    fn validate(&self, k: usize, context_dim: Option<usize>, index: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord { index, reason };
        if self.n.len() != k {
            return Err(bad(format!("composition has {} entries, expected {k}", self.n.len())));
        }
        if self.n.iter().sum::<u32>() != self.l {
            return Err(bad(format!("|n| = {} but l = {}", self.n.iter().sum::<u32>(), self.l)));
        }
        if self.prev >= k || self.next >= k {
            return Err(bad("state index out of range".into()));
        }
        if !self.u.is_finite() {
            return Err(bad("control is not finite".into()));
        }
        if let Some(dim) = context_dim {
            let got = self.w.as_ref().map_or(0, Vec::len);
            if got != dim {
                return Err(bad(format!("context has {got} entries, expected {dim}")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    step: u64,
    node: usize,
    u: f64,
    l: u32,
    n: std::collections::BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<f64>>,
    prev: String,
    next: String,
}

/// Writes records as JSONL with state labels.
pub fn write_transition_log<W: Write>(mut out: W, space: &StateSpace, records: &[TransitionRecord]) -> Result<()> {
    for r in records {
        let line = LogLine {
            step: r.step,
            node: r.node,
            u: r.u,
            l: r.l,
            n: space.labels.iter().cloned().zip(r.n.iter().copied()).collect(),
            w: r.w.clone(),
            prev: space.labels[r.prev].clone(),
            next: space.labels[r.next].clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<transition log>", e))?;
    }
    Ok(())
}

/// Reads a JSONL transition log; labels absent from a record's `n` count 0.
pub fn read_transition_log<R: BufRead>(input: R, space: &StateSpace) -> Result<Vec<TransitionRecord>> {
    let mut records = Vec::new();
    for (index, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<transition log>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::InvalidRecord {
            index,
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::InvalidRecord { index, reason };
        let mut n = vec![0; space.len()];
        for (label, count) in &parsed.n {
            let z = space.index_of(label).map_err(|e| bad(e.to_string()))?;
            n[z] = *count;
        }
        let record = TransitionRecord {
            step: parsed.step,
            node: parsed.node,
            u: parsed.u,
            l: parsed.l,
            n,
            w: parsed.w,
            prev: space.index_of(&parsed.prev).map_err(|e| bad(e.to_string()))?,
            next: space.index_of(&parsed.next).map_err(|e| bad(e.to_string()))?,
        };
        record.validate(space.len(), None, index)?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log_likelihood: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when fitted probabilities collapse towards zero without a
    /// penalty, i.e. the coefficients are running off to infinity.
    pub separated: bool,
}

const MLE_TOL: f64 = 1e-8;
const MLE_MAX_ITER: usize = 10_000;

/// Distinct feature vectors with outcome counts; transitions sharing a
/// design row contribute identical gradient terms.
struct Design {
    rows: Vec<Vec<f64>>,
    counts: Vec<Vec<f64>>,
    totals: Vec<f64>,
}

impl Design {
    fn build(records: &[TransitionRecord], compiled: &[Compiled], k: usize) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut design = Design {
            rows: Vec::new(),
            counts: Vec::new(),
            totals: Vec::new(),
        };
        let mut x = Vec::new();
        for r in records {
            eval_features(compiled, r.u, &r.n, r.w.as_deref().unwrap_or(&[]), r.prev, &mut x);
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let row = *index.entry(key).or_insert_with(|| {
                design.rows.push(x.clone());
                design.counts.push(vec![0.0; k]);
                design.totals.push(0.0);
                design.rows.len() - 1
            });
            design.counts[row][r.next] += 1.0;
            design.totals[row] += 1.0;
        }
        design
    }
}

struct MleProblem<'a> {
    design: &'a Design,
    space: &'a StateSpace,
    d: usize,
    l2: f64,
}

impl MleProblem<'_> {
    /// Penalised log-likelihood, its gradient, the unpenalised
    /// log-likelihood and the smallest fitted probability.
    fn evaluate(&self, theta: &[f64]) -> (f64, Vec<f64>, f64, f64) {
        let k = self.space.len();
        let mut grad = vec![0.0; theta.len()];
        let mut ll = 0.0;
        let mut min_prob = f64::INFINITY;
        let mut util = vec![0.0; k];
        for ((x, counts), &total) in self
            .design
            .rows
            .iter()
            .zip(&self.design.counts)
            .zip(&self.design.totals)
        {
            for (z, r) in util.iter_mut().enumerate() {
                *r = match self.space.slot(z) {
                    Some(s) => dot(&theta[s * self.d..(s + 1) * self.d], x),
                    None => 0.0,
                };
            }
            let max = util.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + util.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
            for z in 0..k {
                let log_p = util[z] - log_norm;
                let p = log_p.exp();
                min_prob = min_prob.min(p);
                if counts[z] > 0.0 {
                    ll += counts[z] * log_p;
                }
                if let Some(s) = self.space.slot(z) {
                    let resid = counts[z] - total * p;
                    for (g, xj) in grad[s * self.d..(s + 1) * self.d].iter_mut().zip(x) {
                        *g += resid * xj;
                    }
                }
            }
        }
        let penalty: f64 = theta.iter().map(|t| t * t).sum::<f64>() * self.l2;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g -= 2.0 * self.l2 * t;
        }
        (ll - penalty, grad, ll, min_prob)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximises Σ log κ_{prev,next} − l2·‖θ‖² by full-batch gradient ascent
/// with Barzilai–Borwein trial steps and Armijo backtracking.
pub fn fit_mle(
    records: &[TransitionRecord],
    spec: &FeatureMapSpec,
    space: &StateSpace,
    l2: f64,
) -> Result<(ChoiceModel, FitReport)> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::InvalidSpec(format!("l2 must be a nonnegative number, got {l2}")));
    }
    for (i, r) in records.iter().enumerate() {
        r.validate(space.len(), Some(spec.context_dim), i)?;
    }
    let compiled = spec.compile(space)?;
    let d = spec.dim();
    let k = space.len();
    let design = Design::build(records, &compiled, k);
    let problem = MleProblem {
        design: &design,
        space,
        d,
        l2,
    };

    let mut theta = vec![0.0; d * (k - 1)];
    let (mut f, mut grad, mut ll, mut min_prob) = problem.evaluate(&theta);
    // curvature of the log-likelihood is at most total·max‖x‖²/2
    let curvature: f64 = design
        .rows
        .iter()
        .zip(&design.totals)
        .map(|(x, t)| t * dot(x, x))
        .sum::<f64>()
        * 0.5
        + 2.0 * l2;
    let mut step = if curvature > 0.0 { 1.0 / curvature } else { 1.0 };
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MLE_MAX_ITER {
        if inf_norm(&grad) < MLE_TOL {
            converged = true;
            break;
        }
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        // roundoff floor on the objective; near the optimum Armijo gains are
        // below the resolution of f itself
        let slack = 1e-13 * (1.0 + f.abs());
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            let eval = problem.evaluate(&trial);
            if eval.0.is_finite() && eval.0 >= f + 1e-4 * step * grad_sq - slack {
                accepted = Some((trial, eval));
                break;
            }
            step *= 0.5;
        }
        let Some((next, (f_next, grad_next, ll_next, min_next))) = accepted else {
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_next.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let ss = dot(&s, &s);
        // ascent on a concave objective: sᵀy < 0 along a productive step
        step = if sy < 0.0 {
            (ss / -sy).clamp(1e-12, 1e12)
        } else {
            step * 2.0
        };
        theta = next;
        f = f_next;
        grad = grad_next;
        ll = ll_next;
        min_prob = min_next;
        iterations += 1;
        if inf_norm(&theta) > 1e4 {
            break;
        }
    }

    // a finite sample cannot support a fitted probability far below 1/n
    let total: f64 = design.totals.iter().sum();
    let separated = l2 == 0.0 && min_prob < (0.01 / total).min(1e-6);
    let report = FitReport {
        log_likelihood: ll,
        objective: f,
        grad_norm: inf_norm(&grad),
        iterations,
        converged: converged && !separated,
        separated,
    };
    let model = ChoiceModel {
        space: space.clone(),
        features: spec.clone(),
        coeffs: theta,
        context: None,
        compiled,
    };
    Ok((model, report))
}

/// Laplace-smoothed empirical kernel bucketed on the truthful-neighbor
/// fraction q = n_0 / l. Bin 0 holds l = 0; bins 1..=buckets split [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginKernel {
    labels: Vec<String>,
    buckets: usize,
    table: Vec<Vec<Vec<f64>>>,
}

impl PluginKernel {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn num_states(&self) -> usize {
        self.labels.len()
    }

    pub fn bin_of(&self, counts: &[u32]) -> usize {
        bin_of(self.buckets, counts)
    }

    /// Smoothed row for (`bin`, `prev`).
    pub fn row(&self, bin: usize, prev: usize) -> &[f64] {
        &self.table[bin][prev]
    }
}

fn bin_of(buckets: usize, counts: &[u32]) -> usize {
    let l: u32 = counts.iter().sum();
    if l == 0 {
        return 0;
    }
    let q = counts[0] as f64 / l as f64;
    1 + ((q * buckets as f64).floor() as usize).min(buckets - 1)
}

impl TransitionKernel for PluginKernel {
    fn num_states(&self) -> usize {
        self.labels.len()
    }

    fn transition_probs(&self, _u: f64, counts: &[u32], prev: usize) -> Result<Vec<f64>> {
        check_counts(counts, self.num_states())?;
        check_state(prev, self.num_states())?;
        Ok(self.table[self.bin_of(counts)][prev].clone())
    }
}

pub fn fit_plugin(records: &[TransitionRecord], space: &StateSpace, buckets: usize) -> Result<PluginKernel> {
    if buckets == 0 {
        return Err(Error::InvalidSpec("buckets must be at least 1".into()));
    }
    let k = space.len();
    for (i, r) in records.iter().enumerate() {
        r.validate(k, None, i)?;
    }
    let mut counts = vec![vec![vec![0u64; k]; k]; buckets + 1];
    for r in records {
        counts[bin_of(buckets, &r.n)][r.prev][r.next] += 1;
    }
    let table = counts
        .into_iter()
        .map(|bin| {
            bin.into_iter()
                .map(|row| {
                    let total: u64 = row.iter().sum();
                    row.iter()
                        .map(|&c| (c + 1) as f64 / (total + k as u64) as f64)
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(PluginKernel {
        labels: space.labels.clone(),
        buckets,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_model(coeffs: Vec<f64>) -> ChoiceModel {
        ChoiceModel::new(
            StateSpace::three_state(),
            FeatureMapSpec::new(vec![Feature::Constant]),
            coeffs,
        )
        .unwrap()
    }

    fn record(n: Vec<u32>, prev: usize, next: usize) -> TransitionRecord {
        TransitionRecord {
            step: 0,
            node: 0,
            u: 0.0,
            l: n.iter().sum(),
            n,
            w: None,
            prev,
            next,
        }
    }

    #[test]
    fn zero_coefficients_give_zero_utilities() {
        let m = constant_model(vec![0.0, 0.0]);
        let comp = NeighborComposition::new(vec![1, 2, 0]);
        assert_eq!(m.utilities(0.3, &comp, None, 1).unwrap(), vec![0.0; 3]);
        let p = m.choice_probs(0.3, &comp, None, 1).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn intercept_log_two() {
        let m = constant_model(vec![2f64.ln(), 0.0]);
        let comp = NeighborComposition::zeros(3);
        let r = m.utilities(0.0, &comp, None, 0).unwrap();
        assert_eq!(r, vec![2f64.ln(), 0.0, 0.0]);
        let p = m.choice_probs(0.0, &comp, None, 0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn fraction_feature_vanishes_at_zero_degree() {
        let spec = FeatureMapSpec::new(vec![Feature::Constant, Feature::Fraction { state: "T".into() }]);
        let m = ChoiceModel::new(StateSpace::three_state(), spec, vec![0.5, 3.0, -0.2, 7.0]).unwrap();
        let r = m.utilities(0.0, &NeighborComposition::zeros(3), None, 0).unwrap();
        assert_eq!(r, vec![0.5, -0.2, 0.0]);
    }

    #[test]
    fn dimension_errors() {
        let m = constant_model(vec![0.0, 0.0]);
        assert!(m.utilities(0.0, &NeighborComposition::zeros(2), None, 0).is_err());
        assert!(m
            .utilities(0.0, &NeighborComposition::zeros(3), Some(&[1.0]), 0)
            .is_err());
        assert!(ChoiceModel::new(
            StateSpace::three_state(),
            FeatureMapSpec::new(vec![Feature::Constant]),
            vec![0.0]
        )
        .is_err());
    }

    #[test]
    fn non_finite_utility_rejected() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::NonFiniteUtility { state: 1 })
        ));
    }

    #[test]
    fn softmax_handles_large_utilities() {
        let p = softmax(&[1000.0, 999.0, -1000.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_probs_always_sample_first_state() {
        let m = constant_model(vec![800.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            assert_eq!(
                m.sample_next_state(0.0, &NeighborComposition::zeros(3), None, 1, &mut rng)
                    .unwrap(),
                0
            );
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = constant_model(vec![0.3, -0.1]);
        let comp = NeighborComposition::zeros(3);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200)
                .map(|_| m.sample_next_state(0.0, &comp, None, 0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn gumbel_argmax_matches_softmax() {
        let utilities = [0.7, -0.4, 0.0];
        let probs = softmax(&utilities).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[sample_gumbel_argmax(&utilities, &mut rng)] += 1;
        }
        for z in 0..3 {
            assert!((counts[z] as f64 / 1e5 - probs[z]).abs() < 0.01);
        }
    }

    #[test]
    fn feature_list_parses() {
        let spec = FeatureMapSpec::parse_list("constant, state:T,fraction:T,control_fraction:H", 0).unwrap();
        assert_eq!(spec.dim(), 4);
        assert_eq!(spec.terms[1], Feature::CurrentState { state: "T".into() });
        assert!(FeatureMapSpec::parse_list("fraction", 0).is_err());
        assert!(FeatureMapSpec::parse_list("bogus", 0).is_err());
        for t in &spec.terms {
            assert_eq!(&t.to_string().parse::<Feature>().unwrap(), t);
        }
    }

    #[test]
    fn model_file_schema() {
        let m = constant_model(vec![0.5, -1.0]);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["labels"], serde_json::json!(["T", "H", "D"]));
        assert_eq!(v["reference"], "D");
        assert_eq!(v["coeffs"], serde_json::json!([0.5, -1.0]));
        let back: ChoiceModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn transition_log_round_trip() {
        let space = StateSpace::three_state();
        let records = vec![record(vec![1, 1, 0], 0, 1), record(vec![0, 0, 0], 2, 2)];
        let mut buf = Vec::new();
        write_transition_log(&mut buf, &space, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""prev":"T""#));
        assert_eq!(read_transition_log(&buf[..], &space).unwrap(), records);
    }

    #[test]
    fn transition_log_rejects_inconsistent_degree() {
        let line = r#"{"step":0,"node":1,"u":0,"l":3,"n":{"T":1},"prev":"T","next":"H"}"#;
        let err = read_transition_log(line.as_bytes(), &StateSpace::three_state()).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { index: 0, .. }));
    }

    #[test]
    fn mle_empty_records_error() {
        let spec = FeatureMapSpec::new(vec![Feature::Constant]);
        assert!(matches!(
            fit_mle(&[], &spec, &StateSpace::three_state(), 0.0),
            Err(Error::EmptyRecords)
        ));
    }

    #[test]
    fn mle_single_record_regularised() {
        let spec = FeatureMapSpec::new(vec![Feature::Constant]);
        let recs = [record(vec![0, 0, 0], 0, 0)];
        let (m, report) = fit_mle(&recs, &spec, &StateSpace::three_state(), 1.0).unwrap();
        assert!(report.converged);
        assert!(m.coeffs().iter().all(|c| c.is_finite() && c.abs() < 1.0));
        let zero_ll = 3f64.recip().ln();
        assert!(report.objective > zero_ll);
        assert!(report.objective < 0.0);
    }

    #[test]
    fn mle_intercepts_match_empirical_log_odds() {
        // frequencies 5000 / 3000 / 2000 with D as reference
        let mut recs = Vec::new();
        for (z, n) in [(0, 5000), (1, 3000), (2, 2000)] {
            recs.extend((0..n).map(|_| record(vec![0, 0, 0], 1, z)));
        }
        let spec = FeatureMapSpec::new(vec![Feature::Constant]);
        let (m, report) = fit_mle(&recs, &spec, &StateSpace::three_state(), 0.0).unwrap();
        assert!(report.converged, "{report:?}");
        assert!((m.coeffs()[0] - (5000f64 / 2000.0).ln()).abs() < 1e-6);
        assert!((m.coeffs()[1] - (3000f64 / 2000.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn mle_separation_reported_not_converged() {
        // next state is perfectly predicted by the current state
        let spec = FeatureMapSpec::new(vec![Feature::Constant, Feature::CurrentState { state: "T".into() }]);
        let space = StateSpace::two_state();
        let recs: Vec<_> = (0..20)
            .map(|i| {
                if i % 2 == 0 {
                    record(vec![0, 0], 0, 0)
                } else {
                    record(vec![0, 0], 1, 1)
                }
            })
            .collect();
        let (_, report) = fit_mle(&recs, &spec, &space, 0.0).unwrap();
        assert!(!report.converged);
        assert!(report.separated);
        let (_, penalised) = fit_mle(&recs, &spec, &space, 0.1).unwrap();
        assert!(penalised.converged);
    }

    #[test]
    fn plugin_no_records_is_uniform() {
        let p = fit_plugin(&[], &StateSpace::three_state(), 4).unwrap();
        for bin in 0..5 {
            for prev in 0..3 {
                assert_eq!(p.row(bin, prev), &[1.0 / 3.0; 3]);
            }
        }
        assert!(fit_plugin(&[], &StateSpace::three_state(), 0).is_err());
    }

    #[test]
    fn plugin_laplace_arithmetic() {
        let recs: Vec<_> = (0..98).map(|_| record(vec![2, 0, 0], 0, 0)).collect();
        let p = fit_plugin(&recs, &StateSpace::three_state(), 2).unwrap();
        let bin = p.bin_of(&[2, 0, 0]);
        assert_eq!(bin, 2);
        assert!((p.row(bin, 0)[0] - 99.0 / 101.0).abs() < 1e-15);
        assert!((p.row(bin, 0)[1] - 1.0 / 101.0).abs() < 1e-15);
        assert_eq!(p.bin_of(&[0, 0, 0]), 0);
        assert_eq!(p.bin_of(&[0, 3, 0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(r in prop::collection::vec(-30.0f64..30.0, 2..8), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let a = softmax(&r).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_argmax_matches_utilities(r in prop::collection::vec(-30.0f64..30.0, 2..8)) {
            let p = softmax(&r).unwrap();
            let am = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(am(&p), am(&r));
        }
    }
}
