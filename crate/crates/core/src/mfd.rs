//! Degree-based mean-field dynamics.
//!
//! Every in-degree class l carries a state distribution ρ^l. An activated
//! agent of class l sees l influencers drawn from the edge-source law θ and
//! moves according to the averaged kernel G^l(θ); the classes evolve under
//! the master equation
//!
//! dρ^l_z/dt = r_l · Σ_{z'≠z} (ρ^l_{z'} G^l_{z'z} − ρ^l_z G^l_{zz'}),
//!
//! where r_l is the activation rate (1, or l to match edge-driven updates).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::JointDegreeDistribution;
use crate::kernel::{Kernel, TransitionKernel};
use crate::rum::{fit_mle, fit_plugin, FeatureMapSpec, StateSpace, TransitionRecord};
use crate::trajectory::Trajectory;

pub type Matrix = Vec<Vec<f64>>;

const SIMPLEX_TOL: f64 = 1e-9;
/// Largest simplex violation that is clamped away after a step.
pub const CLAMP_TOL: f64 = 1e-6;

/// ρ^l for every in-degree l in the support of Q.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationVector {
    rho: BTreeMap<usize, Vec<f64>>,
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| !(*x >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidDistribution(format!("{what}: {v:?} is off the simplex")));
    }
    Ok(())
}

impl PopulationVector {
    pub fn new(rho: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let k = rho
            .values()
            .next()
            .ok_or_else(|| Error::InvalidSpec("population vector has no in-degree classes".into()))?
            .len();
        for (l, r) in &rho {
            if r.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "population vector states",
                    expected: k,
                    actual: r.len(),
                });
            }
            check_simplex(r, &format!("rho^{l}"))?;
        }
        Ok(PopulationVector { rho })
    }

    /// The same distribution in every in-degree class of `q`.
    pub fn uniform(q: &JointDegreeDistribution, dist: &[f64]) -> Result<Self> {
        PopulationVector::new(q.in_degree_support().into_iter().map(|l| (l, dist.to_vec())).collect())
    }

    pub fn num_states(&self) -> usize {
        self.rho.values().next().map_or(0, Vec::len)
    }

    pub fn get(&self, l: usize) -> Option<&[f64]> {
        self.rho.get(&l).map(Vec::as_slice)
    }

    pub fn classes(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.rho
    }

    /// Errors unless the classes are exactly Q's in-degree support.
    pub fn check_support(&self, q: &JointDegreeDistribution) -> Result<()> {
        let support = q.in_degree_support();
        if !self.rho.keys().copied().eq(support.iter().copied()) {
            return Err(Error::InvalidSpec(format!(
                "population classes {:?} do not match in-degree support {support:?}",
                self.rho.keys().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Node-weighted overall state distribution.
    pub fn overall(&self, q: &JointDegreeDistribution) -> Vec<f64> {
        let marginal = q.in_degree_marginal();
        let mut out = vec![0.0; self.num_states()];
        for (l, r) in &self.rho {
            let p = marginal.get(l).copied().unwrap_or(0.0);
            for (o, x) in out.iter_mut().zip(r) {
                *o += p * x;
            }
        }
        out
    }
}

/// Probability that a uniformly random edge originates from a node in each
/// state: θ_z = Σ_l w_l ρ^l(z) with w_l ∝ Σ_m m·Q(l,m).
pub fn theta_z(q: &JointDegreeDistribution, rho: &PopulationVector) -> Result<Vec<f64>> {
    let weights = q.edge_source_weights()?;
    theta_from_weights(&weights, rho)
}

/// θ_z with the population resolved by joint (in, out)-degree class.
///
/// Exact edge-source law: with ρ^{l,m} the empirical state shares of the
/// nodes with in-degree l and out-degree m, this equals the fraction of
/// edges whose influencer is in state z. [`theta_z`] is the special case
/// ρ^{l,m} = ρ^l.
pub fn theta_z_joint(q: &JointDegreeDistribution, rho: &BTreeMap<(usize, usize), Vec<f64>>) -> Result<Vec<f64>> {
    let k = rho
        .values()
        .next()
        .ok_or_else(|| Error::InvalidSpec("population has no degree classes".into()))?
        .len();
    let mut theta = vec![0.0; k];
    let mut total = 0.0;
    for ((l, m), p) in q.entries() {
        let w = m as f64 * p;
        if w == 0.0 {
            continue;
        }
        let r = rho
            .get(&(l, m))
            .ok_or_else(|| Error::InvalidSpec(format!("population lacks degree class ({l}, {m})")))?;
        if r.len() != k {
            return Err(Error::DimensionMismatch {
                what: "population states",
                expected: k,
                actual: r.len(),
            });
        }
        check_simplex(r, &format!("rho^({l},{m})"))?;
        total += w;
        for (t, x) in theta.iter_mut().zip(r) {
            *t += w * x;
        }
    }
    if total <= 0.0 {
        return Err(Error::ZeroEdgeWeight);
    }
    theta.iter_mut().for_each(|t| *t /= total);
    Ok(theta)
}

fn theta_from_weights(weights: &BTreeMap<usize, f64>, rho: &PopulationVector) -> Result<Vec<f64>> {
    let mut theta = vec![0.0; rho.num_states()];
    for (l, &w) in weights {
        if w == 0.0 {
            continue;
        }
        let r = rho
            .get(*l)
            .ok_or_else(|| Error::InvalidSpec(format!("population vector lacks in-degree {l}")))?;
        for (t, x) in theta.iter_mut().zip(r) {
            *t += w * x;
        }
    }
    Ok(theta)
}

/// Lexicographic walk over n ∈ ℕ^K with |n| = l, from (0,…,0,l) to (l,0,…,0).
#[derive(Clone, Debug)]
pub struct Compositions {
    next: Option<Vec<u32>>,
}

pub fn compositions(l: u32, k: usize) -> Compositions {
    let next = (k > 0).then(|| {
        let mut n = vec![0; k];
        n[k - 1] = l;
        n
    });
    Compositions { next }
}

impl Iterator for Compositions {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let current = self.next.take()?;
        let k = current.len();
        let mut n = current.clone();
        let mut suffix = n[k - 1];
        for i in (0..k - 1).rev() {
            if suffix > 0 {
                n[i] += 1;
                for x in &mut n[i + 1..] {
                    *x = 0;
                }
                n[k - 1] = suffix - 1;
                self.next = Some(n);
                break;
            }
            suffix += n[i];
        }
        Some(current)
    }
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

/// How G^l is averaged over neighbour compositions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Averaging {
    /// Enumerate all compositions up to this in-degree.
    pub l_exact: usize,
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl Default for Averaging {
    fn default() -> Self {
        Averaging {
            l_exact: 60,
            mc_samples: 20_000,
            mc_seed: 0,
        }
    }
}

/// Kernel rows for every composition of one in-degree, with log multinomial
/// coefficients. θ-independent, so built once per integration.
struct ExactTable {
    terms: Vec<(Vec<u32>, f64, Matrix)>,
}

impl ExactTable {
    fn build<K: TransitionKernel + ?Sized>(kernel: &K, u: f64, l: usize) -> Result<Self> {
        let k = kernel.num_states();
        let lf = ln_factorials(l);
        let mut terms = Vec::new();
        for n in compositions(l as u32, k) {
            let coef = lf[l] - n.iter().map(|&c| lf[c as usize]).sum::<f64>();
            let rows = (0..k)
                .map(|z| kernel.transition_probs(u, &n, z))
                .collect::<Result<Matrix>>()?;
            terms.push((n, coef, rows));
        }
        Ok(ExactTable { terms })
    }

    fn average(&self, theta: &[f64]) -> Matrix {
        let k = theta.len();
        let ln_theta: Vec<f64> = theta.iter().map(|t| t.ln()).collect();
        let mut g = vec![vec![0.0; k]; k];
        for (n, coef, rows) in &self.terms {
            let mut lw = *coef;
            for (z, &c) in n.iter().enumerate() {
                if c > 0 {
                    lw += c as f64 * ln_theta[z];
                }
            }
            let w = lw.exp();
            if w == 0.0 {
                continue;
            }
            for (grow, krow) in g.iter_mut().zip(rows) {
                for (a, b) in grow.iter_mut().zip(krow) {
                    *a += w * b;
                }
            }
        }
        g
    }
}

/// Monte Carlo estimate of G^l from `samples` multinomial draws.
pub fn g_avg_monte_carlo<K: TransitionKernel + ?Sized, R: Rng + ?Sized>(
    kernel: &K,
    u: f64,
    l: usize,
    theta: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Matrix> {
    let k = kernel.num_states();
    if samples == 0 {
        return Err(Error::InvalidSpec("Monte Carlo sample count must be positive".into()));
    }
    let mut g = vec![vec![0.0; k]; k];
    let mut n = vec![0u32; k];
    for _ in 0..samples {
        n.iter_mut().for_each(|c| *c = 0);
        for _ in 0..l {
            n[crate::kernel::sample_categorical(theta, rng)] += 1;
        }
        for (z, row) in g.iter_mut().enumerate() {
            for (a, b) in row.iter_mut().zip(kernel.transition_probs(u, &n, z)?) {
                *a += b;
            }
        }
    }
    for row in &mut g {
        row.iter_mut().for_each(|x| *x /= samples as f64);
    }
    Ok(g)
}

fn check_theta(theta: &[f64], k: usize) -> Result<()> {
    if theta.len() != k {
        return Err(Error::DimensionMismatch {
            what: "edge-source law",
            expected: k,
            actual: theta.len(),
        });
    }
    check_simplex(theta, "theta")
}

/// Normalised non-negative copy; removes round-off from intermediate stages.
fn project(theta: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = theta.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = clipped.iter().sum();
    clipped.iter().map(|x| x / s).collect()
}

/// G^l_{z1,z2}: the kernel averaged over n ~ Multinomial(l, θ).
pub fn g_avg<K: TransitionKernel + ?Sized>(
    kernel: &K,
    u: f64,
    l: usize,
    theta: &[f64],
    avg: &Averaging,
) -> Result<Matrix> {
    check_theta(theta, kernel.num_states())?;
    let theta = project(theta);
    if l <= avg.l_exact {
        Ok(ExactTable::build(kernel, u, l)?.average(&theta))
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(avg.mc_seed ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        g_avg_monte_carlo(kernel, u, l, &theta, avg.mc_samples, &mut rng)
    }
}

/// Generator F^l: off-diagonal G, diagonal minus the off-diagonal row sum.
pub fn rate_matrix<K: TransitionKernel + ?Sized>(
    kernel: &K,
    u: f64,
    l: usize,
    theta: &[f64],
    avg: &Averaging,
) -> Result<Matrix> {
    Ok(generator(&g_avg(kernel, u, l, theta, avg)?))
}

fn generator(g: &Matrix) -> Matrix {
    let mut f = g.clone();
    for (z, row) in f.iter_mut().enumerate() {
        let out: f64 = row.iter().enumerate().filter(|&(j, _)| j != z).map(|(_, x)| x).sum();
        row[z] = -out;
    }
    f
}

/// Per-class activation rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Every agent activates at rate one.
    #[default]
    Unit,
    /// Agents activate at a rate equal to their in-degree, as when one
    /// uniformly sampled edge fires per 1/|E| time units. In-degree-0
    /// classes are then frozen.
    InDegree,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Activation::Unit),
            "in_degree" => Ok(Activation::InDegree),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

fn default_h() -> f64 {
    0.01
}

fn default_l_exact() -> usize {
    60
}

fn default_mc_samples() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSpec {
    pub t_end: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_l_exact")]
    pub l_exact: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub mc_seed: u64,
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Report the state at these times instead of after every step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_times: Option<Vec<f64>>,
}

impl OdeSpec {
    pub fn new(t_end: f64) -> Self {
        OdeSpec {
            t_end,
            h: default_h(),
            l_exact: default_l_exact(),
            mc_samples: default_mc_samples(),
            mc_seed: 0,
            u: 0.0,
            activation: Activation::Unit,
            output_times: None,
        }
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn with_u(mut self, u: f64) -> Self {
        self.u = u;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_output_times(mut self, times: Vec<f64>) -> Self {
        self.output_times = Some(times);
        self
    }

    pub fn averaging(&self) -> Averaging {
        Averaging {
            l_exact: self.l_exact,
            mc_samples: self.mc_samples,
            mc_seed: self.mc_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "step size must be positive, got {}",
                self.h
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "t_end must be nonnegative, got {}",
                self.t_end
            )));
        }
        if !self.u.is_finite() {
            return Err(Error::InvalidSpec("control must be finite".into()));
        }
        if let Some(times) = &self.output_times {
            if times.is_empty()
                || times.windows(2).any(|w| !(w[1] > w[0]))
                || times.iter().any(|&t| !(0.0..=self.t_end).contains(&t))
            {
                return Err(Error::InvalidSpec(
                    "output times must be strictly increasing and inside [0, t_end]".into(),
                ));
            }
        }
        Ok(())
    }

    fn targets(&self) -> Vec<f64> {
        match &self.output_times {
            Some(times) => times.clone(),
            None => {
                let steps = (self.t_end / self.h - 1e-9).ceil().max(0.0) as usize;
                let mut out: Vec<f64> = (0..steps).map(|i| i as f64 * self.h).collect();
                out.push(self.t_end);
                if steps == 0 {
                    out.truncate(1);
                }
                out
            }
        }
    }
}

/// θ-independent pieces of the right-hand side.
struct System<'a, K: TransitionKernel + ?Sized> {
    kernel: &'a K,
    u: f64,
    k: usize,
    classes: Vec<usize>,
    rates: Vec<f64>,
    weights: BTreeMap<usize, f64>,
    exact: Vec<Option<ExactTable>>,
    avg: Averaging,
}

impl<'a, K: TransitionKernel + ?Sized> System<'a, K> {
    fn new(q: &JointDegreeDistribution, kernel: &'a K, ode: &OdeSpec) -> Result<Self> {
        let classes = q.in_degree_support();
        let avg = ode.averaging();
        let rates = classes
            .iter()
            .map(|&l| match ode.activation {
                Activation::Unit => 1.0,
                Activation::InDegree => l as f64,
            })
            .collect();
        let exact = classes
            .iter()
            .map(|&l| {
                (l <= avg.l_exact)
                    .then(|| ExactTable::build(kernel, ode.u, l))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(System {
            kernel,
            u: ode.u,
            k: kernel.num_states(),
            classes,
            rates,
            weights: q.edge_source_weights()?,
            exact,
            avg,
        })
    }

    /// Flattened ρ, class-major.
    fn theta(&self, y: &[f64]) -> Vec<f64> {
        let mut theta = vec![0.0; self.k];
        for (i, l) in self.classes.iter().enumerate() {
            let w = self.weights.get(l).copied().unwrap_or(0.0);
            for (t, x) in theta.iter_mut().zip(&y[i * self.k..(i + 1) * self.k]) {
                *t += w * x;
            }
        }
        project(&theta)
    }

    fn rhs(&self, y: &[f64]) -> Result<Vec<f64>> {
        let theta = self.theta(y);
        let k = self.k;
        let mut dy = vec![0.0; y.len()];
        for (i, &l) in self.classes.iter().enumerate() {
            let rate = self.rates[i];
            if rate == 0.0 {
                continue;
            }
            let g = match &self.exact[i] {
                Some(table) => table.average(&theta),
                None => g_avg(self.kernel, self.u, l, &theta, &self.avg)?,
            };
            let rho = &y[i * k..(i + 1) * k];
            let d = &mut dy[i * k..(i + 1) * k];
            for z1 in 0..k {
                for z2 in 0..k {
                    if z1 != z2 {
                        let flow = rate * rho[z1] * g[z1][z2];
                        d[z2] += flow;
                        d[z1] -= flow;
                    }
                }
            }
        }
        Ok(dy)
    }

    fn rk4(&self, y: &[f64], h: f64) -> Result<Vec<f64>> {
        let axpy = |a: f64, x: &[f64]| y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect::<Vec<_>>();
        let k1 = self.rhs(y)?;
        let k2 = self.rhs(&axpy(h / 2.0, &k1))?;
        let k3 = self.rhs(&axpy(h / 2.0, &k2))?;
        let k4 = self.rhs(&axpy(h, &k3))?;
        Ok((0..y.len())
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }

    /// Clamps small negatives, renormalises each class, and aborts on
    /// violations larger than [`CLAMP_TOL`].
    fn repair(&self, y: &mut [f64], t: f64) -> Result<()> {
        for block in y.chunks_mut(self.k) {
            let sum: f64 = block.iter().sum();
            let violation = block
                .iter()
                .fold((sum - 1.0).abs(), |v, &x| if x < 0.0 { v.max(-x) } else { v });
            if !violation.is_finite() || violation > CLAMP_TOL {
                return Err(Error::IntegrationInstability { t, violation });
            }
            block.iter_mut().for_each(|x| *x = x.max(0.0));
            let s: f64 = block.iter().sum();
            block.iter_mut().for_each(|x| *x /= s);
        }
        Ok(())
    }
}

/// Integrates the master equation with classical RK4 and reports ρ(t)
/// overall and per in-degree class.
pub fn integrate<K: TransitionKernel + ?Sized>(
    q: &JointDegreeDistribution,
    rho0: &PopulationVector,
    kernel: &K,
    labels: Vec<String>,
    ode: &OdeSpec,
) -> Result<Trajectory> {
    ode.validate()?;
    rho0.check_support(q)?;
    if rho0.num_states() != kernel.num_states() || labels.len() != kernel.num_states() {
        return Err(Error::DimensionMismatch {
            what: "mean-field state count",
            expected: kernel.num_states(),
            actual: rho0.num_states(),
        });
    }
    let sys = System::new(q, kernel, ode)?;
    let k = sys.k;
    let marginal = q.in_degree_marginal();
    let mut y: Vec<f64> = rho0.classes().values().flatten().copied().collect();

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut per_degree: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut record = |t: f64, y: &[f64]| {
        times.push(t);
        let mut overall = vec![0.0; k];
        for (i, l) in sys.classes.iter().enumerate() {
            let block = &y[i * k..(i + 1) * k];
            let p = marginal[l];
            for (o, x) in overall.iter_mut().zip(block) {
                *o += p * x;
            }
            per_degree.entry(*l).or_default().push(block.to_vec());
        }
        let s: f64 = overall.iter().sum();
        states.push(overall.iter().map(|x| x / s).collect::<Vec<_>>());
    };

    let mut t = 0.0;
    for target in ode.targets() {
        let span = target - t;
        if span > 0.0 {
            let n = (span / ode.h - 1e-9).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for i in 1..=n {
                y = sys.rk4(&y, h)?;
                sys.repair(&mut y, t + i as f64 * h)?;
            }
            t = target;
        }
        record(t, &y);
    }
    Trajectory::with_per_degree(labels, times, states, per_degree)
}

/// Edge-source law along a trajectory that carries per-degree data.
pub fn theta_path(q: &JointDegreeDistribution, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let weights = q.edge_source_weights()?;
    (0..traj.len())
        .map(|i| {
            let rho = traj
                .per_degree()
                .iter()
                .map(|(&l, rows)| (l, rows[i].clone()))
                .collect();
            theta_from_weights(&weights, &PopulationVector::new(rho)?)
        })
        .collect()
}

/// How `predict_from_fit` estimates the kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitMethod {
    Rum {
        features: FeatureMapSpec,
        #[serde(default)]
        l2: f64,
    },
    Plugin {
        buckets: usize,
    },
}

impl FitMethod {
    pub fn fit(&self, records: &[TransitionRecord], space: &StateSpace) -> Result<Kernel> {
        Ok(match self {
            FitMethod::Rum { features, l2 } => fit_mle(records, features, space, *l2)?.0.into(),
            FitMethod::Plugin { buckets } => fit_plugin(records, space, *buckets)?.into(),
        })
    }
}

/// Fits a kernel to `records` and integrates it from `rho0`.
pub fn predict_from_fit(
    records: &[TransitionRecord],
    q: &JointDegreeDistribution,
    rho0: &PopulationVector,
    space: &StateSpace,
    method: &FitMethod,
    ode: &OdeSpec,
) -> Result<(Kernel, Trajectory)> {
    let kernel = method.fit(records, space)?;
    let traj = integrate(q, rho0, &kernel, space.labels().to_vec(), ode)?;
    Ok((kernel, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, DirectedGraph, GraphGenSpec, GraphModel};
    use crate::rum::{ChoiceModel, Feature};
    use crate::twostate::{solve_fixed_point, AffineLogit, PhiContext, TwoStateLogits};

    fn labels2() -> Vec<String> {
        vec!["T".into(), "H".into()]
    }

    /// Two-state kernel with constant switch probabilities a (H→T), b (T→H).
    fn constant_rates(a: f64, b: f64) -> TwoStateLogits {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        TwoStateLogits::new(
            AffineLogit::new(logit(a), 0.0, 0.0),
            AffineLogit::new(-logit(b), 0.0, 0.0),
        )
    }

    fn isolated_q() -> JointDegreeDistribution {
        JointDegreeDistribution::new([((0, 1), 1.0)].into_iter().collect()).unwrap()
    }

    fn analytic(a: f64, b: f64, r0: f64, t: f64) -> f64 {
        let s = a / (a + b);
        s + (r0 - s) * (-(a + b) * t).exp()
    }

    #[test]
    fn composition_counts() {
        assert_eq!(compositions(0, 3).collect::<Vec<_>>(), vec![vec![0, 0, 0]]);
        assert_eq!(
            compositions(2, 2).collect::<Vec<_>>(),
            vec![vec![0, 2], vec![1, 1], vec![2, 0]]
        );
        assert_eq!(compositions(50, 3).count(), 1326);
        let all: Vec<_> = compositions(4, 3).collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert!(all.iter().all(|n| n.iter().sum::<u32>() == 4));
    }

    #[test]
    fn theta_identical_classes_cancels() {
        let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 60).with_seed(5)).unwrap();
        let q = JointDegreeDistribution::from_graph(&g);
        let rho = PopulationVector::uniform(&q, &[0.2, 0.5, 0.3]).unwrap();
        let th = theta_z(&q, &rho).unwrap();
        for (a, b) in th.iter().zip([0.2, 0.5, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
        let all_t = PopulationVector::uniform(&q, &[1.0, 0.0, 0.0]).unwrap();
        assert!((theta_z(&q, &all_t).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn theta_chain_edge_sources() {
        // states T,H,T,H on the chain; sources are nodes 0, 1, 2
        let g = generate(&GraphGenSpec::new(GraphModel::Chain, 4)).unwrap();
        let q = JointDegreeDistribution::from_graph(&g);
        let mut joint = BTreeMap::new();
        joint.insert((0, 1), vec![1.0, 0.0]);
        joint.insert((1, 1), vec![0.5, 0.5]);
        joint.insert((1, 0), vec![0.0, 1.0]);
        let th = theta_z_joint(&q, &joint).unwrap();
        assert!((th[0] - 2.0 / 3.0).abs() < 1e-12);

        // pooling by in-degree mixes the sink (node 3) into the l = 1 share
        let mut rho = BTreeMap::new();
        rho.insert(0, vec![1.0, 0.0]);
        rho.insert(1, vec![1.0 / 3.0, 2.0 / 3.0]);
        let pooled = theta_z(&q, &PopulationVector::new(rho).unwrap()).unwrap();
        assert!((pooled[0] - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn g_avg_single_term_and_binomial_weights() {
        let kernel = constant_rates(0.3, 0.2);
        let g0 = g_avg(&kernel, 0.0, 0, &[0.4, 0.6], &Averaging::default()).unwrap();
        assert_eq!(g0[1], kernel.transition_probs(0.0, &[0, 0], 1).unwrap());
        // kernel that reports the truthful count as P(T) in state H
        let follow = TwoStateLogits::new(
            AffineLogit::new(-200.0, 0.0, 400.0),
            AffineLogit::new(-200.0, 0.0, 400.0),
        );
        let g2 = g_avg(&follow, 0.0, 2, &[0.5, 0.5], &Averaging::default()).unwrap();
        // P(M=2) = 0.25 gives →T, P(M=1) = 0.5 hits σ(0) = 1/2, P(M=0) →H
        assert!((g2[1][0] - (0.25 + 0.5 * 0.5)).abs() < 1e-12);
        for row in &g2 {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_matches_monte_carlo_l10() {
        let model = ChoiceModel::new(
            StateSpace::three_state(),
            FeatureMapSpec::new(vec![
                Feature::Constant,
                Feature::Fraction { state: "T".into() },
                Feature::Fraction { state: "H".into() },
            ]),
            vec![0.2, 2.0, -1.0, -0.3, 0.5, 1.5],
        )
        .unwrap();
        let theta = [0.5, 0.3, 0.2];
        let exact = g_avg(&model, 0.0, 10, &theta, &Averaging::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mc = g_avg_monte_carlo(&model, 0.0, 10, &theta, 200_000, &mut rng).unwrap();
        for (a, b) in exact.iter().flatten().zip(mc.iter().flatten()) {
            assert!((a - b).abs() < 0.005);
        }
        // above the threshold the seeded Monte Carlo path is used
        let avg = Averaging {
            l_exact: 5,
            mc_samples: 50_000,
            mc_seed: 1,
        };
        let switched = g_avg(&model, 0.0, 10, &theta, &avg).unwrap();
        for (a, b) in exact.iter().flatten().zip(switched.iter().flatten()) {
            assert!((a - b).abs() < 0.01);
        }
    }

    #[test]
    fn rate_matrix_rows() {
        let f = generator(&vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(f, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let f = generator(&vec![vec![0.3, 0.7], vec![0.4, 0.6]]);
        assert!((f[0][0] + 0.7).abs() < 1e-15 && f[0][1] == 0.7);
        let model = ChoiceModel::new(
            StateSpace::three_state(),
            FeatureMapSpec::new(vec![Feature::Constant, Feature::Fraction { state: "T".into() }]),
            vec![0.1, 1.0, -0.4, 0.3],
        )
        .unwrap();
        for l in 0..6 {
            let f = rate_matrix(&model, 0.0, l, &[0.2, 0.3, 0.5], &Averaging::default()).unwrap();
            for row in f {
                assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_exponential_solution() {
        let (a, b) = (0.3, 0.2);
        let q = isolated_q();
        let rho0 = PopulationVector::uniform(&q, &[0.9, 0.1]).unwrap();
        let ode = OdeSpec::new(10.0);
        let tr = integrate(&q, &rho0, &constant_rates(a, b), labels2(), &ode).unwrap();
        assert_eq!(tr.len(), 1001);
        for (t, s) in tr.times().iter().zip(tr.states()) {
            assert!((s[0] - analytic(a, b, 0.9, *t)).abs() < 1e-6);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rk4_fourth_order() {
        let (a, b) = (0.6, 0.3);
        let q = isolated_q();
        let rho0 = PopulationVector::uniform(&q, &[0.0, 1.0]).unwrap();
        let err = |h: f64| {
            let ode = OdeSpec::new(4.0).with_h(h).with_output_times(vec![4.0]);
            let tr = integrate(&q, &rho0, &constant_rates(a, b), labels2(), &ode).unwrap();
            (tr.last().unwrap()[0] - analytic(a, b, 0.0, 4.0)).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.5, "ratio {ratio}");
    }

    #[test]
    fn no_switching_is_constant() {
        let stay = TwoStateLogits::new(AffineLogit::new(-800.0, 0.0, 0.0), AffineLogit::new(800.0, 0.0, 0.0));
        let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 80).with_seed(3)).unwrap();
        let q = JointDegreeDistribution::from_graph(&g);
        let rho0 = PopulationVector::uniform(&q, &[0.35, 0.65]).unwrap();
        let tr = integrate(&q, &rho0, &stay, labels2(), &OdeSpec::new(5.0)).unwrap();
        for s in tr.states() {
            assert!((s[0] - 0.35).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_model_relaxes_to_half() {
        // no in-degree-0 class: there q = 0 breaks the T/H mirror symmetry
        let q = JointDegreeDistribution::new(
            [((1, 1), 0.3), ((1, 3), 0.2), ((2, 2), 0.4), ((4, 0), 0.1)]
                .into_iter()
                .collect(),
        )
        .unwrap();
        let rho0 = PopulationVector::uniform(&q, &[0.9, 0.1]).unwrap();
        let ode = OdeSpec::new(400.0).with_h(0.05).with_output_times(vec![400.0]);
        let tr = integrate(&q, &rho0, &TwoStateLogits::symmetric(-1.0, 2.0), labels2(), &ode).unwrap();
        assert!((tr.last().unwrap()[0] - 0.5).abs() < 1e-6);
    }

    fn steady_theta(q: &JointDegreeDistribution, logits: TwoStateLogits, act: Activation, init: f64) -> f64 {
        let rho0 = PopulationVector::uniform(q, &[init, 1.0 - init]).unwrap();
        let ode = OdeSpec::new(200.0)
            .with_h(0.05)
            .with_activation(act)
            .with_output_times(vec![200.0]);
        let tr = integrate(q, &rho0, &logits, labels2(), &ode).unwrap();
        theta_path(q, &tr).unwrap()[0][0]
    }

    #[test]
    fn stationary_point_matches_fixed_point() {
        let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 500).with_seed(2)).unwrap();
        let q = JointDegreeDistribution::from_graph(&g);
        let logits = TwoStateLogits::new(AffineLogit::new(-0.5, 0.0, 2.0), AffineLogit::new(0.2, 0.0, 1.5));
        let ctx = PhiContext::new(&q, logits, 0.0).unwrap();
        let star = solve_fixed_point(&ctx).unwrap().theta_star;
        assert!((steady_theta(&q, logits, Activation::Unit, 0.35) - star).abs() < 1e-4);

        // with in-degree activation, sources keep their initial state
        let frozen = ctx.with_static_isolated(0.35).unwrap();
        let star = solve_fixed_point(&frozen).unwrap().theta_star;
        assert!((steady_theta(&q, logits, Activation::InDegree, 0.35) - star).abs() < 1e-4);
    }

    #[test]
    fn instability_reported() {
        // switch probability one at a step far too large for the stiff rates
        let q = JointDegreeDistribution::new([((40, 1), 1.0)].into_iter().collect()).unwrap();
        let flip = constant_rates(1.0 - 1e-12, 1.0 - 1e-12);
        let rho0 = PopulationVector::uniform(&q, &[1.0, 0.0]).unwrap();
        let ode = OdeSpec::new(10.0).with_h(5.0).with_activation(Activation::InDegree);
        assert!(matches!(
            integrate(&q, &rho0, &flip, labels2(), &ode),
            Err(Error::IntegrationInstability { .. })
        ));
    }

    #[test]
    fn population_vector_support_checked() {
        let g = DirectedGraph::new(3, vec![(1, 0), (2, 0)]).unwrap();
        let q = JointDegreeDistribution::from_graph(&g);
        let mut rho = BTreeMap::new();
        rho.insert(0, vec![1.0, 0.0]);
        let partial = PopulationVector::new(rho).unwrap();
        assert!(partial.check_support(&q).is_err());
        assert!(PopulationVector::uniform(&q, &[0.7, 0.2]).is_err());
    }

    #[test]
    fn prediction_with_zero_horizon_is_initial_point() {
        let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 100).with_seed(9)).unwrap();
        let q = JointDegreeDistribution::from_graph(&g);
        let records = vec![TransitionRecord {
            step: 0,
            node: 1,
            u: 0.0,
            l: 1,
            n: vec![1, 0],
            w: None,
            prev: 1,
            next: 0,
        }];
        let rho0 = PopulationVector::uniform(&q, &[0.3, 0.7]).unwrap();
        let (_, tr) = predict_from_fit(
            &records,
            &q,
            &rho0,
            &StateSpace::two_state(),
            &FitMethod::Plugin { buckets: 2 },
            &OdeSpec::new(0.0),
        )
        .unwrap();
        assert_eq!(tr.len(), 1);
        assert!((tr.states()[0][0] - 0.3).abs() < 1e-12);
    }
}
