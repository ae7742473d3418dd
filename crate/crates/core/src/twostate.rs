//! Fixed-point analysis of the two-state (truthful / hallucinating) system.
//!
//! Each in-degree class relaxes to the share ρ_l(θ) = A_l / (A_l + B_l),
//! where A_l and B_l are the expected H→T and T→H switching probabilities
//! when the number of truthful influencers is Bin(l, θ). The edge-weighted
//! average of these shares is the scalar map Φ(θ); its fixed points are the
//! network equilibria.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::JointDegreeDistribution;
use crate::kernel::{check_counts, check_state, TransitionKernel};

pub const TRUTHFUL: usize = 0;
pub const HALLUCINATING: usize = 1;

/// Δ(u, q) = c0 + cu·u + cq·q.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineLogit {
    pub c0: f64,
    pub cu: f64,
    pub cq: f64,
}

impl AffineLogit {
    pub fn new(c0: f64, cu: f64, cq: f64) -> Self {
        AffineLogit { c0, cu, cq }
    }

    pub fn eval(&self, u: f64, q: f64) -> f64 {
        self.c0 + self.cu * u + self.cq * q
    }
}

/// T-versus-H logits conditioned on the current state: `delta_h` drives
/// H→T, `delta_t` drives staying truthful.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStateLogits {
    pub delta_h: AffineLogit,
    pub delta_t: AffineLogit,
}

impl TwoStateLogits {
    pub fn new(delta_h: AffineLogit, delta_t: AffineLogit) -> Self {
        TwoStateLogits { delta_h, delta_t }
    }

    /// Both logits equal to `c0 + cq·q`.
    pub fn symmetric(c0: f64, cq: f64) -> Self {
        let d = AffineLogit::new(c0, 0.0, cq);
        TwoStateLogits::new(d, d)
    }

    pub fn num_states(&self) -> usize {
        2
    }

    fn finite(&self) -> bool {
        [self.delta_h, self.delta_t]
            .iter()
            .all(|d| d.c0.is_finite() && d.cu.is_finite() && d.cq.is_finite())
    }
}

impl FromStr for TwoStateLogits {
    type Err = Error;

    /// `c0H,cuH,cqH,c0T,cuT,cqT`
    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("logit coefficient `{x}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 6 {
            return Err(Error::Parse(format!("expected 6 logit coefficients, got {}", v.len())));
        }
        let logits = TwoStateLogits::new(AffineLogit::new(v[0], v[1], v[2]), AffineLogit::new(v[3], v[4], v[5]));
        if !logits.finite() {
            return Err(Error::Parse("logit coefficients must be finite".into()));
        }
        Ok(logits)
    }
}

impl TransitionKernel for TwoStateLogits {
    fn num_states(&self) -> usize {
        2
    }

    fn transition_probs(&self, u: f64, counts: &[u32], prev: usize) -> Result<Vec<f64>> {
        check_counts(counts, 2)?;
        check_state(prev, 2)?;
        let l = counts[TRUTHFUL] + counts[HALLUCINATING];
        let (to_t, to_h) = kernel_rates(self, u, l as usize, counts[TRUTHFUL] as usize)?;
        Ok(if prev == TRUTHFUL {
            vec![1.0 - to_h, to_h]
        } else {
            vec![to_t, 1.0 - to_t]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

fn fraction(l: usize, m: usize) -> f64 {
    if l == 0 {
        0.0
    } else {
        m as f64 / l as f64
    }
}

/// (κ_{H,T}, κ_{T,H}) with `m` truthful influencers out of `l`.
pub fn kernel_rates(logits: &TwoStateLogits, u: f64, l: usize, m: usize) -> Result<(f64, f64)> {
    if m > l {
        return Err(Error::InvalidSpec(format!("truthful count {m} exceeds in-degree {l}")));
    }
    let q = fraction(l, m);
    Ok((sigmoid(logits.delta_h.eval(u, q)), sigmoid(-logits.delta_t.eval(u, q))))
}

/// Bin(l, θ) probability mass, computed in log space.
pub fn binomial_pmf(l: usize, theta: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; l + 1];
    if theta <= 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    if theta >= 1.0 {
        pmf[l] = 1.0;
        return pmf;
    }
    let (ln_t, ln_f) = (theta.ln(), (1.0 - theta).ln());
    let mut ln_choose = 0.0;
    for (m, p) in pmf.iter_mut().enumerate() {
        if m > 0 {
            ln_choose += ((l - m + 1) as f64).ln() - (m as f64).ln();
        }
        *p = (ln_choose + m as f64 * ln_t + (l - m) as f64 * ln_f).exp();
    }
    pmf
}

/// A_l = E[κ_{H,T}], B_l = E[κ_{T,H}] with M ~ Bin(l, θ).
pub fn a_b(logits: &TwoStateLogits, u: f64, l: usize, theta: f64) -> (f64, f64) {
    let pmf = binomial_pmf(l, theta);
    let mut a = 0.0;
    let mut b = 0.0;
    for (m, p) in pmf.iter().enumerate() {
        let q = fraction(l, m);
        a += p * sigmoid(logits.delta_h.eval(u, q));
        b += p * sigmoid(-logits.delta_t.eval(u, q));
    }
    (a, b)
}

/// θ-derivatives of (A_l, B_l) via the forward-difference identity
/// d/dθ E f(M) = l·E[f(M'+1) − f(M')], M' ~ Bin(l−1, θ).
fn a_b_theta(logits: &TwoStateLogits, u: f64, l: usize, theta: f64) -> (f64, f64) {
    if l == 0 {
        return (0.0, 0.0);
    }
    let pmf = binomial_pmf(l - 1, theta);
    let mut da = 0.0;
    let mut db = 0.0;
    for (m, p) in pmf.iter().enumerate() {
        let (q0, q1) = (fraction(l, m), fraction(l, m + 1));
        da += p * (sigmoid(logits.delta_h.eval(u, q1)) - sigmoid(logits.delta_h.eval(u, q0)));
        db += p * (sigmoid(-logits.delta_t.eval(u, q1)) - sigmoid(-logits.delta_t.eval(u, q0)));
    }
    (l as f64 * da, l as f64 * db)
}

/// u-derivatives of (A_l, B_l).
fn a_b_u(logits: &TwoStateLogits, u: f64, l: usize, theta: f64) -> (f64, f64) {
    let pmf = binomial_pmf(l, theta);
    let mut da = 0.0;
    let mut db = 0.0;
    for (m, p) in pmf.iter().enumerate() {
        let q = fraction(l, m);
        da += p * sigmoid_prime(logits.delta_h.eval(u, q)) * logits.delta_h.cu;
        db -= p * sigmoid_prime(logits.delta_t.eval(u, q)) * logits.delta_t.cu;
    }
    (da, db)
}

/// Degree weights and logits for Φ.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiContext {
    logits: TwoStateLogits,
    u: f64,
    /// (l, Σ_m m Q(l,m) / Σ m Q) for classes that source edges.
    edge_weights: Vec<(usize, f64)>,
    /// In-degrees with positive node mass.
    support: Vec<usize>,
    static_isolated: Option<f64>,
}

impl PhiContext {
    pub fn new(q: &JointDegreeDistribution, logits: TwoStateLogits, u: f64) -> Result<Self> {
        if !logits.finite() || !u.is_finite() {
            return Err(Error::InvalidSpec("logits and control must be finite".into()));
        }
        let edge_weights = q.edge_source_weights()?.into_iter().filter(|&(_, w)| w > 0.0).collect();
        Ok(PhiContext {
            logits,
            u,
            edge_weights,
            support: q.in_degree_support(),
            static_isolated: None,
        })
    }

    /// Holds in-degree-0 nodes at a fixed truthful share instead of letting
    /// them relax on intercepts. Matches the simulator, where nodes without
    /// influencers are never activated.
    pub fn with_static_isolated(mut self, truthful_share: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&truthful_share) {
            return Err(Error::InvalidSpec(format!(
                "isolated truthful share {truthful_share} outside [0, 1]"
            )));
        }
        self.static_isolated = Some(truthful_share);
        Ok(self)
    }

    pub fn with_control(&self, u: f64) -> Self {
        PhiContext { u, ..self.clone() }
    }

    pub fn logits(&self) -> &TwoStateLogits {
        &self.logits
    }

    pub fn control(&self) -> f64 {
        self.u
    }

    pub fn edge_weights(&self) -> &[(usize, f64)] {
        &self.edge_weights
    }

    fn is_static(&self, l: usize) -> bool {
        l == 0 && self.static_isolated.is_some()
    }

    /// Steady truthful share of in-degree class `l` at edge-truth rate θ.
    pub fn rho_l(&self, l: usize, theta: f64) -> Result<f64> {
        if self.is_static(l) {
            return Ok(self.static_isolated.unwrap_or_default());
        }
        let (a, b) = a_b(&self.logits, self.u, l, theta);
        if a + b <= 0.0 {
            return Err(Error::DegenerateSwitching { l, theta });
        }
        Ok(a / (a + b))
    }
}

pub fn phi(ctx: &PhiContext, theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidSpec(format!("theta {theta} outside [0, 1]")));
    }
    let mut acc = 0.0;
    for &(l, w) in &ctx.edge_weights {
        acc += w * ctx.rho_l(l, theta)?;
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// Analytic Φ'(θ).
pub fn phi_prime(ctx: &PhiContext, theta: f64) -> Result<f64> {
    let mut acc = 0.0;
    for &(l, w) in &ctx.edge_weights {
        if ctx.is_static(l) || l == 0 {
            continue;
        }
        let (a, b) = a_b(&ctx.logits, ctx.u, l, theta);
        let s = a + b;
        if s <= 0.0 {
            return Err(Error::DegenerateSwitching { l, theta });
        }
        let (da, db) = a_b_theta(&ctx.logits, ctx.u, l, theta);
        acc += w * (da * b - a * db) / (s * s);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Picard,
    Bisection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub theta_star: f64,
    pub residual: f64,
    pub method: SolveMethod,
    pub iterations: usize,
    /// Roots bracketed by sign changes of Φ(θ) − θ on a 1e-3 grid.
    pub bracketed_roots: Vec<f64>,
}

pub const PICARD_TOL: f64 = 1e-10;
pub const PICARD_MAX_ITER: usize = 100_000;

/// θ ← Φ(θ) until successive iterates differ by less than `tol`.
/// Returns (θ, iterations, converged).
pub fn picard(ctx: &PhiContext, theta0: f64, tol: f64, max_iter: usize) -> Result<(f64, usize, bool)> {
    let mut theta = theta0;
    for it in 1..=max_iter {
        let next = phi(ctx, theta)?;
        if (next - theta).abs() < tol {
            return Ok((next, it, true));
        }
        theta = next;
    }
    Ok((theta, max_iter, false))
}

fn bisect(ctx: &PhiContext, mut lo: f64, mut hi: f64) -> Result<(f64, usize)> {
    let g = |t: f64| phi(ctx, t).map(|p| p - t);
    let mut g_lo = g(lo)?;
    let mut iterations = 0;
    while hi - lo > 1e-14 && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        let g_mid = g(mid)?;
        iterations += 1;
        if g_mid == 0.0 {
            return Ok((mid, iterations));
        }
        if (g_mid > 0.0) == (g_lo > 0.0) {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi), iterations))
}

/// Every sign change of Φ(θ) − θ on a grid of the given resolution,
/// refined by bisection. Not exhaustive below the resolution.
pub fn scan_roots(ctx: &PhiContext, resolution: f64) -> Result<Vec<f64>> {
    let n = (1.0 / resolution).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let g: Vec<f64> = grid
        .iter()
        .map(|&t| phi(ctx, t).map(|p| p - t))
        .collect::<Result<_>>()?;
    let mut roots = Vec::new();
    for i in 0..n {
        if g[i] == 0.0 {
            roots.push(grid[i]);
        } else if g[i] * g[i + 1] < 0.0 {
            roots.push(bisect(ctx, grid[i], grid[i + 1])?.0);
        }
    }
    if g[n] == 0.0 {
        roots.push(grid[n]);
    }
    Ok(roots)
}

pub fn solve_fixed_point(ctx: &PhiContext) -> Result<FixedPointReport> {
    let (theta, iterations, converged) = picard(ctx, 0.5, PICARD_TOL, PICARD_MAX_ITER)?;
    let (theta_star, method, iterations) = if converged {
        (theta, SolveMethod::Picard, iterations)
    } else {
        // g(0) >= 0 and g(1) <= 0 because Φ maps into [0, 1]
        let (root, it) = bisect(ctx, 0.0, 1.0)?;
        (root, SolveMethod::Bisection, it)
    };
    Ok(FixedPointReport {
        theta_star,
        residual: (phi(ctx, theta_star)? - theta_star).abs(),
        method,
        iterations,
        bracketed_roots: scan_roots(ctx, 1e-3)?,
    })
}

pub const GRID_POINTS: usize = 1001;
pub const DEGENERACY_TOL: f64 = 1e-12;

fn grid() -> impl Iterator<Item = f64> {
    (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64)
}

/// Smallest A_l + B_l over the θ-grid and the switching in-degrees,
/// with its location.
fn eta(ctx: &PhiContext) -> (f64, usize, f64) {
    let mut best = (f64::INFINITY, 0, 0.0);
    for theta in grid() {
        for &l in &ctx.support {
            if ctx.is_static(l) {
                continue;
            }
            let (a, b) = a_b(&ctx.logits, ctx.u, l, theta);
            if a + b < best.0 {
                best = (a + b, l, theta);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub s_h: f64,
    pub s_t: f64,
    pub eta: f64,
    pub bound: f64,
    pub is_contraction: bool,
    /// Largest |ΔΦ/Δθ| between grid neighbours.
    pub measured_lipschitz: f64,
}

pub fn contraction_check(ctx: &PhiContext) -> Result<ContractionReport> {
    let s_h = ctx.logits.delta_h.cq.abs();
    let s_t = ctx.logits.delta_t.cq.abs();
    let (eta, _, _) = eta(ctx);
    let slope = s_h.max(s_t);
    let bound = if slope == 0.0 { 0.0 } else { slope / (4.0 * eta) };
    let values: Vec<f64> = grid().map(|t| phi(ctx, t)).collect::<Result<_>>()?;
    let h = 1.0 / (GRID_POINTS - 1) as f64;
    let mut measured: f64 = 0.0;
    for i in 0..GRID_POINTS {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(GRID_POINTS - 1));
        measured = measured.max(((values[hi] - values[lo]) / ((hi - lo) as f64 * h)).abs());
    }
    Ok(ContractionReport {
        s_h,
        s_t,
        eta,
        bound,
        is_contraction: bound < 1.0,
        measured_lipschitz: measured,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparativeStatics {
    pub dtheta_du: f64,
    pub phi_u: f64,
    pub phi_theta: f64,
}

/// dθ*/du = Φ_u / (1 − Φ_θ) at a fixed point, with
/// ∂_u ρ_l = (A_{l,u} B_l − A_l B_{l,u}) / (A_l + B_l)².
pub fn comparative_statics(ctx: &PhiContext, theta_star: f64) -> Result<ComparativeStatics> {
    let mut phi_u = 0.0;
    for &(l, w) in &ctx.edge_weights {
        if ctx.is_static(l) {
            continue;
        }
        let (a, b) = a_b(&ctx.logits, ctx.u, l, theta_star);
        let s = a + b;
        if s <= 0.0 {
            return Err(Error::DegenerateSwitching { l, theta: theta_star });
        }
        let (a_u, b_u) = a_b_u(&ctx.logits, ctx.u, l, theta_star);
        phi_u += w * (a_u * b - a * b_u) / (s * s);
    }
    let phi_theta = phi_prime(ctx, theta_star)?;
    let margin = 1.0 - phi_theta;
    if margin <= 0.0 {
        return Err(Error::UnstableFixedPoint { margin });
    }
    Ok(ComparativeStatics {
        dtheta_du: phi_u / margin,
        phi_u,
        phi_theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub a1: bool,
    pub a2: bool,
    pub a3: bool,
    pub a4: bool,
    pub witnesses: Vec<String>,
}

/// Monotone influence (A1), bounded slopes (A2), non-degenerate switching
/// (A3) and incentive direction (A4) for affine logits.
pub fn check_assumptions(ctx: &PhiContext) -> AssumptionReport {
    let logits = ctx.logits;
    let mut witnesses = Vec::new();
    let mut sign_check = |name: &str, field: &str, h: f64, t: f64| {
        let mut ok = true;
        for (which, v) in [("delta_h", h), ("delta_t", t)] {
            if v < 0.0 {
                ok = false;
                witnesses.push(format!("{name}: {which}.{field} = {v} < 0"));
            }
        }
        ok
    };
    let a1 = sign_check("A1", "cq", logits.delta_h.cq, logits.delta_t.cq);
    let a4 = sign_check("A4", "cu", logits.delta_h.cu, logits.delta_t.cu);
    let a2 = logits.finite();
    if !a2 {
        witnesses.push("A2: non-finite slope".into());
    }
    let (eta, l, theta) = eta(ctx);
    let a3 = eta > DEGENERACY_TOL;
    if !a3 {
        witnesses.push(format!("A3: A_l + B_l = {eta:e} at l = {l}, theta = {theta}"));
    }
    AssumptionReport {
        a1,
        a2,
        a3,
        a4,
        witnesses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, GraphGenSpec, GraphModel};
    use std::collections::BTreeMap;

    fn q_small() -> JointDegreeDistribution {
        // l ∈ {1, 2} with out-degrees 1..3
        let mut e = BTreeMap::new();
        e.insert((1, 1), 0.3);
        e.insert((1, 3), 0.2);
        e.insert((2, 2), 0.4);
        e.insert((2, 0), 0.1);
        JointDegreeDistribution::new(e).unwrap()
    }

    fn dense_q() -> JointDegreeDistribution {
        let mut spec = GraphGenSpec::new(GraphModel::Er, 200).with_seed(4);
        spec.er_p = 0.05;
        JointDegreeDistribution::from_graph(&generate(&spec).unwrap())
    }

    #[test]
    fn kernel_rate_examples() {
        let zero = TwoStateLogits::default();
        assert_eq!(kernel_rates(&zero, 0.0, 3, 1).unwrap().0, 0.5);
        let lin = TwoStateLogits::symmetric(-1.0, 2.0);
        let (to_t, _) = kernel_rates(&lin, 0.0, 2, 2).unwrap();
        assert!((to_t - 0.731_058_578_630_004_9).abs() < 1e-15);
        let sticky = TwoStateLogits::new(AffineLogit::default(), AffineLogit::new(60.0, 0.0, 0.0));
        assert!(kernel_rates(&sticky, 0.0, 2, 0).unwrap().1 < 1e-25);
        assert!(kernel_rates(&lin, 0.0, 2, 3).is_err());
    }

    #[test]
    fn a_b_special_cases() {
        let lin = TwoStateLogits::symmetric(-1.0, 2.0);
        let (a0, _) = a_b(&lin, 0.0, 0, 0.7);
        assert!((a0 - sigmoid(-1.0)).abs() < 1e-15);
        let (a1, _) = a_b(&lin, 0.0, 1, 0.5);
        assert!((a1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn binomial_pmf_sums_to_one() {
        for l in [0, 1, 5, 30, 200] {
            for t in [0.0, 0.1, 0.5, 0.93, 1.0] {
                let s: f64 = binomial_pmf(l, t).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "l={l} t={t} s={s}");
            }
        }
    }

    #[test]
    fn phi_symmetric_at_half() {
        let ctx = PhiContext::new(&q_small(), TwoStateLogits::symmetric(-1.0, 2.0), 0.0).unwrap();
        assert!((phi(&ctx, 0.5).unwrap() - 0.5).abs() < 1e-14);
        let fp = solve_fixed_point(&ctx).unwrap();
        assert!((fp.theta_star - 0.5).abs() < 1e-9);
    }

    #[test]
    fn constant_logits_give_constant_phi() {
        let c = 0.8;
        let ctx = PhiContext::new(&q_small(), TwoStateLogits::symmetric(c, 0.0), 0.0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert!((phi(&ctx, t).unwrap() - sigmoid(c)).abs() < 1e-14);
        }
        let fp = solve_fixed_point(&ctx).unwrap();
        assert_eq!(fp.method, SolveMethod::Picard);
        assert!(fp.iterations <= 2);
        assert!((fp.theta_star - sigmoid(c)).abs() < 1e-14);
    }

    #[test]
    fn phi_matches_direct_resummation() {
        let logits = TwoStateLogits::new(AffineLogit::new(-0.4, 0.0, 1.7), AffineLogit::new(0.2, 0.0, 0.9));
        let q = q_small();
        let ctx = PhiContext::new(&q, logits, 0.0).unwrap();
        let theta: f64 = 0.37;
        // independent re-summation over (l, m) with hand-written binomials
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let rho = |l: usize| {
            let terms: Vec<(f64, f64)> = match l {
                1 => vec![(1.0 - theta, 0.0), (theta, 1.0)],
                2 => vec![
                    ((1.0 - theta).powi(2), 0.0),
                    (2.0 * theta * (1.0 - theta), 0.5),
                    (theta.powi(2), 1.0),
                ],
                _ => unreachable!(),
            };
            let a: f64 = terms.iter().map(|(p, q)| p * s(-0.4 + 1.7 * q)).sum();
            let b: f64 = terms.iter().map(|(p, q)| p * s(-(0.2 + 0.9 * q))).sum();
            a / (a + b)
        };
        let num = 1.0 * 0.3 * rho(1) + 3.0 * 0.2 * rho(1) + 2.0 * 0.4 * rho(2);
        let den = 0.3 + 0.6 + 0.8;
        assert!((phi(&ctx, theta).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn steep_logits_picard_and_bisection_agree_on_a_root() {
        let logits = TwoStateLogits::symmetric(-6.0, 12.0);
        let ctx = PhiContext::new(&dense_q(), logits, 0.0).unwrap();
        let fp = solve_fixed_point(&ctx).unwrap();
        assert!(fp.residual < 1e-9);
        let (root, _) = bisect(&ctx, 0.0, 1.0).unwrap();
        assert!((phi(&ctx, root).unwrap() - root).abs() < 1e-9);
        // the scan finds both solutions
        let near = |x: f64| fp.bracketed_roots.iter().any(|r| (r - x).abs() < 1e-6);
        assert!(near(fp.theta_star), "{fp:?}");
        assert!(near(root), "{fp:?}");
        for r in &fp.bracketed_roots {
            assert!((phi(&ctx, *r).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_slopes_are_contractions() {
        let ctx = PhiContext::new(&q_small(), TwoStateLogits::symmetric(0.3, 0.0), 0.0).unwrap();
        let rep = contraction_check(&ctx).unwrap();
        assert_eq!(rep.bound, 0.0);
        assert!(rep.is_contraction);
        assert!(rep.measured_lipschitz < 1e-12);
    }

    #[test]
    fn linear_symmetric_bound() {
        let ctx = PhiContext::new(&q_small(), TwoStateLogits::symmetric(-1.0, 2.0), 0.0).unwrap();
        let rep = contraction_check(&ctx).unwrap();
        assert_eq!((rep.s_h, rep.s_t), (2.0, 2.0));
        // η is attained at l = 1 where A_1 + B_1 = 2σ(−1) for every θ
        assert!(rep.eta >= 2.0 * sigmoid(-1.0) - 1e-12, "{rep:?}");
        assert!(rep.bound <= 2.0 / (4.0 * 2.0 * sigmoid(-1.0)) + 1e-12);
        assert!(rep.bound < 0.93);
        assert!(rep.measured_lipschitz <= rep.bound);
    }

    #[test]
    fn comparative_statics_closed_form() {
        // Δ = c + u: θ* = σ(c + u), dθ*/du = σ'(c + u)
        let c = -0.3;
        let u = 0.4;
        let d = AffineLogit::new(c, 1.0, 0.0);
        let ctx = PhiContext::new(&q_small(), TwoStateLogits::new(d, d), u).unwrap();
        let fp = solve_fixed_point(&ctx).unwrap();
        let cs = comparative_statics(&ctx, fp.theta_star).unwrap();
        assert!((cs.dtheta_du - sigmoid_prime(c + u)).abs() < 1e-8);

        let flat = PhiContext::new(&q_small(), TwoStateLogits::symmetric(-0.2, 1.5), 0.7).unwrap();
        let fp = solve_fixed_point(&flat).unwrap();
        assert_eq!(comparative_statics(&flat, fp.theta_star).unwrap().dtheta_du, 0.0);
    }

    #[test]
    fn comparative_statics_unstable_root_errors() {
        let ctx = PhiContext::new(&dense_q(), TwoStateLogits::symmetric(-6.0, 12.0), 0.0).unwrap();
        let roots = scan_roots(&ctx, 1e-3).unwrap();
        let unstable = roots
            .iter()
            .find(|&&r| phi_prime(&ctx, r).unwrap() > 1.0)
            .copied()
            .expect("steep symmetric logits have an unstable middle root");
        assert!(matches!(
            comparative_statics(&ctx, unstable),
            Err(Error::UnstableFixedPoint { .. })
        ));
    }

    #[test]
    fn assumptions() {
        let ctx = PhiContext::new(&q_small(), TwoStateLogits::default(), 0.0).unwrap();
        let rep = check_assumptions(&ctx);
        assert!(rep.a1 && rep.a2 && rep.a3 && rep.a4);
        assert!(rep.witnesses.is_empty());

        let bad = TwoStateLogits::new(AffineLogit::new(0.0, 0.0, -1.0), AffineLogit::default());
        let rep = check_assumptions(&PhiContext::new(&q_small(), bad, 0.0).unwrap());
        assert!(!rep.a1);
        assert!(rep.witnesses[0].contains("delta_h.cq"));

        let stuck = TwoStateLogits::new(AffineLogit::new(-50.0, 0.0, 0.0), AffineLogit::new(50.0, 0.0, 0.0));
        let rep = check_assumptions(&PhiContext::new(&q_small(), stuck, 0.0).unwrap());
        assert!(!rep.a3);
    }

    #[test]
    fn logits_parse() {
        let l: TwoStateLogits = "-1,0.5,2,0.3,0,1".parse().unwrap();
        assert_eq!(l.delta_h, AffineLogit::new(-1.0, 0.5, 2.0));
        assert_eq!(l.delta_t, AffineLogit::new(0.3, 0.0, 1.0));
        assert!("1,2,3".parse::<TwoStateLogits>().is_err());
    }

    #[test]
    fn kernel_rows() {
        let l = TwoStateLogits::symmetric(-1.0, 2.0);
        let from_h = l.transition_probs(0.0, &[2, 0], HALLUCINATING).unwrap();
        assert!((from_h[TRUTHFUL] - sigmoid(1.0)).abs() < 1e-15);
        let from_t = l.transition_probs(0.0, &[0, 2], TRUTHFUL).unwrap();
        assert!((from_t[HALLUCINATING] - sigmoid(1.0)).abs() < 1e-15);
    }
}
