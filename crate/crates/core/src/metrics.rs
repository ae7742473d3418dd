//! Agreement between simulated and predicted trajectories, and the
//! fit-then-predict validation protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{self, InitSpec, SimSpec};
use crate::error::{Error, Result};
use crate::graph::{DirectedGraph, JointDegreeDistribution};
use crate::mfd::{integrate, Activation, FitMethod, OdeSpec, PopulationVector};
use crate::rum::StateSpace;
use crate::trajectory::Trajectory;

pub const DEFAULT_EPS: f64 = 1e-9;

/// Union of both time grids restricted to their overlap.
pub fn common_grid(a: &Trajectory, b: &Trajectory) -> Result<Vec<f64>> {
    let (Some(&a0), Some(&b0)) = (a.times().first(), b.times().first()) else {
        return Err(Error::InsufficientData("empty trajectory".into()));
    };
    let lo = a0.max(b0);
    let hi = a.times().last().unwrap().min(*b.times().last().unwrap());
    let mut grid: Vec<f64> = a
        .times()
        .iter()
        .chain(b.times())
        .copied()
        .filter(|t| (lo..=hi).contains(t))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Plain Pearson coefficient of two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "correlated series",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("first series"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("second series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of one state's fraction after resampling both trajectories
/// onto their common grid.
pub fn pearson_correlation(a: &Trajectory, b: &Trajectory, state: &str) -> Result<f64> {
    let (za, zb) = (a.state_index(state)?, b.state_index(state)?);
    let grid = common_grid(a, b)?;
    let x: Vec<f64> = grid.iter().map(|&t| a.at(t)[za]).collect();
    let y: Vec<f64> = grid.iter().map(|&t| b.at(t)[zb]).collect();
    pearson(&x, &y)
}

fn floor_normalise(p: &[f64], eps: f64) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|x| x.max(eps)).collect();
    let s: f64 = f.iter().sum();
    f.iter().map(|x| x / s).collect()
}

/// KL(p ‖ q) after flooring both at `eps` and renormalising.
pub fn kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let (p, q) = (floor_normalise(p, eps), floor_normalise(q, eps));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Time-averaged KL(a_t ‖ b_t) on the common grid; `a` is the empirical
/// side.
pub fn mean_kl(a: &Trajectory, b: &Trajectory, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidSpec(format!("eps must be positive, got {eps}")));
    }
    if a.labels() != b.labels() {
        return Err(Error::InvalidSpec("trajectories have different state labels".into()));
    }
    let grid = common_grid(a, b)?;
    if grid.is_empty() {
        return Err(Error::InsufficientData("trajectories do not overlap in time".into()));
    }
    Ok(grid.iter().map(|&t| kl(&a.at(t), &b.at(t), eps)).sum::<f64>() / grid.len() as f64)
}

/// What each seed's prediction is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Pointwise mean of the held-out trajectories over all seeds.
    #[default]
    SeedMean,
    /// The seed's own held-out trajectory.
    PerSeed,
}

fn default_window() -> usize {
    150
}

fn default_state() -> String {
    "T".into()
}

fn default_h() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    /// Transitions used for fitting.
    #[serde(default = "default_window")]
    pub fit_window: usize,
    pub seeds: Vec<u64>,
    pub method: FitMethod,
    #[serde(default = "default_state")]
    pub state: String,
    #[serde(default)]
    pub target: Target,
    #[serde(default = "default_h")]
    pub h: f64,
}

impl ValidationSpec {
    pub fn new(method: FitMethod, seeds: usize) -> Self {
        ValidationSpec {
            fit_window: default_window(),
            seeds: (0..seeds as u64).collect(),
            method,
            state: default_state(),
            target: Target::SeedMean,
            h: default_h(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub correlation: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub method: String,
    pub fit_window: usize,
    pub per_seed: Vec<SeedScore>,
    pub correlation_mean: f64,
    pub correlation_std: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct SeedRun {
    held_out: Trajectory,
    predicted: Trajectory,
}

fn run_seed(
    g: &DirectedGraph,
    q: &JointDegreeDistribution,
    init: &InitSpec,
    sim: &SimSpec,
    spec: &ValidationSpec,
    space: &StateSpace,
) -> Result<SeedRun> {
    let res = abm::run(g, init, sim)?;
    let window = spec.fit_window;
    let boundary = res.trajectory.times()[window];
    let held_out = res.trajectory.tail_from(boundary);
    let rho0 = PopulationVector::new(
        held_out
            .per_degree()
            .iter()
            .map(|(&l, rows)| (l, rows[0].clone()))
            .collect(),
    )?;
    let kernel = spec.method.fit(&res.transitions[..window], space)?;
    let offsets: Vec<f64> = held_out.times().iter().map(|t| t - boundary).collect();
    let ode = OdeSpec::new(*offsets.last().unwrap())
        .with_h(spec.h)
        .with_u(sim.u)
        .with_activation(Activation::InDegree)
        .with_output_times(offsets);
    let rel = integrate(q, &rho0, &kernel, space.labels().to_vec(), &ode)?;
    let predicted = Trajectory::new(rel.labels().to_vec(), held_out.times().to_vec(), rel.states().to_vec())?;
    Ok(SeedRun {
        held_out: Trajectory::new(
            held_out.labels().to_vec(),
            held_out.times().to_vec(),
            held_out.states().to_vec(),
        )?,
        predicted,
    })
}

/// For each seed: simulate sequentially, fit on the first `fit_window`
/// transitions, integrate the mean-field model from the empirical state at
/// the window boundary, and score the prediction on the held-out part.
pub fn validate_protocol(
    g: &DirectedGraph,
    init: &InitSpec,
    sim: &SimSpec,
    spec: &ValidationSpec,
) -> Result<ValidationReport> {
    if spec.seeds.is_empty() {
        return Err(Error::InvalidSpec("validation needs at least one seed".into()));
    }
    if sim.steps <= spec.fit_window as u64 + 1 {
        return Err(Error::InsufficientData(format!(
            "{} steps leave no held-out trajectory after a fit window of {}",
            sim.steps, spec.fit_window
        )));
    }
    let kernel = sim
        .models
        .classes
        .first()
        .ok_or_else(|| Error::InvalidSpec("no model classes".into()))?;
    let space = kernel.kernel.space();
    let q = JointDegreeDistribution::from_graph(g);
    let mut base = sim.clone();
    base.mode = abm::Mode::Sequential;
    base.log_transitions = true;
    base.record_every = 1;
    base.record_per_degree = true;

    let runs = spec
        .seeds
        .par_iter()
        .map(|&seed| run_seed(g, &q, init, &SimSpec { seed, ..base.clone() }, spec, &space))
        .collect::<Result<Vec<_>>>()?;

    let mean = match spec.target {
        Target::SeedMean => Some(Trajectory::mean(
            &runs.iter().map(|r| r.held_out.clone()).collect::<Vec<_>>(),
        )?),
        Target::PerSeed => None,
    };
    let per_seed = spec
        .seeds
        .iter()
        .zip(&runs)
        .map(|(&seed, run)| {
            let empirical = mean.as_ref().unwrap_or(&run.held_out);
            Ok(SeedScore {
                seed,
                correlation: pearson_correlation(empirical, &run.predicted, &spec.state)?,
                kl: mean_kl(empirical, &run.predicted, DEFAULT_EPS)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (correlation_mean, correlation_std) = mean_std(&per_seed.iter().map(|s| s.correlation).collect::<Vec<_>>());
    let (kl_mean, kl_std) = mean_std(&per_seed.iter().map(|s| s.kl).collect::<Vec<_>>());
    Ok(ValidationReport {
        method: match spec.method {
            FitMethod::Rum { .. } => "rum".into(),
            FitMethod::Plugin { .. } => "plugin".into(),
        },
        fit_window: spec.fit_window,
        per_seed,
        correlation_mean,
        correlation_std,
        kl_mean,
        kl_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abm::ModelAssignment;
    use crate::graph::{generate, GraphGenSpec, GraphModel};
    use crate::rum::{Feature, FeatureMapSpec};
    use crate::twostate::{AffineLogit, TwoStateLogits};
    use proptest::prelude::*;

    fn traj(times: Vec<f64>, t_share: Vec<f64>) -> Trajectory {
        let states = t_share.iter().map(|&p| vec![p, 1.0 - p]).collect();
        Trajectory::new(vec!["T".into(), "H".into()], times, states).unwrap()
    }

    #[test]
    fn pearson_examples() {
        let a = traj(vec![0.0, 1.0, 2.0, 3.0], vec![0.1, 0.4, 0.2, 0.8]);
        assert!((pearson_correlation(&a, &a, "T").unwrap() - 1.0).abs() < 1e-12);
        let b = traj(vec![0.0, 1.0, 2.0, 3.0], vec![0.15, 0.3, 0.2, 0.5]);
        // b = 0.5·a + 0.1
        assert!((pearson_correlation(&a, &b, "T").unwrap() - 1.0).abs() < 1e-12);
        // H is the mirror image of T
        assert!((pearson_correlation(&a, &b, "H").unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[0.0, 1.0, 2.0], &[0.0, 2.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_is_an_error() {
        let a = traj(vec![0.0, 1.0], vec![0.3, 0.3]);
        let b = traj(vec![0.0, 1.0], vec![0.1, 0.3]);
        assert!(matches!(
            pearson_correlation(&a, &b, "T"),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn union_grid_interpolates() {
        let a = traj(vec![0.0, 2.0], vec![0.0, 1.0]);
        let b = traj(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.5, 1.0, 1.0]);
        assert_eq!(common_grid(&a, &b).unwrap(), vec![0.0, 1.0, 2.0]);
        assert!((pearson_correlation(&a, &b, "T").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let a = traj(vec![0.0], vec![1.0]);
        let b = traj(vec![0.0], vec![0.5]);
        assert!((mean_kl(&a, &b, 1e-9).unwrap() - std::f64::consts::LN_2).abs() < 1e-7);
        assert_eq!(mean_kl(&a, &a, 1e-9).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(p in 0.0f64..=1.0, q in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let a = [p, (1.0 - p) * r, (1.0 - p) * (1.0 - r)];
            let b = [q, 1.0 - q, 0.0];
            prop_assert!(kl(&a, &b, 1e-9) >= 0.0);
            prop_assert!(kl(&a, &a, 1e-9).abs() < 1e-12);
        }

        #[test]
        fn pearson_symmetric_and_scale_invariant(
            xs in prop::collection::vec(0.0f64..1.0, 3..20),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + i as f64 * 0.01).collect();
            if let (Ok(a), Ok(b)) = (pearson(&xs, &ys), pearson(&ys, &xs)) {
                prop_assert!((a - b).abs() < 1e-12);
                let scaled: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
                prop_assert!((pearson(&scaled, &ys).unwrap() - a).abs() < 1e-9);
            }
        }
    }

    fn relaxing_setup() -> (DirectedGraph, InitSpec, SimSpec) {
        let g = generate(&GraphGenSpec::new(GraphModel::Powerlaw, 100).with_seed(3)).unwrap();
        let kernel = TwoStateLogits::new(AffineLogit::new(-2.0, 0.0, 0.0), AffineLogit::new(1.0, 0.0, 0.0));
        let sim = SimSpec::sequential(ModelAssignment::single(kernel), 1000, 0);
        (g, InitSpec::random(vec![0.9, 0.1]), sim)
    }

    #[test]
    fn constant_kernel_recovered() {
        let (g, init, sim) = relaxing_setup();
        let method = FitMethod::Rum {
            features: FeatureMapSpec::new(vec![Feature::Constant, Feature::CurrentState { state: "T".into() }]),
            l2: 0.0,
        };
        let spec = ValidationSpec::new(method, 6);
        let report = validate_protocol(&g, &init, &sim, &spec).unwrap();
        assert_eq!(report.per_seed.len(), 6);
        assert!(report.correlation_mean >= 0.95, "{report:?}");
        let again = validate_protocol(&g, &init, &sim, &spec).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn window_covering_everything_is_an_error() {
        let (g, init, mut sim) = relaxing_setup();
        sim.steps = 150;
        let spec = ValidationSpec::new(FitMethod::Plugin { buckets: 2 }, 2);
        assert!(matches!(
            validate_protocol(&g, &init, &sim, &spec),
            Err(Error::InsufficientData(_))
        ));
    }
}
