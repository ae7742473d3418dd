//! Transition kernels κ(z₁ → z₂ | u, l, n) shared by the simulator and the
//! mean-field predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rum::{ChoiceModel, PluginKernel, StateSpace};
use crate::twostate::TwoStateLogits;

pub trait TransitionKernel {
    fn num_states(&self) -> usize;

    /// Next-state distribution for an agent in state `prev` whose
    /// influencers hold `counts[z]` copies of each state.
    fn transition_probs(&self, u: f64, counts: &[u32], prev: usize) -> Result<Vec<f64>>;
}

/// Any kernel that can be loaded from a model file.
///
/// Deserialization is untagged: a fitted RUM file carries `coeffs`, a plug-in
/// table carries `table`, and two-state logits carry `delta_h`/`delta_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kernel {
    Rum(ChoiceModel),
    Plugin(PluginKernel),
    TwoState(TwoStateLogits),
}

impl Kernel {
    pub fn labels(&self) -> Vec<String> {
        match self {
            Kernel::Rum(m) => m.space().labels().to_vec(),
            Kernel::Plugin(p) => p.labels().to_vec(),
            Kernel::TwoState(_) => vec!["T".into(), "H".into()],
        }
    }

    /// State space with the last label as reference, which is what
    /// `StateSpace::two_state` and `StateSpace::three_state` use.
    pub fn space(&self) -> StateSpace {
        match self {
            Kernel::Rum(m) => m.space().clone(),
            Kernel::Plugin(_) | Kernel::TwoState(_) => {
                let labels = self.labels();
                let reference = labels.len() - 1;
                StateSpace::new(labels, reference).expect("kernel labels form a valid state space")
            }
        }
    }
}

impl TransitionKernel for Kernel {
    fn num_states(&self) -> usize {
        match self {
            Kernel::Rum(m) => m.num_states(),
            Kernel::Plugin(p) => p.num_states(),
            Kernel::TwoState(t) => t.num_states(),
        }
    }

    fn transition_probs(&self, u: f64, counts: &[u32], prev: usize) -> Result<Vec<f64>> {
        match self {
            Kernel::Rum(m) => m.transition_probs(u, counts, prev),
            Kernel::Plugin(p) => p.transition_probs(u, counts, prev),
            Kernel::TwoState(t) => t.transition_probs(u, counts, prev),
        }
    }
}

impl From<ChoiceModel> for Kernel {
    fn from(m: ChoiceModel) -> Self {
        Kernel::Rum(m)
    }
}

impl From<PluginKernel> for Kernel {
    fn from(p: PluginKernel) -> Self {
        Kernel::Plugin(p)
    }
}

impl From<TwoStateLogits> for Kernel {
    fn from(t: TwoStateLogits) -> Self {
        Kernel::TwoState(t)
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let target: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if target < acc {
            return i;
        }
    }
    last_positive
}

pub(crate) fn check_counts(counts: &[u32], k: usize) -> Result<()> {
    if counts.len() != k {
        return Err(Error::DimensionMismatch {
            what: "neighbor composition",
            expected: k,
            actual: counts.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_state(state: usize, k: usize) -> Result<()> {
    if state >= k {
        return Err(Error::DimensionMismatch {
            what: "state index",
            expected: k,
            actual: state,
        });
    }
    Ok(())
}
