//! One-step Markov kernels: MetFlow (flow proposal, random direction,
//! involutive acceptance), random-walk Metropolis, MALA and HMC.

mod balance;
mod classic;
mod metflow;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{softplus, Ctx, ParamTree};

pub use balance::{detailed_balance_check, BalanceReport, BalanceSource};
pub use classic::{
    hmc_flip_step, leapfrog, mala_forward, mala_inverse, mala_inverse_with_stats, momentum_refresh, momentum_refresh_with,
    rwm_accept_prob,
    rwm_step, ExtendedTarget, FixedPoint, Hmc, Mala, Rwm,
};
pub use metflow::{
    metflow_accept_prob, metflow_step, Advance, MetFlowKernel, MetFlowKernels, Proposal, Pushforward,
};

/// Acceptance function `φ` applied to the ratio `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioFamily {
    /// `min(1, t)`
    #[default]
    MetropolisHastings,
    /// `t / (1 + t)`
    Barker,
}

impl RatioFamily {
    fn phi(self, t: f64) -> f64 {
        match self {
            RatioFamily::MetropolisHastings => t.min(1.0),
            RatioFamily::Barker => {
                if t.is_infinite() {
                    1.0
                } else {
                    t / (1.0 + t)
                }
            }
        }
    }

    /// `log φ(t)` from `log t`.
    pub fn log_accept<C: Ctx>(self, ctx: &mut C, log_t: C::V) -> C::V {
        match self {
            RatioFamily::MetropolisHastings => ctx.min_const(log_t, 0.0),
            RatioFamily::Barker => {
                let n = ctx.neg(log_t);
                let sp = ctx.softplus(n);
                ctx.neg(sp)
            }
        }
    }

    /// `log(1 - φ(t))` from `log t`.
    pub fn log_reject<C: Ctx>(self, ctx: &mut C, log_t: C::V) -> C::V {
        match self {
            RatioFamily::MetropolisHastings => {
                let la = ctx.min_const(log_t, 0.0);
                ctx.log1mexp(la)
            }
            RatioFamily::Barker => {
                let sp = ctx.softplus(log_t);
                ctx.neg(sp)
            }
        }
    }
}

/// `φ(t)` for `t >= 0` (including `+inf`).
pub fn accept_ratio(family: RatioFamily, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("acceptance ratio must be nonnegative, got {t}")));
    }
    Ok(family.phi(t))
}

/// Per-step Rademacher laws on the direction `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DirectionDist {
    /// Fixed probabilities of `v = +1`.
    Fixed { probs: Vec<f64> },
    /// `P(v = +1) = sigmoid(logit_k)` with logits stored in the parameters.
    Trainable { offset: usize, steps: usize },
}

impl DirectionDist {
    pub fn uniform(steps: usize) -> Self {
        DirectionDist::Fixed { probs: vec![0.5; steps] }
    }

    pub fn fixed(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("direction probabilities must lie in [0, 1]: {probs:?}")));
        }
        Ok(DirectionDist::Fixed { probs })
    }

    /// Registers `nu.logits` (zero, i.e. uniform) in `params`.
    pub fn trainable(params: &mut ParamTree, steps: usize) -> Result<Self> {
        let offset = params.insert("nu.logits", &[steps], vec![0.0; steps])?;
        Ok(DirectionDist::Trainable { offset, steps })
    }

    pub fn steps(&self) -> usize {
        match self {
            DirectionDist::Fixed { probs } => probs.len(),
            DirectionDist::Trainable { steps, .. } => *steps,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, DirectionDist::Trainable { .. })
    }

    /// `P(v_k = +1)`.
    pub fn prob_plus(&self, params: &ParamTree, k: usize) -> f64 {
        match self {
            DirectionDist::Fixed { probs } => probs[k],
            DirectionDist::Trainable { offset, .. } => crate::grad::sigmoid(params.as_slice()[offset + k]),
        }
    }

    /// `log ν_k(v)` as a plain number.
    pub fn log_prob_value(&self, params: &ParamTree, k: usize, v: i8) -> f64 {
        match self {
            DirectionDist::Fixed { probs } => {
                if v > 0 {
                    probs[k].ln()
                } else {
                    (1.0 - probs[k]).ln()
                }
            }
            DirectionDist::Trainable { offset, .. } => {
                let beta = params.as_slice()[offset + k];
                -softplus(if v > 0 { -beta } else { beta })
            }
        }
    }

    /// `log ν_k(v)`; a recorded node only for trainable logits.
    pub fn log_prob<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, k: usize, v: i8) -> C::V {
        match self {
            DirectionDist::Fixed { .. } => ctx.constant(self.log_prob_value(params, k, v)),
            DirectionDist::Trainable { offset, .. } => {
                let beta = ctx.param(params, offset + k);
                let arg = if v > 0 { ctx.neg(beta) } else { beta };
                let sp = ctx.softplus(arg);
                ctx.neg(sp)
            }
        }
    }

    /// Draws `v_k` by comparing a uniform to `P(v_k = +1)`.
    pub fn draw(&self, params: &ParamTree, k: usize, uniform: f64) -> i8 {
        if uniform < self.prob_plus(params, k) {
            1
        } else {
            -1
        }
    }
}

/// Result of one kernel transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub z_next: Vec<f64>,
    pub a: bool,
    pub v: i8,
    /// `log α` of the proposal that was considered.
    pub log_alpha: f64,
    /// Signed log-Jacobian contribution; zero on rejection.
    pub log_jac: f64,
}

/// A transition kernel on `R^dim`.
pub trait MarkovKernel: Send + Sync {
    fn dim(&self) -> usize;

    fn step(&self, rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome>;
}

/// The kernel that never moves.
#[derive(Clone, Copy, Debug)]
pub struct Identity {
    pub dim: usize,
}

impl MarkovKernel for Identity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn step(&self, _rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome> {
        Ok(StepOutcome {
            z_next: z.to_vec(),
            a: false,
            v: 1,
            log_alpha: 0.0,
            log_jac: 0.0,
        })
    }
}
