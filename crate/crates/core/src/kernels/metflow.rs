use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{DirectionDist, MarkovKernel, RatioFamily, StepOutcome};
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::grad::{Ctx, Eval, ParamTree, ScalarFunction};
use crate::targets::SharedTarget;

/// Everything a MetFlow transition needs apart from the parameter values:
/// the proposal maps, the direction law, the acceptance function and the
/// target.
#[derive(Clone)]
pub struct MetFlowKernels {
    pub stack: FlowStack,
    pub nu: DirectionDist,
    pub family: RatioFamily,
    pub target: SharedTarget,
    target_fn: Arc<dyn ScalarFunction>,
    forced_accept: Option<f64>,
}

/// `T^v(z)` with the quantities that enter its acceptance.
#[derive(Clone, Debug)]
pub struct Proposal<V> {
    pub z: Vec<V>,
    pub log_jac: V,
    pub log_pi: V,
    /// `log[π̃(T^v z) ν(-v) J / (π̃(z) ν(v))]`
    pub log_t: V,
}

/// One simulated transition on an arbitrary [`Ctx`].
#[derive(Clone, Debug)]
pub struct Advance<V> {
    pub z: Vec<V>,
    pub log_pi: V,
    pub v: i8,
    pub a: bool,
    /// `log α` if accepted, `log(1 - α)` otherwise.
    pub log_alpha_term: V,
    pub log_nu: V,
    /// Applied log-Jacobian; `None` on rejection.
    pub log_jac: Option<V>,
    /// `log α` of the proposal, as a number.
    pub log_alpha: f64,
}

impl MetFlowKernels {
    pub fn new(stack: FlowStack, nu: DirectionDist, family: RatioFamily, target: SharedTarget) -> Result<Self> {
        if target.dim() != stack.dim {
            return Err(Error::Shape(format!(
                "target has dimension {}, flows have {}",
                target.dim(),
                stack.dim
            )));
        }
        if nu.steps() != stack.len() {
            return Err(Error::Shape(format!(
                "direction law covers {} steps, stack has {}",
                nu.steps(),
                stack.len()
            )));
        }
        let target_fn: Arc<dyn ScalarFunction> = target.clone();
        Ok(Self {
            stack,
            nu,
            family,
            target,
            target_fn,
            forced_accept: None,
        })
    }

    /// Test fixture: every proposal is accepted with probability `alpha`.
    #[doc(hidden)]
    pub fn with_forced_accept(mut self, alpha: f64) -> Self {
        self.forced_accept = Some(alpha);
        self
    }

    pub fn dim(&self) -> usize {
        self.stack.dim
    }

    pub fn steps(&self) -> usize {
        self.stack.len()
    }

    pub fn log_target<C: Ctx>(&self, ctx: &mut C, z: &[C::V]) -> C::V {
        ctx.external(&self.target_fn, z)
    }

    pub fn propose<C: Ctx>(
        &self,
        ctx: &mut C,
        params: &ParamTree,
        k: usize,
        z: &[C::V],
        log_pi_z: C::V,
        v: i8,
        u: &[f64],
    ) -> Result<Proposal<C::V>> {
        let (z_new, log_jac) = self.stack.step(k).apply(ctx, params, z, v, u)?;
        let log_pi = self.log_target(ctx, &z_new);
        let diff = ctx.sub(log_pi, log_pi_z);
        let mut log_t = ctx.add(diff, log_jac);
        if self.nu.is_trainable() {
            let back = self.nu.log_prob(ctx, params, k, -v);
            let fwd = self.nu.log_prob(ctx, params, k, v);
            let r = ctx.sub(back, fwd);
            log_t = ctx.add(log_t, r);
        } else {
            let r = self.nu.log_prob_value(params, k, -v) - self.nu.log_prob_value(params, k, v);
            if r != 0.0 {
                log_t = ctx.shift(log_t, r);
            }
        }
        Ok(Proposal {
            z: z_new,
            log_jac,
            log_pi,
            log_t,
        })
    }

    /// `(log α, log(1 - α))` of a proposal, only the requested one recorded.
    fn log_alpha_term<C: Ctx>(&self, ctx: &mut C, log_t: C::V, accepted: bool) -> C::V {
        match (self.forced_accept, accepted) {
            (Some(a), true) => ctx.constant(a.ln()),
            (Some(a), false) => ctx.constant((1.0 - a).ln()),
            (None, true) => self.family.log_accept(ctx, log_t),
            (None, false) => self.family.log_reject(ctx, log_t),
        }
    }

    /// Log-acceptance value for both outcomes, as numbers.
    pub fn log_alpha_pair(&self, log_t: f64) -> (f64, f64) {
        (
            self.log_alpha_term(&mut Eval, log_t, true),
            self.log_alpha_term(&mut Eval, log_t, false),
        )
    }

    /// Simulates step `k` from `z` with the given uniforms: the direction is
    /// `+1` iff `dir_uniform < P(v = +1)`, the move is accepted iff
    /// `acc_uniform < α`.
    #[allow(clippy::too_many_arguments)]
    pub fn advance<C: Ctx>(
        &self,
        ctx: &mut C,
        params: &ParamTree,
        k: usize,
        z: &[C::V],
        log_pi_z: C::V,
        u: &[f64],
        dir_uniform: f64,
        acc_uniform: f64,
    ) -> Result<Advance<C::V>> {
        let v = self.nu.draw(params, k, dir_uniform);
        let prop = self.propose(ctx, params, k, z, log_pi_z, v, u)?;
        let log_alpha = self.log_alpha_pair(ctx.value(prop.log_t)).0;
        if log_alpha.is_nan() {
            return Err(Error::Numerical {
                node: None,
                detail: format!("acceptance at step {} is not a number", k + 1),
            });
        }
        let a = acc_uniform < log_alpha.exp();
        let log_alpha_term = self.log_alpha_term(ctx, prop.log_t, a);
        let log_nu = self.nu.log_prob(ctx, params, k, v);
        Ok(if a {
            Advance {
                z: prop.z,
                log_pi: prop.log_pi,
                v,
                a,
                log_alpha_term,
                log_nu,
                log_jac: Some(prop.log_jac),
                log_alpha,
            }
        } else {
            Advance {
                z: z.to_vec(),
                log_pi: log_pi_z,
                v,
                a,
                log_alpha_term,
                log_nu,
                log_jac: None,
                log_alpha,
            }
        })
    }
}

/// `α̂(z, v) = φ(π(T^v z) ν(-v) J_{T^v}(z) / (π(z) ν(v)))` for step `k`.
pub fn metflow_accept_prob(
    kernels: &MetFlowKernels,
    params: &ParamTree,
    k: usize,
    z: &[f64],
    v: i8,
    u: &[f64],
) -> Result<f64> {
    if kernels.nu.log_prob_value(params, k, v) == f64::NEG_INFINITY {
        return Err(Error::Domain(format!("direction {v} has zero probability at step {}", k + 1)));
    }
    let log_pi = kernels.target.log_density(z);
    let prop = kernels.propose(&mut Eval, params, k, z, log_pi, v, u)?;
    Ok(kernels.log_alpha_pair(prop.log_t).0.exp())
}

/// Draws `v ~ Rad(p_k)`, then accepts `T_k^v(z)` with probability `α̂`.
pub fn metflow_step(
    rng: &mut dyn RngCore,
    kernels: &MetFlowKernels,
    params: &ParamTree,
    k: usize,
    z: &[f64],
    u: &[f64],
) -> Result<StepOutcome> {
    let dir: f64 = rng.random();
    let acc: f64 = rng.random();
    let log_pi = kernels.target.log_density(z);
    let adv = kernels.advance(&mut Eval, params, k, z, log_pi, u, dir, acc)?;
    Ok(StepOutcome {
        z_next: adv.z,
        a: adv.a,
        v: adv.v,
        log_alpha: adv.log_alpha,
        log_jac: adv.log_jac.unwrap_or(0.0),
    })
}

/// Step `k` of a MetFlow stack with fixed parameters and innovation.
#[derive(Clone)]
pub struct MetFlowKernel {
    pub kernels: Arc<MetFlowKernels>,
    pub params: Arc<ParamTree>,
    pub k: usize,
    pub u: Vec<f64>,
}

impl MarkovKernel for MetFlowKernel {
    fn dim(&self) -> usize {
        self.kernels.dim()
    }

    fn step(&self, rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome> {
        metflow_step(rng, &self.kernels, &self.params, self.k, z, &self.u)
    }
}

/// The forward map of step `k` applied with no accept/reject correction.
#[derive(Clone)]
pub struct Pushforward(pub MetFlowKernel);

impl MarkovKernel for Pushforward {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn step(&self, _rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome> {
        let k = &self.0;
        let (z_next, log_jac) = k.kernels.stack.step(k.k).apply(&mut Eval, &k.params, z, 1, &k.u)?;
        Ok(StepOutcome {
            z_next,
            a: true,
            v: 1,
            log_alpha: 0.0,
            log_jac,
        })
    }
}
