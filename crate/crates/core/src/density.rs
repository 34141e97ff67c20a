//! Exact evaluation of the MetFlow variational density: the one-step
//! conditional law, single accept/direction path components and the full
//! mixture over paths for small K.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{log_sum_exp, Ctx, Eval, ParamTree};
use crate::kernels::MetFlowKernels;

/// Largest K for which the `4^K` path mixture is enumerated.
pub const K_MAX: usize = 12;

/// Diagonal Gaussian start law `z0 = μ + exp(log_scale) ⊙ y`, `y ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub dim: usize,
    pub mu: usize,
    pub log_scale: usize,
}

impl PriorModel {
    /// Registers `prior.mu` and `prior.log_scale`.
    pub fn new(params: &mut ParamTree, mu: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != log_scale.len() {
            return Err(Error::Shape("prior mean and log-scale must share a positive length".into()));
        }
        let dim = mu.len();
        let mu = params.insert("prior.mu", &[dim], mu)?;
        let log_scale = params.insert("prior.log_scale", &[dim], log_scale)?;
        Ok(Self { dim, mu, log_scale })
    }

    pub fn standard(params: &mut ParamTree, dim: usize) -> Result<Self> {
        Self::new(params, vec![0.0; dim], vec![0.0; dim])
    }

    /// `V(y) = μ + exp(log_scale) ⊙ y` and `Σ log_scale`.
    pub fn reparam<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, y: &[f64]) -> (Vec<C::V>, C::V) {
        let mut z = Vec::with_capacity(self.dim);
        let mut ls = Vec::with_capacity(self.dim);
        for (i, &yi) in y.iter().enumerate() {
            let m = ctx.param(params, self.mu + i);
            let l = ctx.param(params, self.log_scale + i);
            let s = ctx.exp(l);
            let sy = ctx.scale(s, yi);
            z.push(ctx.add(m, sy));
            ls.push(l);
        }
        let total = ctx.sum(&ls);
        (z, total)
    }

    pub fn mean(&self, params: &ParamTree) -> Vec<f64> {
        params.as_slice()[self.mu..self.mu + self.dim].to_vec()
    }

    pub fn log_scale(&self, params: &ParamTree) -> Vec<f64> {
        params.as_slice()[self.log_scale..self.log_scale + self.dim].to_vec()
    }
}

/// `log g(y)` for the standard normal `g`.
pub fn std_normal_logpdf(y: &[f64]) -> f64 {
    -0.5 * y.iter().map(|v| v * v).sum::<f64>() - 0.5 * y.len() as f64 * (2.0 * PI).ln()
}

/// Log-density of the start law at `z`.
pub fn prior_logpdf(prior: &PriorModel, params: &ParamTree, z: &[f64]) -> f64 {
    let mu = prior.mean(params);
    let ls = prior.log_scale(params);
    let y: Vec<f64> = z
        .iter()
        .zip(&mu)
        .zip(&ls)
        .map(|((z, m), l)| (z - m) * (-l).exp())
        .collect();
    std_normal_logpdf(&y) - ls.iter().sum::<f64>()
}

fn check_lengths(kernels: &MetFlowKernels, u: &[Vec<f64>], z: &[f64]) -> Result<()> {
    if u.len() != kernels.steps() {
        return Err(Error::Shape(format!(
            "{} innovations for {} steps",
            u.len(),
            kernels.steps()
        )));
    }
    if z.len() != kernels.dim() {
        return Err(Error::Shape(format!("point has dimension {}, model {}", z.len(), kernels.dim())));
    }
    Ok(())
}

/// Step `k` read backwards from its output `z`: the preimage, the
/// log-Jacobian of the inverse map at `z` (zero if rejected), and
/// `log α` or `log(1 - α)` evaluated at the preimage.
fn backward_step(
    kernels: &MetFlowKernels,
    params: &ParamTree,
    k: usize,
    z: &[f64],
    a: bool,
    v: i8,
    u: &[f64],
) -> Result<(Vec<f64>, f64, f64)> {
    let step = kernels.stack.step(k);
    if a {
        let (prev, lj_inv) = step.apply(&mut Eval, params, z, -v, u)?;
        let lp = kernels.target.log_density(&prev);
        let prop = kernels.propose(&mut Eval, params, k, &prev, lp, v, u)?;
        Ok((prev, lj_inv, kernels.log_alpha_pair(prop.log_t).0))
    } else {
        let lp = kernels.target.log_density(z);
        let prop = kernels.propose(&mut Eval, params, k, z, lp, v, u)?;
        Ok((z.to_vec(), 0.0, kernels.log_alpha_pair(prop.log_t).1))
    }
}

/// Log-density at `z` of one step `k` with direction `v`, started from the
/// prior: `α(T⁻¹z) m0(T⁻¹z) J_{T⁻¹}(z) + (1 - α(z)) m0(z)` with `T = T_k^v`.
pub fn one_step_logpdf(
    prior: &PriorModel,
    kernels: &MetFlowKernels,
    params: &ParamTree,
    k: usize,
    u: &[f64],
    v: i8,
    z: &[f64],
) -> Result<f64> {
    let mut terms = [0.0; 2];
    for (i, a) in [true, false].into_iter().enumerate() {
        let (prev, lj, la) = backward_step(kernels, params, k, z, a, v, u)?;
        terms[i] = prior_logpdf(prior, params, &prev) + lj + la;
    }
    Ok(log_sum_exp(&terms))
}

/// Log of the path component `m0(⊙_j T_j^{-v_j a_j}(z)) J Π α^{a_i}(1-α)^{1-a_i}`,
/// with every acceptance factor evaluated at the state the step started
/// from, recovered by inverting the accepted steps in reverse order.
pub fn component_logpdf(
    prior: &PriorModel,
    kernels: &MetFlowKernels,
    params: &ParamTree,
    u: &[Vec<f64>],
    z: &[f64],
    a: &[bool],
    v: &[i8],
) -> Result<f64> {
    check_lengths(kernels, u, z)?;
    if a.len() != kernels.steps() || v.len() != kernels.steps() {
        return Err(Error::Shape("one accept bit and direction per step required".into()));
    }
    let mut cur = z.to_vec();
    let mut total = 0.0;
    for k in (0..kernels.steps()).rev() {
        let (prev, lj, la) = backward_step(kernels, params, k, &cur, a[k], v[k], &u[k])?;
        total += lj + la;
        cur = prev;
    }
    Ok(total + prior_logpdf(prior, params, &cur))
}

fn marginal_rec(
    prior: &PriorModel,
    kernels: &MetFlowKernels,
    params: &ParamTree,
    u: &[Vec<f64>],
    k: usize,
    z: &[f64],
) -> Result<f64> {
    if k == 0 {
        return Ok(prior_logpdf(prior, params, z));
    }
    let step = k - 1;
    let mut terms = Vec::with_capacity(4);
    for v in [-1i8, 1] {
        let log_nu = kernels.nu.log_prob_value(params, step, v);
        if log_nu == f64::NEG_INFINITY {
            continue;
        }
        for a in [false, true] {
            let (prev, lj, la) = backward_step(kernels, params, step, z, a, v, &u[step])?;
            if la == f64::NEG_INFINITY {
                continue;
            }
            let rest = marginal_rec(prior, kernels, params, u, step, &prev)?;
            terms.push(log_nu + lj + la + rest);
        }
    }
    Ok(log_sum_exp(&terms))
}

/// `log Σ_v ν(v) Σ_a exp(component_logpdf)`, enumerated exactly. The terms
/// are reduced in a fixed order; each subtree shares the inverse steps it
/// has in common.
pub fn marginal_logpdf(
    prior: &PriorModel,
    kernels: &MetFlowKernels,
    params: &ParamTree,
    u: &[Vec<f64>],
    z: &[f64],
) -> Result<f64> {
    check_lengths(kernels, u, z)?;
    if kernels.steps() > K_MAX {
        return Err(Error::Capacity(format!(
            "exact enumeration supports K <= {K_MAX} (4^K paths), got K = {}; compare simulated histograms instead",
            kernels.steps()
        )));
    }
    marginal_rec(prior, kernels, params, u, kernels.steps(), z)
}
