//! Single-trajectory auxiliary ELBO estimates, the unbiased gradient
//! estimator combining pathwise and score-function terms, and the plain
//! flow ELBO used as a baseline.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{std_normal_logpdf, PriorModel};
use crate::error::{Error, Result};
use crate::flows::draw_innovations;
use crate::grad::{sigmoid, softplus, Ctx, Eval, ParamTree, Tape};
use crate::kernels::MetFlowKernels;

/// Law `r(a)` of the accept bits in the extended target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InferenceFn {
    /// `r(a) = 2^{-K}`.
    Uniform,
    /// Independent bits with `P(a_k = 1) = sigmoid(β_k)`.
    Bernoulli { offset: usize, steps: usize },
}

impl InferenceFn {
    /// Registers `r.logits` (zero) in `params`.
    pub fn bernoulli(params: &mut ParamTree, steps: usize) -> Result<Self> {
        let offset = params.insert("r.logits", &[steps], vec![0.0; steps])?;
        Ok(InferenceFn::Bernoulli { offset, steps })
    }

    pub fn log_prob<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, a: &[bool]) -> C::V {
        match self {
            InferenceFn::Uniform => ctx.constant(-(a.len() as f64) * std::f64::consts::LN_2),
            InferenceFn::Bernoulli { offset, .. } => {
                let terms: Vec<C::V> = a
                    .iter()
                    .enumerate()
                    .map(|(k, &bit)| {
                        let beta = ctx.param(params, offset + k);
                        let arg = if bit { ctx.neg(beta) } else { beta };
                        let sp = ctx.softplus(arg);
                        ctx.neg(sp)
                    })
                    .collect();
                ctx.sum(&terms)
            }
        }
    }

    pub fn log_prob_value(&self, params: &ParamTree, a: &[bool]) -> f64 {
        match self {
            InferenceFn::Uniform => -(a.len() as f64) * std::f64::consts::LN_2,
            InferenceFn::Bernoulli { offset, .. } => a
                .iter()
                .enumerate()
                .map(|(k, &bit)| {
                    let beta = params.as_slice()[offset + k];
                    -softplus(if bit { -beta } else { beta })
                })
                .sum(),
        }
    }

    /// `P(a_k = 1)`.
    pub fn prob_accept(&self, params: &ParamTree, k: usize) -> f64 {
        match self {
            InferenceFn::Uniform => 0.5,
            InferenceFn::Bernoulli { offset, .. } => sigmoid(params.as_slice()[offset + k]),
        }
    }
}

/// Start law, MetFlow steps and inference function.
#[derive(Clone)]
pub struct Model {
    pub prior: PriorModel,
    pub kernels: MetFlowKernels,
    pub inference: InferenceFn,
}

/// Innovations consumed by one trajectory.
#[derive(Clone, Copy, Debug)]
pub enum Noise<'a> {
    /// Fixed `u_{1:K}`.
    Fixed(&'a [Vec<f64>]),
    /// `K × noise_dim` standard normals drawn from the trajectory stream
    /// before anything else.
    Fresh,
}

/// A simulated path `z_0 → … → z_K` with the recorded quantities that the
/// ELBO and its gradient need. Scalars of type `V` live on the context the
/// path was simulated with.
#[derive(Clone, Debug)]
pub struct Trajectory<V> {
    pub y: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<i8>,
    pub a: Vec<bool>,
    pub states: Vec<Vec<f64>>,
    /// `log α` or `log(1 - α)` according to each bit.
    pub log_alphas: Vec<f64>,
    /// `α` of each proposal.
    pub alphas: Vec<f64>,
    pub log_jac_cum: f64,
    /// `log m0(z_0)`.
    pub log_prior_at_start: f64,
    /// `log π̃(z_K)`.
    pub log_target: V,
    /// `log r(a)`.
    pub log_r: V,
    /// `log m0(z_0) - log J + Σ log α^{a}` (the path component at `z_K`).
    pub log_q: V,
    /// `Σ log α^{a} + Σ log ν(v)`, the score of the discrete draws.
    pub score: V,
    /// `log π̃(z_K) + log r(a) - log q`.
    pub elbo: V,
}

impl<V> Trajectory<V> {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory has a start state")
    }
}

fn draw_normals(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `y ~ N(0, I)`, sets `z_0 = μ + e^{log_scale} y` and runs the K
/// MetFlow steps, each consuming a direction uniform then an acceptance
/// uniform.
pub fn simulate_trajectory<C: Ctx>(
    ctx: &mut C,
    params: &ParamTree,
    model: &Model,
    rng: &mut dyn RngCore,
    noise: Noise<'_>,
) -> Result<Trajectory<C::V>> {
    let kernels = &model.kernels;
    let k_steps = kernels.steps();
    let u = match noise {
        Noise::Fixed(u) => {
            if u.len() != k_steps {
                return Err(Error::Shape(format!("{} innovations for {k_steps} steps", u.len())));
            }
            u.to_vec()
        }
        Noise::Fresh => draw_innovations(&kernels.stack, rng),
    };
    let y = draw_normals(rng, model.prior.dim);
    let (z0, sum_ls) = model.prior.reparam(ctx, params, &y);
    let log_g = ctx.constant(std_normal_logpdf(&y));
    let log_m0 = ctx.sub(log_g, sum_ls);
    let mut log_pi = kernels.log_target(ctx, &z0);
    let mut z = z0;
    let mut states = vec![z.iter().map(|&x| ctx.value(x)).collect::<Vec<f64>>()];
    let (mut v_list, mut a_list) = (Vec::with_capacity(k_steps), Vec::with_capacity(k_steps));
    let (mut log_alphas, mut alphas) = (Vec::with_capacity(k_steps), Vec::with_capacity(k_steps));
    let mut jac_terms = Vec::new();
    let mut alpha_terms = Vec::with_capacity(k_steps);
    let mut nu_terms = Vec::with_capacity(k_steps);
    for (k, uk) in u.iter().enumerate() {
        let dir: f64 = rng.random();
        let acc: f64 = rng.random();
        let adv = kernels.advance(ctx, params, k, &z, log_pi, uk, dir, acc)?;
        v_list.push(adv.v);
        a_list.push(adv.a);
        log_alphas.push(ctx.value(adv.log_alpha_term));
        alphas.push(adv.log_alpha.exp());
        if let Some(lj) = adv.log_jac {
            jac_terms.push(lj);
        }
        alpha_terms.push(adv.log_alpha_term);
        nu_terms.push(adv.log_nu);
        z = adv.z;
        log_pi = adv.log_pi;
        states.push(z.iter().map(|&x| ctx.value(x)).collect());
    }
    let log_jac = ctx.sum(&jac_terms);
    let sum_alpha = ctx.sum(&alpha_terms);
    let sum_nu = ctx.sum(&nu_terms);
    let q0 = ctx.sub(log_m0, log_jac);
    let log_q = ctx.add(q0, sum_alpha);
    let score = ctx.add(sum_alpha, sum_nu);
    let log_r = model.inference.log_prob(ctx, params, &a_list);
    let p_plus_r = ctx.add(log_pi, log_r);
    let elbo = ctx.sub(p_plus_r, log_q);
    let value = ctx.value(elbo);
    if !value.is_finite() {
        return Err(Error::Numerical {
            node: None,
            detail: format!("trajectory ELBO evaluated to {value}"),
        });
    }
    Ok(Trajectory {
        y,
        u,
        v: v_list,
        a: a_list,
        states,
        log_alphas,
        alphas,
        log_jac_cum: ctx.value(log_jac),
        log_prior_at_start: ctx.value(log_m0),
        log_target: log_pi,
        log_r,
        log_q,
        score,
        elbo,
    })
}

/// Single-sample estimate of the auxiliary ELBO.
pub fn elbo_value(params: &ParamTree, model: &Model, rng: &mut dyn RngCore, noise: Noise<'_>) -> Result<f64> {
    Ok(simulate_trajectory(&mut Eval, params, model, rng, noise)?.elbo)
}

/// Adds `weight · Γ` into `grad`, where `Γ = ∇f + f ∇S` for the ELBO term
/// `f` and score `S` of a trajectory recorded on `tape` (freshly reset).
pub fn accumulate_grad_estimate(tape: &mut Tape, traj: &Trajectory<crate::grad::Var>, grad: &mut [f64], weight: f64) -> Result<()> {
    let c = tape.value(traj.elbo);
    let scaled = tape.scale(traj.score, c);
    let surrogate = tape.add(traj.elbo, scaled);
    tape.set_output(surrogate);
    tape.accumulate_gradient(grad, weight)
}

/// Simulates one trajectory on `tape` and returns it with its gradient
/// estimate `Γ`.
pub fn grad_estimate(
    tape: &mut Tape,
    params: &ParamTree,
    model: &Model,
    rng: &mut dyn RngCore,
    noise: Noise<'_>,
) -> Result<(Trajectory<crate::grad::Var>, ParamTree)> {
    tape.reset(params);
    let traj = simulate_trajectory(tape, params, model, rng, noise)?;
    let mut flat = vec![0.0; params.total_dim()];
    accumulate_grad_estimate(tape, &traj, &mut flat, 1.0)?;
    Ok((traj, params.unflatten(&flat)?))
}

/// Plain flow pass: every step applied forward with no accept/reject.
/// Returns the endpoint and `log π̃(T z_0) - log m0(z_0) + log J`.
pub fn simulate_flow<C: Ctx>(
    ctx: &mut C,
    params: &ParamTree,
    model: &Model,
    rng: &mut dyn RngCore,
    noise: Noise<'_>,
) -> Result<(Vec<f64>, C::V)> {
    let kernels = &model.kernels;
    let u = match noise {
        Noise::Fixed(u) => u.to_vec(),
        Noise::Fresh => draw_innovations(&kernels.stack, rng),
    };
    if u.len() != kernels.steps() {
        return Err(Error::Shape(format!("{} innovations for {} steps", u.len(), kernels.steps())));
    }
    let y = draw_normals(rng, model.prior.dim);
    let (mut z, sum_ls) = model.prior.reparam(ctx, params, &y);
    let log_g = ctx.constant(std_normal_logpdf(&y));
    let log_m0 = ctx.sub(log_g, sum_ls);
    let mut jac = Vec::with_capacity(u.len());
    for (k, uk) in u.iter().enumerate() {
        let (next, lj) = kernels.stack.step(k).apply(ctx, params, &z, 1, uk)?;
        z = next;
        jac.push(lj);
    }
    let log_jac = ctx.sum(&jac);
    let log_pi = kernels.log_target(ctx, &z);
    let log_q = ctx.sub(log_m0, log_jac);
    let elbo = ctx.sub(log_pi, log_q);
    Ok((z.iter().map(|&x| ctx.value(x)).collect(), elbo))
}

/// Single-sample estimate of the plain flow ELBO.
pub fn nf_baseline_elbo(params: &ParamTree, model: &Model, rng: &mut dyn RngCore, noise: Noise<'_>) -> Result<f64> {
    Ok(simulate_flow(&mut Eval, params, model, rng, noise)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::marginal_logpdf;
    use crate::flows::{randomize_params, BlockKind, FlowSpec, FlowStack};
    use crate::kernels::{DirectionDist, RatioFamily};
    use crate::rng;
    use crate::targets::{diag_normal, gaussian_mixture, MixtureSpec, SharedTarget};
    use std::sync::Arc;

    fn model(
        params: &mut ParamTree,
        prior: PriorModel,
        spec: FlowSpec,
        nu: Option<DirectionDist>,
        family: RatioFamily,
        target: SharedTarget,
        seed: u64,
    ) -> Model {
        let mut r = rng::stream(seed, 0, 0);
        let stack = FlowStack::build(params, &spec, &mut r).unwrap();
        let nu = nu.unwrap_or_else(|| DirectionDist::uniform(spec.steps));
        let kernels = MetFlowKernels::new(stack, nu, family, target).unwrap();
        Model {
            prior,
            kernels,
            inference: InferenceFn::Uniform,
        }
    }

    fn affine_spec(dim: usize, steps: usize) -> FlowSpec {
        FlowSpec {
            dim,
            steps,
            blocks: 1,
            hidden: 1,
            kind: BlockKind::Affine,
            shared: false,
            noisy: false,
        }
    }

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn inference_fn_laws() {
        let mut p = ParamTree::new();
        let r = InferenceFn::bernoulli(&mut p, 2).unwrap();
        p.get_mut("r.logits").unwrap()[0] = 0.7;
        let mut total = 0.0;
        for bits in 0..4u32 {
            let a = [bits & 1 == 1, bits & 2 == 2];
            total += r.log_prob_value(&p, &a).exp();
            assert!((r.log_prob(&mut Eval, &p, &a) - r.log_prob_value(&p, &a)).abs() < 1e-15);
        }
        assert!((total - 1.0).abs() < 1e-14);
        assert_eq!(InferenceFn::Uniform.log_prob_value(&p, &[true; 3]), -3.0 * std::f64::consts::LN_2);
    }

    #[test]
    fn k0_target_equals_prior() {
        let mut params = ParamTree::new();
        let prior = PriorModel::new(&mut params, vec![0.4, -1.0], vec![0.2, 0.5]).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![0.4, -1.0], vec![0.2f64.exp(), 0.5f64.exp()]).unwrap());
        let m = Model {
            prior,
            kernels: MetFlowKernels::new(FlowStack::empty(2), DirectionDist::uniform(0), RatioFamily::MetropolisHastings, target).unwrap(),
            inference: InferenceFn::Uniform,
        };
        let mut r = rng::stream(1, 0, 0);
        for _ in 0..20 {
            assert!(elbo_value(&params, &m, &mut r, Noise::Fresh).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn identity_flows_accept_everything() {
        let mut params = ParamTree::new();
        let prior = PriorModel::standard(&mut params, 2).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![0.0; 2], vec![1.0; 2]).unwrap());
        let spec = FlowSpec {
            dim: 2,
            steps: 3,
            blocks: 2,
            hidden: 4,
            kind: BlockKind::Rnvp,
            shared: true,
            noisy: true,
        };
        let m = model(&mut params, prior, spec, None, RatioFamily::MetropolisHastings, target, 2);
        let mut r = rng::stream(2, 1, 0);
        let t = simulate_trajectory(&mut Eval, &params, &m, &mut r, Noise::Fresh).unwrap();
        assert_eq!(t.a, vec![true; 3]);
        assert!(t.alphas.iter().all(|&a| a == 1.0));
        assert!(t.states.windows(2).all(|w| w[0] == w[1]));
        // log r = -3 ln 2; the rest cancels
        assert!((t.elbo + 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn forced_rejection_keeps_start() {
        let mut params = ParamTree::new();
        let prior = PriorModel::standard(&mut params, 1).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![1.0], vec![1.0]).unwrap());
        let mut m = model(&mut params, prior, affine_spec(1, 4), None, RatioFamily::MetropolisHastings, target, 3);
        randomize_params(&mut params, "flow", 0.5, &mut rng::stream(3, 1, 0));
        m.kernels = m.kernels.with_forced_accept(0.0);
        let t = simulate_trajectory(&mut Eval, &params, &m, &mut rng::stream(3, 2, 0), Noise::Fresh).unwrap();
        assert!(t.states.iter().all(|s| s == &t.states[0]));
        assert_eq!(t.a, vec![false; 4]);
    }

    #[test]
    fn trajectory_uses_fixed_innovations() {
        let mut params = ParamTree::new();
        let prior = PriorModel::standard(&mut params, 2).unwrap();
        let target: SharedTarget = Arc::new(gaussian_mixture(MixtureSpec::ring(8, 8.0, 1.0)).unwrap());
        let spec = FlowSpec {
            dim: 2,
            steps: 2,
            blocks: 2,
            hidden: 4,
            kind: BlockKind::Rnvp,
            shared: true,
            noisy: true,
        };
        let m = model(&mut params, prior, spec, None, RatioFamily::MetropolisHastings, target, 4);
        let u = vec![vec![0.1, 0.2], vec![-0.3, 0.4]];
        let t = simulate_trajectory(&mut Eval, &params, &m, &mut rng::stream(4, 0, 0), Noise::Fixed(&u)).unwrap();
        assert_eq!(t.u, u);
        assert!(simulate_trajectory(&mut Eval, &params, &m, &mut rng::stream(4, 0, 0), Noise::Fixed(&u[..1])).is_err());
    }

    #[test]
    fn k0_gradient_is_minus_mu() {
        let mut params = ParamTree::new();
        let prior = PriorModel::new(&mut params, vec![0.5], vec![0.0]).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![0.0], vec![1.0]).unwrap());
        let m = Model {
            prior,
            kernels: MetFlowKernels::new(FlowStack::empty(1), DirectionDist::uniform(0), RatioFamily::MetropolisHastings, target).unwrap(),
            inference: InferenceFn::Uniform,
        };
        let mut tape = Tape::new(&params);
        let mut r = rng::stream(5, 0, 0);
        let g: Vec<f64> = (0..2000)
            .map(|_| grad_estimate(&mut tape, &params, &m, &mut r, Noise::Fresh).unwrap().1.get("prior.mu").unwrap()[0])
            .collect();
        let (mean, se) = mean_se(&g);
        assert!((mean + 0.5).abs() <= 3.0 * se.max(1e-12), "{mean} ± {se}");
    }

    #[test]
    fn fixed_symmetric_direction_has_no_nu_score() {
        let mut params = ParamTree::new();
        let prior = PriorModel::standard(&mut params, 1).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![1.0], vec![1.0]).unwrap());
        let m = model(&mut params, prior, affine_spec(1, 2), None, RatioFamily::Barker, target, 6);
        randomize_params(&mut params, "flow", 0.5, &mut rng::stream(6, 1, 0));
        let mut tape = Tape::new(&params);
        let mut r = rng::stream(6, 2, 0);
        for _ in 0..20 {
            tape.reset(&params);
            let t = simulate_trajectory(&mut tape, &params, &m, &mut r, Noise::Fresh).unwrap();
            let s: f64 = t.log_alphas.iter().sum();
            assert!((tape.value(t.score) - s - 2.0 * 0.5f64.ln()).abs() < 1e-12);
            let mut g = vec![0.0; params.total_dim()];
            tape.set_output(t.score);
            tape.accumulate_gradient(&mut g, 1.0).unwrap();
            assert!(g.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn lower_bound_and_marginal_identity_1d() {
        // E[elbo] <= E_m[log π̃ - log m] = log C_π - KL(m||π) <= log C_π
        let mut params = ParamTree::new();
        let prior = PriorModel::new(&mut params, vec![0.0], vec![0.3]).unwrap();
        let target: SharedTarget = Arc::new(gaussian_mixture(MixtureSpec::equal_weights(vec![vec![-2.0], vec![2.0]], 0.7)).unwrap());
        let m = model(&mut params, prior, affine_spec(1, 2), None, RatioFamily::MetropolisHastings, target.clone(), 7);
        randomize_params(&mut params, "flow", 0.5, &mut rng::stream(7, 1, 0));
        let u = vec![vec![]; 2];
        let mut r = rng::stream(7, 2, 0);
        let vals: Vec<f64> = (0..100_000)
            .map(|_| elbo_value(&params, &m, &mut r, Noise::Fixed(&u)).unwrap())
            .collect();
        let (mean, se) = mean_se(&vals);
        let h = 1e-3;
        let (mut elbo_exact, mut mass, mut c_pi) = (0.0, 0.0, 0.0);
        for i in 0..30_000 {
            let x = -15.0 + (i as f64 + 0.5) * h;
            let lq = marginal_logpdf(&m.prior, &m.kernels, &params, &u, &[x]).unwrap();
            let q = lq.exp();
            if q > 0.0 {
                elbo_exact += q * (target.log_density(&[x]) - lq) * h;
            }
            mass += q * h;
            c_pi += target.log_density(&[x]).exp() * h;
        }
        assert!((mass - 1.0).abs() < 1e-6);
        assert!(mean <= elbo_exact + 3.0 * se, "{mean} vs {elbo_exact}");
        assert!(elbo_exact <= c_pi.ln());
    }

    #[test]
    fn baseline_identity_is_zero() {
        let mut params = ParamTree::new();
        let prior = PriorModel::standard(&mut params, 2).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![0.0; 2], vec![1.0; 2]).unwrap());
        let spec = FlowSpec {
            dim: 2,
            steps: 3,
            blocks: 2,
            hidden: 4,
            kind: BlockKind::Rnvp,
            shared: false,
            noisy: false,
        };
        let m = model(&mut params, prior, spec, None, RatioFamily::MetropolisHastings, target, 8);
        let mut r = rng::stream(8, 0, 0);
        for _ in 0..10 {
            assert!(nf_baseline_elbo(&params, &m, &mut r, Noise::Fresh).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_affine_matches_gaussian_kl() {
        // z = (μ0 + e^{l0} y) e^{s} + t is N(m, σ²) with m = μ0 e^{s} + t, σ = e^{l0 + s}
        let mut params = ParamTree::new();
        let prior = PriorModel::new(&mut params, vec![0.3], vec![-0.2]).unwrap();
        let target: SharedTarget = Arc::new(diag_normal(vec![1.5], vec![2.0]).unwrap());
        let m = model(&mut params, prior, affine_spec(1, 1), None, RatioFamily::MetropolisHastings, target, 9);
        params.get_mut("flow.0.0.s").unwrap()[0] = 0.4;
        params.get_mut("flow.0.0.t").unwrap()[0] = -0.6;
        let mq = 0.3 * 0.4f64.exp() - 0.6;
        let sq = (-0.2f64 + 0.4).exp();
        let (mp, sp) = (1.5, 2.0f64);
        let kl = (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
        let mut r = rng::stream(9, 0, 0);
        let vals: Vec<f64> = (0..50_000)
            .map(|_| nf_baseline_elbo(&params, &m, &mut r, Noise::Fresh).unwrap())
            .collect();
        let (mean, se) = mean_se(&vals);
        assert!((mean + kl).abs() <= 3.0 * se, "{mean} vs {}", -kl);
    }
}
