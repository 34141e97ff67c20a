use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{MarkovKernel, RatioFamily, StepOutcome};
use crate::error::{Error, Result};
use crate::grad::ScalarFunction;
use crate::targets::{SharedTarget, TargetModel};

fn normals(rng: &mut dyn RngCore, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// MH acceptance `min(1, π̃(z') / π̃(z))` of a symmetric proposal.
pub fn rwm_accept_prob(target: &dyn TargetModel, z: &[f64], z_new: &[f64]) -> f64 {
    (target.log_density(z_new) - target.log_density(z)).min(0.0).exp()
}

fn check_root(cov_root: &nalgebra::DMatrix<f64>, dim: usize) -> Result<()> {
    if cov_root.nrows() != dim || cov_root.ncols() != dim {
        return Err(Error::Shape(format!(
            "covariance root is {}x{}, target has dimension {dim}",
            cov_root.nrows(),
            cov_root.ncols()
        )));
    }
    let det = cov_root.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Config("covariance root is singular".into()));
    }
    Ok(())
}

/// Random-walk Metropolis step `z' = z + Σ^{1/2} u`.
pub fn rwm_step(
    rng: &mut dyn RngCore,
    target: &dyn TargetModel,
    cov_root: &nalgebra::DMatrix<f64>,
    z: &[f64],
) -> Result<StepOutcome> {
    check_root(cov_root, z.len())?;
    Ok(rwm_unchecked(rng, target, cov_root, z))
}

fn rwm_unchecked(
    rng: &mut dyn RngCore,
    target: &dyn TargetModel,
    cov_root: &nalgebra::DMatrix<f64>,
    z: &[f64],
) -> StepOutcome {
    let u = nalgebra::DVector::from_vec(normals(rng, z.len()));
    let step = cov_root * u;
    let proposal: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
    let log_alpha = (target.log_density(&proposal) - target.log_density(z)).min(0.0);
    let a = rng.random::<f64>() < log_alpha.exp();
    StepOutcome {
        z_next: if a { proposal } else { z.to_vec() },
        a,
        v: 1,
        log_alpha,
        log_jac: 0.0,
    }
}

/// Random-walk Metropolis kernel.
#[derive(Clone)]
pub struct Rwm {
    target: SharedTarget,
    cov_root: nalgebra::DMatrix<f64>,
}

impl Rwm {
    pub fn new(target: SharedTarget, cov_root: nalgebra::DMatrix<f64>) -> Result<Self> {
        check_root(&cov_root, target.dim())?;
        Ok(Self { target, cov_root })
    }

    /// Isotropic proposal with standard deviation `scale`.
    pub fn isotropic(target: SharedTarget, scale: f64) -> Result<Self> {
        let d = target.dim();
        Self::new(target, nalgebra::DMatrix::identity(d, d) * scale)
    }
}

impl MarkovKernel for Rwm {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn step(&self, rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome> {
        Ok(rwm_unchecked(rng, self.target.as_ref(), &self.cov_root, z))
    }
}

/// `z + γ ∇log π̃(z) + sqrt(2γ) u`.
pub fn mala_forward(target: &dyn TargetModel, gamma: f64, z: &[f64], u: &[f64]) -> Vec<f64> {
    let g = target.grad_log_density(z);
    let c = (2.0 * gamma).sqrt();
    z.iter()
        .zip(&g)
        .zip(u)
        .map(|((z, g), u)| z + gamma * g + c * u)
        .collect()
}

/// Result of the fixed-point inversion of [`mala_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub z: Vec<f64>,
    pub iterations: usize,
    /// `‖mala_forward(z, u) - y‖∞` after each iteration.
    pub residuals: Vec<f64>,
}

fn residual(target: &dyn TargetModel, gamma: f64, z: &[f64], y: &[f64], u: &[f64]) -> f64 {
    mala_forward(target, gamma, z, u)
        .iter()
        .zip(y)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

/// Solves `mala_forward(z, u) = y` by iterating
/// `z <- y - sqrt(2γ) u - γ ∇log π̃(z)`, a contraction when `γL < 1`.
pub fn mala_inverse_with_stats(
    target: &dyn TargetModel,
    gamma: f64,
    y: &[f64],
    u: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    let c = (2.0 * gamma).sqrt();
    let base: Vec<f64> = y.iter().zip(u).map(|(y, u)| y - c * u).collect();
    let mut z = base.clone();
    let mut residuals = Vec::new();
    let mut r = residual(target, gamma, &z, y, u);
    let mut iterations = 0;
    while r > tol {
        if iterations == max_iter {
            return Err(Error::Convergence {
                iterations,
                residual: r,
            });
        }
        let g = target.grad_log_density(&z);
        z = base.iter().zip(&g).map(|(b, g)| b - gamma * g).collect();
        r = residual(target, gamma, &z, y, u);
        residuals.push(r);
        iterations += 1;
    }
    Ok(FixedPoint {
        z,
        iterations,
        residuals,
    })
}

pub fn mala_inverse(
    target: &dyn TargetModel,
    gamma: f64,
    y: &[f64],
    u: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    mala_inverse_with_stats(target, gamma, y, u, tol, max_iter).map(|f| f.z)
}

/// Metropolis-adjusted Langevin kernel with the usual proposal-density
/// correction.
#[derive(Clone)]
pub struct Mala {
    target: SharedTarget,
    gamma: f64,
}

impl Mala {
    pub fn new(target: SharedTarget, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("MALA step must be positive, got {gamma}")));
        }
        Ok(Self { target, gamma })
    }

    fn log_q(&self, to: &[f64], from: &[f64]) -> f64 {
        let mean = mala_forward(self.target.as_ref(), self.gamma, from, &vec![0.0; from.len()]);
        let d: Vec<f64> = to.iter().zip(&mean).map(|(a, b)| a - b).collect();
        -sq_norm(&d) / (4.0 * self.gamma)
    }
}

impl MarkovKernel for Mala {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn step(&self, rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome> {
        let u = normals(rng, z.len());
        let proposal = mala_forward(self.target.as_ref(), self.gamma, z, &u);
        let log_t = self.target.log_density(&proposal) + self.log_q(z, &proposal)
            - self.target.log_density(z)
            - self.log_q(&proposal, z);
        let log_alpha = log_t.min(0.0);
        let a = rng.random::<f64>() < log_alpha.exp();
        Ok(StepOutcome {
            z_next: if a { proposal } else { z.to_vec() },
            a,
            v: 1,
            log_alpha,
            log_jac: 0.0,
        })
    }
}

/// `n_steps` leapfrog updates for `U = -log π̃` with unit mass.
pub fn leapfrog(target: &dyn TargetModel, gamma: f64, n_steps: usize, q: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut g = target.grad_log_density(&q);
    for _ in 0..n_steps {
        // ∇U = -∇log π̃
        for (p, g) in p.iter_mut().zip(&g) {
            *p += 0.5 * gamma * g;
        }
        for (q, p) in q.iter_mut().zip(&p) {
            *q += gamma * p;
        }
        g = target.grad_log_density(&q);
        for (p, g) in p.iter_mut().zip(&g) {
            *p += 0.5 * gamma * g;
        }
    }
    (q, p)
}

fn hamiltonian(target: &dyn TargetModel, q: &[f64], p: &[f64]) -> f64 {
    -target.log_density(q) + 0.5 * sq_norm(p)
}

/// Proposes `LF(q, -p)`, an involution with unit Jacobian, and accepts with
/// `φ(exp(H(q, p) - H(q', p')))`. The state is `[q, p]`.
pub fn hmc_flip_step(
    rng: &mut dyn RngCore,
    target: &dyn TargetModel,
    family: RatioFamily,
    gamma: f64,
    n_steps: usize,
    q: &[f64],
    p: &[f64],
) -> Result<StepOutcome> {
    if !(gamma >= 0.0) || n_steps == 0 {
        return Err(Error::Config(format!("leapfrog needs gamma >= 0 and n_steps >= 1, got {gamma}, {n_steps}")));
    }
    let neg: Vec<f64> = p.iter().map(|x| -x).collect();
    let (q1, p1) = leapfrog(target, gamma, n_steps, q, &neg);
    let log_t = hamiltonian(target, q, p) - hamiltonian(target, &q1, &p1);
    let log_alpha = family.log_accept(&mut crate::grad::Eval, log_t);
    let a = rng.random::<f64>() < log_alpha.exp();
    let z_next = if a {
        [q1, p1].concat()
    } else {
        [q, p].concat()
    };
    Ok(StepOutcome {
        z_next,
        a,
        v: 1,
        log_alpha,
        log_jac: 0.0,
    })
}

/// `p' = a p + sqrt(1 - a²) u` with `u ~ N(0, I)`.
pub fn momentum_refresh(rng: &mut dyn RngCore, a_coef: f64, p: &[f64]) -> Result<Vec<f64>> {
    let u = normals(rng, p.len());
    momentum_refresh_with(a_coef, p, &u)
}

/// [`momentum_refresh`] with the Gaussian draw supplied.
pub fn momentum_refresh_with(a_coef: f64, p: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if !(a_coef > 0.0 && a_coef < 1.0) {
        return Err(Error::Config(format!("refresh coefficient must lie in (0, 1), got {a_coef}")));
    }
    let c = (1.0 - a_coef * a_coef).sqrt();
    Ok(p.iter().zip(u).map(|(p, u)| a_coef * p + c * u).collect())
}

/// `π ⊗ N(0, I)` on `[q, p]`, the invariant law of the HMC kernels.
#[derive(Clone)]
pub struct ExtendedTarget {
    inner: SharedTarget,
    name: String,
}

impl ExtendedTarget {
    pub fn new(inner: SharedTarget) -> Self {
        let name = format!("{}+momentum", inner.name());
        Self { inner, name }
    }
}

impl ScalarFunction for ExtendedTarget {
    fn value(&self, x: &[f64]) -> f64 {
        let d = self.inner.dim();
        self.inner.log_density(&x[..d]) - 0.5 * sq_norm(&x[d..])
    }

    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.inner.dim();
        let v = self.inner.value_and_grad(&x[..d], &mut grad[..d]);
        for i in d..2 * d {
            grad[i] = -x[i];
        }
        v - 0.5 * sq_norm(&x[d..])
    }
}

impl TargetModel for ExtendedTarget {
    fn dim(&self) -> usize {
        2 * self.inner.dim()
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let q = self.inner.exact_sample(rng)?;
        let p = normals(rng, q.len());
        Some([q, p].concat())
    }
}

/// Partial momentum refresh followed by a flip-leapfrog MH move, acting on
/// the extended state `[q, p]`.
#[derive(Clone)]
pub struct Hmc {
    pub target: SharedTarget,
    pub family: RatioFamily,
    pub gamma: f64,
    pub n_steps: usize,
    pub refresh: f64,
}

impl Hmc {
    pub fn new(target: SharedTarget, gamma: f64, n_steps: usize, refresh: f64) -> Result<Self> {
        if !(gamma > 0.0) || n_steps == 0 {
            return Err(Error::Config("HMC needs gamma > 0 and n_steps >= 1".into()));
        }
        if !(refresh > 0.0 && refresh < 1.0) {
            return Err(Error::Config(format!("refresh coefficient must lie in (0, 1), got {refresh}")));
        }
        Ok(Self {
            target,
            family: RatioFamily::MetropolisHastings,
            gamma,
            n_steps,
            refresh,
        })
    }
}

impl MarkovKernel for Hmc {
    fn dim(&self) -> usize {
        2 * self.target.dim()
    }

    fn step(&self, rng: &mut dyn RngCore, z: &[f64]) -> Result<StepOutcome> {
        let d = self.target.dim();
        let p = momentum_refresh(rng, self.refresh, &z[d..])?;
        hmc_flip_step(rng, self.target.as_ref(), self.family, self.gamma, self.n_steps, &z[..d], &p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::targets::{diag_normal, FnTarget};
    use std::sync::Arc;

    fn std_normal(d: usize) -> SharedTarget {
        Arc::new(diag_normal(vec![0.0; d], vec![1.0; d]).unwrap())
    }

    #[test]
    fn rwm_examples() {
        let t = std_normal(1);
        assert!((rwm_accept_prob(t.as_ref(), &[0.0], &[1.0]) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(rwm_accept_prob(t.as_ref(), &[0.4], &[0.4]), 1.0);
        let flat = FnTarget::new("flat", 2, Arc::new(|_: &[f64]| 0.0), Arc::new(|_: &[f64]| vec![0.0, 0.0]));
        assert_eq!(rwm_accept_prob(&flat, &[0.1, 0.2], &[0.5, -0.3]), 1.0);
        let mut r = rng::stream(0, 0, 0);
        let singular = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            rwm_step(&mut r, t.as_ref(), &nalgebra::DMatrix::zeros(1, 1), &[0.0]),
            Err(Error::Config(_))
        ));
        assert!(Rwm::new(std_normal(2), singular).is_err());
    }

    #[test]
    fn mala_examples() {
        let t = std_normal(1);
        assert_eq!(mala_forward(t.as_ref(), 0.0, &[2.0], &[0.0]), vec![2.0]);
        assert!((mala_forward(t.as_ref(), 0.5, &[4.0], &[1.0])[0] - 3.0).abs() < 1e-15);
        let z = mala_inverse(t.as_ref(), 0.5, &[3.0], &[1.0], 1e-10, 200).unwrap();
        assert!((z[0] - 4.0).abs() < 1e-9);
        let z = mala_inverse(t.as_ref(), 0.0, &[3.0], &[1.0], 1e-10, 200).unwrap();
        assert_eq!(z, vec![3.0]);
        let flat = FnTarget::new("flat", 1, Arc::new(|_: &[f64]| 0.0), Arc::new(|_: &[f64]| vec![0.0]));
        assert!((mala_forward(&flat, 0.5, &[1.0], &[0.5])[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn mala_inverse_reports_divergence() {
        // γL = 3 on a standard normal: the iteration expands
        let t = std_normal(1);
        let err = mala_inverse(t.as_ref(), 3.0, &[1.0], &[0.2], 1e-10, 50).unwrap_err();
        assert!(matches!(err, Error::Convergence { iterations: 50, .. }));
    }

    #[test]
    fn leapfrog_hand_values() {
        let t = std_normal(1);
        let (q, p) = leapfrog(t.as_ref(), 0.1, 1, &[1.0], &[0.0]);
        assert!((q[0] - 0.995).abs() < 1e-12);
        assert!((p[0] + 0.09975).abs() < 1e-12);
        let (q, p) = leapfrog(t.as_ref(), 0.0, 3, &[1.0], &[0.3]);
        assert_eq!((q, p), (vec![1.0], vec![0.3]));
    }

    #[test]
    fn hmc_flip_at_zero_step_always_accepts() {
        let t = std_normal(2);
        let mut r = rng::stream(2, 0, 0);
        let out = hmc_flip_step(&mut r, t.as_ref(), RatioFamily::MetropolisHastings, 0.0, 1, &[0.3, -1.0], &[0.5, 0.2]).unwrap();
        assert!(out.a);
        assert_eq!(out.log_alpha, 0.0);
        assert_eq!(out.z_next, vec![0.3, -1.0, -0.5, -0.2]);
    }

    #[test]
    fn momentum_refresh_examples() {
        let p = momentum_refresh_with(0.6, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let mut r = rng::stream(3, 0, 0);
        assert!(momentum_refresh(&mut r, 1.0, &[1.0]).is_err());
        assert!(momentum_refresh(&mut r, 0.0, &[1.0]).is_err());
        let p = momentum_refresh(&mut r, 1.0 - 1e-12, &[1.0, -2.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-4 && (p[1] + 2.0).abs() < 1e-4);
    }
}
