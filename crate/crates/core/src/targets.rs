//! Unnormalized target densities.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{log_sum_exp, ScalarFunction};

/// A target `log π̃` with its gradient. The value is the [`ScalarFunction`]
/// value, so a target can be spliced directly into a tape.
pub trait TargetModel: ScalarFunction {
    fn dim(&self) -> usize;

    fn name(&self) -> &str;

    fn log_density(&self, z: &[f64]) -> f64 {
        self.value(z)
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        self.value_and_grad(z, &mut g);
        g
    }

    /// One exact draw from the normalized target, when available.
    fn exact_sample(&self, _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }

    /// Mode locations for mode-counting diagnostics.
    fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        None
    }
}

pub type SharedTarget = Arc<dyn TargetModel>;

fn normal_vec(rng: &mut dyn RngCore, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn equal_weights(centers: Vec<Vec<f64>>, sigma: f64) -> Self {
        let n = centers.len().max(1);
        Self {
            weights: vec![1.0 / n as f64; centers.len()],
            centers,
            sigma,
        }
    }

    /// `modes` equally spaced centers on a circle of `radius`.
    pub fn ring(modes: usize, radius: f64, sigma: f64) -> Self {
        let centers = (0..modes)
            .map(|m| {
                let angle = 2.0 * PI * m as f64 / modes as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        Self::equal_weights(centers, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .centers
            .first()
            .ok_or_else(|| Error::Config("mixture has no centers".into()))?;
        let d = first.len();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::Config("mixture centers must share a positive dimension".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("mixture sigma must be positive, got {}", self.sigma)));
        }
        if self.weights.len() != self.centers.len() {
            return Err(Error::Config("one weight per center required".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must lie on the simplex".into()));
        }
        Ok(())
    }
}

/// `log Σ_m w_m exp(-|z - c_m|² / 2σ²)`.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    spec: MixtureSpec,
    log_weights: Vec<f64>,
    name: String,
}

impl GaussianMixture {
    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    fn component_logits(&self, z: &[f64], out: &mut Vec<f64>) {
        let inv = 1.0 / (2.0 * self.spec.sigma * self.spec.sigma);
        out.clear();
        for (c, lw) in self.spec.centers.iter().zip(&self.log_weights) {
            let d2: f64 = c.iter().zip(z).map(|(c, z)| (z - c) * (z - c)).sum();
            out.push(lw - d2 * inv);
        }
    }
}

pub fn gaussian_mixture(spec: MixtureSpec) -> Result<GaussianMixture> {
    spec.validate()?;
    let log_weights = spec.weights.iter().map(|w| w.ln()).collect();
    Ok(GaussianMixture {
        name: format!("mixture{}x{}", spec.centers.len(), spec.centers[0].len()),
        spec,
        log_weights,
    })
}

impl ScalarFunction for GaussianMixture {
    fn value(&self, z: &[f64]) -> f64 {
        let mut logits = Vec::with_capacity(self.spec.centers.len());
        self.component_logits(z, &mut logits);
        log_sum_exp(&logits)
    }

    fn value_and_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let mut logits = Vec::with_capacity(self.spec.centers.len());
        self.component_logits(z, &mut logits);
        let lse = log_sum_exp(&logits);
        let s2 = self.spec.sigma * self.spec.sigma;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (c, l) in self.spec.centers.iter().zip(&logits) {
            let r = (l - lse).exp();
            for ((g, c), z) in grad.iter_mut().zip(c).zip(z) {
                *g += r * (c - z) / s2;
            }
        }
        lse
    }
}

impl TargetModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.spec.centers[0].len()
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.spec.weights.len() - 1;
        for (m, w) in self.spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = m;
                break;
            }
        }
        let c = &self.spec.centers[pick];
        let eps = normal_vec(rng, c.len());
        Some(c.iter().zip(eps).map(|(c, e)| c + self.spec.sigma * e).collect())
    }

    fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        Some(self.spec.centers.clone())
    }
}

/// Default corner half-width: adjacent corners sit 10σ apart.
pub const HYPERCUBE_HALF_WIDTH: f64 = 5.0;

/// Eight unit-variance modes at distinct corners of `{-c, +c}^d`.
///
/// Corner `m` takes its first three signs from the bits of `m` and `+c` in
/// the remaining coordinates. For `d = 2` the square has only four corners,
/// so the radius-8 ring is used instead.
pub fn hypercube_mixture(d: usize, half_width: f64) -> Result<GaussianMixture> {
    if d < 2 {
        return Err(Error::Config(format!("hypercube mixture needs d >= 2, got {d}")));
    }
    if d == 2 {
        return gaussian_mixture(MixtureSpec::ring(8, 8.0, 1.0));
    }
    let centers = (0..8u32)
        .map(|m| {
            (0..d)
                .map(|j| {
                    let negative = j < 3 && (m >> j) & 1 == 1;
                    if negative {
                        -half_width
                    } else {
                        half_width
                    }
                })
                .collect()
        })
        .collect();
    let mut mix = gaussian_mixture(MixtureSpec::equal_weights(centers, 1.0))?;
    mix.name = format!("hypercube{d}");
    Ok(mix)
}

/// Funnel with `z1 ~ N(0, σ1²)` and `z2 | z1 ~ N(0, e^{z1})`:
/// `log π̃(z) = -z1²/(2σ1²) - z2² e^{-z1}/2 - z1/2`.
#[derive(Clone, Debug)]
pub struct Funnel {
    sigma1: f64,
}

pub fn neal_funnel(sigma1: f64) -> Result<Funnel> {
    if !(sigma1 > 0.0) {
        return Err(Error::Config(format!("funnel sigma1 must be positive, got {sigma1}")));
    }
    Ok(Funnel { sigma1 })
}

impl Funnel {
    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    /// Exact CDF of the first coordinate.
    pub fn marginal_cdf_z1(&self, x: f64) -> f64 {
        normal_cdf(x / self.sigma1)
    }
}

impl ScalarFunction for Funnel {
    fn value(&self, z: &[f64]) -> f64 {
        let s2 = self.sigma1 * self.sigma1;
        -z[0] * z[0] / (2.0 * s2) - z[1] * z[1] * (-z[0]).exp() / 2.0 - z[0] / 2.0
    }

    fn value_and_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let s2 = self.sigma1 * self.sigma1;
        let e = (-z[0]).exp();
        grad[0] = -z[0] / s2 + z[1] * z[1] * e / 2.0 - 0.5;
        grad[1] = -z[1] * e;
        -z[0] * z[0] / (2.0 * s2) - z[1] * z[1] * e / 2.0 - z[0] / 2.0
    }
}

impl TargetModel for Funnel {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "funnel"
    }

    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let z1 = self.sigma1 * rng.sample::<f64, _>(StandardNormal);
        let z2 = (z1 / 2.0).exp() * rng.sample::<f64, _>(StandardNormal);
        Some(vec![z1, z2])
    }
}

/// Normalized diagonal Gaussian.
#[derive(Clone, Debug)]
pub struct DiagNormal {
    mean: Vec<f64>,
    std: Vec<f64>,
    log_norm: f64,
}

pub fn diag_normal(mean: Vec<f64>, std: Vec<f64>) -> Result<DiagNormal> {
    if mean.is_empty() || mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("normal target needs matching mean/std with std > 0".into()));
    }
    let log_norm = -std.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * mean.len() as f64 * (2.0 * PI).ln();
    Ok(DiagNormal { mean, std, log_norm })
}

impl ScalarFunction for DiagNormal {
    fn value(&self, z: &[f64]) -> f64 {
        let q: f64 = z
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| ((z - m) / s).powi(2))
            .sum();
        self.log_norm - 0.5 * q
    }

    fn value_and_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        for (i, g) in grad.iter_mut().enumerate() {
            *g = -(z[i] - self.mean[i]) / (self.std[i] * self.std[i]);
        }
        self.value(z)
    }
}

impl TargetModel for DiagNormal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn name(&self) -> &str {
        "normal"
    }

    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let eps = normal_vec(rng, self.mean.len());
        Some(
            self.mean
                .iter()
                .zip(&self.std)
                .zip(eps)
                .map(|((m, s), e)| m + s * e)
                .collect(),
        )
    }

    fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        Some(vec![self.mean.clone()])
    }
}

pub type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// User-supplied target built from two callables over raw vectors.
#[derive(Clone)]
pub struct FnTarget {
    name: String,
    dim: usize,
    log_density: DensityFn,
    grad: GradientFn,
}

impl FnTarget {
    pub fn new(name: &str, dim: usize, log_density: DensityFn, grad: GradientFn) -> Self {
        Self {
            name: name.to_string(),
            dim,
            log_density,
            grad,
        }
    }
}

impl ScalarFunction for FnTarget {
    fn value(&self, z: &[f64]) -> f64 {
        (self.log_density)(z)
    }

    fn value_and_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let g = (self.grad)(z);
        grad.copy_from_slice(&g);
        (self.log_density)(z)
    }
}

impl TargetModel for FnTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Named plug-in targets, consulted when a run refers to a target by name.
#[derive(Clone, Default)]
pub struct TargetRegistry {
    targets: HashMap<String, SharedTarget>,
}

impl TargetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, target: SharedTarget) {
        self.targets.insert(target.name().to_string(), target);
    }

    pub fn register_fn(&mut self, name: &str, dim: usize, log_density: DensityFn, grad: GradientFn) {
        self.register(Arc::new(FnTarget::new(name, dim, log_density, grad)));
    }

    pub fn get(&self, name: &str) -> Option<SharedTarget> {
        self.targets.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.targets.keys().cloned().collect();
        v.sort();
        v
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::relative_error;
    use crate::rng;
    use rand::Rng;

    fn fd_error(t: &dyn TargetModel, z: &[f64]) -> f64 {
        let g = t.grad_log_density(z);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[i] += h;
            zm[i] -= h;
            let num = (t.log_density(&zp) - t.log_density(&zm)) / (2.0 * h);
            worst = worst.max(relative_error(g[i], num));
        }
        worst
    }

    #[test]
    fn mixture_examples() {
        let single = gaussian_mixture(MixtureSpec::equal_weights(vec![vec![1.0, -2.0]], 0.7)).unwrap();
        assert_eq!(single.log_density(&[1.0, -2.0]), 0.0);

        let ring = gaussian_mixture(MixtureSpec::ring(8, 8.0, 1.0)).unwrap();
        let g = ring.grad_log_density(&[0.0, 0.0]);
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");

        let two = gaussian_mixture(MixtureSpec::equal_weights(vec![vec![-1.0], vec![1.0]], 1.0)).unwrap();
        assert!((two.log_density(&[0.0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixture_validation() {
        assert!(gaussian_mixture(MixtureSpec::equal_weights(vec![], 1.0)).is_err());
        assert!(gaussian_mixture(MixtureSpec::ring(8, 8.0, 0.0)).is_err());
        let mut bad = MixtureSpec::ring(2, 1.0, 1.0);
        bad.weights = vec![0.7, 0.7];
        assert!(gaussian_mixture(bad).is_err());
    }

    #[test]
    fn mixture_is_permutation_invariant() {
        let spec = MixtureSpec {
            centers: vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![-3.0, 0.5]],
            sigma: 1.3,
            weights: vec![0.2, 0.5, 0.3],
        };
        let mut perm = spec.clone();
        perm.centers.rotate_left(1);
        perm.weights.rotate_left(1);
        let (a, b) = (gaussian_mixture(spec).unwrap(), gaussian_mixture(perm).unwrap());
        for z in [[0.3, -0.2], [5.0, 5.0], [-2.0, 0.0]] {
            assert!((a.log_density(&z) - b.log_density(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn funnel_examples() {
        let f = neal_funnel(1.0).unwrap();
        assert_eq!(f.log_density(&[0.0, 0.0]), 0.0);
        assert!((f.log_density(&[0.0, 1.0]) + 0.5).abs() < 1e-15);
        assert!(neal_funnel(0.0).is_err());
    }

    #[test]
    fn funnel_marginal_matches_quadrature() {
        // integrate exp(log π̃) over z2 on a fine grid; compare with N(0, σ²) shape
        let f = neal_funnel(1.0).unwrap();
        let norm = (2.0 * PI).ln();
        for z1 in [-1.5, 0.0, 0.8] {
            let s = (z1 / 2.0f64).exp();
            let n = 20001;
            let (lo, hi) = (-12.0 * s, 12.0 * s);
            let dz = (hi - lo) / (n - 1) as f64;
            let integral: f64 = (0..n)
                .map(|i| f.log_density(&[z1, lo + i as f64 * dz]).exp() * dz)
                .sum();
            // ∫ π̃ dz2 = sqrt(2π) exp(-z1²/2)
            let expected = (0.5 * norm - z1 * z1 / 2.0).exp();
            assert!((integral - expected).abs() < 1e-9, "{integral} vs {expected}");
        }
    }

    #[test]
    fn hypercube_layout() {
        let h3 = hypercube_mixture(3, 5.0).unwrap();
        let mut centers = h3.mode_centers().unwrap();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        centers.dedup();
        assert_eq!(centers.len(), 8);
        assert!(centers.iter().all(|c| c.iter().all(|x| x.abs() == 5.0)));

        let h2 = hypercube_mixture(2, 5.0).unwrap();
        assert_eq!(h2.spec(), &MixtureSpec::ring(8, 8.0, 1.0));
        assert!(hypercube_mixture(1, 5.0).is_err());

        let h4 = hypercube_mixture(4, 5.0).unwrap();
        let c = h4.mode_centers().unwrap();
        let mut min_sep = f64::INFINITY;
        for i in 0..8 {
            for j in 0..i {
                let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                min_sep = min_sep.min(d);
            }
        }
        assert!(min_sep >= 10.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let targets: Vec<SharedTarget> = vec![
            Arc::new(gaussian_mixture(MixtureSpec::ring(8, 8.0, 1.0)).unwrap()),
            Arc::new(hypercube_mixture(4, 5.0).unwrap()),
            Arc::new(neal_funnel(1.0).unwrap()),
            Arc::new(diag_normal(vec![3.0, -1.0], vec![1.0, 0.5]).unwrap()),
        ];
        let mut r = rng::stream(11, 0, 0);
        for t in &targets {
            for _ in 0..100 {
                let z: Vec<f64> = (0..t.dim()).map(|_| r.random_range(-4.0..4.0)).collect();
                let err = fd_error(t.as_ref(), &z);
                assert!(err <= 1e-5, "{} at {z:?}: {err}", t.name());
            }
        }
    }

    #[test]
    fn registry_plugins() {
        let mut reg = TargetRegistry::new();
        reg.register_fn(
            "quartic",
            1,
            Arc::new(|z: &[f64]| -z[0].powi(4)),
            Arc::new(|z: &[f64]| vec![-4.0 * z[0].powi(3)]),
        );
        let t = reg.get("quartic").unwrap();
        assert_eq!(t.log_density(&[2.0]), -16.0);
        assert_eq!(t.grad_log_density(&[1.0]), vec![-4.0]);
        assert!(reg.get("nope").is_none());
        assert_eq!(reg.names(), vec!["quartic".to_string()]);
    }

    #[test]
    fn exact_samplers_have_right_moments() {
        let f = neal_funnel(1.0).unwrap();
        let mut r = rng::stream(3, 0, 0);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| f.exact_sample(&mut r).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.03);
    }
}
