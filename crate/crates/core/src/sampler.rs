//! Drawing from a trained model, iterating extra kernels with new
//! innovations, and sample diagnostics: mode counting, an invariance test
//! for single kernels and a one-sample Kolmogorov–Smirnov test.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{NoiseSetting, Objective, RunConfig, Setup};
use crate::elbo::{simulate_flow, simulate_trajectory, Noise};
use crate::error::{Error, Result};
use crate::flows::draw_innovations;
use crate::grad::{Eval, ParamTree};
use crate::kernels::{metflow_step, MarkovKernel};
use crate::rng;
use crate::targets::TargetModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// SHA-256 of the JSON-serialized run configuration.
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    /// Total MetFlow steps applied per chain, `m · K`.
    pub kernels: usize,
    pub occupancy: Option<ModeReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub meta: SampleMeta,
}

pub fn config_hash(config: &RunConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    Ok(Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

/// `n` independent chains: the K trained steps exactly as during training,
/// then `(m - 1)K` further steps, step `j` reusing the parameters of step
/// `j mod K` with a new innovation. Chain `i` reads stream `(seed, SAMPLE, i)`.
///
/// In the pseudo-random setting the new innovations are drawn once per call
/// and shared by all chains; in the fully random setting each chain draws
/// its own. The flow baseline pushes the prior through all flows and only
/// supports `m = 1`.
pub fn sample(setup: &Setup, params: &ParamTree, n: usize, m: usize, seed: u64) -> Result<SampleSet> {
    let cfg = &setup.config;
    if n == 0 || m == 0 {
        return Err(Error::Config("sample count and extra_kernels must be positive".into()));
    }
    let k = setup.model.kernels.steps();
    if m > 1 {
        if cfg.objective == Objective::FlowBaseline {
            return Err(Error::Config("the flow baseline has no kernels to iterate; use extra_kernels = 1".into()));
        }
        if cfg.setting == NoiseSetting::Deterministic {
            return Err(Error::Config(
                "the deterministic setting has one parameter set per step and cannot make new kernels; use extra_kernels = 1".into(),
            ));
        }
    }
    let extra = (m - 1) * k;
    let shared_extra = setup.innovations.as_ref().map(|_| {
        let mut r = rng::stream(seed, rng::domain::EXTRA_INNOVATIONS, 0);
        (0..m.saturating_sub(1))
            .flat_map(|_| draw_innovations(&setup.model.kernels.stack, &mut r))
            .collect::<Vec<_>>()
    });
    let pool = crate::train::thread_pool()?;
    let points: Vec<Vec<f64>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, rng::domain::SAMPLE, i as u64);
                let noise = match &setup.innovations {
                    Some(u) => Noise::Fixed(u),
                    None => Noise::Fresh,
                };
                if cfg.objective == Objective::FlowBaseline {
                    return Ok(simulate_flow(&mut Eval, params, &setup.model, &mut r, noise)?.0);
                }
                let t = simulate_trajectory(&mut Eval, params, &setup.model, &mut r, noise)?;
                let mut z = t.endpoint().to_vec();
                let own_extra;
                let extra_u = match &shared_extra {
                    Some(u) => u,
                    None => {
                        own_extra = (0..m - 1)
                            .flat_map(|_| draw_innovations(&setup.model.kernels.stack, &mut r))
                            .collect::<Vec<_>>();
                        &own_extra
                    }
                };
                for (j, u) in extra_u.iter().enumerate().take(extra) {
                    z = metflow_step(&mut r, &setup.model.kernels, params, j % k, &z, u)?.z_next;
                }
                Ok(z)
            })
            .collect::<Result<_>>()
    })?;
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical {
            node: None,
            detail: "non-finite sample".into(),
        });
    }
    Ok(SampleSet {
        meta: SampleMeta {
            config_hash: config_hash(cfg)?,
            seed,
            n,
            dim: cfg.dim,
            kernels: m * k,
            occupancy: None,
        },
        points,
    })
}

impl SampleSet {
    /// CSV with header `z1,…,zD`, one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (1..=self.meta.dim).map(|i| format!("z{i}")).collect();
        writeln!(f, "{}", header.join(","))?;
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Format(format!("{x}: {e}"))))
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub retrieved: usize,
    pub hits: Vec<usize>,
    pub occupancy: Vec<f64>,
    pub radius: f64,
    pub min_hits: usize,
}

/// A mode is retrieved when at least `min_hits` points lie within `radius`
/// of its center.
pub fn mode_count(points: &[Vec<f64>], centers: &[Vec<f64>], radius: f64, min_hits: usize) -> Result<ModeReport> {
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("mode radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let hits: Vec<usize> = centers
        .iter()
        .map(|c| {
            points
                .iter()
                .filter(|p| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2)
                .count()
        })
        .collect();
    let n = points.len().max(1) as f64;
    Ok(ModeReport {
        retrieved: hits.iter().filter(|&&h| h >= min_hits).count(),
        occupancy: hits.iter().map(|&h| h as f64 / n).collect(),
        hits,
        radius,
        min_hits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub pass: bool,
    /// Largest two-sample z-score over first and second moments per coordinate.
    pub max_moment_z: f64,
    pub energy: f64,
    pub p_value: f64,
}

/// Moment z-score bound and permutation-test level.
pub const INVARIANCE_Z: f64 = 3.0;
pub const INVARIANCE_LEVEL: f64 = 0.01;
const PERMUTATIONS: usize = 199;

fn energy_statistic(dist: &[f64], n2: usize, labels: &[bool]) -> f64 {
    // n·m/(n+m) · (2 E|X-Y| - E|X-X'| - E|Y-Y'|) with V-statistic means
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    let nx = labels.iter().filter(|&&l| l).count() as f64;
    let ny = n2 as f64 - nx;
    for i in 0..n2 {
        for j in (i + 1)..n2 {
            let d = dist[i * n2 + j];
            match (labels[i], labels[j]) {
                (true, true) => xx += d,
                (false, false) => yy += d,
                _ => xy += d,
            }
        }
    }
    let e = 2.0 * xy / (nx * ny) - 2.0 * xx / (nx * nx) - 2.0 * yy / (ny * ny);
    nx * ny / (nx + ny) * e
}

/// Energy-distance two-sample permutation test. Returns the statistic and
/// `(1 + #{permuted ≥ observed}) / (1 + permutations)`.
pub fn energy_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, rng: &mut dyn RngCore) -> (f64, f64) {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let n2 = pooled.len();
    let mut dist = vec![0.0; n2 * n2];
    for i in 0..n2 {
        for j in (i + 1)..n2 {
            let d = pooled[i].iter().zip(pooled[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist[i * n2 + j] = d;
        }
    }
    let mut labels: Vec<bool> = (0..n2).map(|i| i < x.len()).collect();
    let observed = energy_statistic(&dist, n2, &labels);
    let mut exceed = 0;
    for _ in 0..permutations {
        for i in (1..n2).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        if energy_statistic(&dist, n2, &labels) >= observed {
            exceed += 1;
        }
    }
    (observed, (1 + exceed) as f64 / (1 + permutations) as f64)
}

fn moment_z(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (m, v / n)
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        if ma == mb {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (ma - mb).abs() / se
    }
}

/// Moves `n` exact target draws one kernel step and compares them with `n`
/// fresh exact draws: per-coordinate means and second moments within
/// [`INVARIANCE_Z`] standard errors, and an energy-distance permutation
/// test with p-value above [`INVARIANCE_LEVEL`].
pub fn invariance_test(kernel: &dyn MarkovKernel, target: &dyn TargetModel, n: usize, seed: u64) -> Result<InvarianceReport> {
    if n < 2 {
        return Err(Error::Config("invariance test needs n >= 2".into()));
    }
    let no_sampler = || Error::Config(format!("target {} has no exact sampler", target.name()));
    let moved: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, rng::domain::CHECK, i as u64);
            let z = target.exact_sample(&mut r).ok_or_else(no_sampler)?;
            Ok(kernel.step(&mut r, &z)?.z_next)
        })
        .collect::<Result<_>>()?;
    let fresh: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, rng::domain::CHECK, (n + i) as u64);
            target.exact_sample(&mut r).ok_or_else(no_sampler)
        })
        .collect::<Result<_>>()?;
    let d = target.dim();
    let mut max_z = 0.0f64;
    for j in 0..d {
        for power in [1, 2] {
            let a: Vec<f64> = moved.iter().map(|p| p[j].powi(power)).collect();
            let b: Vec<f64> = fresh.iter().map(|p| p[j].powi(power)).collect();
            max_z = max_z.max(moment_z(&a, &b));
        }
    }
    let mut r = rng::stream(seed, rng::domain::CHECK, u64::MAX);
    let (energy, p_value) = energy_test(&moved, &fresh, PERMUTATIONS, &mut r);
    Ok(InvarianceReport {
        pass: max_z <= INVARIANCE_Z && p_value > INVARIANCE_LEVEL,
        max_moment_z: max_z,
        energy,
        p_value,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov distribution tail `P(K > λ) = 2 Σ (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of coordinate `coord` against `cdf`, with the
/// asymptotic p-value at `(√n + 0.12 + 0.11/√n) D`.
pub fn marginal_ks(points: &[Vec<f64>], coord: usize, cdf: impl Fn(f64) -> f64) -> Result<KsReport> {
    if points.is_empty() {
        return Err(Error::Config("KS test needs at least one sample".into()));
    }
    let mut xs: Vec<f64> = points
        .iter()
        .map(|p| p.get(coord).copied().ok_or_else(|| Error::Shape(format!("no coordinate {coord}"))))
        .collect::<Result<_>>()?;
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    });
    let sn = n.sqrt();
    Ok(KsReport {
        statistic: d,
        p_value: kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d),
    })
}
