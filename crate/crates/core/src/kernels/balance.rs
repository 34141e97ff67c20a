use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::MarkovKernel;
use crate::error::{Error, Result};
use crate::rng;
use crate::targets::TargetModel;

/// Where the starting points of the transition counts come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BalanceSource {
    /// `n` exact draws from the target. The test is a chi-square test of
    /// symmetry of the box-to-box transition counts; `tol` is its level.
    Exact { n: usize },
    /// Grid nodes on `[lo, hi]^D` weighted by the normalized target, each
    /// moved `repeats` times. `tol` bounds the largest flux asymmetry.
    Grid { points_per_dim: usize, repeats: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub pass: bool,
    /// `max_{A,B} |F(A→B) - F(B→A)|` as a probability mass.
    pub max_asymmetry: f64,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: Option<f64>,
    pub transitions: usize,
}

fn box_index(z: &[f64], lo: f64, hi: f64, cells: usize) -> usize {
    let width = (hi - lo) / cells as f64;
    z.iter().fold(0, |acc, &x| {
        let c = ((x - lo) / width).floor();
        let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, (cells - 1) as f64) };
        acc * cells + c as usize
    })
}

/// Compares the probability flux `∫_A π(z) M(z, B) dz` with its transpose
/// over a partition of `[lo, hi]^D` into `cells^D` boxes (outer boxes absorb
/// the tails). Only `D <= 2` is supported.
#[allow(clippy::too_many_arguments)]
pub fn detailed_balance_check(
    kernel: &dyn MarkovKernel,
    target: &dyn TargetModel,
    source: &BalanceSource,
    lo: f64,
    hi: f64,
    cells: usize,
    tol: f64,
    seed: u64,
) -> Result<BalanceReport> {
    let d = target.dim();
    if d == 0 || d > 2 || kernel.dim() != d {
        return Err(Error::Config(format!("balance check needs a 1-D or 2-D target matching the kernel, got {d}")));
    }
    if !(hi > lo) || cells == 0 {
        return Err(Error::Config("balance partition needs hi > lo and cells >= 1".into()));
    }
    let n_boxes = cells.pow(d as u32);
    let mut flux = vec![0.0f64; n_boxes * n_boxes];
    let transitions;
    match source {
        BalanceSource::Exact { n } => {
            let moves: Vec<(usize, usize)> = (0..*n)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng::stream(seed, rng::domain::CHECK, i as u64);
                    let z = target
                        .exact_sample(&mut r)
                        .ok_or_else(|| Error::Config(format!("target {} has no exact sampler", target.name())))?;
                    let out = kernel.step(&mut r, &z)?;
                    Ok((box_index(&z, lo, hi, cells), box_index(&out.z_next, lo, hi, cells)))
                })
                .collect::<Result<_>>()?;
            for (a, b) in moves {
                flux[a * n_boxes + b] += 1.0;
            }
            transitions = *n;
        }
        BalanceSource::Grid { points_per_dim, repeats } => {
            let m = *points_per_dim;
            if m == 0 || *repeats == 0 {
                return Err(Error::Config("grid balance needs points and repeats".into()));
            }
            let step = (hi - lo) / m as f64;
            let nodes: Vec<Vec<f64>> = (0..m.pow(d as u32))
                .map(|i| {
                    let mut idx = i;
                    let mut z = vec![0.0; d];
                    for j in (0..d).rev() {
                        z[j] = lo + (idx % m) as f64 * step + 0.5 * step;
                        idx /= m;
                    }
                    z
                })
                .collect();
            let logw: Vec<f64> = nodes.iter().map(|z| target.log_density(z)).collect();
            let lse = crate::grad::log_sum_exp(&logw);
            let moves: Vec<Vec<(usize, usize)>> = nodes
                .par_iter()
                .enumerate()
                .map(|(i, z)| {
                    let mut r = rng::stream(seed, rng::domain::CHECK, i as u64);
                    (0..*repeats)
                        .map(|_| {
                            let out = kernel.step(&mut r, z)?;
                            Ok((box_index(z, lo, hi, cells), box_index(&out.z_next, lo, hi, cells)))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            for (i, node_moves) in moves.iter().enumerate() {
                let w = (logw[i] - lse).exp() / *repeats as f64;
                for &(a, b) in node_moves {
                    flux[a * n_boxes + b] += w;
                }
            }
            transitions = nodes.len() * repeats;
        }
    }

    let scale = match source {
        BalanceSource::Exact { n } => 1.0 / *n as f64,
        BalanceSource::Grid { .. } => 1.0,
    };
    let mut max_asymmetry = 0.0f64;
    let mut chi2 = 0.0;
    let mut dof = 0;
    for a in 0..n_boxes {
        for b in (a + 1)..n_boxes {
            let (fab, fba) = (flux[a * n_boxes + b], flux[b * n_boxes + a]);
            max_asymmetry = max_asymmetry.max((fab - fba).abs() * scale);
            if fab + fba > 0.0 {
                chi2 += (fab - fba).powi(2) / (fab + fba);
                dof += 1;
            }
        }
    }
    let (pass, p_value) = match source {
        BalanceSource::Exact { .. } => {
            let p = if dof == 0 {
                1.0
            } else {
                let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
                1.0 - dist.cdf(chi2)
            };
            (p > tol, Some(p))
        }
        BalanceSource::Grid { .. } => (max_asymmetry <= tol, None),
    };
    Ok(BalanceReport {
        pass,
        max_asymmetry,
        chi2: if p_value.is_some() { chi2 } else { 0.0 },
        dof,
        p_value,
        transitions,
    })
}
