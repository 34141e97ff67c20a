//! Quick self-checks of the numerical building blocks.

use std::sync::Arc;
use std::time::Instant;

use clap::ValueEnum;
use metflow::config::{preset, Setup};
use metflow::density::marginal_logpdf;
use metflow::elbo::{accumulate_grad_estimate, simulate_trajectory, Noise};
use metflow::flows::{randomize_params, RnvpBlock};
use metflow::grad::{check_grad, Eval, ParamTree, Tape};
use metflow::kernels::{leapfrog, MetFlowKernel, Pushforward};
use metflow::rng;
use metflow::sampler::invariance_test;
use metflow::targets::diag_normal;
use metflow::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Balance,
    Density,
    Grad,
    Flows,
    Hmc,
    All,
}

#[derive(Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub pass: bool,
    pub negative_control: bool,
    pub suites: Vec<SuiteResult>,
}

const DOMAIN: u64 = 200;

pub fn run(suite: Suite, negative_control: bool) -> Result<Report> {
    let list: &[Suite] = match suite {
        Suite::All => &[Suite::Flows, Suite::Grad, Suite::Density, Suite::Balance, Suite::Hmc],
        _ => std::slice::from_ref(&suite),
    };
    let mut suites = Vec::new();
    for s in list {
        let start = Instant::now();
        let (name, (pass, detail)) = match s {
            Suite::Flows => ("flows", flows()?),
            Suite::Grad => ("grad", grad()?),
            Suite::Density => ("density", density()?),
            Suite::Balance => ("balance", balance(negative_control)?),
            Suite::Hmc => ("hmc", hmc()),
            Suite::All => unreachable!("expanded above"),
        };
        suites.push(SuiteResult {
            name,
            pass,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Report {
        pass: suites.iter().all(|s| s.pass),
        negative_control,
        suites,
    })
}

fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn log_abs_det_fd(f: &dyn Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> f64 {
    let d = z.len();
    let h = 1e-6;
    let mut jac = nalgebra::DMatrix::zeros(d, d);
    for j in 0..d {
        let (mut zp, mut zm) = (z.to_vec(), z.to_vec());
        zp[j] += h;
        zm[j] -= h;
        let (fp, fm) = (f(&zp), f(&zm));
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

fn flows() -> Result<(bool, String)> {
    let (mut roundtrip, mut jac) = (0.0f64, 0.0f64);
    for i in 0..200u64 {
        let mut r = rng::stream(i, DOMAIN, 0);
        let dim = 2 + (i as usize % 5);
        let noise_dim = if i % 2 == 0 { dim } else { 0 };
        let mask: Vec<bool> = (0..dim).map(|j| (j + i as usize) % 2 == 0).collect();
        let mut params = ParamTree::new();
        let block = RnvpBlock::new(&mut params, "b", mask, 4, noise_dim, &mut r)?;
        randomize_params(&mut params, "b", 0.5, &mut r);
        let u = normals(&mut r, noise_dim);
        let z = normals(&mut r, dim);
        let (fz, lj) = block.forward(&mut Eval, &params, &z, &u)?;
        let (back, lj_inv) = block.inverse(&mut Eval, &params, &fz, &u)?;
        roundtrip = roundtrip.max(max_abs_diff(&z, &back)).max((lj + lj_inv).abs());
        let f = |x: &[f64]| block.forward(&mut Eval, &params, x, &u).expect("forward").0;
        jac = jac.max(((lj - log_abs_det_fd(&f, &z)).exp() - 1.0).abs());
    }
    Ok((
        roundtrip <= 1e-9 && jac <= 1e-5,
        format!("200 blocks: roundtrip {roundtrip:.2e}, log-Jacobian rel {jac:.2e}"),
    ))
}

/// The mog2d preset with `k` steps and perturbed flows.
fn perturbed_setup(seed: u64, k: usize, scale: f64) -> Result<Setup> {
    let mut c = preset("mog2d").expect("mog2d preset");
    c.steps = k;
    c.seed = Some(seed);
    let mut s = Setup::build(&c, None)?;
    randomize_params(&mut s.params, "flow", scale, &mut rng::stream(seed, DOMAIN + 1, 0));
    Ok(s)
}

fn grad() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let s = perturbed_setup(i, 2, 0.3)?;
        let u = s.innovations.clone().expect("pseudo-random preset");
        let mut tape = Tape::new(&s.params);
        let t = simulate_trajectory(&mut tape, &s.params, &s.model, &mut rng::stream(i, DOMAIN + 2, 0), Noise::Fixed(&u))?;
        let mut g = vec![0.0; s.params.total_dim()];
        accumulate_grad_estimate(&mut tape, &t, &mut g, 1.0)?;
        worst = worst.max(check_grad(&mut tape, &s.params, 1e-6)?);
    }
    Ok((worst <= 1e-5, format!("10 K=2 trajectory tapes, worst rel {worst:.2e}")))
}

fn density() -> Result<(bool, String)> {
    let s = perturbed_setup(3, 2, 0.3)?;
    let u = s.innovations.clone().expect("pseudo-random preset");
    let (lo, hi, n) = (-8.0, 8.0, 320usize);
    let h = (hi - lo) / n as f64;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            mass += marginal_logpdf(&s.model.prior, &s.model.kernels, &s.params, &u, &z)?.exp() * h * h;
        }
    }
    Ok(((mass - 1.0).abs() <= 1e-4, format!("K=2 marginal mass on [-8, 8]^2: {mass:.6}")))
}

fn balance(negative_control: bool) -> Result<(bool, String)> {
    let mut passed = 0;
    let total = 10;
    for i in 0..total {
        let s = perturbed_setup(i, 5, 1.0)?;
        let kernel = MetFlowKernel {
            kernels: Arc::new(s.model.kernels.clone()),
            params: Arc::new(s.params.clone()),
            k: i as usize % 5,
            u: s.innovations.as_ref().expect("pseudo-random preset")[i as usize % 5].clone(),
        };
        let report = if negative_control {
            invariance_test(&Pushforward(kernel), s.target.as_ref(), 300, 500 + i)?
        } else {
            invariance_test(&kernel, s.target.as_ref(), 300, 500 + i)?
        };
        if report.pass {
            passed += 1;
        }
    }
    let label = if negative_control { "pushforward kernels" } else { "MetFlow kernels" };
    Ok((passed + 1 >= total, format!("{passed}/{total} {label} leave the target invariant")))
}

fn hmc() -> (bool, String) {
    let target = diag_normal(vec![0.5, -1.0], vec![1.0, 2.0]).expect("valid normal");
    let mut inv = 0.0f64;
    for i in 0..200u64 {
        let mut r = rng::stream(i, DOMAIN + 3, 0);
        let (q, p) = (normals(&mut r, 2), normals(&mut r, 2));
        let (q1, p1) = leapfrog(&target, 0.1, 10, &q, &p);
        let flipped: Vec<f64> = p1.iter().map(|x| -x).collect();
        let (q2, p2) = leapfrog(&target, 0.1, 10, &q1, &flipped);
        let p2: Vec<f64> = p2.iter().map(|x| -x).collect();
        inv = inv.max(max_abs_diff(&q, &q2)).max(max_abs_diff(&p, &p2));
    }
    let osc = diag_normal(vec![0.0], vec![1.0]).expect("valid normal");
    let (q, p) = leapfrog(&osc, 0.1, 1, &[1.0], &[0.0]);
    let hand = (q[0] - 0.995).abs().max((p[0] + 0.09975).abs());
    (
        inv <= 1e-8 && hand <= 1e-12,
        format!("leapfrog involution {inv:.2e}, oscillator step {hand:.1e}"),
    )
}
