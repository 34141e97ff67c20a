//! Adam ascent on the auxiliary ELBO (or the plain flow ELBO), with
//! deterministic minibatch reduction, early stopping and checkpoint files.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Objective, RunConfig, Setup};
use crate::elbo::{accumulate_grad_estimate, simulate_flow, simulate_trajectory, Noise};
use crate::error::{Error, Result};
use crate::grad::{ParamEntry, ParamTree, Tape};
use crate::rng;

/// Trajectories per reduction chunk. Chunk sums are added in chunk order, so
/// the result does not depend on the number of threads.
const CHUNK: usize = 16;

/// Adam state for maximization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            betas,
            eps,
        }
    }

    /// `θ += lr · m̂ / (√v̂ + eps)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} slots, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Batch-mean ELBO at the parameters before the update.
    pub elbo: f64,
    pub ema: f64,
    /// Mean acceptance probability per step (empty for the flow baseline).
    pub accept: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamTree,
    pub log: Vec<LogRow>,
    pub stopped_early: bool,
    pub best_ema: f64,
}

/// Worker pool size: `METFLOW_THREADS` if set, otherwise rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("METFLOW_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct ChunkResult {
    grad: Vec<f64>,
    elbo: f64,
    accept: Vec<f64>,
}

/// Batch-averaged gradient estimate, mean ELBO and mean per-step acceptance
/// at `params`. Trajectory `j` of iteration `it` reads stream
/// `(seed, TRAIN, it · batch + j)`.
pub fn batch_gradient(setup: &Setup, params: &ParamTree, iteration: usize, pool: &rayon::ThreadPool) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let cfg = &setup.config;
    let seed = cfg.seed()?;
    let batch = cfg.train.batch_size;
    let n = params.total_dim();
    let k = setup.model.kernels.steps();
    let weight = 1.0 / batch as f64;
    let chunks: Vec<usize> = (0..batch.div_ceil(CHUNK)).collect();
    let results: Vec<ChunkResult> = pool.install(|| {
        chunks
            .par_iter()
            .map(|&c| {
                let mut out = ChunkResult {
                    grad: vec![0.0; n],
                    elbo: 0.0,
                    accept: vec![0.0; k],
                };
                let mut tape = Tape::new(params);
                for j in c * CHUNK..((c + 1) * CHUNK).min(batch) {
                    let mut r = rng::stream(seed, rng::domain::TRAIN, (iteration * batch + j) as u64);
                    let noise = match &setup.innovations {
                        Some(u) => Noise::Fixed(u),
                        None => Noise::Fresh,
                    };
                    tape.reset(params);
                    match cfg.objective {
                        Objective::Metflow => {
                            let t = simulate_trajectory(&mut tape, params, &setup.model, &mut r, noise)?;
                            out.elbo += tape_value(&tape, t.elbo) * weight;
                            for (acc, a) in out.accept.iter_mut().zip(&t.alphas) {
                                *acc += a * weight;
                            }
                            accumulate_grad_estimate(&mut tape, &t, &mut out.grad, weight)?;
                        }
                        Objective::FlowBaseline => {
                            let (_, elbo) = simulate_flow(&mut tape, params, &setup.model, &mut r, noise)?;
                            out.elbo += tape_value(&tape, elbo) * weight;
                            tape.set_output(elbo);
                            tape.accumulate_gradient(&mut out.grad, weight)?;
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut grad = vec![0.0; n];
    let mut elbo = 0.0;
    let mut accept = if cfg.objective == Objective::Metflow { vec![0.0; k] } else { Vec::new() };
    for r in results {
        for (g, x) in grad.iter_mut().zip(&r.grad) {
            *g += x;
        }
        elbo += r.elbo;
        for (a, x) in accept.iter_mut().zip(&r.accept) {
            *a += x;
        }
    }
    Ok((grad, elbo, accept))
}

fn tape_value(tape: &Tape, v: crate::grad::Var) -> f64 {
    use crate::grad::Ctx;
    tape.value(v)
}

/// Runs Adam from the setup's initial parameters.
pub fn train(setup: &Setup) -> Result<TrainOutcome> {
    train_with(setup, setup.params.clone(), |_| {})
}

/// Runs Adam from `params`, calling `observe` after every logged iteration.
pub fn train_with(setup: &Setup, mut params: ParamTree, mut observe: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let tc = &setup.config.train;
    tc.validate()?;
    let pool = thread_pool()?;
    let n = params.total_dim();
    let mut adam = Adam::new(n, tc.learning_rate, tc.adam_betas, tc.adam_eps);
    let mut log = Vec::with_capacity(tc.iterations);
    let mut ema = f64::NAN;
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for it in 0..tc.iterations {
        let diverged = |source: Error, params: &ParamTree| Error::Diverged {
            iteration: it,
            last_good: Box::new(params.clone()),
            source: Box::new(source),
        };
        let (mut grad, elbo, accept) = match batch_gradient(setup, &params, it, &pool) {
            Ok(x) => x,
            Err(e) if e.is_numerical() => return Err(diverged(e, &params)),
            Err(e) => return Err(e),
        };
        for (g, &on) in grad.iter_mut().zip(&setup.trainable) {
            if !on {
                *g = 0.0;
            }
        }
        if let Some(c) = tc.grad_clip {
            let m = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if m > c {
                grad.iter_mut().for_each(|g| *g *= c / m);
            }
        }
        let mut next = params.clone();
        adam.step(next.as_mut_slice(), &grad)?;
        if !next.is_finite() {
            let e = Error::Numerical {
                node: None,
                detail: "parameters became non-finite".into(),
            };
            return Err(diverged(e, &params));
        }
        params = next;
        ema = if ema.is_nan() { elbo } else { tc.ema_decay * ema + (1.0 - tc.ema_decay) * elbo };
        let row = LogRow {
            iteration: it,
            elbo,
            ema,
            accept,
        };
        observe(&row);
        log.push(row);
        if ema > best {
            best = ema;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        stopped_early,
        best_ema: best,
    })
}

/// Writes the training log as CSV: `iteration,elbo,ema,accept_1..accept_K`.
pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let k = log.first().map_or(0, |r| r.accept.len());
    write!(f, "iteration,elbo,ema")?;
    for i in 1..=k {
        write!(f, ",accept_{i}")?;
    }
    writeln!(f)?;
    for r in log {
        write!(f, "{},{},{}", r.iteration, r.elbo, r.ema)?;
        for a in &r.accept {
            write!(f, ",{a}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Names, shapes and run configuration stored next to the raw parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub config: RunConfig,
    pub innovations: Option<Vec<Vec<f64>>>,
    pub iterations_run: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamTree,
    pub manifest: Manifest,
}

/// Saves `params.bin` (little-endian f64, flat order) and `manifest.json`.
pub fn save_checkpoint(dir: &Path, setup: &Setup, params: &ParamTree, iterations_run: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = params.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(dir.join(PARAMS_FILE), bytes)?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        entries: params.entries().to_vec(),
        total: params.total_dim(),
        config: setup.config.clone(),
        innovations: setup.innovations.clone(),
        iterations_run,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let bytes = std::fs::read(dir.join(PARAMS_FILE))?;
    if bytes.len() != manifest.total * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest expects {} values",
            PARAMS_FILE,
            bytes.len(),
            manifest.total
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParamTree::from_parts(manifest.entries.clone(), values)?;
    Ok(Checkpoint { params, manifest })
}

impl Checkpoint {
    /// Rebuilds the run's setup and checks that the stored parameters fit it.
    pub fn setup(&self, registry: Option<&crate::targets::TargetRegistry>) -> Result<Setup> {
        let setup = Setup::build(&self.manifest.config, registry)?;
        if !setup.params.same_layout(&self.params) {
            return Err(Error::Config("checkpoint parameters do not match the configuration".into()));
        }
        if setup.innovations != self.manifest.innovations {
            return Err(Error::Config("checkpoint innovations do not match the configuration".into()));
        }
        Ok(setup)
    }
}

/// Summary written next to a checkpoint. Only `nondeterministic` may differ
/// between identical runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub final_elbo: f64,
    pub final_ema: f64,
    pub best_ema: f64,
    pub final_accept: Vec<f64>,
    pub nondeterministic: NondeterministicMeta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NondeterministicMeta {
    pub wall_clock_seconds: f64,
    pub threads: usize,
    pub unix_time: u64,
}

impl Metrics {
    pub fn from_outcome(outcome: &TrainOutcome, wall_clock_seconds: f64) -> Self {
        let last = outcome.log.last();
        Self {
            iterations_run: outcome.log.len(),
            stopped_early: outcome.stopped_early,
            final_elbo: last.map_or(f64::NAN, |r| r.elbo),
            final_ema: last.map_or(f64::NAN, |r| r.ema),
            best_ema: outcome.best_ema,
            final_accept: last.map(|r| r.accept.clone()).unwrap_or_default(),
            nondeterministic: NondeterministicMeta {
                wall_clock_seconds,
                threads: rayon::current_num_threads(),
                unix_time: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs()),
            },
        }
    }
}
