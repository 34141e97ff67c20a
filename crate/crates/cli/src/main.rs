use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use metflow::config::{preset, Objective, RunConfig, Setup, PRESETS};
use metflow::density::marginal_logpdf;
use metflow::sampler::{mode_count, sample};
use metflow::train::{load_checkpoint, save_checkpoint, train_with, write_log_csv, Checkpoint, Metrics};
use metflow::{Error, Result};

mod checks;

use checks::Suite;

#[derive(Parser)]
#[command(name = "metflow", version, about = "Train and sample Metropolized normalizing-flow kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, a training log and metrics.
    Train {
        /// TOML or JSON run configuration.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset instead of a configuration file.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the iteration budget.
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Draw samples from a trained checkpoint.
    Sample {
        /// Checkpoint directory written by `train`.
        checkpoint: PathBuf,
        /// Configuration the checkpoint must be compatible with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Passes through the K trained kernels per chain.
        #[arg(long)]
        extra_kernels: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode_radius: Option<f64>,
        /// Sample CSV; the JSON sidecar is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the exact variational log-density on a regular grid.
    EvalDensity {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        hi: f64,
        /// Grid points per dimension.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a self-check suite and print a JSON report.
    Check {
        #[arg(value_enum)]
        suite: Suite,
        /// Replace the MetFlow kernel with its unadjusted pushforward.
        #[arg(long)]
        inject_negative_control: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in presets.
    PresetList {
        /// Print the named preset as TOML.
        #[arg(long)]
        show: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            preset: name,
            seed,
            iterations,
            out,
        } => {
            let mut cfg = match (config, name) {
                (Some(path), _) => RunConfig::load(&path)?,
                (None, Some(name)) => preset(&name).ok_or_else(|| Error::Config(format!("unknown preset {name}")))?,
                (None, None) => return Err(Error::Config("train needs --config or --preset".into())),
            };
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(it) = iterations {
                cfg.train.iterations = it;
                cfg.train.early_stop_patience = cfg.train.early_stop_patience.min(it);
            }
            cmd_train(&cfg, &out)
        }
        Command::Sample {
            checkpoint,
            config,
            n,
            extra_kernels,
            seed,
            mode_radius,
            out,
        } => {
            let out = out.unwrap_or_else(|| checkpoint.join("samples.csv"));
            cmd_sample(&checkpoint, config.as_deref(), n, extra_kernels, seed, mode_radius, &out)
        }
        Command::EvalDensity { checkpoint, lo, hi, n, out } => {
            let out = out.unwrap_or_else(|| checkpoint.join("density.csv"));
            cmd_eval_density(&checkpoint, lo, hi, n, &out)
        }
        Command::Check {
            suite,
            inject_negative_control,
            out,
        } => {
            let report = checks::run(suite, inject_negative_control)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(path, json + "\n")?;
            }
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::PresetList { show } => {
            match show {
                Some(name) => {
                    let cfg = preset(&name).ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
                    print!("{}", cfg.to_toml()?);
                }
                None => {
                    for name in PRESETS {
                        let c = preset(name).expect("listed preset");
                        let target = c.target.build(None)?;
                        println!("{name}\t{} D={} K={} m={}", target.name(), c.dim, c.steps, c.sample.extra_kernels);
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let setup = Setup::build(cfg, None)?;
    let start = Instant::now();
    let every = (cfg.train.iterations / 10).max(1);
    let outcome = train_with(&setup, setup.params.clone(), |row| {
        if row.iteration % every == 0 {
            eprintln!("iteration {:>6}  elbo {:>10.4}  ema {:>10.4}", row.iteration, row.elbo, row.ema);
        }
    })?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(out, &setup, &outcome.params, outcome.log.len())?;
    write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    let metrics = Metrics::from_outcome(&outcome, start.elapsed().as_secs_f64());
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    eprintln!(
        "trained {} iterations{}, final elbo ema {:.4}; checkpoint in {}",
        outcome.log.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        metrics.final_ema,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_setup(checkpoint: &Checkpoint, config: Option<&Path>) -> Result<Setup> {
    match config {
        None => checkpoint.setup(None),
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let mut probe = checkpoint.clone();
            probe.manifest.config = cfg;
            probe.setup(None)
        }
    }
}

fn cmd_sample(
    dir: &Path,
    config: Option<&Path>,
    n: Option<usize>,
    extra_kernels: Option<usize>,
    seed: Option<u64>,
    mode_radius: Option<f64>,
    out: &Path,
) -> Result<ExitCode> {
    let checkpoint = load_checkpoint(dir)?;
    let setup = checkpoint_setup(&checkpoint, config)?;
    let cfg = &setup.config;
    let n = n.unwrap_or(cfg.sample.n);
    let m = extra_kernels.unwrap_or(cfg.sample.extra_kernels);
    let seed = match seed {
        Some(s) => s,
        None => cfg.seed()?,
    };
    let mut set = sample(&setup, &checkpoint.params, n, m, seed)?;
    if let Some(centers) = setup.target.mode_centers() {
        let radius = mode_radius.unwrap_or_else(|| cfg.mode_radius());
        set.meta.occupancy = Some(mode_count(&set.points, &centers, radius, cfg.sample.min_hits)?);
    }
    set.write_csv(out)?;
    set.write_sidecar(&out.with_extension("json"))?;
    match &set.meta.occupancy {
        Some(r) => eprintln!("{n} samples to {}; {}/{} modes retrieved", out.display(), r.retrieved, r.hits.len()),
        None => eprintln!("{n} samples to {}", out.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_density(dir: &Path, lo: f64, hi: f64, n: usize, out: &Path) -> Result<ExitCode> {
    use std::io::Write;

    let checkpoint = load_checkpoint(dir)?;
    let setup = checkpoint_setup(&checkpoint, None)?;
    let cfg = &setup.config;
    if cfg.objective == Objective::FlowBaseline {
        return Err(Error::Config("eval-density needs a MetFlow checkpoint".into()));
    }
    if cfg.dim > 2 {
        return Err(Error::Config(format!("eval-density supports D <= 2, checkpoint has D = {}", cfg.dim)));
    }
    if !(hi > lo) || n < 2 {
        return Err(Error::Config("grid needs hi > lo and at least 2 points".into()));
    }
    let u = match &setup.innovations {
        Some(u) => u.clone(),
        None if setup.model.kernels.stack.noise_dim == 0 => vec![Vec::new(); cfg.steps],
        None => return Err(Error::Config("the fully random setting has no fixed-innovation density".into())),
    };
    let axis: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let points: Vec<Vec<f64>> = if cfg.dim == 1 {
        axis.iter().map(|&x| vec![x]).collect()
    } else {
        axis.iter().flat_map(|&x| axis.iter().map(move |&y| vec![x, y])).collect()
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    let header: Vec<String> = (1..=cfg.dim).map(|i| format!("z{i}")).collect();
    writeln!(f, "{},log_density", header.join(","))?;
    for z in &points {
        let lp = marginal_logpdf(&setup.model.prior, &setup.model.kernels, &checkpoint.params, &u, z)?;
        let row: Vec<String> = z.iter().map(|x| x.to_string()).collect();
        writeln!(f, "{},{lp}", row.join(","))?;
    }
    f.flush()?;
    eprintln!("{} grid points to {}", points.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
