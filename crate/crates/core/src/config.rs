//! Run configuration, experiment presets and assembly of a runnable model
//! from a configuration.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::PriorModel;
use crate::elbo::{InferenceFn, Model};
use crate::error::{Error, Result};
use crate::flows::{draw_innovations, BlockKind, FlowSpec, FlowStack};
use crate::grad::ParamTree;
use crate::kernels::{DirectionDist, MetFlowKernels, RatioFamily};
use crate::rng;
use crate::targets::{
    diag_normal, gaussian_mixture, hypercube_mixture, neal_funnel, MixtureSpec, SharedTarget, TargetRegistry,
    HYPERCUBE_HALF_WIDTH,
};

/// Target selection with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Equal-weight Gaussians on a circle.
    Ring {
        #[serde(default = "default_ring_modes")]
        modes: usize,
        #[serde(default = "default_ring_radius")]
        radius: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Mixture {
        centers: Vec<Vec<f64>>,
        sigma: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Funnel {
        #[serde(default = "default_sigma")]
        sigma1: f64,
    },
    /// Eight modes at hypercube corners.
    Hypercube {
        dim: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    Normal { mean: Vec<f64>, std: Vec<f64> },
    /// A target registered by name at run time.
    Plugin { target: String },
}

fn default_ring_modes() -> usize {
    8
}
fn default_ring_radius() -> f64 {
    8.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_half_width() -> f64 {
    HYPERCUBE_HALF_WIDTH
}

impl TargetSpec {
    pub fn build(&self, registry: Option<&TargetRegistry>) -> Result<SharedTarget> {
        Ok(match self {
            TargetSpec::Ring { modes, radius, sigma } => Arc::new(gaussian_mixture(MixtureSpec::ring(*modes, *radius, *sigma))?),
            TargetSpec::Mixture { centers, sigma, weights } => {
                let spec = match weights {
                    Some(w) => MixtureSpec {
                        centers: centers.clone(),
                        sigma: *sigma,
                        weights: w.clone(),
                    },
                    None => MixtureSpec::equal_weights(centers.clone(), *sigma),
                };
                Arc::new(gaussian_mixture(spec)?)
            }
            TargetSpec::Funnel { sigma1 } => Arc::new(neal_funnel(*sigma1)?),
            TargetSpec::Hypercube { dim, half_width } => Arc::new(hypercube_mixture(*dim, *half_width)?),
            TargetSpec::Normal { mean, std } => Arc::new(diag_normal(mean.clone(), std.clone())?),
            TargetSpec::Plugin { target } => registry
                .and_then(|r| r.get(target))
                .ok_or_else(|| Error::Config(format!("unknown target '{target}'")))?,
        })
    }

    /// Component scale used by the default mode radius.
    pub fn mode_sigma(&self) -> f64 {
        match self {
            TargetSpec::Ring { sigma, .. } | TargetSpec::Mixture { sigma, .. } => *sigma,
            _ => 1.0,
        }
    }
}

/// How the innovation noise `u` of the proposal maps is handled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSetting {
    /// Separate parameters per step and no noise.
    Deterministic,
    /// Shared parameters; `u_{1:K}` drawn once from `seed` and kept.
    PseudoRandom { seed: u64 },
    /// Shared parameters; fresh `u_{1:K}` for every trajectory.
    FullyRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionMode {
    Uniform,
    Fixed { probs: Vec<f64> },
    Trainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Uniform,
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Auxiliary ELBO of the MetFlow chain.
    Metflow,
    /// Plain flow ELBO: every step applied forward, no accept/reject.
    FlowBaseline,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorInit {
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub log_scale: Option<Vec<f64>>,
    /// Whether the mean and log-scale are optimized.
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    /// Infinity-norm bound on the averaged gradient.
    pub grad_clip: Option<f64>,
    /// Decay of the moving average watched by early stopping.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 250,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            early_stop_patience: 250,
            grad_clip: None,
            ema_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.early_stop_patience == 0 || self.early_stop_patience > self.iterations {
            return Err(Error::Config("early_stop_patience must lie in 1..=iterations".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    /// Total kernel count is `extra_kernels · K`.
    pub extra_kernels: usize,
    /// Defaults to `4 √D σ`.
    pub mode_radius: Option<f64>,
    pub min_hits: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            extra_kernels: 1,
            mode_radius: None,
            min_hits: 10,
        }
    }
}

fn default_blocks() -> usize {
    2
}

fn default_kind() -> BlockKind {
    BlockKind::Rnvp
}

fn default_direction() -> DirectionMode {
    DirectionMode::Uniform
}

fn default_inference() -> InferenceMode {
    InferenceMode::Uniform
}

fn default_objective() -> Objective {
    Objective::Metflow
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub dim: usize,
    /// Number of trained MetFlow steps `K`.
    pub steps: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Hidden width; `4` for `D = 2`, otherwise `2D`, when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_kind")]
    pub flow: BlockKind,
    pub setting: NoiseSetting,
    #[serde(default)]
    pub family: RatioFamily,
    #[serde(default = "default_direction")]
    pub direction: DirectionMode,
    #[serde(default = "default_inference")]
    pub inference: InferenceMode,
    #[serde(default)]
    pub prior: PriorInit,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed is required".into()))
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or_else(|| FlowSpec::default_hidden(self.dim))
    }

    pub fn mode_radius(&self) -> f64 {
        self.sample
            .mode_radius
            .unwrap_or_else(|| 4.0 * (self.dim as f64).sqrt() * self.target.mode_sigma())
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.blocks == 0 || self.hidden() == 0 {
            return Err(Error::Config("blocks and hidden must be positive".into()));
        }
        if self.flow == BlockKind::Rnvp && self.dim < 2 {
            return Err(Error::Config("coupling flows need dim >= 2; use flow = \"affine\"".into()));
        }
        if let DirectionMode::Fixed { probs } = &self.direction {
            if probs.len() != self.steps {
                return Err(Error::Config(format!("{} direction probabilities for {} steps", probs.len(), self.steps)));
            }
        }
        for (name, v) in [("mean", &self.prior.mean), ("log_scale", &self.prior.log_scale)] {
            if v.as_ref().is_some_and(|v| v.len() != self.dim) {
                return Err(Error::Config(format!("prior {name} must have length {}", self.dim)));
            }
        }
        if self.sample.n == 0 || self.sample.extra_kernels == 0 {
            return Err(Error::Config("sample n and extra_kernels must be positive".into()));
        }
        if self.sample.mode_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("mode_radius must be positive".into()));
        }
        self.train.validate()
    }

    pub fn flow_spec(&self) -> FlowSpec {
        let randomized = !matches!(self.setting, NoiseSetting::Deterministic);
        FlowSpec {
            dim: self.dim,
            steps: self.steps,
            blocks: self.blocks,
            hidden: self.hidden(),
            kind: self.flow,
            shared: randomized,
            noisy: randomized,
        }
    }
}

/// A model assembled from a [`RunConfig`], with its initial parameters.
#[derive(Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub target: SharedTarget,
    pub model: Model,
    pub params: ParamTree,
    /// `u_{1:K}` in the pseudo-random setting.
    pub innovations: Option<Vec<Vec<f64>>>,
    /// Flat mask of optimized coordinates.
    pub trainable: Vec<bool>,
}

impl Setup {
    pub fn build(config: &RunConfig, registry: Option<&TargetRegistry>) -> Result<Self> {
        config.validate()?;
        let target = config.target.build(registry)?;
        if target.dim() != config.dim {
            return Err(Error::Config(format!(
                "target {} has dimension {}, config says {}",
                target.name(),
                target.dim(),
                config.dim
            )));
        }
        let seed = config.seed()?;
        let mut params = ParamTree::new();
        let prior = PriorModel::new(
            &mut params,
            config.prior.mean.clone().unwrap_or_else(|| vec![0.0; config.dim]),
            config.prior.log_scale.clone().unwrap_or_else(|| vec![0.0; config.dim]),
        )?;
        let spec = config.flow_spec();
        let stack = FlowStack::build(&mut params, &spec, &mut rng::stream(seed, rng::domain::INIT, 0))?;
        let nu = match &config.direction {
            DirectionMode::Uniform => DirectionDist::uniform(config.steps),
            DirectionMode::Fixed { probs } => DirectionDist::fixed(probs.clone())?,
            DirectionMode::Trainable => DirectionDist::trainable(&mut params, config.steps)?,
        };
        let inference = match config.inference {
            InferenceMode::Uniform => InferenceFn::Uniform,
            InferenceMode::Bernoulli => InferenceFn::bernoulli(&mut params, config.steps)?,
        };
        let innovations = match config.setting {
            NoiseSetting::PseudoRandom { seed: s } => Some(draw_innovations(&stack, &mut rng::stream(s, rng::domain::INNOVATIONS, 0))),
            _ => None,
        };
        let kernels = MetFlowKernels::new(stack, nu, config.family, target.clone())?;
        let mut trainable = vec![true; params.total_dim()];
        if !config.prior.trainable {
            for i in 0..config.dim {
                trainable[prior.mu + i] = false;
                trainable[prior.log_scale + i] = false;
            }
        }
        Ok(Self {
            config: config.clone(),
            target,
            model: Model { prior, kernels, inference },
            params,
            innovations,
            trainable,
        })
    }
}

/// Named experiment configurations.
pub fn preset(name: &str) -> Option<RunConfig> {
    let base = |target: TargetSpec, dim: usize| RunConfig {
        target,
        dim,
        steps: 5,
        blocks: 2,
        hidden: None,
        flow: BlockKind::Rnvp,
        setting: NoiseSetting::PseudoRandom { seed: 1 },
        family: RatioFamily::MetropolisHastings,
        direction: DirectionMode::Uniform,
        inference: InferenceMode::Uniform,
        prior: PriorInit::default(),
        objective: Objective::Metflow,
        train: TrainConfig::default(),
        sample: SampleConfig::default(),
        seed: Some(0),
        output_dir: None,
    };
    Some(match name {
        "mog2d" => {
            let mut c = base(
                TargetSpec::Ring {
                    modes: 8,
                    radius: 8.0,
                    sigma: 1.0,
                },
                2,
            );
            c.sample.extra_kernels = 20;
            c
        }
        "funnel" => {
            let mut c = base(TargetSpec::Funnel { sigma1: 1.0 }, 2);
            c.sample.extra_kernels = 100;
            c
        }
        "hypercube" => {
            let mut c = base(
                TargetSpec::Hypercube {
                    dim: 4,
                    half_width: HYPERCUBE_HALF_WIDTH,
                },
                4,
            );
            c.sample.extra_kernels = 20;
            c
        }
        "gauss1d" => {
            let mut c = base(
                TargetSpec::Normal {
                    mean: vec![3.0],
                    std: vec![1.0],
                },
                1,
            );
            c.steps = 1;
            c.flow = BlockKind::Affine;
            c.blocks = 1;
            c.prior.trainable = true;
            c.inference = InferenceMode::Bernoulli;
            c.train.iterations = 3000;
            c.train.learning_rate = 1e-2;
            c
        }
        _ => return None,
    })
}

pub const PRESETS: [&str; 4] = ["mog2d", "funnel", "hypercube", "gauss1d"];
