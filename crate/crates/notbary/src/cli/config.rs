use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::solver::ModelKind;
use crate::{Error, Result};

/// Named experiment preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Twister,
    GaussianBenchmark,
    DiracSanity,
}

impl ExperimentKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentKind::Twister => "twister",
            ExperimentKind::GaussianBenchmark => "gaussian-benchmark",
            ExperimentKind::DiracSanity => "dirac-sanity",
        }
    }
}

/// Weak-cost family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFamily {
    Classical,
    Kl,
    Energy,
}

/// Resolved cost settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub family: CostFamily,
    /// KL regularization strength.
    pub epsilon: f64,
    /// Energy regularization strength.
    pub gamma: f64,
    /// Semimetric exponent for energy costs.
    pub alpha: f64,
    /// Prior mean for KL and energy costs.
    pub prior_mean: Vec<f64>,
    /// Diagonal prior variances for KL and energy costs.
    pub prior_var: Vec<f64>,
}

/// Resolved twister instance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwisterParams {
    pub radius: f64,
    pub sigma: f64,
    pub kappa: f64,
}

/// Resolved training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub batch_size: usize,
    pub inner_steps: usize,
    pub cond_batch: usize,
    pub prior_batch: usize,
    pub lr_potential: f64,
    pub lr_map: f64,
    pub epochs: u64,
    pub hidden_layers: Vec<usize>,
    pub average_tail: f64,
    pub noise_dim: Option<usize>,
}

/// Resolved evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per metric estimate.
    pub samples: usize,
    /// Conditional draws for conditional-mean evaluation of stochastic maps.
    pub cond_draws: usize,
}

/// A fully resolved experiment configuration. Serializing and re-parsing an
/// effective config reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out_dir: String,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub model: ModelKind,
    pub cost: CostConfig,
    pub twister: TwisterParams,
    pub train: TrainParams,
    pub eval: EvalConfig,
    /// Checkpoint every this many epochs; 0 means final checkpoint only.
    pub checkpoint_interval: u64,
    /// Maximum rows per sample-dump CSV.
    pub sample_dump_cap: usize,
}

/// User-facing config: every field optional except the experiment tag.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<ExperimentKind>,
    seed: Option<u64>,
    out_dir: Option<String>,
    dim: Option<usize>,
    weights: Option<Vec<f64>>,
    model: Option<ModelKind>,
    cost: Option<RawCost>,
    twister: Option<RawTwister>,
    train: Option<RawTrain>,
    eval: Option<RawEval>,
    checkpoint_interval: Option<u64>,
    sample_dump_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    family: Option<CostFamily>,
    epsilon: Option<f64>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    prior_mean: Option<Vec<f64>>,
    prior_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTwister {
    radius: Option<f64>,
    sigma: Option<f64>,
    kappa: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    batch_size: Option<usize>,
    inner_steps: Option<usize>,
    cond_batch: Option<usize>,
    prior_batch: Option<usize>,
    lr_potential: Option<f64>,
    lr_map: Option<f64>,
    epochs: Option<u64>,
    hidden_layers: Option<Vec<usize>>,
    average_tail: Option<f64>,
    noise_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    samples: Option<usize>,
    cond_draws: Option<usize>,
}

/// Parses and resolves a JSON config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Parses and resolves a JSON config from a string.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let experiment = raw
        .experiment
        .ok_or_else(|| Error::config("missing required key `experiment`"))?;

    let (def_dim, def_weights, def_model, def_family): (usize, Vec<f64>, ModelKind, CostFamily) =
        match experiment {
            ExperimentKind::Twister => {
                (2, vec![1.0 / 3.0; 3], ModelKind::Stochastic, CostFamily::Classical)
            }
            ExperimentKind::GaussianBenchmark => (
                2,
                vec![0.25, 0.25, 0.5],
                ModelKind::Deterministic,
                CostFamily::Classical,
            ),
            ExperimentKind::DiracSanity => {
                (1, vec![0.5, 0.5], ModelKind::Deterministic, CostFamily::Classical)
            }
        };

    let dim = raw.dim.unwrap_or(def_dim);
    let weights = raw.weights.unwrap_or(def_weights);
    let cost_raw = raw.cost.unwrap_or_default();
    let family = cost_raw.family.unwrap_or(def_family);
    let model = raw.model.unwrap_or(match (experiment, family) {
        (_, CostFamily::Kl) => ModelKind::Gaussian,
        _ => def_model,
    });

    let twister_raw = raw.twister.unwrap_or_default();
    let twister = TwisterParams {
        radius: twister_raw.radius.unwrap_or(3.0),
        sigma: twister_raw.sigma.unwrap_or(0.5),
        kappa: twister_raw.kappa.unwrap_or(1.0),
    };

    let train_raw = raw.train.unwrap_or_default();
    let (def_batch, def_epochs, def_hidden, def_tail): (usize, u64, Vec<usize>, f64) =
        match experiment {
            ExperimentKind::DiracSanity => (16, 2000, vec![32, 32], 0.5),
            _ => (1024, 1200, vec![64, 64], 0.25),
        };
    let train = TrainParams {
        batch_size: train_raw.batch_size.unwrap_or(def_batch),
        inner_steps: train_raw.inner_steps.unwrap_or(3),
        cond_batch: train_raw.cond_batch.unwrap_or(2),
        prior_batch: train_raw.prior_batch.unwrap_or(8),
        lr_potential: train_raw.lr_potential.unwrap_or(1e-3),
        lr_map: train_raw.lr_map.unwrap_or(1e-3),
        epochs: train_raw.epochs.unwrap_or(def_epochs),
        hidden_layers: train_raw.hidden_layers.unwrap_or(def_hidden),
        average_tail: train_raw.average_tail.unwrap_or(def_tail),
        noise_dim: train_raw.noise_dim,
    };

    let eval_raw = raw.eval.unwrap_or_default();
    let eval = EvalConfig {
        samples: eval_raw.samples.unwrap_or(4096),
        cond_draws: eval_raw.cond_draws.unwrap_or(64),
    };

    let cost = CostConfig {
        family,
        epsilon: cost_raw.epsilon.unwrap_or(1.0),
        gamma: cost_raw.gamma.unwrap_or(1.0),
        alpha: cost_raw.alpha.unwrap_or(1.0),
        prior_mean: cost_raw.prior_mean.unwrap_or_else(|| default_prior_mean(experiment, dim)),
        prior_var: cost_raw.prior_var.unwrap_or_else(|| vec![1.0; dim]),
    };

    let config = ExperimentConfig {
        experiment,
        seed: raw.seed.unwrap_or(0),
        out_dir: raw.out_dir.unwrap_or_else(|| format!("runs/{}", experiment.tag())),
        dim,
        weights,
        model,
        cost,
        twister,
        train,
        eval,
        checkpoint_interval: raw.checkpoint_interval.unwrap_or(0),
        sample_dump_cap: raw.sample_dump_cap.unwrap_or(8192),
    };
    validate(&config)?;
    Ok(config)
}

fn default_prior_mean(experiment: ExperimentKind, dim: usize) -> Vec<f64> {
    match experiment {
        ExperimentKind::Twister => vec![5.0, 5.0],
        _ => vec![0.0; dim],
    }
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.weights.len() < 2 {
        return Err(Error::config("weights: need at least two references"));
    }
    if cfg.weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::config("weights: all entries must be positive"));
    }
    let total: f64 = cfg.weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("weights: must sum to 1 (got {total})")));
    }
    match cfg.experiment {
        ExperimentKind::Twister => {
            if cfg.dim != 2 {
                return Err(Error::config("dim: the twister experiment is two-dimensional"));
            }
            if cfg.weights.len() != 3 {
                return Err(Error::config("weights: the twister experiment has three references"));
            }
        }
        ExperimentKind::DiracSanity => {
            if cfg.dim != 1 {
                return Err(Error::config("dim: the dirac-sanity experiment is one-dimensional"));
            }
            if cfg.weights.len() != 2 {
                return Err(Error::config("weights: dirac-sanity has two references"));
            }
        }
        ExperimentKind::GaussianBenchmark => {
            if cfg.dim < 1 {
                return Err(Error::config("dim: must be at least 1"));
            }
        }
    }
    if cfg.twister.radius <= 0.0 || cfg.twister.sigma <= 0.0 {
        return Err(Error::config("twister: radius and sigma must be positive"));
    }
    match cfg.cost.family {
        CostFamily::Kl => {
            if cfg.cost.epsilon <= 0.0 {
                return Err(Error::config("cost.epsilon: must be positive for the kl family"));
            }
            if cfg.model != ModelKind::Gaussian {
                return Err(Error::config("model: kl costs require the gaussian model"));
            }
        }
        CostFamily::Energy => {
            if cfg.cost.gamma <= 0.0 {
                return Err(Error::config("cost.gamma: must be positive for the energy family"));
            }
            if !(1.0..=2.0).contains(&cfg.cost.alpha) {
                return Err(Error::config("cost.alpha: must lie in [1, 2]"));
            }
            if cfg.train.cond_batch < 2 && cfg.model != ModelKind::Deterministic {
                return Err(Error::config(
                    "train.cond_batch: energy costs need at least 2 conditional samples",
                ));
            }
        }
        CostFamily::Classical => {}
    }
    if cfg.cost.family != CostFamily::Classical {
        if cfg.cost.prior_mean.len() != cfg.dim || cfg.cost.prior_var.len() != cfg.dim {
            return Err(Error::config(format!(
                "cost.prior_mean/prior_var: must have dimension {}",
                cfg.dim
            )));
        }
        if cfg.cost.prior_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::config("cost.prior_var: entries must be positive"));
        }
    }
    if cfg.train.batch_size == 0
        || cfg.train.inner_steps == 0
        || cfg.train.cond_batch == 0
        || cfg.train.prior_batch == 0
        || cfg.train.epochs == 0
    {
        return Err(Error::config("train: counts and epochs must be at least 1"));
    }
    if cfg.train.lr_potential <= 0.0 || cfg.train.lr_map <= 0.0 {
        return Err(Error::config("train.lr_potential/lr_map: must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.train.average_tail) {
        return Err(Error::config("train.average_tail: must lie in [0, 1]"));
    }
    if cfg.eval.samples < 2 || cfg.eval.cond_draws == 0 {
        return Err(Error::config("eval: samples must be >= 2 and cond_draws >= 1"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Solver-level training config for this experiment.
    pub fn train_config(&self) -> crate::solver::TrainConfig {
        crate::solver::TrainConfig {
            batch_size: self.train.batch_size,
            inner_steps: self.train.inner_steps,
            cond_batch: self.train.cond_batch,
            prior_batch: self.train.prior_batch,
            lr_potential: self.train.lr_potential,
            lr_map: self.train.lr_map,
            epochs: self.train.epochs,
            seed: self.seed,
            hidden_layers: self.train.hidden_layers.clone(),
            model_kind: self.model,
            noise_dim: self.train.noise_dim,
            average_tail: self.train.average_tail,
        }
    }

    /// Canonical JSON of the effective config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex-encoded; checkpoints are bound to
    /// this hash.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
