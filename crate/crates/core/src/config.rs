//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to the desk-scale default; unknown keys are rejected.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `seed` | root seed of every random stream | 0 |
//! | `dataset` | `blobs` or `csv` | blobs |
//! | `csv_train`, `csv_test` | CSV paths (`dataset = csv`; test falls back to train) | |
//! | `classes`, `per_class`, `d_in` | blob shape | 10, 200, 32 |
//! | `separation`, `noise` | blob mean radius and noise std | 300.0, 180.0 |
//! | `model` | `linear`, `logistic` or `mlp` | mlp |
//! | `hidden`, `activation` | MLP width and `tanh`/`relu` | 64, tanh |
//! | `clients` | total clients M | 50 |
//! | `alpha` | Dirichlet concentration | 0.3 |
//! | `rounds` | communication rounds T | 200 |
//! | `tau` | local steps per round | 20 |
//! | `clients_per_round` | participants per round | 10 |
//! | `batch_size` | local batch size | 32 |
//! | `backbone` | `fedavg`, `fedprox`, `scaffold`, `fedexp`, `fedadam`, `fedavgm` | fedavg |
//! | `rule` | `plain_wd`, `gradclip_wd`, `fednar` | fednar |
//! | `l0`, `rho` | local learning rate and per-round decay | 0.01, 0.998 |
//! | `u0`, `gamma` | weight decay and per-round decay | 0.01, 0.998 |
//! | `max_norm` | clipping threshold A | 10 |
//! | `lambda_g` | global learning rate | 1.0 |
//! | `prox_mu` | FedProx coefficient | 0.01 |
//! | `server_momentum` | FedAvgM momentum | 0.9 |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | FedAdam constants | 0.9, 0.99, 1e-3 |
//! | `exp_eps` | FedExP stabilizer | 1e-3 |
//! | `lemma1`, `norm_bound`, `clip_stats` | diagnostics toggles | true |
//! | `eval_every` | rounds between evaluations | 1 |
//! | `record_snapshots` | keep local iterates in traces | false |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::local_engine::RuleKind;
use crate::models::Activation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', found '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': cannot parse '{value}' ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("clients_per_round ({per_round}) exceeds clients ({clients})")]
    TooManyPerRound { per_round: usize, clients: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    FedAvg,
    FedProx,
    Scaffold,
    FedExp,
    FedAdam,
    FedAvgM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub csv_train: Option<PathBuf>,
    pub csv_test: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub separation: f64,
    pub noise: f64,
    pub model: ModelKind,
    pub hidden: usize,
    pub activation: Activation,
    pub clients: usize,
    pub alpha: f64,
    pub rounds: usize,
    pub tau: usize,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub backbone: Backbone,
    pub rule: RuleKind,
    pub l0: f64,
    pub rho: f64,
    pub u0: f64,
    pub gamma: f64,
    pub max_norm: f64,
    pub lambda_g: f64,
    pub prox_mu: f64,
    pub server_momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub exp_eps: f64,
    pub lemma1: bool,
    pub norm_bound: bool,
    pub clip_stats: bool,
    pub eval_every: usize,
    pub record_snapshots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetKind::Blobs,
            csv_train: None,
            csv_test: None,
            classes: 10,
            per_class: 200,
            d_in: 32,
            separation: 300.0,
            noise: 180.0,
            model: ModelKind::Mlp,
            hidden: 64,
            activation: Activation::Tanh,
            clients: 50,
            alpha: 0.3,
            rounds: 200,
            tau: 20,
            clients_per_round: 10,
            batch_size: 32,
            backbone: Backbone::FedAvg,
            rule: RuleKind::FedNar,
            l0: 0.01,
            rho: 0.998,
            u0: 0.01,
            gamma: 0.998,
            max_norm: 10.0,
            lambda_g: 1.0,
            prox_mu: 0.01,
            server_momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-3,
            exp_eps: 1e-3,
            lemma1: true,
            norm_bound: true,
            clip_stats: true,
            eval_every: 1,
            record_snapshots: false,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset",
    "csv_train",
    "csv_test",
    "classes",
    "per_class",
    "d_in",
    "separation",
    "noise",
    "model",
    "hidden",
    "activation",
    "clients",
    "alpha",
    "rounds",
    "tau",
    "clients_per_round",
    "batch_size",
    "backbone",
    "rule",
    "l0",
    "rho",
    "u0",
    "gamma",
    "max_norm",
    "lambda_g",
    "prox_mu",
    "server_momentum",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "exp_eps",
    "lemma1",
    "norm_bound",
    "clip_stats",
    "eval_every",
    "record_snapshots",
];

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        expected,
    }
}

fn real(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| bad(key, value, "finite real"))
}

fn count(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value, "non-negative integer"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value, "boolean")),
    }
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v, "unsigned 64-bit integer"))?,
            "dataset" => {
                self.dataset = match v.to_ascii_lowercase().as_str() {
                    "blobs" => DatasetKind::Blobs,
                    "csv" => DatasetKind::Csv,
                    _ => return Err(bad(key, v, "blobs|csv")),
                }
            }
            "csv_train" => self.csv_train = Some(PathBuf::from(v)),
            "csv_test" => self.csv_test = Some(PathBuf::from(v)),
            "classes" => self.classes = count(key, v)?,
            "per_class" => self.per_class = count(key, v)?,
            "d_in" => self.d_in = count(key, v)?,
            "separation" => self.separation = real(key, v)?,
            "noise" => self.noise = real(key, v)?,
            "model" => {
                self.model = match v.to_ascii_lowercase().as_str() {
                    "linear" | "linear_regression" => ModelKind::Linear,
                    "logistic" | "multinomial_logistic" => ModelKind::Logistic,
                    "mlp" | "mlp_one_hidden" => ModelKind::Mlp,
                    _ => return Err(bad(key, v, "linear|logistic|mlp")),
                }
            }
            "hidden" => self.hidden = count(key, v)?,
            "activation" => {
                self.activation = match v.to_ascii_lowercase().as_str() {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    _ => return Err(bad(key, v, "tanh|relu")),
                }
            }
            "clients" => self.clients = count(key, v)?,
            "alpha" => self.alpha = real(key, v)?,
            "rounds" => self.rounds = count(key, v)?,
            "tau" => self.tau = count(key, v)?,
            "clients_per_round" => self.clients_per_round = count(key, v)?,
            "batch_size" => self.batch_size = count(key, v)?,
            "backbone" => {
                self.backbone = match v.to_ascii_lowercase().as_str() {
                    "fedavg" => Backbone::FedAvg,
                    "fedprox" => Backbone::FedProx,
                    "scaffold" => Backbone::Scaffold,
                    "fedexp" => Backbone::FedExp,
                    "fedadam" => Backbone::FedAdam,
                    "fedavgm" => Backbone::FedAvgM,
                    _ => return Err(bad(key, v, "fedavg|fedprox|scaffold|fedexp|fedadam|fedavgm")),
                }
            }
            "rule" => {
                self.rule = match v.to_ascii_lowercase().as_str() {
                    "plain_wd" => RuleKind::PlainWd,
                    "gradclip_wd" => RuleKind::GradClipWd,
                    "fednar" => RuleKind::FedNar,
                    _ => return Err(bad(key, v, "plain_wd|gradclip_wd|fednar")),
                }
            }
            "l0" => self.l0 = real(key, v)?,
            "rho" => self.rho = real(key, v)?,
            "u0" => self.u0 = real(key, v)?,
            "gamma" => self.gamma = real(key, v)?,
            "max_norm" => self.max_norm = real(key, v)?,
            "lambda_g" => self.lambda_g = real(key, v)?,
            "prox_mu" => self.prox_mu = real(key, v)?,
            "server_momentum" => self.server_momentum = real(key, v)?,
            "adam_beta1" => self.adam_beta1 = real(key, v)?,
            "adam_beta2" => self.adam_beta2 = real(key, v)?,
            "adam_eps" => self.adam_eps = real(key, v)?,
            "exp_eps" => self.exp_eps = real(key, v)?,
            "lemma1" => self.lemma1 = flag(key, v)?,
            "norm_bound" => self.norm_bound = flag(key, v)?,
            "clip_stats" => self.clip_stats = flag(key, v)?,
            "eval_every" => self.eval_every = count(key, v)?,
            "record_snapshots" => self.record_snapshots = flag(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        // relative CSV paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.csv_train, &mut cfg.csv_test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.clients == 0 {
            return invalid("clients must be at least 1".into());
        }
        if self.clients_per_round == 0 {
            return invalid("clients_per_round must be at least 1".into());
        }
        if self.clients_per_round > self.clients {
            return Err(ConfigError::TooManyPerRound {
                per_round: self.clients_per_round,
                clients: self.clients,
            });
        }
        if self.rounds == 0 || self.tau == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return invalid("rounds, tau, batch_size and eval_every must be at least 1".into());
        }
        if !(self.alpha > 0.0) {
            return invalid(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.l0 > 0.0) || !(self.rho > 0.0 && self.rho <= 1.0) {
            return invalid(format!(
                "need l0 > 0 and rho in (0, 1], got {} and {}",
                self.l0, self.rho
            ));
        }
        if !(self.u0 >= 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid(format!(
                "need u0 >= 0 and gamma in (0, 1], got {} and {}",
                self.u0, self.gamma
            ));
        }
        if self.rule != RuleKind::PlainWd && !(self.max_norm > 0.0) {
            return invalid(format!("max_norm must be positive, got {}", self.max_norm));
        }
        if !(self.lambda_g > 0.0) {
            return invalid(format!("lambda_g must be positive, got {}", self.lambda_g));
        }
        if !(self.prox_mu >= 0.0) {
            return invalid(format!("prox_mu must be non-negative, got {}", self.prox_mu));
        }
        if !(0.0..1.0).contains(&self.server_momentum)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return invalid("momentum and Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.exp_eps > 0.0) {
            return invalid("adam_eps and exp_eps must be positive".into());
        }
        match self.dataset {
            DatasetKind::Blobs => {
                if self.classes < 2 || self.per_class == 0 || self.d_in == 0 {
                    return invalid("blobs need classes >= 2, per_class >= 1, d_in >= 1".into());
                }
                if !(self.separation > 0.0) || !(self.noise > 0.0) {
                    return invalid("separation and noise must be positive".into());
                }
                if self.clients > self.classes * self.per_class {
                    return invalid(format!(
                        "clients ({}) exceeds training set size ({})",
                        self.clients,
                        self.classes * self.per_class
                    ));
                }
            }
            DatasetKind::Csv => {
                if self.csv_train.is_none() {
                    return invalid("dataset = csv requires csv_train".into());
                }
            }
        }
        if self.model == ModelKind::Mlp && self.hidden == 0 {
            return invalid("hidden must be at least 1".into());
        }
        Ok(())
    }

    /// Text form accepted by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(value) = self.get(key) {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    /// Textual value of a key (`None` for unset optional paths).
    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| v.to_string();
        Some(match key {
            "seed" => self.seed.to_string(),
            "dataset" => match self.dataset {
                DatasetKind::Blobs => "blobs".into(),
                DatasetKind::Csv => "csv".into(),
            },
            "csv_train" => return self.csv_train.as_ref().map(|p| p.display().to_string()),
            "csv_test" => return self.csv_test.as_ref().map(|p| p.display().to_string()),
            "classes" => self.classes.to_string(),
            "per_class" => self.per_class.to_string(),
            "d_in" => self.d_in.to_string(),
            "separation" => format!("{:?}", self.separation),
            "noise" => format!("{:?}", self.noise),
            "model" => match self.model {
                ModelKind::Linear => "linear".into(),
                ModelKind::Logistic => "logistic".into(),
                ModelKind::Mlp => "mlp".into(),
            },
            "hidden" => self.hidden.to_string(),
            "activation" => match self.activation {
                Activation::Tanh => "tanh".into(),
                Activation::Relu => "relu".into(),
            },
            "clients" => self.clients.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "rounds" => self.rounds.to_string(),
            "tau" => self.tau.to_string(),
            "clients_per_round" => self.clients_per_round.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "backbone" => match self.backbone {
                Backbone::FedAvg => "fedavg",
                Backbone::FedProx => "fedprox",
                Backbone::Scaffold => "scaffold",
                Backbone::FedExp => "fedexp",
                Backbone::FedAdam => "fedadam",
                Backbone::FedAvgM => "fedavgm",
            }
            .into(),
            "rule" => match self.rule {
                RuleKind::PlainWd => "plain_wd",
                RuleKind::GradClipWd => "gradclip_wd",
                RuleKind::FedNar => "fednar",
            }
            .into(),
            "l0" => format!("{:?}", self.l0),
            "rho" => format!("{:?}", self.rho),
            "u0" => format!("{:?}", self.u0),
            "gamma" => format!("{:?}", self.gamma),
            "max_norm" => format!("{:?}", self.max_norm),
            "lambda_g" => format!("{:?}", self.lambda_g),
            "prox_mu" => format!("{:?}", self.prox_mu),
            "server_momentum" => format!("{:?}", self.server_momentum),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "exp_eps" => format!("{:?}", self.exp_eps),
            "lemma1" => b(self.lemma1),
            "norm_bound" => b(self.norm_bound),
            "clip_stats" => b(self.clip_stats),
            "eval_every" => self.eval_every.to_string(),
            "record_snapshots" => b(self.record_snapshots),
            _ => return None,
        })
    }
}
