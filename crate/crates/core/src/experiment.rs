//! Orchestration: builds the data, model and server from a config, runs the
//! round loop with diagnostics, evaluates, and writes metrics.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{Backbone, ConfigError, DatasetKind, ExperimentConfig, ModelKind};
use crate::data::{self, tags, DataError, Dataset, Partition, Split};
use crate::local_engine::{self, LocalError, LocalJob, LocalTrace, ObjectiveModifier, RuleKind, Schedule, StepRule};
use crate::models::{Model, ModelError, Prediction};
use crate::numkit::{NumError, ParamVector, RngStream};
use crate::server_engine::{self, ClipStats, Lemma1Report, NormBound, ServerError, ServerOptimizer, ServerState};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("round {round}: diagnostic failure in {quantity}: {detail}")]
    Diagnostic {
        round: u64,
        quantity: &'static str,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Local(#[from] LocalError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    MetricsParse { path: String, line: usize, msg: String },
}

impl ExperimentError {
    pub fn is_diagnostic(&self) -> bool {
        matches!(self, ExperimentError::Diagnostic { .. })
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// One evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub global_norm: f64,
    pub mu_g: f64,
    /// `None` when clip statistics are disabled.
    pub clip_count: Option<usize>,
    pub clip_mean_norm: Option<f64>,
    /// `None` when the norm-bound diagnostic is disabled.
    pub bound_slack: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "round,train_loss,test_loss,test_acc,global_norm,mu_g,clip_count,clip_mean_norm,bound_slack,wall_ms";

/// Mean loss and argmax accuracy over a dataset. Regression outputs count
/// as correct when they round to the label.
pub fn evaluate(model: &Model, params: &ParamVector, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let loss = model.loss(params, &test.as_batch()?)?;
    let mut correct = 0usize;
    for (x, &y) in test.features.iter().zip(&test.labels) {
        let hit = match model.predict(params, x)? {
            Prediction::Class(c) => c == y,
            Prediction::Value(v) => v.round() == y as f64,
        };
        correct += hit as usize;
    }
    Ok((loss, correct as f64 / test.len() as f64))
}

/// Everything a round produced, for callers that inspect rounds directly.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// One-based round number.
    pub round: u64,
    pub participants: Vec<usize>,
    pub x_prev: ParamVector,
    pub x_new: ParamVector,
    pub deltas: Vec<ParamVector>,
    pub traces: Vec<LocalTrace>,
    pub mu_g: f64,
    pub lemma1: Option<Lemma1Report>,
    pub norm_bound: NormBound,
    pub clip: ClipStats,
    pub train_loss: f64,
    /// Present on evaluated rounds.
    pub row: Option<MetricsRow>,
}

fn model_for(cfg: &ExperimentConfig, d_in: usize, classes: usize) -> Result<Model> {
    Ok(match cfg.model {
        ModelKind::Linear => Model::linear_regression(d_in)?,
        ModelKind::Logistic => Model::logistic(d_in, classes)?,
        ModelKind::Mlp => Model::mlp(d_in, cfg.hidden, classes, cfg.activation)?,
    })
}

fn server_optimizer(cfg: &ExperimentConfig) -> ServerOptimizer {
    match cfg.backbone {
        Backbone::FedAvg | Backbone::FedProx | Backbone::Scaffold => ServerOptimizer::Avg,
        Backbone::FedAvgM => ServerOptimizer::AvgM {
            momentum: cfg.server_momentum,
        },
        Backbone::FedAdam => ServerOptimizer::Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
        Backbone::FedExp => ServerOptimizer::Exp { eps: cfg.exp_eps },
    }
}

/// Training and test data for a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Blobs => {
            let blobs = data::make_blobs(
                cfg.classes,
                cfg.per_class,
                cfg.d_in,
                cfg.separation,
                cfg.noise,
                &RngStream::new(cfg.seed).child(tags::DATASET),
            )?;
            Ok((blobs.train, blobs.test))
        }
        DatasetKind::Csv => {
            let train_path = cfg
                .csv_train
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("dataset = csv requires csv_train".into()))?;
            let train = data::load_csv(train_path, Split::Train)?;
            let test = match &cfg.csv_test {
                Some(p) => data::load_csv(p, Split::Test)?,
                None => Dataset {
                    split: Split::Test,
                    ..train.clone()
                },
            };
            if test.d_in() != train.d_in() || test.classes > train.classes {
                return Err(ConfigError::Invalid("test CSV shape does not match training CSV".into()).into());
            }
            Ok((train, test))
        }
    }
}

/// A running simulation. Built once from a config; each call to
/// [`Simulation::run_round`] executes one communication round.
pub struct Simulation {
    cfg: ExperimentConfig,
    root: RngStream,
    model: Model,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    schedule: Schedule,
    rule: StepRule,
    server: ServerState,
    x0: ParamVector,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(cfg.seed);
        let (train, test) = load_data(cfg)?;
        if cfg.clients_per_round > cfg.clients || cfg.clients > train.len() {
            return Err(ConfigError::Invalid(format!(
                "clients ({}) exceeds training set size ({})",
                cfg.clients,
                train.len()
            ))
            .into());
        }
        let model = model_for(cfg, train.d_in(), train.classes)?;
        let partition = data::dirichlet_partition(&train, cfg.clients, cfg.alpha, &root.child(tags::PARTITION))?;
        let schedule = Schedule::new(cfg.l0, cfg.rho, cfg.u0, cfg.gamma)?;
        let rule = match cfg.rule {
            RuleKind::PlainWd => StepRule::plain(),
            kind => StepRule::new(kind, cfg.max_norm)?,
        };
        let x0 = model.init_params(&root.child(tags::INIT))?;
        let mut server = ServerState::new(x0.clone(), cfg.lambda_g, server_optimizer(cfg))?;
        if cfg.backbone == Backbone::Scaffold {
            server = server.with_control_variates(cfg.clients)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            root,
            model,
            train,
            test,
            partition,
            schedule,
            rule,
            server,
            x0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn initial_params(&self) -> &ParamVector {
        &self.x0
    }

    pub fn root_stream(&self) -> &RngStream {
        &self.root
    }

    pub fn rounds_done(&self) -> u64 {
        self.server.t
    }

    /// Stream for one client's local batches in a zero-based round.
    pub fn batch_stream(&self, round_index: u64, client: usize) -> RngStream {
        self.root.descend(&[tags::LOCAL_BATCH, round_index, client as u64])
    }

    /// Whether the step-bound and polynomial norm-bound guarantees apply to
    /// this configuration, making their violation a hard failure.
    fn bound_enforced(&self) -> bool {
        self.rule.kind == RuleKind::FedNar && self.server.optimizer == ServerOptimizer::Avg
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let index = self.server.t;
        let round = index + 1;
        let diag = |quantity: &'static str, detail: String| ExperimentError::Diagnostic {
            round,
            quantity,
            detail,
        };

        let participants = data::sample_clients(cfg.clients, cfg.clients_per_round, index, &self.root)?;
        let x_prev = self.server.x.clone();

        let train_losses = participants
            .par_iter()
            .map(|&c| {
                let stream = self.root.descend(&[tags::TRAIN_LOSS, index, c as u64]);
                let batch = data::next_batch(&self.partition.shards[c], &self.train, cfg.batch_size, &stream, 0)?;
                Ok(self.model.loss(&x_prev, &batch)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        let train_loss = train_losses.iter().sum::<f64>() / train_losses.len() as f64;

        let variates = self.server.variates.as_ref();
        let results = participants
            .par_iter()
            .map(|&c| {
                let modifier = match cfg.backbone {
                    Backbone::FedProx => ObjectiveModifier::Prox { mu: cfg.prox_mu },
                    Backbone::Scaffold => ObjectiveModifier::Scaffold {
                        client: variates.map(|v| &v.clients[c]),
                        global: variates.map(|v| &v.global),
                    },
                    _ => ObjectiveModifier::None,
                };
                let stream = self.batch_stream(index, c);
                let job = LocalJob {
                    model: &self.model,
                    dataset: &self.train,
                    shard: &self.partition.shards[c],
                    x_global: &x_prev,
                    round: index,
                    tau: cfg.tau,
                    rule: self.rule,
                    schedule: self.schedule,
                    modifier,
                    batch_size: cfg.batch_size,
                    stream: &stream,
                    record_snapshots: cfg.record_snapshots,
                };
                local_engine::run_local(&job).map_err(|e| match e {
                    LocalError::StepBound { step, norm, bound } => {
                        diag("step norm", format!("client {c}, step {step}: {norm:e} > {bound:e}"))
                    }
                    other => other.into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (deltas, traces): (Vec<ParamVector>, Vec<LocalTrace>) = results.into_iter().unzip();

        let delta_bar = server_engine::aggregate(&deltas)?;
        let mu_g = server_engine::effective_global_decay(&traces, cfg.lambda_g);
        if self.bound_enforced() && !server_engine::decay_coefficient_bound_holds(&traces) {
            return Err(diag("effective decay", "1 − Π(1 − μ_j) exceeds τ·u_t".into()));
        }

        self.server.global_update(&delta_bar, &deltas).map_err(|e| match e {
            ServerError::NonFinite => diag("global model", "update is not finite".into()),
            other => other.into(),
        })?;
        if let Some(v) = self.server.variates.as_mut() {
            let (l_t, _) = self.schedule.at(index);
            server_engine::scaffold_server_round(v, &participants, &deltas, cfg.tau, l_t)?;
        }
        let x_new = self.server.x.clone();

        let lemma1 = if cfg.lemma1 {
            // the decomposition describes the plain averaged step
            let simulated = match self.server.optimizer {
                ServerOptimizer::Avg => x_new.clone(),
                _ => x_prev.lin_comb(1.0, -cfg.lambda_g, &delta_bar)?,
            };
            let report =
                server_engine::lemma1_decompose(&traces, &x_prev, &simulated, cfg.lambda_g).map_err(|e| match e {
                    ServerError::Reconstruction { error, tol } => {
                        diag("lemma1 reconstruction", format!("error {error:e} > {tol:e}"))
                    }
                    other => other.into(),
                })?;
            Some(report)
        } else {
            None
        };

        let norm_bound = server_engine::check_norm_bound(
            &x_new,
            &self.x0,
            cfg.lambda_g,
            cfg.tau,
            self.rule.max_norm,
            self.schedule.l_star(),
            round,
        );
        if cfg.norm_bound && self.bound_enforced() && !norm_bound.ok {
            return Err(diag("norm bound", format!("slack {:e}", norm_bound.slack)));
        }
        let clip = server_engine::clip_stats(&traces);

        let row = if round.is_multiple_of(cfg.eval_every as u64) || round == cfg.rounds as u64 {
            let (test_loss, test_acc) = evaluate(&self.model, &x_new, &self.test)?;
            Some(MetricsRow {
                round,
                train_loss,
                test_loss,
                test_acc,
                global_norm: x_new.norm2(),
                mu_g,
                clip_count: cfg.clip_stats.then_some(clip.count),
                clip_mean_norm: cfg.clip_stats.then_some(clip.mean_clipped_norm),
                bound_slack: cfg.norm_bound.then_some(norm_bound.slack),
                wall_ms: started.elapsed().as_millis() as u64,
            })
        } else {
            None
        };

        Ok(RoundOutcome {
            round,
            participants,
            x_prev,
            x_new,
            deltas,
            traces,
            mu_g,
            lemma1,
            norm_bound,
            clip,
            train_loss,
            row,
        })
    }

    /// Runs all remaining rounds, handing every outcome to `observe`.
    pub fn run_with(&mut self, mut observe: impl FnMut(&RoundOutcome)) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.server.t < self.cfg.rounds as u64 {
            let outcome = self.run_round()?;
            observe(&outcome);
            rows.extend(outcome.row);
        }
        Ok(rows)
    }
}

/// Builds the simulation and runs every round.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    Simulation::new(cfg)?.run_with(|_| {})
}

/// Formats a real with 9 significant digits, switching to exponent form
/// for very large or small magnitudes.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, v);
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        sci
    }
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            fmt_sig9(r.train_loss),
            fmt_sig9(r.test_loss),
            fmt_sig9(r.test_acc),
            fmt_sig9(r.global_norm),
            fmt_sig9(r.mu_g),
            opt(r.clip_count, |c| c.to_string()),
            opt(r.clip_mean_norm, fmt_sig9),
            opt(r.bound_slack, fmt_sig9),
            r.wall_ms
        );
    }
    out
}

/// Writes the metrics CSV.
pub fn emit_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let io = |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(metrics_csv_string(rows).as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

/// Parses a metrics CSV written by [`emit_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: shown.clone(),
        source,
    })?;
    let err = |line: usize, msg: String| ExperimentError::MetricsParse {
        path: shown.clone(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(err(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(err(n, format!("expected 10 fields, found {}", f.len())));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|_| err(n, format!("bad real '{s}'")));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { real(s).map(Some) };
        rows.push(MetricsRow {
            round: f[0].parse().map_err(|_| err(n, format!("bad round '{}'", f[0])))?,
            train_loss: real(f[1])?,
            test_loss: real(f[2])?,
            test_acc: real(f[3])?,
            global_norm: real(f[4])?,
            mu_g: real(f[5])?,
            clip_count: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().map_err(|_| err(n, format!("bad count '{}'", f[6])))?)
            },
            clip_mean_norm: maybe(f[7])?,
            bound_slack: maybe(f[8])?,
            wall_ms: f[9].parse().map_err(|_| err(n, format!("bad wall_ms '{}'", f[9])))?,
        });
    }
    Ok(rows)
}

/// Result of one sweep point.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: String,
    pub path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Runs `base` once per value of `param`, writing `<param>_<value>.csv`
/// into `out_dir`. Everything except the swept key is shared, so runs see
/// the same dataset and partition unless the swept key changes them.
pub fn sweep(base: &ExperimentConfig, param: &str, values: &[String], out_dir: &Path) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one value".into()).into());
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(param, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<std::result::Result<Vec<_>, ConfigError>>()?;
    std::fs::create_dir_all(out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    configs
        .iter()
        .zip(values)
        .map(|(cfg, v)| {
            let rows = run_experiment(cfg)?;
            let safe: String = v
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || "-.+".contains(c) {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let path = out_dir.join(format!("{param}_{safe}.csv"));
            emit_metrics_csv(&rows, &path)?;
            Ok(SweepRun {
                value: v.clone(),
                path,
                rows,
            })
        })
        .collect()
}

/// Removes the `wall_ms` column so runs can be compared byte for byte.
pub fn strip_wall_ms(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}
