//! The property suite behind the `check` subcommand: gradient oracles,
//! update decomposition, step and norm bounds, and the exact equivalences.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::config::{Backbone, ExperimentConfig};
use crate::data::{self, tags};
use crate::experiment::{self, metrics_csv_string, strip_wall_ms, Simulation};
use crate::local_engine::{RuleKind, STEP_BOUND_TOL};
use crate::models::{Activation, Batch, Labels, Model};
use crate::numkit::{relative_error, ParamVector, RngStream, FD_STEP};
use crate::server_engine::{self, LEMMA1_TOL};

pub const GRAD_REL_TOL: f64 = 1e-5;
/// ReLU probes whose hidden pre-activations come closer than this to zero
/// are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Worst relative error of the analytic gradient against central
/// differences over `draws` accepted samples of one model.
pub fn gradient_max_error(model: &Model, draws: usize, stream: &RngStream) -> crate::models::Result<(f64, usize)> {
    let mut rng = stream.rng();
    let mut worst = 0.0f64;
    let mut rejected = 0;
    let mut accepted = 0;
    while accepted < draws {
        let n = rng.random_range(1..=8);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..model.d_in()).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels = if model.is_classifier() {
            Labels::Classes((0..n).map(|_| rng.random_range(0..model.classes())).collect())
        } else {
            Labels::Targets((0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
        };
        let batch = Batch::new(features, labels)?;
        let params = ParamVector::new((0..model.param_dim()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        if model.activation() == Activation::Relu
            && model
                .min_hidden_preactivation(&params, &batch)?
                .is_some_and(|m| m < KINK_MARGIN)
        {
            rejected += 1;
            continue;
        }
        let analytic = model.grad(&params, &batch)?;
        let numeric = model.fd_gradient(&params, &batch, FD_STEP)?;
        worst = worst.max(relative_error(&analytic, &numeric)?);
        accepted += 1;
    }
    Ok((worst, rejected))
}

/// Analytic gradients against finite differences for every model family.
pub fn gradient_check(draws: usize, seed: u64) -> CheckResult {
    timed("gradient oracles", || {
        let families = [
            ("linear", Model::linear_regression(5)),
            ("logistic", Model::logistic(5, 4)),
            ("mlp-tanh", Model::mlp(5, 7, 3, Activation::Tanh)),
            ("mlp-relu", Model::mlp(5, 7, 3, Activation::Relu)),
        ];
        let root = RngStream::new(seed);
        let mut passed = true;
        let mut parts = Vec::new();
        for (k, (name, model)) in families.into_iter().enumerate() {
            match model.and_then(|m| gradient_max_error(&m, draws, &root.child(k as u64))) {
                Ok((err, rejected)) => {
                    passed &= err <= GRAD_REL_TOL;
                    parts.push(format!("{name} max rel err {err:.2e} ({rejected} rejected)"));
                }
                Err(e) => {
                    passed = false;
                    parts.push(format!("{name}: {e}"));
                }
            }
        }
        (passed, parts.join("; "))
    })
}

/// Per-run record of every diagnostic quantity.
#[derive(Debug, Clone, Default)]
pub struct RunAudit {
    pub rounds: u64,
    pub steps: usize,
    pub max_lemma1_error: f64,
    /// Steps with `‖λg + μx‖ > l_t·A + 1e−12`.
    pub step_violations: usize,
    /// Largest `‖λg + μx‖ − l_t·A` seen.
    pub max_step_excess: f64,
    pub min_bound_slack: f64,
    pub norm_bound_failures: usize,
    /// Rounds where `μ_g` leaves `[0, λ_g·τ·u_t]`.
    pub decay_bound_failures: usize,
}

impl RunAudit {
    pub fn clean(&self) -> bool {
        self.max_lemma1_error <= LEMMA1_TOL
            && self.step_violations == 0
            && self.norm_bound_failures == 0
            && self.decay_bound_failures == 0
    }
}

/// Runs a config to completion and records every diagnostic, independently
/// of the hard checks inside the round loop.
pub fn audit_run(cfg: &ExperimentConfig) -> experiment::Result<RunAudit> {
    let mut cfg = cfg.clone();
    cfg.lemma1 = true;
    cfg.eval_every = cfg.rounds;
    let mut sim = Simulation::new(&cfg)?;
    let x0 = sim.initial_params().clone();
    let l_star = sim.schedule().l_star();
    let mut audit = RunAudit {
        min_bound_slack: f64::INFINITY,
        max_step_excess: f64::NEG_INFINITY,
        ..RunAudit::default()
    };
    sim.run_with(|o| {
        audit.rounds += 1;
        if let Some(r) = &o.lemma1 {
            audit.max_lemma1_error = audit.max_lemma1_error.max(r.reconstruction_error);
        }
        for t in &o.traces {
            let bound = t.l_t * t.max_norm;
            for s in &t.steps {
                audit.steps += 1;
                audit.max_step_excess = audit.max_step_excess.max(s.step_norm - bound);
                if s.step_norm > bound + STEP_BOUND_TOL {
                    audit.step_violations += 1;
                }
            }
        }
        let nb = server_engine::check_norm_bound(&o.x_new, &x0, cfg.lambda_g, cfg.tau, cfg.max_norm, l_star, o.round);
        audit.min_bound_slack = audit.min_bound_slack.min(nb.slack);
        audit.norm_bound_failures += (!nb.ok) as usize;
        let u_t = o.traces[0].u_t;
        let cap = cfg.lambda_g * cfg.tau as f64 * u_t + server_engine::EXACT_TOL;
        if !(-server_engine::EXACT_TOL..=cap).contains(&o.mu_g) {
            audit.decay_bound_failures += 1;
        }
    })?;
    Ok(audit)
}

/// Small federation with the default model, used by the bound checks.
pub fn diagnostic_config(clients_per_round: usize, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        clients: 10,
        clients_per_round,
        tau: 5,
        rounds,
        rule: RuleKind::FedNar,
        ..ExperimentConfig::default()
    }
}

fn audit_detail(audit: &experiment::Result<RunAudit>) -> String {
    match audit {
        Ok(a) => format!(
            "{} rounds, lemma1 err {:.1e}, step excess {:.1e}, min slack {:.3}",
            a.rounds, a.max_lemma1_error, a.max_step_excess, a.min_bound_slack
        ),
        Err(e) => e.to_string(),
    }
}

/// Reconstruction of the global step from the local traces, plus the
/// one-step hand example under both product indices.
pub fn lemma1_check(rounds: usize) -> (CheckResult, Vec<RunAudit>) {
    let mut audits = Vec::new();
    let result = timed("update decomposition", || {
        let mut passed = true;
        let mut parts = Vec::new();
        for per_round in [10, 5] {
            let audit = audit_run(&diagnostic_config(per_round, rounds));
            passed &= audit.as_ref().is_ok_and(|a| a.max_lemma1_error <= LEMMA1_TOL);
            parts.push(format!("{per_round}/10 clients: {}", audit_detail(&audit)));
            audits.extend(audit);
        }
        match hand_example() {
            Ok((step, printed)) => {
                passed &= step <= server_engine::EXACT_TOL && printed > 1e-4;
                parts.push(format!("hand example err {step:.1e}, printed index err {printed:.1e}"));
            }
            Err(e) => {
                passed = false;
                parts.push(e);
            }
        }
        (passed, parts.join("; "))
    });
    (result, audits)
}

/// Reconstruction errors of the one-step example under the step-derived
/// and the printed product index.
pub fn hand_example() -> Result<(f64, f64), String> {
    use crate::local_engine::{LocalTrace, StepRecord};
    let pv = |v: &[f64]| ParamVector::new(v.to_vec()).map_err(|e| e.to_string());
    let trace = LocalTrace {
        client_id: 0,
        round: 0,
        l_t: 0.1,
        u_t: 0.01,
        max_norm: 10.0,
        steps: vec![StepRecord {
            lambda: 0.1,
            mu: 0.01,
            grad: pv(&[1.0, 0.0])?,
            pre_clip_norm: 1.0,
            clipped: false,
            step_norm: 0.0,
            x: None,
        }],
        bound_violations: 0,
    };
    let x_prev = pv(&[1.0, 1.0])?;
    let x_new = pv(&[0.89, 0.99])?;
    let traces = [trace];
    let err = |index| {
        server_engine::lemma1_reconstruct(&traces, &x_prev, &x_new, 1.0, index)
            .map(|r| r.reconstruction_error)
            .map_err(|e| e.to_string())
    };
    Ok((
        err(server_engine::ProductIndex::StepDerived)?,
        err(server_engine::ProductIndex::AsPrinted)?,
    ))
}

/// Step bound over a grid of initial decays and thresholds.
pub fn condition1_check(rounds: usize) -> (CheckResult, Vec<RunAudit>) {
    let mut audits = Vec::new();
    let result = timed("step bound grid", || {
        let mut passed = true;
        let mut violations = 0;
        let mut worst = f64::NEG_INFINITY;
        let mut errors = Vec::new();
        for u0 in [0.0, 0.01, 0.1] {
            for a in [1.0, 10.0, 100.0] {
                let cfg = ExperimentConfig {
                    u0,
                    max_norm: a,
                    ..diagnostic_config(5, rounds)
                };
                match audit_run(&cfg) {
                    Ok(audit) => {
                        violations += audit.step_violations;
                        worst = worst.max(audit.max_step_excess);
                        audits.push(audit);
                    }
                    Err(e) => {
                        passed = false;
                        errors.push(format!("u0={u0} A={a}: {e}"));
                    }
                }
            }
        }
        passed &= violations == 0;
        let mut detail = format!("9 runs, {violations} violations, worst excess {worst:.1e}");
        for e in errors {
            detail.push_str("; ");
            detail.push_str(&e);
        }
        (passed, detail)
    });
    (result, audits)
}

/// Norm bound and decay-coefficient bound on every round of the given runs.
pub fn norm_bound_check(audits: &[RunAudit]) -> CheckResult {
    timed("norm bound", || {
        let failures: usize = audits.iter().map(|a| a.norm_bound_failures).sum();
        let decay: usize = audits.iter().map(|a| a.decay_bound_failures).sum();
        let rounds: u64 = audits.iter().map(|a| a.rounds).sum();
        let slack = audits.iter().map(|a| a.min_bound_slack).fold(f64::INFINITY, f64::min);
        (
            !audits.is_empty() && failures == 0 && decay == 0,
            format!(
                "{} runs, {rounds} rounds, {failures} norm failures, {decay} decay failures, min slack {slack:.3}",
                audits.len()
            ),
        )
    })
}

/// FEDNAR and GRADCLIP_WD with zero decay produce the same metrics.
pub fn zero_decay_check(base: &ExperimentConfig) -> CheckResult {
    timed("zero-decay collapse", || {
        let run = |rule| {
            let cfg = ExperimentConfig {
                u0: 0.0,
                rule,
                ..base.clone()
            };
            experiment::run_experiment(&cfg).map(|rows| strip_wall_ms(&metrics_csv_string(&rows)))
        };
        match (run(RuleKind::FedNar), run(RuleKind::GradClipWd)) {
            (Ok(a), Ok(b)) => (a == b, format!("{} rows, identical: {}", a.lines().count() - 1, a == b)),
            (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
        }
    })
}

/// Plain averaging written directly on `Vec<f64>`: τ SGD steps per client,
/// unweighted mean of the updates, `x ← x − λ_g·Δ̄`. Returns the global
/// model after every round.
pub fn reference_fedavg(cfg: &ExperimentConfig, rounds: u64) -> experiment::Result<Vec<Vec<f64>>> {
    let root = RngStream::new(cfg.seed);
    let (train, _) = experiment::load_data(cfg)?;
    let model = match cfg.model {
        crate::config::ModelKind::Linear => Model::linear_regression(train.d_in())?,
        crate::config::ModelKind::Logistic => Model::logistic(train.d_in(), train.classes)?,
        crate::config::ModelKind::Mlp => Model::mlp(train.d_in(), cfg.hidden, train.classes, cfg.activation)?,
    };
    let partition = data::dirichlet_partition(&train, cfg.clients, cfg.alpha, &root.child(tags::PARTITION))?;
    let mut x = model.init_params(&root.child(tags::INIT))?.into_vec();
    let mut history = Vec::new();
    for t in 0..rounds {
        let chosen = data::sample_clients(cfg.clients, cfg.clients_per_round, t, &root)?;
        let mut sum = vec![0.0; x.len()];
        for (n, &c) in chosen.iter().enumerate() {
            let stream = root.descend(&[tags::LOCAL_BATCH, t, c as u64]);
            let mut local = x.clone();
            for k in 0..cfg.tau {
                let batch = data::next_batch(&partition.shards[c], &train, cfg.batch_size, &stream, k as u64)?;
                let g = model.grad(&ParamVector::new(local.clone())?, &batch)?;
                for (xi, gi) in local.iter_mut().zip(g.as_slice()) {
                    *xi -= cfg.l0 * gi;
                }
            }
            for ((s, xg), xl) in sum.iter_mut().zip(&x).zip(&local) {
                let d = xg - xl;
                *s = if n == 0 { d } else { *s + d };
            }
        }
        let m = chosen.len() as f64;
        for (xi, s) in x.iter_mut().zip(&sum) {
            *xi -= cfg.lambda_g * (s / m);
        }
        history.push(x.clone());
    }
    Ok(history)
}

/// PLAIN_WD with a constant rate, no decay and plain averaging matches
/// [`reference_fedavg`] bit for bit.
pub fn fedavg_recovery_check(base: &ExperimentConfig, rounds: u64) -> CheckResult {
    timed("fedavg recovery", || {
        let cfg = ExperimentConfig {
            rule: RuleKind::PlainWd,
            backbone: Backbone::FedAvg,
            rho: 1.0,
            u0: 0.0,
            rounds: rounds as usize,
            ..base.clone()
        };
        let reference = match reference_fedavg(&cfg, rounds) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        let mut sim = match Simulation::new(&cfg) {
            Ok(s) => s,
            Err(e) => return (false, e.to_string()),
        };
        let mut mismatched = Vec::new();
        let outcome = sim.run_with(|o| {
            if o.x_new.as_slice() != reference[(o.round - 1) as usize].as_slice() {
                mismatched.push(o.round);
            }
        });
        match outcome {
            Ok(_) => (
                mismatched.is_empty(),
                format!("{rounds} rounds, mismatched rounds {mismatched:?}"),
            ),
            Err(e) => (false, e.to_string()),
        }
    })
}

/// Mean distance to uniform falls with alpha; every partition is a
/// disjoint cover.
pub fn dirichlet_check(draws: usize, seed: u64) -> CheckResult {
    timed("dirichlet heterogeneity", || {
        let root = RngStream::new(seed);
        let alphas = [0.3, 1.0, 10.0];
        let mut means = Vec::new();
        for (k, &alpha) in alphas.iter().enumerate() {
            match data::dirichlet_tv_stats(alpha, 10, draws, &root.child(k as u64)) {
                Ok(s) => means.push(s.mean),
                Err(e) => return (false, e.to_string()),
            }
        }
        let decreasing = means.windows(2).all(|w| w[0] > w[1]);
        let base = ExperimentConfig::default();
        let train = match experiment::load_data(&base) {
            Ok((train, _)) => train,
            Err(e) => return (false, e.to_string()),
        };
        let mut covers = 0;
        for (k, &alpha) in alphas.iter().enumerate() {
            for clients in [1, 10, 50] {
                let stream = root.descend(&[100, k as u64, clients as u64]);
                if data::dirichlet_partition(&train, clients, alpha, &stream)
                    .and_then(|p| p.check_cover(train.len()))
                    .is_ok()
                {
                    covers += 1;
                }
            }
        }
        (
            decreasing && covers == 9,
            format!("mean TV {means:.4?} over alpha {alphas:?}, {covers}/9 partitions cover"),
        )
    })
}

/// Every check, at the sizes used by the `check` subcommand.
pub fn run_all() -> Vec<CheckResult> {
    let (lemma1, mut audits) = lemma1_check(50);
    let (cond1, grid) = condition1_check(50);
    audits.extend(grid);
    let bound = norm_bound_check(&audits);
    vec![
        gradient_check(20, 0),
        lemma1,
        cond1,
        bound,
        zero_decay_check(&ExperimentConfig::default()),
        fedavg_recovery_check(&ExperimentConfig::default(), 10),
        dirichlet_check(1000, 0),
    ]
}
