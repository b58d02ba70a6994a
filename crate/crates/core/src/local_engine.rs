//! Client-side training: learning-rate / weight-decay schedules, the three
//! step rules, local objective modifiers, and the τ-step loop with a full
//! per-step trace.
//!
//! Every local step has the form `x ← (1 − μ)·x − λ·g`. The rules differ only
//! in how `(λ, μ)` are derived from the round's `(l_t, u_t)`:
//!
//! * plain weight decay: `(l_t, u_t)` unchanged;
//! * gradient clipping: `λ = l_t·min(1, A/‖g‖)`, `μ = u_t`;
//! * co-clipping: with `n = ‖g + (u_t/l_t)·x‖`, both are scaled by
//!   `min(1, A/n)`, so the whole step `λg + μx` has norm at most `l_t·A`.

use thiserror::Error;

use crate::data::{self, ClientShard, DataError, Dataset};
use crate::models::{Model, ModelError};
use crate::numkit::{NumError, ParamVector, RngStream};

/// Absolute slack allowed on the step-norm bound.
pub const STEP_BOUND_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("invalid local configuration: {0}")]
    Config(String),
    #[error("non-finite clipping norm {0}")]
    NonFiniteNorm(f64),
    #[error("SCAFFOLD control variate '{0}' was not initialized")]
    UninitializedVariate(&'static str),
    #[error("step bound violated at step {step}: ‖λg+μx‖ = {norm:e} > l_t·A = {bound:e}")]
    StepBound { step: usize, norm: f64, bound: f64 },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, LocalError>;

/// Exponential schedules `l_t = l0·rho^t` and `u_t = u0·gamma^t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub l0: f64,
    pub rho: f64,
    pub u0: f64,
    pub gamma: f64,
}

impl Schedule {
    pub fn new(l0: f64, rho: f64, u0: f64, gamma: f64) -> Result<Self> {
        if !(l0 > 0.0 && l0.is_finite()) {
            return Err(LocalError::Config(format!("l0 must be positive, got {l0}")));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(LocalError::Config(format!("rho must lie in (0, 1], got {rho}")));
        }
        if !(u0 >= 0.0 && u0.is_finite()) {
            return Err(LocalError::Config(format!("u0 must be non-negative, got {u0}")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(LocalError::Config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(Self { l0, rho, u0, gamma })
    }

    /// Constant learning rate, no weight decay.
    pub fn constant(l: f64) -> Result<Self> {
        Self::new(l, 1.0, 0.0, 1.0)
    }

    /// `(l_t, u_t)` for round index `t`.
    pub fn at(&self, t: u64) -> (f64, f64) {
        let t = t as i32;
        (self.l0 * self.rho.powi(t), self.u0 * self.gamma.powi(t))
    }

    /// `l_* = max_t l_t`, attained at `t = 0` since `rho ≤ 1`.
    pub fn l_star(&self) -> f64 {
        self.l0
    }
}

/// `(l_t, u_t)` for round index `t`.
pub fn schedule_at(schedule: &Schedule, t: u64) -> (f64, f64) {
    schedule.at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    PlainWd,
    GradClipWd,
    FedNar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub kind: RuleKind,
    /// Clipping threshold `A`; unused by [`RuleKind::PlainWd`].
    pub max_norm: f64,
}

impl StepRule {
    pub fn new(kind: RuleKind, max_norm: f64) -> Result<Self> {
        if kind != RuleKind::PlainWd && !(max_norm > 0.0 && max_norm.is_finite()) {
            return Err(LocalError::Config(format!(
                "clip threshold must be positive, got {max_norm}"
            )));
        }
        Ok(Self { kind, max_norm })
    }

    pub fn plain() -> Self {
        Self {
            kind: RuleKind::PlainWd,
            max_norm: f64::INFINITY,
        }
    }

    /// Step coefficients at iterate `x` with (modified) gradient `g`.
    pub fn coefficients(&self, g: &ParamVector, x: &ParamVector, l_t: f64, u_t: f64) -> Result<Coefficients> {
        match self.kind {
            RuleKind::PlainWd => {
                let n = decay_augmented_norm(g, x, l_t, u_t)?;
                Ok(Coefficients {
                    lambda: l_t,
                    mu: u_t,
                    pre_clip_norm: n,
                    clipped: false,
                })
            }
            RuleKind::GradClipWd => clip_coefficients(g, l_t, u_t, self.max_norm),
            RuleKind::FedNar => nar_coefficients(g, x, l_t, u_t, self.max_norm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub lambda: f64,
    pub mu: f64,
    /// The norm compared against the threshold.
    pub pre_clip_norm: f64,
    pub clipped: bool,
}

fn check_rates(l_t: f64, u_t: f64) -> Result<()> {
    if !(l_t > 0.0) || !(u_t >= 0.0) {
        return Err(LocalError::Config(format!(
            "need l_t > 0 and u_t >= 0, got ({l_t}, {u_t})"
        )));
    }
    Ok(())
}

/// `‖g + (u_t/l_t)·x‖`.
fn decay_augmented_norm(g: &ParamVector, x: &ParamVector, l_t: f64, u_t: f64) -> Result<f64> {
    check_rates(l_t, u_t)?;
    let ratio = u_t / l_t;
    if g.dim() != x.dim() {
        return Err(NumError::DimMismatch {
            left: g.dim(),
            right: x.dim(),
        }
        .into());
    }
    let n = g
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(gi, xi)| {
            let v = gi + ratio * xi;
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if !n.is_finite() {
        return Err(LocalError::NonFiniteNorm(n));
    }
    Ok(n)
}

/// Co-clipped learning rate and weight decay.
pub fn nar_coefficients(g: &ParamVector, x: &ParamVector, l_t: f64, u_t: f64, max_norm: f64) -> Result<Coefficients> {
    let n = decay_augmented_norm(g, x, l_t, u_t)?;
    if n > max_norm {
        let s = max_norm / n;
        Ok(Coefficients {
            lambda: l_t * s,
            mu: u_t * s,
            pre_clip_norm: n,
            clipped: true,
        })
    } else {
        Ok(Coefficients {
            lambda: l_t,
            mu: u_t,
            pre_clip_norm: n,
            clipped: false,
        })
    }
}

/// Gradient-only clipping; the weight decay is left at `u_t`.
pub fn clip_coefficients(g: &ParamVector, l_t: f64, u_t: f64, max_norm: f64) -> Result<Coefficients> {
    check_rates(l_t, u_t)?;
    let n = g.norm2();
    if !n.is_finite() {
        return Err(LocalError::NonFiniteNorm(n));
    }
    let clipped = n > max_norm;
    Ok(Coefficients {
        lambda: if clipped { l_t * (max_norm / n) } else { l_t },
        mu: u_t,
        pre_clip_norm: n,
        clipped,
    })
}

/// `(1 − μ)·x − λ·g`.
pub fn local_step(x: &ParamVector, g: &ParamVector, lambda: f64, mu: f64) -> Result<ParamVector> {
    Ok(x.lin_comb(1.0 - mu, -lambda, g)?)
}

/// Change to the local objective applied before the step rule sees the
/// gradient.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveModifier<'a> {
    None,
    /// Adds `mu·(x − x0)`.
    Prox {
        mu: f64,
    },
    /// Adds `c − c_i`. Both variates must be present (zero-initialized).
    Scaffold {
        client: Option<&'a ParamVector>,
        global: Option<&'a ParamVector>,
    },
}

/// Gradient of the modified local objective.
pub fn modified_gradient(
    modifier: &ObjectiveModifier<'_>,
    g: &ParamVector,
    x: &ParamVector,
    x0: &ParamVector,
) -> Result<ParamVector> {
    match *modifier {
        ObjectiveModifier::None => Ok(g.clone()),
        ObjectiveModifier::Prox { mu } => {
            if !(mu >= 0.0) {
                return Err(LocalError::Config(format!(
                    "proximal coefficient must be >= 0, got {mu}"
                )));
            }
            let mut out = g.clone();
            out.axpy(mu, x)?;
            out.axpy(-mu, x0)?;
            Ok(out)
        }
        ObjectiveModifier::Scaffold { client, global } => {
            let ci = client.ok_or(LocalError::UninitializedVariate("client"))?;
            let c = global.ok_or(LocalError::UninitializedVariate("global"))?;
            let mut out = g.sub(ci)?;
            out.axpy(1.0, c)?;
            Ok(out)
        }
    }
}

/// Record of one local step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub lambda: f64,
    pub mu: f64,
    /// The modified gradient the step rule saw.
    pub grad: ParamVector,
    pub pre_clip_norm: f64,
    pub clipped: bool,
    /// `‖λg + μx‖`.
    pub step_norm: f64,
    /// Iterate before the step, when snapshots are enabled.
    pub x: Option<ParamVector>,
}

/// All local steps of one client in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrace {
    pub client_id: usize,
    pub round: u64,
    pub l_t: f64,
    pub u_t: f64,
    pub max_norm: f64,
    pub steps: Vec<StepRecord>,
    /// Steps whose norm exceeded `l_t·A` (only possible for the
    /// gradient-clipping rule).
    pub bound_violations: usize,
}

impl LocalTrace {
    /// `Π_j (1 − μ_j)` over the client's steps.
    pub fn decay_product(&self) -> f64 {
        self.steps.iter().map(|s| 1.0 - s.mu).product()
    }
}

/// Inputs to one client's local training.
#[derive(Debug, Clone, Copy)]
pub struct LocalJob<'a> {
    pub model: &'a Model,
    pub dataset: &'a Dataset,
    pub shard: &'a ClientShard,
    pub x_global: &'a ParamVector,
    /// Zero-based round index (the schedule exponent).
    pub round: u64,
    pub tau: usize,
    pub rule: StepRule,
    pub schedule: Schedule,
    pub modifier: ObjectiveModifier<'a>,
    pub batch_size: usize,
    /// Stream for this (round, client); step `k` uses child `k`.
    pub stream: &'a RngStream,
    pub record_snapshots: bool,
}

/// Runs `tau` local steps and returns `Δ = x_global − x_τ` with the trace.
///
/// Under co-clipping every step must satisfy `‖λg + μx‖ ≤ l_t·A`; a
/// violation is an error. Under gradient clipping violations are counted in
/// the trace.
pub fn run_local(job: &LocalJob<'_>) -> Result<(ParamVector, LocalTrace)> {
    if job.tau == 0 {
        return Err(LocalError::Config("tau must be at least 1".into()));
    }
    let (l_t, u_t) = job.schedule.at(job.round);
    let bound = l_t * job.rule.max_norm;
    let mut x = job.x_global.clone();
    let mut steps = Vec::with_capacity(job.tau);
    let mut bound_violations = 0;

    for k in 0..job.tau {
        let batch = data::next_batch(job.shard, job.dataset, job.batch_size, job.stream, k as u64)?;
        let raw = job.model.grad(&x, &batch)?;
        let g = modified_gradient(&job.modifier, &raw, &x, job.x_global)?;
        let c = job.rule.coefficients(&g, &x, l_t, u_t)?;
        let step_norm = g.lin_comb(c.lambda, c.mu, &x)?.norm2();
        if job.rule.kind != RuleKind::PlainWd && step_norm > bound + STEP_BOUND_TOL {
            if job.rule.kind == RuleKind::FedNar {
                return Err(LocalError::StepBound {
                    step: k,
                    norm: step_norm,
                    bound,
                });
            }
            bound_violations += 1;
        }
        let next = local_step(&x, &g, c.lambda, c.mu)?;
        steps.push(StepRecord {
            lambda: c.lambda,
            mu: c.mu,
            grad: g,
            pre_clip_norm: c.pre_clip_norm,
            clipped: c.clipped,
            step_norm,
            x: job.record_snapshots.then(|| x.clone()),
        });
        x = next;
    }

    let delta = job.x_global.sub(&x)?;
    Ok((
        delta,
        LocalTrace {
            client_id: job.shard.client_id,
            round: job.round,
            l_t,
            u_t,
            max_norm: job.rule.max_norm,
            steps,
            bound_violations,
        },
    ))
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(-100f64..100.0, n),
                prop::collection::vec(-100f64..100.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn co_clipping_bounds_the_step(
            (g, x) in vecs(),
            l in 1e-4f64..1.0,
            u in 0f64..0.5,
            a in 0.01f64..100.0,
        ) {
            let g = ParamVector::new(g).unwrap();
            let x = ParamVector::new(x).unwrap();
            let c = nar_coefficients(&g, &x, l, u, a).unwrap();
            let step = g.lin_comb(c.lambda, c.mu, &x).unwrap().norm2();
            prop_assert!(step <= l * a + 1e-12 * (1.0 + l * a));
            prop_assert!(c.lambda <= l && c.mu <= u);
            if u > 0.0 {
                prop_assert!((c.mu / c.lambda - u / l).abs() <= 1e-12 * (u / l).max(1.0));
            }
            if !c.clipped {
                prop_assert_eq!((c.lambda, c.mu), (l, u));
            }
        }

        #[test]
        fn rules_agree_without_decay((g, x) in vecs(), l in 1e-4f64..1.0, a in 0.01f64..100.0) {
            let g = ParamVector::new(g).unwrap();
            let x = ParamVector::new(x).unwrap();
            prop_assert_eq!(nar_coefficients(&g, &x, l, 0.0, a).unwrap(), clip_coefficients(&g, l, 0.0, a).unwrap());
        }
    }
}
