//! Server side of a round: aggregation, the four global update rules,
//! SCAFFOLD control-variate bookkeeping, and diagnostics that check the
//! round against its closed-form decomposition and norm bounds.

use thiserror::Error;

use crate::local_engine::LocalTrace;
use crate::numkit::{NumError, ParamVector};

/// Tolerance on the closed-form reconstruction of a round.
pub const LEMMA1_TOL: f64 = 1e-9;
/// Slack on the polynomial norm bound.
pub const NORM_BOUND_TOL: f64 = 1e-9;
/// Slack on coefficient identities.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("invalid server configuration: {0}")]
    Config(String),
    #[error("global update produced a non-finite model")]
    NonFinite,
    #[error("round reconstruction error {error:e} exceeds {tol:e}")]
    Reconstruction { error: f64, tol: f64 },
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, ServerError>;

fn finite<T>(r: std::result::Result<T, NumError>) -> Result<T> {
    r.map_err(|e| match e {
        NumError::NonFinite { .. } => ServerError::NonFinite,
        other => ServerError::Num(other),
    })
}

/// Unweighted mean of the client updates, summed in the given order.
/// Callers pass deltas sorted by client id so the reduction is canonical.
pub fn aggregate(deltas: &[ParamVector]) -> Result<ParamVector> {
    let (first, rest) = deltas.split_first().ok_or(ServerError::NoUpdates)?;
    let mut sum = first.clone();
    for d in rest {
        sum.axpy(1.0, d)?;
    }
    let n = deltas.len() as f64;
    Ok(sum.map(|v| v / n)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerOptimizer {
    /// `x ← x − λ_g·Δ̄`.
    Avg,
    /// Heavy-ball on the pseudo-gradient: `m ← β·m + Δ̄`, `x ← x − λ_g·m`.
    AvgM { momentum: f64 },
    /// Bias-corrected Adam on the pseudo-gradient with step `λ_g`.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Extrapolated step `η = max(1, Σ‖Δ_i‖² / (2|C|(‖Δ̄‖² + eps)))`.
    Exp { eps: f64 },
}

impl ServerOptimizer {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServerError::Config(m));
        match *self {
            ServerOptimizer::Avg => Ok(()),
            ServerOptimizer::AvgM { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("server momentum must lie in [0, 1), got {momentum}"))
            }
            ServerOptimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad(format!("invalid Adam constants ({beta1}, {beta2}, {eps})"))
            }
            ServerOptimizer::Exp { eps } if !(eps > 0.0) => bad(format!("exp_eps must be positive, got {eps}")),
            _ => Ok(()),
        }
    }
}

/// SCAFFOLD control variates: one per client plus the global one.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariates {
    pub global: ParamVector,
    pub clients: Vec<ParamVector>,
}

impl ControlVariates {
    pub fn zeros(clients: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            global: ParamVector::zeros(dim)?,
            clients: (0..clients)
                .map(|_| ParamVector::zeros(dim))
                .collect::<std::result::Result<_, _>>()?,
        })
    }
}

/// Updates the variates of the participating clients and the global variate
/// with the gradient-free rule
/// `c_i ← c_i − c + Δ_i/(τ·l)` and `c ← c + (1/M)·Σ(c_i_new − c_i_old)`,
/// where `M` is the total client count.
pub fn scaffold_server_round(
    variates: &mut ControlVariates,
    participated: &[usize],
    deltas: &[ParamVector],
    tau: usize,
    l_eff: f64,
) -> Result<()> {
    if participated.is_empty() {
        return Err(ServerError::NoUpdates);
    }
    if participated.len() != deltas.len() {
        return Err(ServerError::Config(format!(
            "{} participants but {} deltas",
            participated.len(),
            deltas.len()
        )));
    }
    let scale = tau as f64 * l_eff;
    if !(scale != 0.0 && scale.is_finite()) {
        return Err(ServerError::Config(format!("tau·l_eff must be nonzero, got {scale}")));
    }
    let total = variates.clients.len() as f64;
    let mut correction = ParamVector::zeros(variates.global.dim())?;
    for (&i, delta) in participated.iter().zip(deltas) {
        let old = variates
            .clients
            .get(i)
            .ok_or_else(|| ServerError::Config(format!("unknown client {i}")))?;
        let mut new = old.sub(&variates.global)?;
        new.axpy(1.0 / scale, delta)?;
        correction.axpy(1.0, &new.sub(old)?)?;
        variates.clients[i] = new;
    }
    variates.global.axpy(1.0 / total, &correction)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ParamVector,
    /// Completed rounds.
    pub t: u64,
    pub lambda_g: f64,
    pub optimizer: ServerOptimizer,
    pub momentum_buf: ParamVector,
    pub second_moment: ParamVector,
    pub variates: Option<ControlVariates>,
}

impl ServerState {
    pub fn new(x: ParamVector, lambda_g: f64, optimizer: ServerOptimizer) -> Result<Self> {
        if !(lambda_g > 0.0 && lambda_g.is_finite()) {
            return Err(ServerError::Config(format!(
                "lambda_g must be positive, got {lambda_g}"
            )));
        }
        optimizer.validate()?;
        let dim = x.dim();
        Ok(Self {
            x,
            t: 0,
            lambda_g,
            optimizer,
            momentum_buf: ParamVector::zeros(dim)?,
            second_moment: ParamVector::zeros(dim)?,
            variates: None,
        })
    }

    /// Enables SCAFFOLD bookkeeping with zero-initialized variates.
    pub fn with_control_variates(mut self, clients: usize) -> Result<Self> {
        self.variates = Some(ControlVariates::zeros(clients, self.x.dim())?);
        Ok(self)
    }

    /// Applies one global step from the aggregated update `delta_bar`.
    /// `client_deltas` is only read by [`ServerOptimizer::Exp`].
    pub fn global_update(&mut self, delta_bar: &ParamVector, client_deltas: &[ParamVector]) -> Result<()> {
        let x = match self.optimizer {
            ServerOptimizer::Avg => finite(self.x.lin_comb(1.0, -self.lambda_g, delta_bar))?,
            ServerOptimizer::AvgM { momentum } => {
                self.momentum_buf = finite(self.momentum_buf.lin_comb(momentum, 1.0, delta_bar))?;
                finite(self.x.lin_comb(1.0, -self.lambda_g, &self.momentum_buf))?
            }
            ServerOptimizer::Adam { beta1, beta2, eps } => {
                let step = (self.t + 1) as i32;
                self.momentum_buf = finite(self.momentum_buf.lin_comb(beta1, 1.0 - beta1, delta_bar))?;
                let sq = finite(delta_bar.map(|d| d * d))?;
                self.second_moment = finite(self.second_moment.lin_comb(beta2, 1.0 - beta2, &sq))?;
                let c1 = 1.0 - beta1.powi(step);
                let c2 = 1.0 - beta2.powi(step);
                let lr = self.lambda_g;
                let update = finite(
                    self.momentum_buf
                        .zip_map(&self.second_moment, |m, v| (m / c1) / ((v / c2).sqrt() + eps)),
                )?;
                finite(self.x.lin_comb(1.0, -lr, &update))?
            }
            ServerOptimizer::Exp { eps } => {
                let eta = exp_step_size(delta_bar, client_deltas, eps)?;
                finite(self.x.lin_comb(1.0, -eta, delta_bar))?
            }
        };
        self.x = x;
        self.t += 1;
        Ok(())
    }
}

/// Adaptive global step of the extrapolating server rule.
pub fn exp_step_size(delta_bar: &ParamVector, client_deltas: &[ParamVector], eps: f64) -> Result<f64> {
    if client_deltas.is_empty() {
        return Err(ServerError::NoUpdates);
    }
    let spread: f64 = client_deltas.iter().map(ParamVector::norm2_sq).sum();
    let eta = spread / (2.0 * client_deltas.len() as f64 * (delta_bar.norm2_sq() + eps));
    if !eta.is_finite() {
        return Err(ServerError::NonFinite);
    }
    Ok(eta.max(1.0))
}

/// Which product range multiplies `λ_j·g_j` in the pseudo-gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductIndex {
    /// `Π_{r=j+1}^{τ−1}(1 − μ_r)`, obtained by unrolling the local recursion.
    StepDerived,
    /// `Π_{r=j}^{τ−1}(1 − μ_r)`, which includes the step's own decay factor.
    AsPrinted,
}

/// Closed-form decomposition `x_new = (1 − μ_g)·x_prev − λ_g·h` of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    /// Effective global decay `λ_g − (λ_g/M)·Σ_i Π_j(1 − μ_j)`.
    pub mu_g: f64,
    /// Effective pseudo-gradient.
    pub h: ParamVector,
    /// `‖(1 − μ_g)·x_prev − λ_g·h − x_new‖_∞`.
    pub reconstruction_error: f64,
}

/// Effective global decay `λ_g − (λ_g/M)·Σ_i Π_j(1 − μ_j)` over `M` traces.
pub fn effective_global_decay(traces: &[LocalTrace], lambda_g: f64) -> f64 {
    let m = traces.len() as f64;
    let product_sum: f64 = traces.iter().map(LocalTrace::decay_product).sum();
    lambda_g - lambda_g / m * product_sum
}

/// Computes `μ_g` and `h` from the traces of the participating clients and
/// measures how well they reconstruct `x_new`. `M` is the number of traces.
pub fn lemma1_reconstruct(
    traces: &[LocalTrace],
    x_prev: &ParamVector,
    x_new: &ParamVector,
    lambda_g: f64,
    index: ProductIndex,
) -> Result<Lemma1Report> {
    if traces.is_empty() {
        return Err(ServerError::NoUpdates);
    }
    let m = traces.len() as f64;
    let mu_g = effective_global_decay(traces, lambda_g);

    let mut h = ParamVector::zeros(x_prev.dim())?;
    for trace in traces {
        // suffix product Π_{r>j}(1 − μ_r), built from the last step backwards
        let mut suffix = 1.0;
        for step in trace.steps.iter().rev() {
            let coef = match index {
                ProductIndex::StepDerived => suffix,
                ProductIndex::AsPrinted => suffix * (1.0 - step.mu),
            };
            h.axpy(step.lambda * coef / m, &step.grad)?;
            suffix *= 1.0 - step.mu;
        }
    }
    let recon = x_prev.lin_comb(1.0 - mu_g, -lambda_g, &h)?;
    let reconstruction_error = recon.sub(x_new)?.norm_inf();
    Ok(Lemma1Report {
        mu_g,
        h,
        reconstruction_error,
    })
}

/// [`lemma1_reconstruct`] with the step-derived index, failing when the
/// reconstruction is off by more than [`LEMMA1_TOL`].
pub fn lemma1_decompose(
    traces: &[LocalTrace],
    x_prev: &ParamVector,
    x_new: &ParamVector,
    lambda_g: f64,
) -> Result<Lemma1Report> {
    let report = lemma1_reconstruct(traces, x_prev, x_new, lambda_g, ProductIndex::StepDerived)?;
    if !(report.reconstruction_error <= LEMMA1_TOL) {
        return Err(ServerError::Reconstruction {
            error: report.reconstruction_error,
            tol: LEMMA1_TOL,
        });
    }
    Ok(report)
}

/// Checks `1 − Π_j(1 − μ_j) ≤ τ·u_t` for every client, which bounds the
/// effective global decay by `λ_g·τ·u_t`.
pub fn decay_coefficient_bound_holds(traces: &[LocalTrace]) -> bool {
    traces.iter().all(|t| {
        let lhs = 1.0 - t.decay_product();
        lhs <= t.steps.len() as f64 * t.u_t + EXACT_TOL
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBound {
    pub ok: bool,
    /// `bound − ‖x_t‖`.
    pub slack: f64,
}

/// Linear-in-`t` bound on the global model norm:
/// `‖x_t‖ ≤ ‖x_0‖ + λ_g·τ·l_*·A·t`.
pub fn check_norm_bound(
    x_t: &ParamVector,
    x_0: &ParamVector,
    lambda_g: f64,
    tau: usize,
    max_norm: f64,
    l_star: f64,
    t: u64,
) -> NormBound {
    let bound = x_0.norm2() + lambda_g * tau as f64 * (l_star * max_norm) * t as f64;
    let norm = x_t.norm2();
    NormBound {
        ok: norm <= bound + NORM_BOUND_TOL,
        slack: bound - norm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStats {
    pub count: usize,
    /// Mean pre-clip norm of the clipped steps; 0 when `empty`.
    pub mean_clipped_norm: f64,
    pub empty: bool,
}

/// Counts clipped steps across all clients of a round.
pub fn clip_stats(traces: &[LocalTrace]) -> ClipStats {
    let norms: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.steps.iter())
        .filter(|s| s.clipped)
        .map(|s| s.pre_clip_norm)
        .collect();
    if norms.is_empty() {
        return ClipStats {
            count: 0,
            mean_clipped_norm: 0.0,
            empty: true,
        };
    }
    ClipStats {
        count: norms.len(),
        mean_clipped_norm: norms.iter().sum::<f64>() / norms.len() as f64,
        empty: false,
    }
}
