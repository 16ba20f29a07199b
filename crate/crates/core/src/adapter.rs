//! Bidirectional test-time adaptation on top of SGD with momentum.
//!
//! For every incoming instance the adapter evaluates the self-supervised
//! objective and turns its gradient into an update in up to two stages:
//!
//! * **Prospective** (sharpness-aware): the gradient is re-evaluated at
//!   `w + rho * g / ||g||`, the approximate worst point of a radius-`rho`
//!   ball, so the update favours flat neighbourhoods of low loss.
//! * **Retrospective** (trend stabilization): a loss-weighted running trend
//!   `g*` of past gradients is maintained. When the new gradient opposes the
//!   trend (`cos < 0`) the update is `k * proj_{g*}(g)`, which with `k < 0`
//!   pushes back along the trend. Otherwise the update blends the gradient
//!   with the trend using an anneal factor `lambda_t = tanh(2t / Omega)`.
//!
//! The resulting gradient drives `buf = beta * buf + g; w -= eta * buf`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing;

pub const STATE_FORMAT: &str = "bitta-state/1";

/// Lower bound on `|L_p|` used as the trend-weight divisor.
pub const LOSS_FLOOR: f64 = 1e-8;

/// Loss and gradient of an objective at one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<A> {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub aux: A,
}

pub trait Objective {
    type Aux;

    fn evaluate(&mut self, params: &[f64]) -> Result<Evaluation<Self::Aux>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Prospective perturbation radius.
    pub rho: f64,
    /// Backtracking degree applied to the trend projection on oscillation.
    pub backtrack: f64,
    /// Number of samples after which the trend is considered reliable.
    pub omega: f64,
    pub use_pa: bool,
    pub use_rs: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            learning_rate: 0.0001,
            momentum: 0.9,
            rho: 0.005,
            backtrack: -9.0,
            omega: 4000.0,
            use_pa: true,
            use_rs: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.learning_rate,
            self.momentum,
            self.rho,
            self.backtrack,
            self.omega,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || self.learning_rate < 0.0
            || self.momentum < 0.0
            || self.rho < 0.0
            || self.omega <= 0.0
        {
            return Err(Error::InvalidParams(format!(
                "invalid adapter config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// Retrospective stage disabled; gradient used as is.
    Plain,
    /// Gradient blended with the trend.
    Blend,
    /// Gradient opposed the trend; replaced by the scaled projection.
    Oscillation,
    /// Gradient was exactly zero; parameters left untouched.
    ZeroGradient,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Plain => "plain",
            Branch::Blend => "blend",
            Branch::Oscillation => "oscillation",
            Branch::ZeroGradient => "zero-gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics<A> {
    pub loss: f64,
    pub aux: A,
    pub branch: Branch,
    pub lambda: f64,
    pub grad_norm: f64,
    pub pa_grad_norm: f64,
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    /// Instances processed.
    pub t: u64,
    pub trend: Vec<f64>,
    pub momentum_buf: Vec<f64>,
    /// Instances aborted because of non-finite values or objective errors.
    pub errors: u64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `rho * g / ||g||`, or `None` when `g` is zero.
pub fn perturbation(grad: &[f64], rho: f64) -> Option<Vec<f64>> {
    let n = norm(grad);
    if n == 0.0 {
        return None;
    }
    Some(grad.iter().map(|g| rho * g / n).collect())
}

/// Result of the prospective stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PaGradient<A> {
    /// Evaluation at the unperturbed parameters.
    pub base: Evaluation<A>,
    /// Gradient at `w + eps_hat`, or zero when the base gradient is zero.
    pub grad: Vec<f64>,
}

/// Sharpness-aware gradient at `params`. `params` itself is never modified;
/// the perturbed point is evaluated on a copy.
pub fn pa_gradient<O: Objective>(
    params: &[f64],
    objective: &mut O,
    rho: f64,
) -> Result<PaGradient<O::Aux>> {
    let base = objective.evaluate(params)?;
    if !base.loss.is_finite() || !all_finite(&base.grad) {
        return Err(Error::NonFinite("objective at current parameters"));
    }
    pa_from_base(params, objective, rho, base)
}

fn pa_from_base<O: Objective>(
    params: &[f64],
    objective: &mut O,
    rho: f64,
    base: Evaluation<O::Aux>,
) -> Result<PaGradient<O::Aux>> {
    let Some(eps) = perturbation(&base.grad, rho) else {
        let grad = vec![0.0; base.grad.len()];
        return Ok(PaGradient { base, grad });
    };
    let probe: Vec<f64> = params.iter().zip(&eps).map(|(w, e)| w + e).collect();
    let perturbed = objective.evaluate(&probe)?;
    if !perturbed.loss.is_finite() || !all_finite(&perturbed.grad) {
        return Err(Error::NonFinite("objective at perturbed parameters"));
    }
    Ok(PaGradient {
        base,
        grad: perturbed.grad,
    })
}

/// `g*_t = (g*_{t-1} + g / |L|) / (1 + 1 / |L|)` with `|L|` floored at
/// [`LOSS_FLOOR`].
pub fn update_trend(prev: &[f64], grad: &[f64], loss: f64) -> Vec<f64> {
    let weight = 1.0 / loss.abs().max(LOSS_FLOOR);
    prev.iter()
        .zip(grad)
        .map(|(p, g)| (p + weight * g) / (1.0 + weight))
        .collect()
}

/// Anneal factor `-1 + 2 * sigmoid(4t / Omega)`, equal to `tanh(2t / Omega)`.
pub fn anneal(t: u64, omega: f64) -> f64 {
    (2.0 * t as f64 / omega).tanh()
}

/// Retrospective combination of the current gradient with the trend.
/// Returns the update direction, the branch taken, and the anneal factor.
pub fn rs_combine(
    trend: &[f64],
    grad: &[f64],
    t: u64,
    omega: f64,
    backtrack: f64,
) -> (Vec<f64>, Branch, f64) {
    let lambda = anneal(t, omega);
    let trend_sq = dot(trend, trend);
    if trend_sq == 0.0 {
        return (
            grad.iter().map(|g| (1.0 - lambda) * g).collect(),
            Branch::Blend,
            lambda,
        );
    }
    let along = dot(grad, trend);
    if along < 0.0 {
        let coef = along / trend_sq;
        let out = trend.iter().map(|s| backtrack * (coef * s)).collect();
        return (out, Branch::Oscillation, lambda);
    }
    let out = grad
        .iter()
        .zip(trend)
        .map(|(g, s)| (1.0 - lambda) * g + lambda * s)
        .collect();
    (out, Branch::Blend, lambda)
}

impl AdapterState {
    pub fn new(config: AdapterConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        Ok(AdapterState {
            config,
            t: 0,
            trend: vec![0.0; param_count],
            momentum_buf: vec![0.0; param_count],
            errors: 0,
        })
    }

    /// Adapts `params` to one instance. On error neither `params` nor the
    /// state changes, apart from [`AdapterState::errors`].
    pub fn adapt_instance<O: Objective>(
        &mut self,
        params: &mut [f64],
        objective: &mut O,
    ) -> Result<StepDiagnostics<O::Aux>> {
        match self.try_step(params, objective) {
            Ok(step) => Ok(step),
            Err(e) => {
                self.errors += 1;
                Err(e)
            }
        }
    }

    fn try_step<O: Objective>(
        &mut self,
        params: &mut [f64],
        objective: &mut O,
    ) -> Result<StepDiagnostics<O::Aux>> {
        if params.len() != self.trend.len() {
            return Err(Error::CountMismatch {
                expected: self.trend.len(),
                found: params.len(),
            });
        }
        let cfg = &self.config;
        let base = objective.evaluate(params)?;
        if !base.loss.is_finite() || !all_finite(&base.grad) {
            return Err(Error::NonFinite("objective at current parameters"));
        }
        let grad_norm = norm(&base.grad);
        let (base, grad) = if cfg.use_pa {
            let pa = pa_from_base(params, objective, cfg.rho, base)?;
            (pa.base, pa.grad)
        } else {
            let g = base.grad.clone();
            (base, g)
        };
        let pa_grad_norm = norm(&grad);
        let t_next = self.t + 1;

        if grad.iter().all(|&g| g == 0.0) {
            self.t = t_next;
            return Ok(StepDiagnostics {
                loss: base.loss,
                aux: base.aux,
                branch: Branch::ZeroGradient,
                lambda: anneal(t_next, cfg.omega),
                grad_norm,
                pa_grad_norm,
                final_grad_norm: 0.0,
            });
        }

        let (update, branch, lambda, trend) = if cfg.use_rs {
            let trend = update_trend(&self.trend, &grad, base.loss);
            let (update, branch, lambda) =
                rs_combine(&trend, &grad, t_next, cfg.omega, cfg.backtrack);
            (update, branch, lambda, Some(trend))
        } else {
            (grad, Branch::Plain, 0.0, None)
        };
        if !all_finite(&update) {
            return Err(Error::NonFinite("combined gradient"));
        }

        let (beta, lr) = (cfg.momentum, cfg.learning_rate);
        let mut buf = self.momentum_buf.clone();
        let mut next = params.to_vec();
        for ((b, w), g) in buf.iter_mut().zip(next.iter_mut()).zip(&update) {
            *b = beta * *b + g;
            *w -= lr * *b;
        }
        if !all_finite(&next) {
            return Err(Error::NonFinite("updated parameters"));
        }

        params.copy_from_slice(&next);
        self.momentum_buf = buf;
        if let Some(trend) = trend {
            self.trend = trend;
        }
        self.t = t_next;
        Ok(StepDiagnostics {
            loss: base.loss,
            aux: base.aux,
            branch,
            lambda,
            grad_norm,
            pa_grad_norm,
            final_grad_norm: norm(&update),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    format: String,
    t: u64,
    errors: u64,
    config: AdapterConfig,
    param_count: usize,
}

/// Writes the state as a header plus `trend ++ momentum` in little-endian f64.
pub fn save_state(path: &Path, state: &AdapterState) -> Result<()> {
    let header = StateHeader {
        format: STATE_FORMAT.to_string(),
        t: state.t,
        errors: state.errors,
        config: state.config.clone(),
        param_count: state.trend.len(),
    };
    let mut payload = framing::encode_f64(&state.trend);
    payload.extend(framing::encode_f64(&state.momentum_buf));
    framing::write(path, &header, &payload)
}

pub fn load_state(path: &Path) -> Result<AdapterState> {
    let (header, payload): (StateHeader, _) = framing::read(path, STATE_FORMAT)?;
    let expected = header.param_count * 2;
    if payload.len() % 8 != 0 || payload.len() / 8 != expected {
        return Err(Error::CountMismatch {
            expected,
            found: payload.len() / 8,
        });
    }
    header.config.validate()?;
    let values = framing::decode_f64(&payload);
    let (trend, momentum) = values.split_at(header.param_count);
    Ok(AdapterState {
        config: header.config,
        t: header.t,
        trend: trend.to_vec(),
        momentum_buf: momentum.to_vec(),
        errors: header.errors,
    })
}
