//! Per-iteration constants of the log-base-b linearization.
//!
//! Exponentiating the pipe relation with base `b` turns it into a monomial
//! equality in `b^h`, `b^q`; taking logs back gives a *linear* relation
//! `h_i - h_j = q + C` whose constant `C` is evaluated at the previous
//! iterate's flow. The constant absorbs the whole nonlinearity, so the
//! linear relation interpolates the exact curve at the linearization point
//! and the base `b` cancels entirely. This is not a Taylor expansion: the
//! slope in `q` is 1 regardless of the friction model.

use thiserror::Error;

use crate::estimator::StateVector;
use crate::hydraulics::{HeadLossModel, PumpCurve};
use crate::network::Network;

/// Flow floor used when linearizing a pump at (near) zero flow, where the
/// slope `r·q^(ν-1)` degenerates for ν < 2.
pub const PUMP_FLOW_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LinearizationError {
    #[error("pump linearization requires positive flow, got {0}")]
    NonPositivePumpFlow(f64),
    #[error("state dimensions do not match network")]
    DimensionMismatch,
}

/// Base of the exponential change of variables, `b = 1 + δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpConfig {
    pub base: f64,
    pub delta: f64,
}

impl GpConfig {
    pub fn new(base: f64) -> Self {
        assert!(base > 1.0, "base must exceed 1");
        Self {
            base,
            delta: base - 1.0,
        }
    }
}

impl Default for GpConfig {
    fn default() -> Self {
        Self::new(1.001)
    }
}

/// Constants of the linearized link equations for one time step:
/// `Δh = q + C^P` per pipe and `Δh = C₁ + C₂·q` per pump.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub pipe_constants: Vec<f64>,
    pub pump_intercepts: Vec<f64>,
    pub pump_slopes: Vec<f64>,
}

/// `C^P(q) = q(R|q|^(μ-1) - 1)`, so that `q + C^P(q)` reproduces the exact
/// head loss at the linearization flow.
pub fn pipe_coefficient(q_prev: f64, model: &HeadLossModel) -> f64 {
    q_prev * (model.resistance * q_prev.abs().powf(model.flow_exponent - 1.0) - 1.0)
}

/// `(C₁, C₂) = (-s²h₀, r·q^(ν-1)·s^(2-ν))`; `C₁ + C₂·q` reproduces the exact
/// pump head gain at the linearization flow.
pub fn pump_coefficients(
    q_prev: f64,
    curve: &PumpCurve,
) -> Result<(f64, f64), LinearizationError> {
    if q_prev <= 0.0 {
        return Err(LinearizationError::NonPositivePumpFlow(q_prev));
    }
    let s = curve.speed;
    let c1 = -(s * s) * curve.shutoff_head;
    let c2 = curve.coefficient * q_prev.powf(curve.exponent - 1.0) * s.powf(2.0 - curve.exponent);
    Ok((c1, c2))
}

/// Link-wise coefficients from the previous iterate, one set per time step.
/// Pump flows are clamped to [`PUMP_FLOW_FLOOR`] before linearizing.
pub fn update_coefficients(
    net: &Network,
    state_prev: &StateVector,
    cfg: &GpConfig,
) -> Result<Vec<LinearCoefficients>, LinearizationError> {
    debug_assert!(cfg.base > 1.0);
    if !state_prev.matches(net) {
        return Err(LinearizationError::DimensionMismatch);
    }
    let mut out = Vec::with_capacity(state_prev.steps.len());
    for step in &state_prev.steps {
        let mut pipe_constants = Vec::with_capacity(net.pipes.len());
        for (i, pipe) in net.pipes.iter().enumerate() {
            pipe_constants.push(pipe_coefficient(step.pipe_flows[i], &pipe.model()));
        }
        let mut pump_intercepts = Vec::with_capacity(net.pumps.len());
        let mut pump_slopes = Vec::with_capacity(net.pumps.len());
        for (i, pump) in net.pumps.iter().enumerate() {
            let q = step.pump_flows[i].max(PUMP_FLOW_FLOOR);
            let (c1, c2) = pump_coefficients(q, &pump.curve())?;
            pump_intercepts.push(c1);
            pump_slopes.push(c2);
        }
        out.push(LinearCoefficients {
            pipe_constants,
            pump_intercepts,
            pump_slopes,
        });
    }
    Ok(out)
}

/// Derivation self-check: the monomial form `ĥ_i ĥ_j⁻¹ Ĉ⁻¹ q̂⁻¹ = 1` (with
/// `ĥ = b^h`, `q̂ = b^q`, `Ĉ = b^C`) must hold exactly when the linear form
/// `h_i - h_j = q + C` holds, to 1e-9 in the log domain. Not a solver path.
pub fn gp_linear_equivalence(
    q: f64,
    h_i: f64,
    h_j: f64,
    model: &HeadLossModel,
    cfg: &GpConfig,
) -> bool {
    let b = cfg.base;
    let c = pipe_coefficient(q, model);
    let monomial = b.powf(h_i) * b.powf(h_j).recip() * b.powf(c).recip() * b.powf(q).recip();
    monomial.ln().abs() <= 1e-9
}
