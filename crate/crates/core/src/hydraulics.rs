//! Exact nonlinear hydraulic relations.
//!
//! These are the ground-truth physics used by the [`crate::oracle`] and by
//! the linearization consistency tests. All functions are pure; heads are
//! in ft and flows in GPM throughout.

use nalgebra::DVector;
use thiserror::Error;

use crate::estimator::StateVector;
use crate::network::Network;

/// Volumetric conversion factor, GPM to ft³/s.
pub const GPM_TO_CFS: f64 = 0.0022280;

#[derive(Debug, Error)]
pub enum HydraulicsError {
    #[error("pump flow must be nonnegative, got {0}")]
    NegativePumpFlow(f64),
    #[error("state dimensions do not match network ({0})")]
    DimensionMismatch(String),
}

/// Friction model of one pipe: `Δh = R·q·|q|^(μ-1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLossModel {
    pub resistance: f64,
    pub flow_exponent: f64,
}

impl HeadLossModel {
    pub fn new(resistance: f64, flow_exponent: f64) -> Self {
        assert!(resistance > 0.0, "resistance must be positive");
        assert!(flow_exponent >= 1.0, "flow exponent must be >= 1");
        Self {
            resistance,
            flow_exponent,
        }
    }
}

/// Pump characteristic `Δh = -s²(h₀ - r(q/s)^ν)` at fixed relative speed
/// `s = 1`. The head difference across an operating pump is negative
/// (delivery node sits higher than suction node).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpCurve {
    pub shutoff_head: f64,
    pub coefficient: f64,
    pub exponent: f64,
    pub speed: f64,
}

impl PumpCurve {
    pub fn new(shutoff_head: f64, coefficient: f64, exponent: f64) -> Self {
        assert!(shutoff_head > 0.0 && coefficient > 0.0 && exponent > 1.0);
        Self {
            shutoff_head,
            coefficient,
            exponent,
            speed: 1.0,
        }
    }
}

/// Head loss across a pipe at flow `q`. Odd and strictly increasing in `q`.
pub fn pipe_headloss(q: f64, model: &HeadLossModel) -> f64 {
    model.resistance * q * q.abs().powf(model.flow_exponent - 1.0)
}

/// Derivative of [`pipe_headloss`] in `q`, regularized near zero flow where
/// the true derivative is unbounded for μ < 2. Residual evaluations stay
/// exact; only Newton Jacobians use this.
pub fn pipe_headloss_gradient(q: f64, model: &HeadLossModel) -> f64 {
    model.resistance * model.flow_exponent * (q.abs() + 1e-6).powf(model.flow_exponent - 1.0)
}

/// Head difference `h_i - h_j` across a pump moving flow `q >= 0`.
pub fn pump_headgain(q: f64, curve: &PumpCurve) -> Result<f64, HydraulicsError> {
    if q < 0.0 {
        return Err(HydraulicsError::NegativePumpFlow(q));
    }
    let s = curve.speed;
    Ok(-(s * s) * (curve.shutoff_head - curve.coefficient * (q / s).powf(curve.exponent)))
}

/// Derivative of [`pump_headgain`] in `q`, regularized at zero flow.
pub fn pump_headgain_gradient(q: f64, curve: &PumpCurve) -> f64 {
    let s = curve.speed;
    curve.coefficient * curve.exponent * ((q.max(0.0) + 1e-6) / s).powf(curve.exponent - 1.0) / s
}

/// One explicit Euler step of the tank level equation. `net_inflow` is the
/// signed inflow in GPM, converted internally to ft³/s.
pub fn tank_step(head_ft: f64, net_inflow_gpm: f64, area_ft2: f64, dt_s: f64) -> f64 {
    assert!(area_ft2 > 0.0 && dt_s > 0.0);
    head_ft + dt_s / area_ft2 * (net_inflow_gpm * GPM_TO_CFS)
}

/// Mass-balance defect per junction and time step: Σ inflow − Σ outflow − d.
/// A zero vector means mass conservation holds at that step.
pub fn junction_imbalance(
    net: &Network,
    state: &StateVector,
) -> Result<Vec<DVector<f64>>, HydraulicsError> {
    if !state.matches(net) {
        return Err(HydraulicsError::DimensionMismatch(format!(
            "state has {} steps of wrong shape for {} nodes / {} links",
            state.steps.len(),
            net.node_count(),
            net.link_count()
        )));
    }
    let mut out = Vec::with_capacity(state.steps.len());
    for step in &state.steps {
        let flows = step.all_flows();
        let mut v = DVector::zeros(net.junction_count());
        for (j, junction) in net.junctions.iter().enumerate() {
            let node = net.node_index(&junction.id).unwrap();
            let mut acc = -junction.demand;
            for (li, q) in flows.iter().enumerate() {
                let (from, to) = net.link_endpoints(li);
                if to == node {
                    acc += q;
                }
                if from == node {
                    acc -= q;
                }
            }
            v[j] = acc;
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn headloss_zero_flow() {
        let m = HeadLossModel::new(3.3, 1.852);
        assert_eq!(pipe_headloss(0.0, &m), 0.0);
    }

    #[test]
    fn headloss_unit_case() {
        let m = HeadLossModel::new(1.0, 1.852);
        assert_relative_eq!(pipe_headloss(1.0, &m), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn headloss_odd_symmetry() {
        let m = HeadLossModel::new(1.0, 2.0);
        assert_relative_eq!(pipe_headloss(-2.0, &m), -4.0, max_relative = 1e-15);
    }

    #[test]
    fn pump_shutoff_head() {
        let c = PumpCurve::new(100.0, 0.1, 2.0);
        assert_relative_eq!(pump_headgain(0.0, &c).unwrap(), -100.0);
    }

    #[test]
    fn pump_direct_evaluation() {
        // -(100 - 0.1 * 10^2) = -90
        let c = PumpCurve::new(100.0, 0.1, 2.0);
        assert_relative_eq!(pump_headgain(10.0, &c).unwrap(), -90.0, max_relative = 1e-15);
    }

    #[test]
    fn pump_rejects_reverse_flow() {
        let c = PumpCurve::new(100.0, 0.1, 2.0);
        assert!(matches!(
            pump_headgain(-1.0, &c),
            Err(HydraulicsError::NegativePumpFlow(_))
        ));
    }

    #[test]
    fn tank_steady_when_balanced() {
        assert_eq!(tank_step(834.0, 0.0, 2827.0, 3600.0), 834.0);
    }

    #[test]
    fn tank_hand_evaluated_step() {
        // 834 + (3600/12609) * (448.83 * 0.0022280)
        let expected = 834.0 + 3600.0 / 12609.0 * (448.83 * GPM_TO_CFS);
        let got = tank_step(834.0, 448.83, 12609.0, 3600.0);
        assert_relative_eq!(got, expected, max_relative = 1e-15);
        assert!((got - 834.285).abs() < 1e-3);
    }

    #[test]
    fn tank_linear_in_dt() {
        let h0 = 500.0;
        let d1 = tank_step(h0, 120.0, 900.0, 600.0) - h0;
        let d2 = tank_step(h0, 120.0, 900.0, 1200.0) - h0;
        assert_relative_eq!(d2, 2.0 * d1, max_relative = 1e-12);
    }

    #[test]
    fn imbalance_zero_at_balanced_flows() {
        let net = crate::network::Network::parse_inp(include_str!("../tests/data/net3.inp")).unwrap();
        let mut state = crate::estimator::StateVector::default_init(&net, 1);
        state.steps[0].pipe_flows = vec![238.607, 38.607];
        let imb = junction_imbalance(&net, &state).unwrap();
        assert_relative_eq!(imb[0][0], 0.0, epsilon = 1e-12);
        // All-zero flows leave the demand unserved.
        state.steps[0].pipe_flows = vec![0.0, 0.0];
        let imb = junction_imbalance(&net, &state).unwrap();
        assert_relative_eq!(imb[0][0], -200.0);
    }

    #[test]
    fn tank_conserves_volume() {
        let h0 = 61.5;
        let (inflow, area, dt) = (37.25, 1813.0, 741.0);
        let h1 = tank_step(h0, inflow, area, dt);
        let recovered = area * (h1 - h0) / dt / GPM_TO_CFS;
        assert_relative_eq!(recovered, inflow, max_relative = 1e-12);
    }
}
