//! Successive linear approximation of the state-estimation problem.
//!
//! Each iteration assembles one convex subproblem from the current
//! linearization constants and solves it: junction mass balance, tank
//! dynamics (for multi-step horizons), linearized link equations joined to
//! node heads, fixed reservoir heads and box bounds are hard constraints;
//! the weighted head-difference measurement residuals form the objective.
//! Every fourth iterate is extrapolated along the recent search direction,
//! with a rollback guard since the extrapolation can overshoot.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linearization::{update_coefficients, GpConfig, LinearCoefficients};
use crate::network::{build_incidence, IncidenceOperators, Network, NetworkError, NodeKind};
use crate::solver::{self, ConvexProgram, ObjectiveKind, SolveStatus};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("measurement references unknown node {0}")]
    UnknownNode(String),
    #[error("invalid measurement set: {0}")]
    InvalidMeasurements(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("subproblem {status:?} at iteration {iteration}")]
    Subproblem {
        iteration: usize,
        status: SolveStatus,
    },
    #[error(transparent)]
    Program(#[from] solver::ProgramError),
    #[error(transparent)]
    Linearization(#[from] crate::linearization::LinearizationError),
}

/// All unknowns of one time step, in the fixed block order
/// (junction heads, reservoir heads, tank heads, pipe flows, pump flows).
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub junction_heads: Vec<f64>,
    pub reservoir_heads: Vec<f64>,
    pub tank_heads: Vec<f64>,
    pub pipe_flows: Vec<f64>,
    pub pump_flows: Vec<f64>,
}

impl StepState {
    pub fn all_heads(&self) -> Vec<f64> {
        let mut v = self.junction_heads.clone();
        v.extend_from_slice(&self.reservoir_heads);
        v.extend_from_slice(&self.tank_heads);
        v
    }

    pub fn all_flows(&self) -> Vec<f64> {
        let mut v = self.pipe_flows.clone();
        v.extend_from_slice(&self.pump_flows);
        v
    }
}

/// The full unknown vector over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub steps: Vec<StepState>,
}

impl StateVector {
    /// Default initialization: 100 GPM on every pipe and pump, junction
    /// heads at elevation, reservoir and tank heads from the input file.
    pub fn default_init(net: &Network, horizon: usize) -> Self {
        let step = StepState {
            junction_heads: net.junctions.iter().map(|j| j.elevation).collect(),
            reservoir_heads: net.reservoirs.iter().map(|r| r.fixed_head).collect(),
            tank_heads: net.tanks.iter().map(|t| t.initial_head).collect(),
            pipe_flows: vec![100.0; net.pipes.len()],
            pump_flows: vec![100.0; net.pumps.len()],
        };
        Self {
            steps: vec![step; horizon.max(1)],
        }
    }

    pub fn matches(&self, net: &Network) -> bool {
        !self.steps.is_empty()
            && self.steps.iter().all(|s| {
                s.junction_heads.len() == net.junctions.len()
                    && s.reservoir_heads.len() == net.reservoirs.len()
                    && s.tank_heads.len() == net.tanks.len()
                    && s.pipe_flows.len() == net.pipes.len()
                    && s.pump_flows.len() == net.pumps.len()
            })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn head(&self, step: usize, node_idx: usize, net: &Network) -> f64 {
        let nj = net.junctions.len();
        let nr = net.reservoirs.len();
        let s = &self.steps[step];
        if node_idx < nj {
            s.junction_heads[node_idx]
        } else if node_idx < nj + nr {
            s.reservoir_heads[node_idx - nj]
        } else {
            s.tank_heads[node_idx - nj - nr]
        }
    }

    pub fn flow(&self, step: usize, link_idx: usize, net: &Network) -> f64 {
        let np = net.pipes.len();
        let s = &self.steps[step];
        if link_idx < np {
            s.pipe_flows[link_idx]
        } else {
            s.pump_flows[link_idx - np]
        }
    }

    /// Stack into a single vector, steps concatenated.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for s in &self.steps {
            out.extend(s.all_heads());
            out.extend(s.all_flows());
        }
        DVector::from_vec(out)
    }

    pub fn from_flat(net: &Network, horizon: usize, x: &DVector<f64>) -> Self {
        let blk = net.node_count() + net.link_count();
        assert_eq!(x.len(), blk * horizon, "flat state has wrong length");
        let (nj, nr, nt, np) = (
            net.junctions.len(),
            net.reservoirs.len(),
            net.tanks.len(),
            net.pipes.len(),
        );
        let steps = (0..horizon)
            .map(|k| {
                let base = k * blk;
                let at = |o: usize| x[base + o];
                StepState {
                    junction_heads: (0..nj).map(&at).collect(),
                    reservoir_heads: (0..nr).map(|i| at(nj + i)).collect(),
                    tank_heads: (0..nt).map(|i| at(nj + nr + i)).collect(),
                    pipe_flows: (0..np).map(|i| at(nj + nr + nt + i)).collect(),
                    pump_flows: (0..net.pumps.len())
                        .map(|i| at(nj + nr + nt + np + i))
                        .collect(),
                }
            })
            .collect();
        Self { steps }
    }
}

/// One head-difference observation between two nodes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeasurementEntry {
    pub from: String,
    pub to: String,
    pub value_ft: f64,
    pub weight: f64,
}

/// Measurement set: weighted head differences plus heads treated as exact
/// (tank or reservoir sensors trusted completely). Larger weight means a
/// more trusted sensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    pub entries: Vec<MeasurementEntry>,
    pub fixed: std::collections::BTreeMap<String, f64>,
}

impl MeasurementSet {
    pub fn validate(&self, net: &Network) -> Result<(), EstimateError> {
        for e in &self.entries {
            if e.weight <= 0.0 {
                return Err(EstimateError::InvalidMeasurements(format!(
                    "weight {} on ({}, {})",
                    e.weight, e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(EstimateError::InvalidMeasurements(format!(
                    "sensor pair ({}, {}) must be distinct",
                    e.from, e.to
                )));
            }
            for id in [&e.from, &e.to] {
                if net.node_index(id).is_none() {
                    return Err(EstimateError::UnknownNode(id.clone()));
                }
            }
        }
        for id in self.fixed.keys() {
            match net.node_index(id) {
                None => return Err(EstimateError::UnknownNode(id.clone())),
                Some(idx) if net.node_kind(idx) == NodeKind::Junction => {
                    return Err(EstimateError::InvalidMeasurements(format!(
                        "fixed head on junction {id}; only tanks and reservoirs are exact"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn sensor_pairs(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub gp: GpConfig,
    pub threshold: f64,
    pub max_iterations: usize,
    pub acceleration_period: usize,
    pub acceleration_gain: f64,
    pub objective: ObjectiveKind,
    pub horizon: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gp: GpConfig::default(),
            threshold: 1e-4,
            max_iterations: 100,
            acceleration_period: 4,
            acceleration_gain: 3.0,
            objective: ObjectiveKind::WeightedLeastSquares,
            horizon: 1,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        let ok = self.threshold > 0.0
            && self.acceleration_period >= 2
            && self.acceleration_gain >= 0.0
            && self.horizon >= 1
            && self.gp.base > 1.0;
        if ok {
            Ok(())
        } else {
            Err(EstimateError::InvalidMeasurements(
                "estimator config violates its invariants".into(),
            ))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub iteration: usize,
    pub state: StateVector,
    pub error: f64,
    pub objective: f64,
    pub accelerated: bool,
}

/// Append-only per-iteration record; the `error` column is the Euclidean
/// distance between consecutive iterates.
#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    pub entries: Vec<TraceEntry>,
}

impl IterationTrace {
    pub fn final_error(&self) -> Option<f64> {
        self.entries.last().map(|e| e.error)
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub state: StateVector,
    pub trace: IterationTrace,
    pub converged: bool,
}

/// Assemble one linearized subproblem over the whole horizon.
pub fn assemble(
    net: &Network,
    inc: &IncidenceOperators,
    meas: &MeasurementSet,
    coeffs: &[LinearCoefficients],
    cfg: &EstimatorConfig,
) -> Result<ConvexProgram, EstimateError> {
    meas.validate(net)?;
    cfg.validate()?;
    let horizon = cfg.horizon;
    if coeffs.len() != horizon {
        return Err(EstimateError::Dimensions(format!(
            "{} coefficient sets for horizon {horizon}",
            coeffs.len()
        )));
    }
    for c in coeffs {
        if c.pipe_constants.len() != net.pipes.len()
            || c.pump_intercepts.len() != net.pumps.len()
            || c.pump_slopes.len() != net.pumps.len()
            || c.pipe_constants.iter().any(|v| !v.is_finite())
        {
            return Err(EstimateError::Dimensions(
                "coefficient vectors do not match the link partition".into(),
            ));
        }
    }

    let nn = net.node_count();
    let nl = net.link_count();
    let blk = nn + nl;
    let n = blk * horizon;
    let nj = net.junction_count();
    let nr = net.reservoirs.len();
    let nt = net.tanks.len();
    let np = net.pipes.len();
    let head_at = |k: usize, node: usize| k * blk + node;
    let flow_at = |k: usize, link: usize| k * blk + nn + link;

    let n_eq = horizon * (nj + nl + nr)
        + (horizon - 1) * nt
        + meas.fixed.len() * if nt > 0 || nr > 0 { 1 } else { 0 };
    let mut eq = DMatrix::zeros(n_eq, n);
    let mut rhs = DVector::zeros(n_eq);
    let mut row = 0;

    let demands = net.demands();
    for k in 0..horizon {
        // (i) junction mass balance E_q q = d
        for (j, demand) in demands.iter().enumerate() {
            for li in 0..nl {
                eq[(row, flow_at(k, li))] = inc.mass[(j, li)];
            }
            rhs[row] = *demand;
            row += 1;
        }
        // (iii) link consistency joined to node heads
        for li in 0..nl {
            let (from, to) = net.link_endpoints(li);
            eq[(row, head_at(k, from))] = 1.0;
            eq[(row, head_at(k, to))] = -1.0;
            if li < np {
                eq[(row, flow_at(k, li))] = -1.0;
                rhs[row] = coeffs[k].pipe_constants[li];
            } else {
                let pi = li - np;
                eq[(row, flow_at(k, li))] = -coeffs[k].pump_slopes[pi];
                rhs[row] = coeffs[k].pump_intercepts[pi];
            }
            row += 1;
        }
        // (iv) reservoir heads fixed
        for (r, res) in net.reservoirs.iter().enumerate() {
            eq[(row, head_at(k, nj + r))] = 1.0;
            rhs[row] = res.fixed_head;
            row += 1;
        }
        // (ii) tank dynamics coupling step k to k+1
        if k + 1 < horizon {
            for t in 0..nt {
                let node = nj + nr + t;
                eq[(row, head_at(k + 1, node))] = 1.0;
                eq[(row, head_at(k, node))] = -1.0;
                for li in 0..nl {
                    eq[(row, flow_at(k, li))] = -inc.tank[(t, li)];
                }
                row += 1;
            }
        }
    }
    // Exact head sensors: reservoir values are already constrained above;
    // tanks are pinned at the first step (later steps follow the dynamics).
    for (id, value) in &meas.fixed {
        let idx = net
            .node_index(id)
            .ok_or_else(|| EstimateError::UnknownNode(id.clone()))?;
        match net.node_kind(idx) {
            NodeKind::Tank => {
                eq[(row, head_at(0, idx))] = 1.0;
                rhs[row] = *value;
                row += 1;
            }
            NodeKind::Reservoir => {
                eq[(row, head_at(0, idx))] = 1.0;
                rhs[row] = *value;
                row += 1;
            }
            NodeKind::Junction => unreachable!("rejected by validate"),
        }
    }
    let eq = eq.rows(0, row).into_owned();
    let rhs = rhs.rows(0, row).into_owned();

    // Measurement residual block, one row per entry per step.
    let ne = meas.entries.len() * horizon;
    let mut a_r = DMatrix::zeros(ne, n);
    let mut b_r = DVector::zeros(ne);
    let mut w = DVector::zeros(ne);
    for k in 0..horizon {
        for (m, e) in meas.entries.iter().enumerate() {
            let i = net.node_index(&e.from).unwrap();
            let j = net.node_index(&e.to).unwrap();
            let r = k * meas.entries.len() + m;
            a_r[(r, head_at(k, i))] = 1.0;
            a_r[(r, head_at(k, j))] = -1.0;
            b_r[r] = e.value_ft;
            w[r] = e.weight;
        }
    }

    // (vi) box bounds; (v) the pump operating constraint C1 + C2 q <= 0
    // tightens the pump flow upper bound to -C1/C2.
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for k in 0..horizon {
        for node in 0..nn {
            let (lo, hi) = net.node_head_bounds(node);
            lower[head_at(k, node)] = lo;
            upper[head_at(k, node)] = hi;
        }
        for li in 0..nl {
            let (lo, hi) = net.link_flow_bounds(li);
            let hi = if li >= np {
                let pi = li - np;
                let cap = -coeffs[k].pump_intercepts[pi] / coeffs[k].pump_slopes[pi];
                hi.min(cap)
            } else {
                hi
            };
            lower[flow_at(k, li)] = lo;
            upper[flow_at(k, li)] = hi;
        }
    }

    Ok(ConvexProgram {
        objective: cfg.objective,
        residual_matrix: a_r,
        residual_offset: b_r,
        weights: w,
        eq_matrix: eq,
        eq_rhs: rhs,
        lower,
        upper,
    })
}

/// Measurement residuals `ε_m = (h_i − h_j) − Δh̃_m` of a state, one block
/// per step, evaluated through the sensor-path operator.
pub fn residual(
    net: &Network,
    inc: &IncidenceOperators,
    meas: &MeasurementSet,
    state: &StateVector,
) -> Result<DVector<f64>, EstimateError> {
    meas.validate(net)?;
    if !state.matches(net) {
        return Err(EstimateError::Dimensions("state / network".into()));
    }
    if inc.measurement.nrows() != meas.entries.len() {
        return Err(EstimateError::Dimensions(
            "incidence operators built for a different sensor list".into(),
        ));
    }
    let horizon = state.horizon();
    let ne = meas.entries.len();
    let mut out = DVector::zeros(ne * horizon);
    for k in 0..horizon {
        // Per-link head differences from node heads; the signed path sum
        // telescopes to h_i − h_j.
        let dh = DVector::from_iterator(
            net.link_count(),
            (0..net.link_count()).map(|li| {
                let (a, b) = net.link_endpoints(li);
                state.head(k, a, net) - state.head(k, b, net)
            }),
        );
        let model = &inc.measurement * &dh;
        for (m, e) in meas.entries.iter().enumerate() {
            out[k * ne + m] = model[m] - e.value_ft;
        }
    }
    Ok(out)
}

/// Run the successive approximation loop.
pub fn run(
    net: &Network,
    meas: &MeasurementSet,
    cfg: &EstimatorConfig,
    initial: &StateVector,
) -> Result<EstimateOutcome, EstimateError> {
    meas.validate(net)?;
    cfg.validate()?;
    if !initial.matches(net) || initial.horizon() != cfg.horizon {
        return Err(EstimateError::Dimensions(
            "initial state does not match network/horizon".into(),
        ));
    }
    if initial.flatten().iter().any(|v| !v.is_finite()) {
        return Err(EstimateError::Dimensions("initial state not finite".into()));
    }
    let inc = build_incidence(net, &meas.sensor_pairs())?;

    let mut trace = IterationTrace::default();
    let mut xi_save = initial.flatten();
    let mut current = initial.clone();
    // Keep the two previous iterates for the extrapolation step.
    let mut history: Vec<DVector<f64>> = vec![xi_save.clone()];
    let mut converged = false;
    let mut redo_without_accel = false;
    let mut n = 1;
    while n <= cfg.max_iterations {
        let coeffs = update_coefficients(net, &current, &cfg.gp)?;
        let program = assemble(net, &inc, meas, &coeffs, cfg)?;
        let res = solver::solve(&program)?;
        if res.status == SolveStatus::Infeasible {
            // An overshooting extrapolation can make the next subproblem
            // infeasible; drop it once and retry from the plain iterate.
            if let Some(entry) = trace.entries.last_mut() {
                if entry.accelerated && !redo_without_accel {
                    redo_without_accel = true;
                    current = StateVector::from_flat(net, cfg.horizon, &history[n - 1]);
                    entry.state = current.clone();
                    entry.accelerated = false;
                    entry.error = (&history[n - 1] - &history[n - 2]).norm();
                    xi_save = history[n - 1].clone();
                    continue;
                }
            }
            return Err(EstimateError::Subproblem {
                iteration: n,
                status: res.status,
            });
        }
        redo_without_accel = false;
        let mut xi = res.solution.clone();
        let mut accelerated = false;
        if n % cfg.acceleration_period == 0 && n >= 2 {
            let prev2 = &history[n - 2];
            let extrapolated = &xi + cfg.acceleration_gain * (&xi - prev2);
            let err_plain = (&xi - &xi_save).norm();
            let err_acc = (&extrapolated - &xi_save).norm();
            let finite = extrapolated.iter().all(|v| v.is_finite());
            if finite && err_acc <= 10.0 * err_plain.max(1e-30) {
                xi = extrapolated;
                accelerated = true;
            }
        }
        let error = (&xi - &xi_save).norm();
        current = StateVector::from_flat(net, cfg.horizon, &xi);
        history.push(xi.clone());
        trace.entries.push(TraceEntry {
            iteration: n,
            state: current.clone(),
            error,
            objective: res.objective_value,
            accelerated,
        });
        xi_save = xi;
        if error < cfg.threshold {
            converged = true;
            break;
        }
        n += 1;
    }
    Ok(EstimateOutcome {
        state: current,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::{junction_imbalance, pipe_headloss};
    use approx::assert_relative_eq;

    fn net3() -> Network {
        Network::parse_inp(include_str!("../tests/data/net3.inp")).unwrap()
    }

    fn synthetic_truth() -> (f64, f64) {
        // Head differences generated from the true flows (238.607, 38.607).
        let net = net3();
        let m = net.pipes[0].model();
        let dh23 = pipe_headloss(238.607, &m);
        let dh24 = dh23 + pipe_headloss(38.607, &net.pipes[1].model());
        (dh23, dh24)
    }

    fn sufficient_measurements() -> MeasurementSet {
        let (_, dh24) = synthetic_truth();
        MeasurementSet {
            entries: vec![MeasurementEntry {
                from: "2".into(),
                to: "4".into(),
                value_ft: dh24,
                weight: 1.0,
            }],
            fixed: Default::default(),
        }
    }

    #[test]
    fn three_node_sufficient_assembles_tab_ii_shape() {
        let net = net3();
        let meas = sufficient_measurements();
        let cfg = EstimatorConfig::default();
        let inc = build_incidence(&net, &meas.sensor_pairs()).unwrap();
        let init = StateVector::default_init(&net, 1);
        let coeffs = update_coefficients(&net, &init, &cfg.gp).unwrap();
        let p = assemble(&net, &inc, &meas, &coeffs, &cfg).unwrap();
        // One mass-balance row, two link rows, one reservoir row.
        assert_eq!(p.eq_matrix.nrows(), 4);
        assert_eq!(p.residual_matrix.nrows(), 1);
        assert_eq!(p.variable_count(), 5);
        // Mass row reads q23 - q34 = 200.
        let q23 = 3 + net.link_index("p23").unwrap();
        let q34 = 3 + net.link_index("p34").unwrap();
        assert_eq!(p.eq_matrix[(0, q23)], 1.0);
        assert_eq!(p.eq_matrix[(0, q34)], -1.0);
        assert_eq!(p.eq_rhs[0], 200.0);
    }

    #[test]
    fn three_node_estimate_recovers_truth() {
        let net = net3();
        let meas = sufficient_measurements();
        let cfg = EstimatorConfig::default();
        let init = StateVector::default_init(&net, 1);
        let out = run(&net, &meas, &cfg, &init).unwrap();
        assert!(out.converged, "3-node determined case must converge");
        let s = &out.state.steps[0];
        assert_relative_eq!(s.pipe_flows[0], 238.607, epsilon = 2e-3);
        assert_relative_eq!(s.pipe_flows[1], 38.607, epsilon = 2e-3);
        // Hard mass balance at the junction.
        let imb = junction_imbalance(&net, &out.state).unwrap();
        assert!(imb[0].amax() <= 1e-8);
        // Consistent data: residual at the optimum is zero.
        let inc = build_incidence(&net, &meas.sensor_pairs()).unwrap();
        let eps = residual(&net, &inc, &meas, &out.state).unwrap();
        assert!(eps.amax() <= 1e-6);
        let trace_err = out.trace.final_error().unwrap();
        assert!(trace_err < cfg.threshold);
        // Fixed point of the linearization: the converged state satisfies
        // the original nonlinear pipe equations, not just the linear rows.
        let h2 = s.reservoir_heads[0];
        let h3 = s.junction_heads[0];
        let h4 = s.tank_heads[0];
        let exact23 = pipe_headloss(s.pipe_flows[0], &net.pipes[0].model());
        let exact34 = pipe_headloss(s.pipe_flows[1], &net.pipes[1].model());
        assert!(((h2 - h3) - exact23).abs() <= 1e-3);
        assert!(((h3 - h4) - exact34).abs() <= 1e-3);
    }

    #[test]
    fn fixed_point_initial_state_terminates_immediately() {
        let net = net3();
        let meas = sufficient_measurements();
        let cfg = EstimatorConfig::default();
        let out = run(
            &net,
            &meas,
            &cfg,
            &StateVector::default_init(&net, 1),
        )
        .unwrap();
        let again = run(&net, &meas, &cfg, &out.state).unwrap();
        assert!(again.converged);
        assert_eq!(again.trace.entries.len(), 1);
    }

    #[test]
    fn residual_sign_convention() {
        let net = net3();
        let mut meas = sufficient_measurements();
        let cfg = EstimatorConfig::default();
        let out = run(&net, &meas, &cfg, &StateVector::default_init(&net, 1)).unwrap();
        // Perturb the sensor by +1 ft: residual = model - measurement = -1.
        meas.entries[0].value_ft += 1.0;
        let inc = build_incidence(&net, &meas.sensor_pairs()).unwrap();
        let eps = residual(&net, &inc, &meas, &out.state).unwrap();
        assert_relative_eq!(eps[0], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn weight_scaling_does_not_move_estimate() {
        let net = net3();
        let (dh23, dh24) = synthetic_truth();
        let mk = |w1: f64, w2: f64| MeasurementSet {
            entries: vec![
                MeasurementEntry {
                    from: "2".into(),
                    to: "3".into(),
                    value_ft: dh23 - 1.5,
                    weight: w1,
                },
                MeasurementEntry {
                    from: "2".into(),
                    to: "4".into(),
                    value_ft: dh24 + 2.0,
                    weight: w2,
                },
            ],
            fixed: Default::default(),
        };
        let cfg = EstimatorConfig::default();
        let init = StateVector::default_init(&net, 1);
        let a = run(&net, &mk(1.0, 0.1), &cfg, &init).unwrap();
        let b = run(&net, &mk(250.0, 25.0), &cfg, &init).unwrap();
        assert!((a.state.flatten() - b.state.flatten()).amax() <= 1e-6);
    }

    #[test]
    fn lp_and_qp_agree_on_noise_free_data() {
        let net = net3();
        let meas = sufficient_measurements();
        let init = StateVector::default_init(&net, 1);
        let qp = run(&net, &meas, &EstimatorConfig::default(), &init).unwrap();
        let lp_cfg = EstimatorConfig {
            objective: ObjectiveKind::WeightedAbsolute,
            ..Default::default()
        };
        let lp = run(&net, &meas, &lp_cfg, &init).unwrap();
        let dq23 = (qp.state.steps[0].pipe_flows[0] - lp.state.steps[0].pipe_flows[0]).abs();
        let dq34 = (qp.state.steps[0].pipe_flows[1] - lp.state.steps[0].pipe_flows[1]).abs();
        assert!(dq23 <= 1e-3 && dq34 <= 1e-3, "dq23={dq23} dq34={dq34}");
    }

    #[test]
    fn unknown_measurement_node_rejected() {
        let net = net3();
        let meas = MeasurementSet {
            entries: vec![MeasurementEntry {
                from: "2".into(),
                to: "nope".into(),
                value_ft: 0.0,
                weight: 1.0,
            }],
            fixed: Default::default(),
        };
        let cfg = EstimatorConfig::default();
        let r = run(&net, &meas, &cfg, &StateVector::default_init(&net, 1));
        assert!(matches!(r, Err(EstimateError::UnknownNode(_))));
    }

    #[test]
    fn multi_step_tank_dynamics_couple_steps() {
        // Two steps, tank head fixed at the first step: the second step
        // must follow h(k+1) = h(k) + (dt/A) * inflow.
        let net = net3();
        let (_, dh24) = synthetic_truth();
        let cfg = EstimatorConfig {
            horizon: 2,
            ..Default::default()
        };
        let meas = MeasurementSet {
            entries: vec![MeasurementEntry {
                from: "2".into(),
                to: "4".into(),
                value_ft: dh24,
                weight: 1.0,
            }],
            fixed: [("4".to_string(), 62.0)].into_iter().collect(),
        };
        let out = run(&net, &meas, &cfg, &StateVector::default_init(&net, 2)).unwrap();
        let s0 = &out.state.steps[0];
        let s1 = &out.state.steps[1];
        assert_relative_eq!(s0.tank_heads[0], 62.0, epsilon = 1e-7);
        let expected = crate::hydraulics::tank_step(
            s0.tank_heads[0],
            s0.pipe_flows[1],
            net.tanks[0].cross_sectional_area,
            net.hydraulic_timestep_s,
        );
        assert_relative_eq!(s1.tank_heads[0], expected, epsilon = 1e-6);
    }
}
