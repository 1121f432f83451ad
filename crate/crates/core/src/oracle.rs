//! Independent nonlinear ground truth.
//!
//! `solve_hydraulics` runs damped Newton on the exact node/link equations
//! for the determined case (all tank and reservoir heads known).
//! `solve_se_global` handles the over-determined case: free boundary
//! inflows (tanks whose head is not fixed) parametrize the feasible
//! manifold exactly — each candidate is resolved by an inner Newton solve,
//! so mass balance and loop consistency hold by construction — and a
//! multi-start damped Gauss-Newton minimizes the weighted measurement
//! misfit over those inflows. Validation tooling only; the estimator never
//! calls into this module.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::estimator::{MeasurementSet, StateVector, StepState};
use crate::hydraulics::{
    pipe_headloss, pipe_headloss_gradient, pump_headgain, pump_headgain_gradient,
};
use crate::network::{Network, NodeKind};

/// Default number of multi-start samples.
pub const DEFAULT_STARTS: usize = 32;
/// Default multi-start RNG seed (overridden by `WDN_SEED` in the CLI).
pub const DEFAULT_SEED: u64 = 20;

const NEWTON_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 200;
const NEWTON_DAMPING_RETRIES: usize = 10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("fixed heads must cover node {0} (a tank or reservoir)")]
    MissingFixedHead(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("Newton iteration did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("all {0} starts diverged")]
    AllStartsDiverged(usize),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub state: StateVector,
    pub max_equation_residual: f64,
    pub starts_tried: usize,
    pub best_objective: f64,
    pub seed: u64,
}

/// Exact hydraulic solve with every tank and reservoir head fixed.
pub fn solve_hydraulics(
    net: &Network,
    fixed_heads: &BTreeMap<String, f64>,
    demands: &[f64],
) -> Result<OracleResult, OracleError> {
    if demands.len() != net.junction_count() {
        return Err(OracleError::Dimensions(format!(
            "{} demands for {} junctions",
            demands.len(),
            net.junction_count()
        )));
    }
    let mut fixed = BTreeMap::new();
    for (id, h) in fixed_heads {
        let idx = net
            .node_index(id)
            .ok_or_else(|| OracleError::UnknownNode(id.clone()))?;
        fixed.insert(idx, *h);
    }
    for idx in 0..net.node_count() {
        if net.node_kind(idx) != NodeKind::Junction && !fixed.contains_key(&idx) {
            return Err(OracleError::MissingFixedHead(net.node_id(idx).to_string()));
        }
    }
    let q0 = vec![100.0; net.link_count()];
    let sol = newton_network(net, &fixed, demands, &BTreeMap::new(), &q0)?;
    Ok(OracleResult {
        state: sol.to_state(net),
        max_equation_residual: sol.residual,
        starts_tried: 1,
        best_objective: 0.0,
        seed: 0,
    })
}

/// Multi-start nonlinear weighted least squares over the free boundary
/// inflows. `bounds` gives one sampling interval per free tank (tanks not
/// named in `meas.fixed`, in tank order); starts are drawn uniformly with
/// the given seed, which is recorded in the result.
pub fn solve_se_global(
    net: &Network,
    meas: &MeasurementSet,
    bounds: &[(f64, f64)],
    n_starts: usize,
    seed: u64,
) -> Result<OracleResult, OracleError> {
    #[cfg(feature = "parallel")]
    {
        solve_se_global_with(net, meas, bounds, n_starts, seed, true)
    }
    #[cfg(not(feature = "parallel"))]
    {
        solve_se_global_with(net, meas, bounds, n_starts, seed, false)
    }
}

/// Sequential variant, for benchmarking against the data-parallel path and
/// as the fallback when the `parallel` feature is disabled.
pub fn solve_se_global_seq(
    net: &Network,
    meas: &MeasurementSet,
    bounds: &[(f64, f64)],
    n_starts: usize,
    seed: u64,
) -> Result<OracleResult, OracleError> {
    solve_se_global_with(net, meas, bounds, n_starts, seed, false)
}

fn solve_se_global_with(
    net: &Network,
    meas: &MeasurementSet,
    bounds: &[(f64, f64)],
    n_starts: usize,
    seed: u64,
    parallel: bool,
) -> Result<OracleResult, OracleError> {
    assert!(n_starts >= 1, "need at least one start");
    let problem = SeProblem::build(net, meas)?;
    if bounds.len() != problem.free_tanks.len() {
        return Err(OracleError::Dimensions(format!(
            "{} sampling intervals for {} free tanks",
            bounds.len(),
            problem.free_tanks.len()
        )));
    }
    // Draw every start up front so the sample set is independent of the
    // execution order.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<DVector<f64>> = (0..n_starts)
        .map(|_| {
            DVector::from_iterator(
                bounds.len(),
                bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)),
            )
        })
        .collect();

    let attempt = |t0: &DVector<f64>| problem.gauss_newton(t0);
    let results: Vec<Option<Attempt>> = if parallel {
        #[cfg(feature = "parallel")]
        {
            starts.par_iter().map(&attempt).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            starts.iter().map(attempt).collect()
        }
    } else {
        starts.iter().map(attempt).collect()
    };

    // Deterministic reduction: best objective, ties broken by start index.
    let best = results
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|a| (i, a)))
        .min_by(|(ia, a), (ib, b)| {
            a.objective
                .partial_cmp(&b.objective)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        });
    let (_, best) = best.ok_or(OracleError::AllStartsDiverged(n_starts))?;
    Ok(OracleResult {
        state: best.solution.to_state(net),
        max_equation_residual: best.solution.residual,
        starts_tried: n_starts,
        best_objective: best.objective,
        seed,
    })
}

struct Attempt {
    objective: f64,
    solution: NetworkSolution,
}

/// Over-determined SE reduced to the free tank inflows.
struct SeProblem<'a> {
    net: &'a Network,
    fixed: BTreeMap<usize, f64>,
    free_tanks: Vec<usize>, // node indices
    demands: Vec<f64>,
    entries: Vec<(usize, usize, f64, f64)>, // (from, to, value, weight)
}

impl<'a> SeProblem<'a> {
    fn build(net: &'a Network, meas: &MeasurementSet) -> Result<Self, OracleError> {
        let mut fixed = BTreeMap::new();
        let nj = net.junction_count();
        for (r, res) in net.reservoirs.iter().enumerate() {
            let _ = res;
            fixed.insert(nj + r, net.reservoirs[r].fixed_head);
        }
        for (id, h) in &meas.fixed {
            let idx = net
                .node_index(id)
                .ok_or_else(|| OracleError::UnknownNode(id.clone()))?;
            fixed.insert(idx, *h);
        }
        let tank_base = nj + net.reservoirs.len();
        let free_tanks: Vec<usize> = (0..net.tanks.len())
            .map(|t| tank_base + t)
            .filter(|idx| !fixed.contains_key(idx))
            .collect();
        let mut entries = Vec::with_capacity(meas.entries.len());
        for e in &meas.entries {
            let i = net
                .node_index(&e.from)
                .ok_or_else(|| OracleError::UnknownNode(e.from.clone()))?;
            let j = net
                .node_index(&e.to)
                .ok_or_else(|| OracleError::UnknownNode(e.to.clone()))?;
            entries.push((i, j, e.value_ft, e.weight));
        }
        Ok(Self {
            net,
            fixed,
            free_tanks,
            demands: net.demands(),
            entries,
        })
    }

    /// Weighted residual vector at free-inflow vector `t`, via an inner
    /// exact solve.
    fn residuals(&self, t: &DVector<f64>) -> Option<(DVector<f64>, NetworkSolution)> {
        let inflows: BTreeMap<usize, f64> = self
            .free_tanks
            .iter()
            .copied()
            .zip(t.iter().copied())
            .collect();
        let q0 = vec![100.0; self.net.link_count()];
        let sol = newton_network(self.net, &self.fixed, &self.demands, &inflows, &q0).ok()?;
        let r = DVector::from_iterator(
            self.entries.len(),
            self.entries.iter().map(|&(i, j, value, weight)| {
                weight.sqrt() * ((sol.heads[i] - sol.heads[j]) - value)
            }),
        );
        Some((r, sol))
    }

    fn gauss_newton(&self, t0: &DVector<f64>) -> Option<Attempt> {
        let (mut r, mut sol) = self.residuals(t0)?;
        let mut t = t0.clone();
        if t.is_empty() {
            return Some(Attempt {
                objective: r.norm_squared(),
                solution: sol,
            });
        }
        for _ in 0..100 {
            // Finite-difference Jacobian; the inner solve is smooth in t.
            let mut jac = DMatrix::zeros(r.len(), t.len());
            for c in 0..t.len() {
                let h = 1e-4 * (1.0 + t[c].abs());
                let mut tp = t.clone();
                tp[c] += h;
                let (rp, _) = self.residuals(&tp)?;
                jac.set_column(c, &((&rp - &r) / h));
            }
            let svd = jac.clone().svd(true, true);
            let step = svd.solve(&(-&r), 1e-12).ok()?;
            if step.amax() <= 1e-9 * (1.0 + t.amax()) {
                break;
            }
            // Backtracking on the objective.
            let f0 = r.norm_squared();
            let mut alpha = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let tn = &t + alpha * &step;
                if let Some((rn, soln)) = self.residuals(&tn) {
                    if rn.norm_squared() < f0 || rn.norm_squared() <= f0 * (1.0 + 1e-14) {
                        t = tn;
                        r = rn;
                        sol = soln;
                        improved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !improved {
                break;
            }
            if r.norm_squared() <= 1e-24 {
                break;
            }
        }
        Some(Attempt {
            objective: r.norm_squared(),
            solution: sol,
        })
    }
}

struct NetworkSolution {
    heads: Vec<f64>,
    flows: Vec<f64>,
    residual: f64,
}

impl NetworkSolution {
    fn to_state(&self, net: &Network) -> StateVector {
        let nj = net.junction_count();
        let nr = net.reservoirs.len();
        let np = net.pipes.len();
        StateVector {
            steps: vec![StepState {
                junction_heads: self.heads[..nj].to_vec(),
                reservoir_heads: self.heads[nj..nj + nr].to_vec(),
                tank_heads: self.heads[nj + nr..].to_vec(),
                pipe_flows: self.flows[..np].to_vec(),
                pump_flows: self.flows[np..].to_vec(),
            }],
        }
    }
}

/// Damped Newton on the exact node/link system. Heads in `fixed` are
/// eliminated; nodes in `extra_inflows` are non-junction nodes with a
/// prescribed net inflow (a tank filling at a known rate); remaining
/// non-junction nodes must be fixed.
fn newton_network(
    net: &Network,
    fixed: &BTreeMap<usize, f64>,
    junction_demands: &[f64],
    extra_inflows: &BTreeMap<usize, f64>,
    q0: &[f64],
) -> Result<NetworkSolution, OracleError> {
    let nl = net.link_count();
    let nn = net.node_count();
    let nj = net.junction_count();
    // Balance rows: all junctions (rhs = demand) plus free boundary nodes
    // with prescribed inflow (rhs = -inflow, since inflow enters the node).
    let mut balance: Vec<(usize, f64)> = (0..nj).map(|j| (j, junction_demands[j])).collect();
    for (&idx, &inflow) in extra_inflows {
        balance.push((idx, inflow));
    }
    for idx in 0..nn {
        let covered = net.node_kind(idx) == NodeKind::Junction
            || fixed.contains_key(&idx)
            || extra_inflows.contains_key(&idx);
        if !covered {
            return Err(OracleError::MissingFixedHead(net.node_id(idx).to_string()));
        }
    }
    let free_nodes: Vec<usize> = (0..nn).filter(|i| !fixed.contains_key(i)).collect();
    let node_pos: BTreeMap<usize, usize> = free_nodes
        .iter()
        .enumerate()
        .map(|(p, &i)| (i, p))
        .collect();
    let nf = free_nodes.len();
    let dim = nf + nl;
    if balance.len() != nf {
        return Err(OracleError::Dimensions(format!(
            "{} balance rows for {} free heads; the system is not square",
            balance.len(),
            nf
        )));
    }

    let mut x = DVector::zeros(dim);
    for (p, &idx) in free_nodes.iter().enumerate() {
        x[p] = net.initial_head(idx);
    }
    for li in 0..nl {
        x[nf + li] = q0[li];
    }
    let head = |x: &DVector<f64>, idx: usize| -> f64 {
        match fixed.get(&idx) {
            Some(&h) => h,
            None => x[node_pos[&idx]],
        }
    };
    let link_dh = |x: &DVector<f64>, li: usize| -> f64 {
        let q = x[nf + li];
        if net.link_is_pump(li) {
            let pump = &net.pumps[li - net.pipes.len()];
            pump_headgain(q.max(0.0), &pump.curve()).expect("clamped flow")
        } else {
            pipe_headloss(q, &net.pipes[li].model())
        }
    };
    let eval = |x: &DVector<f64>| -> DVector<f64> {
        let mut f = DVector::zeros(dim);
        for (row, &(node, rhs)) in balance.iter().enumerate() {
            let mut acc = -rhs;
            for li in 0..nl {
                let (from, to) = net.link_endpoints(li);
                if to == node {
                    acc += x[nf + li];
                }
                if from == node {
                    acc -= x[nf + li];
                }
            }
            f[row] = acc;
        }
        for li in 0..nl {
            let (from, to) = net.link_endpoints(li);
            f[nf + li] = (head(x, from) - head(x, to)) - link_dh(x, li);
        }
        f
    };

    let mut f = eval(&x);
    for _ in 0..NEWTON_MAX_ITER {
        if f.amax() < NEWTON_TOL {
            return Ok(NetworkSolution {
                heads: (0..nn).map(|i| head(&x, i)).collect(),
                flows: (0..nl).map(|li| x[nf + li]).collect(),
                residual: f.amax(),
            });
        }
        let mut jac = DMatrix::zeros(dim, dim);
        for (row, &(node, _)) in balance.iter().enumerate() {
            for li in 0..nl {
                let (from, to) = net.link_endpoints(li);
                if to == node {
                    jac[(row, nf + li)] += 1.0;
                }
                if from == node {
                    jac[(row, nf + li)] -= 1.0;
                }
            }
        }
        for li in 0..nl {
            let (from, to) = net.link_endpoints(li);
            if let Some(&p) = node_pos.get(&from) {
                jac[(nf + li, p)] += 1.0;
            }
            if let Some(&p) = node_pos.get(&to) {
                jac[(nf + li, p)] -= 1.0;
            }
            let q = x[nf + li];
            let grad = if net.link_is_pump(li) {
                let pump = &net.pumps[li - net.pipes.len()];
                pump_headgain_gradient(q, &pump.curve())
            } else {
                pipe_headloss_gradient(q, &net.pipes[li].model())
            };
            jac[(nf + li, nf + li)] = -grad;
        }
        let lu = jac.lu();
        let delta = match lu.solve(&(-&f)) {
            Some(d) => d,
            None => {
                return Err(OracleError::NoConvergence { residual: f.amax() });
            }
        };
        let base_norm = f.norm();
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..NEWTON_DAMPING_RETRIES {
            let mut xn = &x + alpha * &delta;
            // Pump flows stay in the curve's domain.
            for li in 0..nl {
                if net.link_is_pump(li) {
                    xn[nf + li] = xn[nf + li].max(1e-6);
                }
            }
            let fn_ = eval(&xn);
            if fn_.norm() < base_norm {
                x = xn;
                f = fn_;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(OracleError::NoConvergence { residual: f.amax() });
        }
    }
    Err(OracleError::NoConvergence { residual: f.amax() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::MeasurementEntry;
    use crate::hydraulics::junction_imbalance;
    use approx::assert_relative_eq;

    fn net3() -> Network {
        Network::parse_inp(include_str!("../tests/data/net3.inp")).unwrap()
    }

    #[test]
    fn single_pipe_closed_form_inversion() {
        // One pipe between two fixed heads: q = sign(dh) (|dh|/R)^(1/mu).
        let txt = "[RESERVOIRS]\n a 120\n b 80\n[PIPES]\n p1 a b 4000 8 110\n";
        let net = Network::parse_inp(txt).unwrap();
        let fixed: BTreeMap<String, f64> =
            [("a".to_string(), 120.0), ("b".to_string(), 80.0)].into();
        let r = solve_hydraulics(&net, &fixed, &[]).unwrap();
        let model = net.pipes[0].model();
        let expected = (40.0 / model.resistance).powf(1.0 / model.flow_exponent);
        assert_relative_eq!(r.state.steps[0].pipe_flows[0], expected, epsilon = 1e-9);
        assert!(r.max_equation_residual <= 1e-6);
    }

    #[test]
    fn series_pipes_closed_form() {
        let txt = "[JUNCTIONS]\n j 0 0\n[RESERVOIRS]\n a 120\n b 80\n[PIPES]\n p1 a j 4000 8 110\n p2 j b 4000 8 110\n";
        let net = Network::parse_inp(txt).unwrap();
        let fixed: BTreeMap<String, f64> =
            [("a".to_string(), 120.0), ("b".to_string(), 80.0)].into();
        let r = solve_hydraulics(&net, &fixed, &[0.0]).unwrap();
        // Two identical pipes in series: q = (|dh|/2R)^(1/mu).
        let model = net.pipes[0].model();
        let expected = (40.0 / (2.0 * model.resistance)).powf(1.0 / model.flow_exponent);
        assert_relative_eq!(r.state.steps[0].pipe_flows[0], expected, epsilon = 1e-6);
        assert!(r.max_equation_residual <= 1e-6);
    }

    #[test]
    fn hydrostatic_network_is_at_rest() {
        let txt = "[JUNCTIONS]\n j 0 0\n[RESERVOIRS]\n a 100\n b 100\n[PIPES]\n p1 a j 4000 8 110\n p2 j b 4000 8 110\n";
        let net = Network::parse_inp(txt).unwrap();
        let fixed: BTreeMap<String, f64> =
            [("a".to_string(), 100.0), ("b".to_string(), 100.0)].into();
        let r = solve_hydraulics(&net, &fixed, &[0.0]).unwrap();
        assert!(r.state.steps[0].pipe_flows.iter().all(|q| q.abs() < 1e-2));
        assert_relative_eq!(r.state.steps[0].junction_heads[0], 100.0, epsilon = 1e-6);
    }

    #[test]
    fn missing_fixed_head_is_rejected() {
        let net = net3();
        let fixed: BTreeMap<String, f64> = [("2".to_string(), 150.0)].into();
        assert!(matches!(
            solve_hydraulics(&net, &fixed, &[200.0]),
            Err(OracleError::MissingFixedHead(_))
        ));
    }

    #[test]
    fn oracle_states_balance_mass() {
        let net = net3();
        let fixed: BTreeMap<String, f64> =
            [("2".to_string(), 150.0), ("4".to_string(), 62.2)].into();
        let r = solve_hydraulics(&net, &fixed, &[200.0]).unwrap();
        let imb = junction_imbalance(&net, &r.state).unwrap();
        assert!(imb[0].amax() <= 1e-8);
    }

    #[test]
    fn consistent_measurements_recover_generating_flows() {
        let net = net3();
        let m = net.pipes[0].model();
        let dh24 = pipe_headloss(238.607, &m) + pipe_headloss(38.607, &m);
        let meas = MeasurementSet {
            entries: vec![MeasurementEntry {
                from: "2".into(),
                to: "4".into(),
                value_ft: dh24,
                weight: 1.0,
            }],
            fixed: Default::default(),
        };
        let r = solve_se_global(&net, &meas, &[(-150.0, 400.0)], 8, DEFAULT_SEED).unwrap();
        assert_relative_eq!(r.state.steps[0].pipe_flows[0], 238.607, epsilon = 1e-6);
        assert_relative_eq!(r.state.steps[0].pipe_flows[1], 38.607, epsilon = 1e-6);
        assert!(r.best_objective <= 1e-12);
        assert_eq!(r.seed, DEFAULT_SEED);
    }

    #[test]
    fn grid_search_cross_check_one_dof() {
        // 1-D toy: the Gauss-Newton optimum must match a dense scan.
        let net = net3();
        let m = net.pipes[0].model();
        let dh23 = pipe_headloss(238.607, &m);
        let dh24 = dh23 + pipe_headloss(38.607, &m);
        let meas = MeasurementSet {
            entries: vec![
                MeasurementEntry {
                    from: "2".into(),
                    to: "3".into(),
                    value_ft: dh23 - 1.5,
                    weight: 1.0,
                },
                MeasurementEntry {
                    from: "2".into(),
                    to: "4".into(),
                    value_ft: dh24 + 2.0,
                    weight: 0.1,
                },
            ],
            fixed: Default::default(),
        };
        let r = solve_se_global(&net, &meas, &[(-150.0, 400.0)], 8, DEFAULT_SEED).unwrap();
        // Dense 1-D grid over the free inflow t (= q34).
        let objective = |t: f64| {
            let q23 = 200.0 + t;
            let e1 = pipe_headloss(q23, &m) - (dh23 - 1.5);
            let e2 = pipe_headloss(q23, &m) + pipe_headloss(t, &m) - (dh24 + 2.0);
            e1 * e1 + 0.1 * e2 * e2
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut t = -50.0;
        while t <= 150.0 {
            let f = objective(t);
            if f < best.0 {
                best = (f, t);
            }
            t += 1e-3;
        }
        assert!((r.state.steps[0].pipe_flows[1] - best.1).abs() <= 2e-3);
        assert!((r.best_objective - best.0).abs() <= 1e-6);
    }

    #[test]
    fn parallel_and_sequential_reductions_agree() {
        let net = net3();
        let m = net.pipes[0].model();
        let dh24 = pipe_headloss(238.607, &m) + pipe_headloss(38.607, &m);
        let meas = MeasurementSet {
            entries: vec![MeasurementEntry {
                from: "2".into(),
                to: "4".into(),
                value_ft: dh24 + 3.0,
                weight: 1.0,
            }],
            fixed: Default::default(),
        };
        let a = solve_se_global(&net, &meas, &[(-150.0, 400.0)], 16, 7).unwrap();
        let b = solve_se_global_seq(&net, &meas, &[(-150.0, 400.0)], 16, 7).unwrap();
        assert_eq!(a.state.steps[0].pipe_flows, b.state.steps[0].pipe_flows);
        assert_eq!(a.best_objective, b.best_objective);
    }
}
