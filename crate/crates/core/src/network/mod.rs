//! Directed-graph model of a water distribution network.
//!
//! Nodes are junctions, reservoirs and tanks; links are pipes and pumps
//! (valves are rejected at parse time). Dense node indices are assigned in
//! the order junctions, reservoirs, tanks; dense link indices in the order
//! pipes, pumps — the same ordering the estimator's state vector uses.

mod inp;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::hydraulics::{HeadLossModel, PumpCurve, GPM_TO_CFS};

/// Default head window around a node's elevation when the input file gives
/// no explicit bounds. Symmetric: intermediate iterates of the successive
/// approximation dip below elevation before converging, and a bound that
/// cuts them off makes the determined subproblem infeasible.
pub const DEFAULT_HEAD_SPAN_FT: f64 = 500.0;
/// Default symmetric flow bound magnitude, GPM.
pub const DEFAULT_FLOW_BOUND_GPM: f64 = 1e4;
/// Hydraulic time step used by the tank incidence operator, seconds.
pub const DEFAULT_TIMESTEP_S: f64 = 3600.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("link {link} references missing node {node}")]
    DanglingNode { link: String, node: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("network graph is not connected")]
    Disconnected,
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("no path between {0} and {1}")]
    NoPath(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Junction,
    Reservoir,
    Tank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadlossFormula {
    HazenWilliams,
    DarcyWeisbach,
    ChezyManning,
}

impl HeadlossFormula {
    pub fn flow_exponent(self) -> f64 {
        match self {
            HeadlossFormula::HazenWilliams => 1.852,
            HeadlossFormula::DarcyWeisbach | HeadlossFormula::ChezyManning => 2.0,
        }
    }

    /// Resistance coefficient for `Δh = R·q·|q|^(μ-1)` with q in GPM,
    /// lengths in ft and diameter in inches, per the EPANET manual tables
    /// (which state the formulas for q in cfs).
    pub fn resistance(self, length_ft: f64, diameter_in: f64, roughness: f64) -> f64 {
        let d = diameter_in / 12.0;
        let base = match self {
            HeadlossFormula::HazenWilliams => {
                4.727 * roughness.powf(-1.852) * d.powf(-4.871) * length_ft
            }
            HeadlossFormula::DarcyWeisbach => {
                // Fully-rough friction factor; roughness is in millifeet.
                let eps = roughness * 1e-3;
                let f = 0.25 / (eps / (3.7 * d)).log10().powi(2);
                0.0252 * f * d.powi(-5) * length_ft
            }
            HeadlossFormula::ChezyManning => {
                4.66 * roughness * roughness * d.powf(-5.33) * length_ft
            }
        };
        base * GPM_TO_CFS.powf(self.flow_exponent())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Junction {
    pub id: String,
    pub elevation: f64,
    pub demand: f64,
    pub head_bounds: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    pub id: String,
    pub fixed_head: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tank {
    pub id: String,
    pub elevation: f64,
    pub diameter_ft: f64,
    pub cross_sectional_area: f64,
    pub initial_head: f64,
    pub head_bounds: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipe {
    pub id: String,
    pub from_node: String,
    pub to_node: String,
    pub length_ft: f64,
    pub diameter_in: f64,
    pub roughness: f64,
    pub formula: HeadlossFormula,
    pub resistance: f64,
    pub flow_exponent: f64,
    pub flow_bounds: (f64, f64),
}

impl Pipe {
    pub fn model(&self) -> HeadLossModel {
        HeadLossModel::new(self.resistance, self.flow_exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pump {
    pub id: String,
    pub from_node: String,
    pub to_node: String,
    pub shutoff_head: f64,
    pub curve_coefficient: f64,
    pub curve_exponent: f64,
    pub relative_speed: f64,
    pub flow_bounds: (f64, f64),
    /// Single design point (flow GPM, head ft) the curve was expanded from.
    pub design_point: (f64, f64),
}

impl Pump {
    /// Expand a single-point curve the way EPANET does: shutoff head at
    /// 4/3 of the design head, zero head at twice the design flow, and
    /// `(r, ν)` solved from those two points.
    pub fn from_design_point(
        id: String,
        from_node: String,
        to_node: String,
        design_flow_gpm: f64,
        design_head_ft: f64,
    ) -> Result<Self, NetworkError> {
        if design_flow_gpm <= 0.0 || design_head_ft <= 0.0 {
            return Err(NetworkError::Invalid(format!(
                "pump {id}: design point must be positive"
            )));
        }
        let h0 = 4.0 / 3.0 * design_head_ft;
        let q_max = 2.0 * design_flow_gpm;
        let nu = ((h0 - design_head_ft) / h0).ln() / (design_flow_gpm / q_max).ln();
        let r = (h0 - design_head_ft) / design_flow_gpm.powf(nu);
        Ok(Self {
            id,
            from_node,
            to_node,
            shutoff_head: h0,
            curve_coefficient: r,
            curve_exponent: nu,
            relative_speed: 1.0,
            flow_bounds: (0.0, DEFAULT_FLOW_BOUND_GPM),
            design_point: (design_flow_gpm, design_head_ft),
        })
    }

    pub fn curve(&self) -> PumpCurve {
        PumpCurve {
            shutoff_head: self.shutoff_head,
            coefficient: self.curve_coefficient,
            exponent: self.curve_exponent,
            speed: self.relative_speed,
        }
    }
}

/// Immutable network; safe to share across threads once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub junctions: Vec<Junction>,
    pub reservoirs: Vec<Reservoir>,
    pub tanks: Vec<Tank>,
    pub pipes: Vec<Pipe>,
    pub pumps: Vec<Pump>,
    pub hydraulic_timestep_s: f64,
    node_index: BTreeMap<String, usize>,
    link_index: BTreeMap<String, usize>,
    link_endpoints: Vec<(usize, usize)>,
}

impl Network {
    pub fn from_components(
        junctions: Vec<Junction>,
        reservoirs: Vec<Reservoir>,
        tanks: Vec<Tank>,
        pipes: Vec<Pipe>,
        pumps: Vec<Pump>,
    ) -> Result<Self, NetworkError> {
        let mut node_index = BTreeMap::new();
        let ids = junctions
            .iter()
            .map(|j| &j.id)
            .chain(reservoirs.iter().map(|r| &r.id))
            .chain(tanks.iter().map(|t| &t.id));
        for (i, id) in ids.enumerate() {
            if node_index.insert(id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateId(id.clone()));
            }
        }
        let mut link_index = BTreeMap::new();
        let mut link_endpoints = Vec::new();
        let ends = pipes
            .iter()
            .map(|p| (&p.id, &p.from_node, &p.to_node))
            .chain(pumps.iter().map(|p| (&p.id, &p.from_node, &p.to_node)));
        for (i, (id, from, to)) in ends.enumerate() {
            if link_index.insert(id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateId(id.clone()));
            }
            let fi = *node_index.get(from).ok_or_else(|| NetworkError::DanglingNode {
                link: id.clone(),
                node: from.clone(),
            })?;
            let ti = *node_index.get(to).ok_or_else(|| NetworkError::DanglingNode {
                link: id.clone(),
                node: to.clone(),
            })?;
            link_endpoints.push((fi, ti));
        }
        let net = Self {
            junctions,
            reservoirs,
            tanks,
            pipes,
            pumps,
            hydraulic_timestep_s: DEFAULT_TIMESTEP_S,
            node_index,
            link_index,
            link_endpoints,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), NetworkError> {
        for j in &self.junctions {
            if j.head_bounds.0 > j.head_bounds.1 || !j.demand.is_finite() {
                return Err(NetworkError::Invalid(format!("junction {}", j.id)));
            }
        }
        for r in &self.reservoirs {
            if !r.fixed_head.is_finite() {
                return Err(NetworkError::Invalid(format!("reservoir {}", r.id)));
            }
        }
        for t in &self.tanks {
            let ok = t.cross_sectional_area > 0.0
                && t.head_bounds.0 <= t.initial_head
                && t.initial_head <= t.head_bounds.1;
            if !ok {
                return Err(NetworkError::Invalid(format!("tank {}", t.id)));
            }
        }
        for p in &self.pipes {
            let ok = p.resistance > 0.0
                && (1.8..=2.0).contains(&p.flow_exponent)
                && p.flow_bounds.0 <= p.flow_bounds.1;
            if !ok {
                return Err(NetworkError::Invalid(format!("pipe {}", p.id)));
            }
        }
        for p in &self.pumps {
            let ok = p.shutoff_head > 0.0
                && p.curve_coefficient > 0.0
                && p.curve_exponent > 1.0
                && p.relative_speed == 1.0
                && p.flow_bounds.0 >= 0.0;
            if !ok {
                return Err(NetworkError::Invalid(format!("pump {}", p.id)));
            }
        }
        if self.node_count() == 0 {
            return Err(NetworkError::Invalid("no nodes".into()));
        }
        // Undirected reachability from node 0.
        let mut seen = vec![false; self.node_count()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &(a, b) in &self.link_endpoints {
                let other = if a == n {
                    b
                } else if b == n {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(NetworkError::Disconnected);
        }
        Ok(())
    }

    pub fn parse_inp(text: &str) -> Result<Self, NetworkError> {
        inp::parse(text)
    }

    /// Serialize back to the `.inp` subset; `parse_inp(to_inp())` returns an
    /// identical network.
    pub fn to_inp(&self) -> String {
        inp::write(self)
    }

    pub fn node_count(&self) -> usize {
        self.junctions.len() + self.reservoirs.len() + self.tanks.len()
    }

    pub fn link_count(&self) -> usize {
        self.pipes.len() + self.pumps.len()
    }

    pub fn junction_count(&self) -> usize {
        self.junctions.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn link_index(&self, id: &str) -> Option<usize> {
        self.link_index.get(id).copied()
    }

    pub fn node_id(&self, idx: usize) -> &str {
        let nj = self.junctions.len();
        let nr = self.reservoirs.len();
        if idx < nj {
            &self.junctions[idx].id
        } else if idx < nj + nr {
            &self.reservoirs[idx - nj].id
        } else {
            &self.tanks[idx - nj - nr].id
        }
    }

    pub fn node_kind(&self, idx: usize) -> NodeKind {
        let nj = self.junctions.len();
        let nr = self.reservoirs.len();
        if idx < nj {
            NodeKind::Junction
        } else if idx < nj + nr {
            NodeKind::Reservoir
        } else {
            NodeKind::Tank
        }
    }

    pub fn link_id(&self, idx: usize) -> &str {
        if idx < self.pipes.len() {
            &self.pipes[idx].id
        } else {
            &self.pumps[idx - self.pipes.len()].id
        }
    }

    pub fn link_is_pump(&self, idx: usize) -> bool {
        idx >= self.pipes.len()
    }

    pub fn link_endpoints(&self, idx: usize) -> (usize, usize) {
        self.link_endpoints[idx]
    }

    pub fn link_flow_bounds(&self, idx: usize) -> (f64, f64) {
        if idx < self.pipes.len() {
            self.pipes[idx].flow_bounds
        } else {
            self.pumps[idx - self.pipes.len()].flow_bounds
        }
    }

    pub fn node_head_bounds(&self, idx: usize) -> (f64, f64) {
        let nj = self.junctions.len();
        let nr = self.reservoirs.len();
        if idx < nj {
            self.junctions[idx].head_bounds
        } else if idx < nj + nr {
            let h = self.reservoirs[idx - nj].fixed_head;
            (h, h)
        } else {
            self.tanks[idx - nj - nr].head_bounds
        }
    }

    /// Head used to seed iterative methods: elevation for junctions, the
    /// set head for reservoirs, the initial head for tanks.
    pub fn initial_head(&self, idx: usize) -> f64 {
        let nj = self.junctions.len();
        let nr = self.reservoirs.len();
        if idx < nj {
            self.junctions[idx].elevation
        } else if idx < nj + nr {
            self.reservoirs[idx - nj].fixed_head
        } else {
            self.tanks[idx - nj - nr].initial_head
        }
    }

    pub fn demands(&self) -> Vec<f64> {
        self.junctions.iter().map(|j| j.demand).collect()
    }
}

/// Linear operators derived from the graph: junction mass balance rows,
/// tank dynamics rows (scaled by Δt/A with the GPM→cfs conversion), and
/// signed sensor-path rows.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceOperators {
    pub mass: DMatrix<f64>,
    pub tank: DMatrix<f64>,
    pub measurement: DMatrix<f64>,
}

/// Build the incidence operators. Sensor path rows follow BFS shortest
/// paths over the undirected graph with neighbors explored in lexicographic
/// link-id order, so builds are deterministic.
pub fn build_incidence(
    net: &Network,
    sensors: &[(String, String)],
) -> Result<IncidenceOperators, NetworkError> {
    let nl = net.link_count();
    let nj = net.junction_count();

    let mut mass = DMatrix::zeros(nj, nl);
    for j in 0..nj {
        for li in 0..nl {
            let (from, to) = net.link_endpoints(li);
            if to == j {
                mass[(j, li)] += 1.0;
            }
            if from == j {
                mass[(j, li)] -= 1.0;
            }
        }
    }

    let mut tank = DMatrix::zeros(net.tanks.len(), nl);
    let tank_base = nj + net.reservoirs.len();
    for (t, tk) in net.tanks.iter().enumerate() {
        let node = tank_base + t;
        let scale = net.hydraulic_timestep_s * GPM_TO_CFS / tk.cross_sectional_area;
        for li in 0..nl {
            let (from, to) = net.link_endpoints(li);
            if to == node {
                tank[(t, li)] += scale;
            }
            if from == node {
                tank[(t, li)] -= scale;
            }
        }
    }

    // Adjacency with deterministic exploration order.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); net.node_count()];
    let mut order: Vec<usize> = (0..nl).collect();
    order.sort_by(|&a, &b| net.link_id(a).cmp(net.link_id(b)));
    for &li in &order {
        let (from, to) = net.link_endpoints(li);
        adj[from].push((to, li));
        adj[to].push((from, li));
    }

    let mut measurement = DMatrix::zeros(sensors.len(), nl);
    for (row, (a, b)) in sensors.iter().enumerate() {
        let ai = net
            .node_index(a)
            .ok_or_else(|| NetworkError::UnknownNode(a.clone()))?;
        let bi = net
            .node_index(b)
            .ok_or_else(|| NetworkError::UnknownNode(b.clone()))?;
        if ai == bi {
            return Err(NetworkError::Invalid(format!(
                "sensor pair ({a}, {b}) must name distinct nodes"
            )));
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; net.node_count()];
        let mut seen = vec![false; net.node_count()];
        let mut queue = std::collections::VecDeque::new();
        seen[ai] = true;
        queue.push_back(ai);
        while let Some(n) = queue.pop_front() {
            if n == bi {
                break;
            }
            for &(next, li) in &adj[n] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((n, li));
                    queue.push_back(next);
                }
            }
        }
        if !seen[bi] {
            return Err(NetworkError::NoPath(a.clone(), b.clone()));
        }
        // Walk back b -> a; a link traversed with its own direction gets +1.
        let mut node = bi;
        while node != ai {
            let (prev, li) = parent[node].expect("path exists");
            let (from, _) = net.link_endpoints(li);
            measurement[(row, li)] += if from == prev { 1.0 } else { -1.0 };
            node = prev;
        }
    }

    Ok(IncidenceOperators {
        mass,
        tank,
        measurement,
    })
}
