//! Command implementations behind the `wdn-se` binary: `estimate` runs the
//! successive approximation and writes machine-readable results, `simulate`
//! produces oracle ground truth, `compare` diffs two state files.
//!
//! All outputs are deterministic for identical inputs (sorted keys,
//! shortest-roundtrip float formatting); `report.json` additionally carries
//! wall time and is the only file expected to differ between repeat runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use crate::estimator::{
    self, EstimatorConfig, MeasurementEntry, MeasurementSet, StateVector,
};
use crate::linearization::GpConfig;
use crate::network::Network;
use crate::oracle::{self, DEFAULT_SEED, DEFAULT_STARTS};
use crate::solver::ObjectiveKind;

/// Everything one run needs: input paths plus config overrides.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub network: PathBuf,
    pub measurements: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threshold: Option<f64>,
    pub max_iter: Option<usize>,
    pub step: Option<usize>,
    pub accel: Option<f64>,
    pub base: Option<f64>,
    pub objective: Option<ObjectiveKind>,
    pub horizon: Option<usize>,
}

impl RunManifest {
    pub fn config(&self) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::default();
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(m) = self.max_iter {
            cfg.max_iterations = m;
        }
        if let Some(s) = self.step {
            cfg.acceleration_period = s;
        }
        if let Some(a) = self.accel {
            cfg.acceleration_gain = a;
        }
        if let Some(b) = self.base {
            cfg.gp = GpConfig::new(b);
        }
        if let Some(o) = self.objective {
            cfg.objective = o;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        cfg
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct UnitsRecord {
    head: String,
    flow: String,
}

impl Default for UnitsRecord {
    fn default() -> Self {
        Self {
            head: "ft".into(),
            flow: "GPM".into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    step: usize,
    heads_ft: BTreeMap<String, f64>,
    flows_gpm: BTreeMap<String, f64>,
}

/// Schema of `state.json` and `truth.json` (`truth.json` adds an `oracle`
/// block).
#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    #[serde(default)]
    units: UnitsRecord,
    horizon: usize,
    steps: Vec<StepRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OracleRecord {
    max_equation_residual: f64,
    starts_tried: usize,
    best_objective: f64,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportFile {
    status: String,
    iterations: usize,
    final_error: f64,
    objective: f64,
    wall_time_s: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MeasurementsFile {
    Bare(Vec<MeasurementEntry>),
    Full {
        #[serde(default)]
        measurements: Vec<MeasurementEntry>,
        #[serde(default)]
        fixed: BTreeMap<String, f64>,
    },
}

fn load_measurements(path: &Path) -> Result<MeasurementSet> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read measurements file {}", path.display()))?;
    let parsed: MeasurementsFile = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse measurements file {}", path.display()))?;
    Ok(match parsed {
        MeasurementsFile::Bare(entries) => MeasurementSet {
            entries,
            fixed: BTreeMap::new(),
        },
        MeasurementsFile::Full {
            measurements,
            fixed,
        } => MeasurementSet {
            entries: measurements,
            fixed,
        },
    })
}

fn load_network(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read network file {}", path.display()))?;
    Network::parse_inp(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn state_to_file(net: &Network, state: &StateVector, oracle: Option<OracleRecord>) -> StateFile {
    let steps = state
        .steps
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let heads_ft = (0..net.node_count())
                .map(|i| (net.node_id(i).to_string(), state.head(k, i, net)))
                .collect();
            let flows_gpm = (0..net.link_count())
                .map(|li| (net.link_id(li).to_string(), state.flow(k, li, net)))
                .collect();
            StepRecord {
                step: k + 1,
                heads_ft,
                flows_gpm,
            }
        })
        .collect();
    StateFile {
        units: UnitsRecord::default(),
        horizon: state.horizon(),
        steps,
        oracle,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Multi-start seed, `WDN_SEED` when set.
pub fn oracle_seed() -> u64 {
    std::env::var("WDN_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED)
}

fn estimate_inner(manifest: &RunManifest) -> Result<i32> {
    let net = load_network(&manifest.network)?;
    let meas_path = manifest
        .measurements
        .as_ref()
        .ok_or_else(|| anyhow!("estimate requires --measurements"))?;
    let meas = load_measurements(meas_path)?;
    let cfg = manifest.config();
    cfg.validate().map_err(|e| anyhow!(e.to_string()))?;
    fs::create_dir_all(&manifest.out_dir)?;

    let start = Instant::now();
    let init = StateVector::default_init(&net, cfg.horizon);
    let out = estimator::run(&net, &meas, &cfg, &init).map_err(|e| anyhow!(e.to_string()))?;
    let wall = start.elapsed().as_secs_f64();

    write_json(
        &manifest.out_dir.join("state.json"),
        &state_to_file(&net, &out.state, None),
    )?;

    let mut csv = String::from("n,error,objective,accelerated\n");
    for e in &out.trace.entries {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.iteration,
            e.error,
            e.objective,
            if e.accelerated { 1 } else { 0 }
        ));
    }
    fs::write(manifest.out_dir.join("trace.csv"), csv)?;

    let report = ReportFile {
        status: if out.converged {
            "converged".into()
        } else {
            "iteration-limit".into()
        },
        iterations: out.trace.entries.len(),
        final_error: out.trace.final_error().unwrap_or(f64::NAN),
        objective: out
            .trace
            .entries
            .last()
            .map(|e| e.objective)
            .unwrap_or(f64::NAN),
        wall_time_s: wall,
    };
    write_json(&manifest.out_dir.join("report.json"), &report)?;
    Ok(if out.converged { 0 } else { 2 })
}

/// Run the estimator; writes `state.json`, `trace.csv`, `report.json`.
/// Exit code 0 on convergence, 2 on iteration limit, 1 on any input error.
pub fn cmd_estimate(manifest: &RunManifest) -> i32 {
    match estimate_inner(manifest) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("estimate: {e:#}");
            1
        }
    }
}

fn simulate_inner(manifest: &RunManifest) -> Result<i32> {
    let net = load_network(&manifest.network)?;
    let meas = match &manifest.measurements {
        Some(p) => Some(load_measurements(p)?),
        None => None,
    };
    fs::create_dir_all(&manifest.out_dir)?;

    // Determined case: every tank/reservoir head known (from the
    // measurement file's `fixed` block, falling back to the input file).
    // With head-difference entries present the over-determined oracle runs
    // instead, seeded by WDN_SEED.
    let result = match &meas {
        Some(m) if !m.entries.is_empty() => {
            let bounds: Vec<(f64, f64)> = free_tank_bounds(&net, m);
            oracle::solve_se_global(&net, m, &bounds, DEFAULT_STARTS, oracle_seed())
                .map_err(|e| anyhow!(e.to_string()))?
        }
        _ => {
            let mut fixed: BTreeMap<String, f64> = BTreeMap::new();
            for r in &net.reservoirs {
                fixed.insert(r.id.clone(), r.fixed_head);
            }
            for t in &net.tanks {
                fixed.insert(t.id.clone(), t.initial_head);
            }
            if let Some(m) = &meas {
                for (id, h) in &m.fixed {
                    fixed.insert(id.clone(), *h);
                }
            }
            oracle::solve_hydraulics(&net, &fixed, &net.demands())
                .map_err(|e| anyhow!(e.to_string()))?
        }
    };
    let record = OracleRecord {
        max_equation_residual: result.max_equation_residual,
        starts_tried: result.starts_tried,
        best_objective: result.best_objective,
        seed: result.seed,
    };
    write_json(
        &manifest.out_dir.join("truth.json"),
        &state_to_file(&net, &result.state, Some(record)),
    )?;
    Ok(0)
}

fn free_tank_bounds(net: &Network, meas: &MeasurementSet) -> Vec<(f64, f64)> {
    let span: f64 = net.junctions.iter().map(|j| j.demand.abs()).sum::<f64>() + 100.0;
    net.tanks
        .iter()
        .filter(|t| !meas.fixed.contains_key(&t.id))
        .map(|_| (-span, span))
        .collect()
}

/// Run the oracle and write `truth.json`. Exit 0 on success, 1 on error.
pub fn cmd_simulate(manifest: &RunManifest) -> i32 {
    match simulate_inner(manifest) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("simulate: {e:#}");
            1
        }
    }
}

fn read_state_file(path: &Path) -> Result<StateFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read state file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn compare_inner(estimate_path: &Path, truth_path: &Path, out_dir: &Path) -> Result<i32> {
    let est = read_state_file(estimate_path)?;
    let truth = read_state_file(truth_path)?;
    if est.horizon != truth.horizon || est.steps.len() != truth.steps.len() {
        return Err(anyhow!(
            "horizon mismatch: {} vs {}",
            est.horizon,
            truth.horizon
        ));
    }
    let mut csv = String::from("variable,estimate,truth,abs_error\n");
    let mut sq = 0.0f64;
    for (se, st) in est.steps.iter().zip(truth.steps.iter()) {
        for (pair, tag) in [
            ((&se.heads_ft, &st.heads_ft), "h"),
            ((&se.flows_gpm, &st.flows_gpm), "q"),
        ] {
            let (a, b) = pair;
            if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
                return Err(anyhow!("variable sets differ at step {}", se.step));
            }
            for (k, &va) in a {
                let vb = b[k];
                let err = (va - vb).abs();
                sq += err * err;
                csv.push_str(&format!("{tag}:{k}:k{},{va},{vb},{err}\n", se.step));
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("compare.csv"), csv)?;
    println!("||xi_est - xi_truth||_2 = {}", sq.sqrt());
    Ok(0)
}

/// Compare two state files variable by variable; writes `compare.csv` and
/// prints the Euclidean distance. Exit 1 on any mismatch or IO error.
pub fn cmd_compare(estimate_path: &Path, truth_path: &Path, out_dir: &Path) -> i32 {
    match compare_inner(estimate_path, truth_path, out_dir) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("compare: {e:#}");
            1
        }
    }
}
