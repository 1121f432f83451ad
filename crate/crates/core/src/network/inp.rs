//! Parser and writer for the supported EPANET `.inp` subset.
//!
//! Sections: [JUNCTIONS], [RESERVOIRS], [TANKS], [PIPES], [PUMPS],
//! [CURVES], [DEMANDS], [OPTIONS]. Lines are whitespace-delimited, `;`
//! starts a comment, section headers are case-insensitive. Units are fixed
//! to GPM/ft; an [OPTIONS] block declaring anything else is rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    HeadlossFormula, Junction, Network, NetworkError, Pipe, Pump, Reservoir, Tank,
    DEFAULT_FLOW_BOUND_GPM, DEFAULT_HEAD_SPAN_FT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Junctions,
    Reservoirs,
    Tanks,
    Pipes,
    Pumps,
    Curves,
    Demands,
    Options,
}

struct RawPump {
    id: String,
    from: String,
    to: String,
    curve: String,
    line: usize,
}

fn err(line: usize, msg: impl Into<String>) -> NetworkError {
    NetworkError::Parse {
        line,
        msg: msg.into(),
    }
}

fn num(tok: &str, line: usize, what: &str) -> Result<f64, NetworkError> {
    tok.parse::<f64>()
        .map_err(|_| err(line, format!("bad {what} value `{tok}`")))
}

pub fn parse(text: &str) -> Result<Network, NetworkError> {
    let mut section: Option<Section> = None;
    let mut junctions: Vec<Junction> = Vec::new();
    let mut reservoirs: Vec<Reservoir> = Vec::new();
    let mut tanks: Vec<Tank> = Vec::new();
    // Pipes are stored raw until [OPTIONS] fixes the head-loss formula.
    let mut raw_pipes: Vec<(String, String, String, f64, f64, f64, usize)> = Vec::new();
    let mut raw_pumps: Vec<RawPump> = Vec::new();
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut extra_demands: BTreeMap<String, f64> = BTreeMap::new();
    let mut formula = HeadlossFormula::HazenWilliams;

    for (lineno, raw_line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = match raw_line.find(';') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            let name = line
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| err(lineno, "malformed section header"))?
                .trim()
                .to_ascii_uppercase();
            section = Some(match name.as_str() {
                "JUNCTIONS" => Section::Junctions,
                "RESERVOIRS" => Section::Reservoirs,
                "TANKS" => Section::Tanks,
                "PIPES" => Section::Pipes,
                "PUMPS" => Section::Pumps,
                "CURVES" => Section::Curves,
                "DEMANDS" => Section::Demands,
                "OPTIONS" => Section::Options,
                "VALVES" => {
                    return Err(NetworkError::Unsupported(
                        "valves ([VALVES] section) are not modeled".into(),
                    ))
                }
                other => return Err(NetworkError::UnknownSection(other.to_string())),
            });
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let section = section.ok_or_else(|| err(lineno, "data before first section"))?;
        match section {
            Section::Junctions => {
                if toks.len() < 2 || toks.len() > 3 {
                    return Err(err(lineno, "junction needs: id elevation [demand]"));
                }
                let elevation = num(toks[1], lineno, "elevation")?;
                let demand = if toks.len() == 3 {
                    num(toks[2], lineno, "demand")?
                } else {
                    0.0
                };
                junctions.push(Junction {
                    id: toks[0].to_string(),
                    elevation,
                    demand,
                    head_bounds: (
                        elevation - DEFAULT_HEAD_SPAN_FT,
                        elevation + DEFAULT_HEAD_SPAN_FT,
                    ),
                });
            }
            Section::Reservoirs => {
                if toks.len() != 2 {
                    return Err(err(lineno, "reservoir needs: id head"));
                }
                reservoirs.push(Reservoir {
                    id: toks[0].to_string(),
                    fixed_head: num(toks[1], lineno, "head")?,
                });
            }
            Section::Tanks => {
                if toks.len() < 6 || toks.len() > 7 {
                    return Err(err(
                        lineno,
                        "tank needs: id elev initlvl minlvl maxlvl diameter [minvol]",
                    ));
                }
                let elevation = num(toks[1], lineno, "elevation")?;
                let init = num(toks[2], lineno, "initial level")?;
                let min = num(toks[3], lineno, "min level")?;
                let max = num(toks[4], lineno, "max level")?;
                let diameter = num(toks[5], lineno, "diameter")?;
                tanks.push(Tank {
                    id: toks[0].to_string(),
                    elevation,
                    diameter_ft: diameter,
                    cross_sectional_area: std::f64::consts::PI / 4.0 * diameter * diameter,
                    initial_head: elevation + init,
                    head_bounds: (elevation + min, elevation + max),
                });
            }
            Section::Pipes => {
                if toks.len() < 6 || toks.len() > 8 {
                    return Err(err(
                        lineno,
                        "pipe needs: id node1 node2 length diameter roughness [minorloss status]",
                    ));
                }
                if toks.len() >= 7 {
                    let minor = num(toks[6], lineno, "minor loss")?;
                    if minor != 0.0 {
                        return Err(NetworkError::Unsupported(
                            "minor losses are not modeled".into(),
                        ));
                    }
                }
                if toks.len() == 8 && !toks[7].eq_ignore_ascii_case("OPEN") {
                    return Err(NetworkError::Unsupported(format!(
                        "pipe status `{}` (only OPEN)",
                        toks[7]
                    )));
                }
                raw_pipes.push((
                    toks[0].to_string(),
                    toks[1].to_string(),
                    toks[2].to_string(),
                    num(toks[3], lineno, "length")?,
                    num(toks[4], lineno, "diameter")?,
                    num(toks[5], lineno, "roughness")?,
                    lineno,
                ));
            }
            Section::Pumps => {
                if toks.len() != 5 || !toks[3].eq_ignore_ascii_case("HEAD") {
                    return Err(NetworkError::Unsupported(
                        "pumps must use `id node1 node2 HEAD <curve>`".into(),
                    ));
                }
                raw_pumps.push(RawPump {
                    id: toks[0].to_string(),
                    from: toks[1].to_string(),
                    to: toks[2].to_string(),
                    curve: toks[4].to_string(),
                    line: lineno,
                });
            }
            Section::Curves => {
                if toks.len() != 3 {
                    return Err(err(lineno, "curve needs: id x y"));
                }
                curves.entry(toks[0].to_string()).or_default().push((
                    num(toks[1], lineno, "curve x")?,
                    num(toks[2], lineno, "curve y")?,
                ));
            }
            Section::Demands => {
                if toks.len() != 2 {
                    return Err(err(lineno, "demand needs: junction value"));
                }
                *extra_demands.entry(toks[0].to_string()).or_insert(0.0) +=
                    num(toks[1], lineno, "demand")?;
            }
            Section::Options => {
                if toks.len() < 2 {
                    continue;
                }
                match toks[0].to_ascii_uppercase().as_str() {
                    "UNITS" => {
                        if !toks[1].eq_ignore_ascii_case("GPM") {
                            return Err(NetworkError::Unsupported(format!(
                                "unit system `{}` (only GPM)",
                                toks[1]
                            )));
                        }
                    }
                    "HEADLOSS" => {
                        formula = match toks[1].to_ascii_uppercase().as_str() {
                            "H-W" => HeadlossFormula::HazenWilliams,
                            "D-W" => HeadlossFormula::DarcyWeisbach,
                            "C-M" => HeadlossFormula::ChezyManning,
                            other => {
                                return Err(err(lineno, format!("unknown headloss `{other}`")))
                            }
                        };
                    }
                    // Other EPANET options are irrelevant here.
                    _ => {}
                }
            }
        }
    }

    // [DEMANDS] entries replace the junction base demand.
    for j in &mut junctions {
        if let Some(d) = extra_demands.get(&j.id) {
            j.demand = *d;
        }
    }

    let pipes: Vec<Pipe> = raw_pipes
        .into_iter()
        .map(|(id, from, to, length, diam, rough, line)| {
            if length <= 0.0 || diam <= 0.0 || rough <= 0.0 {
                return Err(err(line, format!("pipe {id}: nonpositive geometry")));
            }
            Ok(Pipe {
                resistance: formula.resistance(length, diam, rough),
                flow_exponent: formula.flow_exponent(),
                id,
                from_node: from,
                to_node: to,
                length_ft: length,
                diameter_in: diam,
                roughness: rough,
                formula,
                flow_bounds: (-DEFAULT_FLOW_BOUND_GPM, DEFAULT_FLOW_BOUND_GPM),
            })
        })
        .collect::<Result<_, _>>()?;

    let pumps: Vec<Pump> = raw_pumps
        .into_iter()
        .map(|rp| {
            let pts = curves
                .get(&rp.curve)
                .ok_or_else(|| err(rp.line, format!("pump {} references missing curve {}", rp.id, rp.curve)))?;
            if pts.len() != 1 {
                return Err(NetworkError::Unsupported(format!(
                    "curve {} has {} points (only single-point pump curves)",
                    rp.curve,
                    pts.len()
                )));
            }
            Pump::from_design_point(rp.id, rp.from, rp.to, pts[0].0, pts[0].1)
        })
        .collect::<Result<_, _>>()?;

    Network::from_components(junctions, reservoirs, tanks, pipes, pumps)
}

pub fn write(net: &Network) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[JUNCTIONS]");
    let _ = writeln!(s, ";id elevation demand");
    for j in &net.junctions {
        let _ = writeln!(s, " {} {} {}", j.id, j.elevation, j.demand);
    }
    let _ = writeln!(s, "\n[RESERVOIRS]");
    let _ = writeln!(s, ";id head");
    for r in &net.reservoirs {
        let _ = writeln!(s, " {} {}", r.id, r.fixed_head);
    }
    if !net.tanks.is_empty() {
        let _ = writeln!(s, "\n[TANKS]");
        let _ = writeln!(s, ";id elevation initlvl minlvl maxlvl diameter minvol");
        for t in &net.tanks {
            let _ = writeln!(
                s,
                " {} {} {} {} {} {} 0",
                t.id,
                t.elevation,
                t.initial_head - t.elevation,
                t.head_bounds.0 - t.elevation,
                t.head_bounds.1 - t.elevation,
                t.diameter_ft,
            );
        }
    }
    let _ = writeln!(s, "\n[PIPES]");
    let _ = writeln!(s, ";id node1 node2 length diameter roughness");
    for p in &net.pipes {
        let _ = writeln!(
            s,
            " {} {} {} {} {} {}",
            p.id, p.from_node, p.to_node, p.length_ft, p.diameter_in, p.roughness
        );
    }
    if !net.pumps.is_empty() {
        let _ = writeln!(s, "\n[PUMPS]");
        let _ = writeln!(s, ";id node1 node2 HEAD curve");
        for p in &net.pumps {
            let _ = writeln!(s, " {} {} {} HEAD curve-{}", p.id, p.from_node, p.to_node, p.id);
        }
        let _ = writeln!(s, "\n[CURVES]");
        let _ = writeln!(s, ";id flow head");
        for p in &net.pumps {
            let _ = writeln!(s, " curve-{} {} {}", p.id, p.design_point.0, p.design_point.1);
        }
    }
    let _ = writeln!(s, "\n[OPTIONS]");
    let _ = writeln!(s, " UNITS GPM");
    let formula = net
        .pipes
        .first()
        .map(|p| p.formula)
        .unwrap_or(HeadlossFormula::HazenWilliams);
    let tag = match formula {
        HeadlossFormula::HazenWilliams => "H-W",
        HeadlossFormula::DarcyWeisbach => "D-W",
        HeadlossFormula::ChezyManning => "C-M",
    };
    let _ = writeln!(s, " HEADLOSS {tag}");
    s
}
