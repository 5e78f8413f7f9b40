//! MATPOWER case-file parsing/emission and per-sample record I/O.
//!
//! Case files are read into [`Network`] in per-unit: MW/MVAr columns are
//! divided by baseMVA, angles converted from degrees to radians, and
//! external bus numbers mapped to dense indices 0..n-1 (the original
//! numbers are retained in `ext_bus_ids`). Sample records are JSON files
//! whose key names and column orders follow the component-level graph
//! schema used by the dataset loaders.

use crate::balance::PfState;
use crate::grid::{Branch, Bus, BusKind, Generator, Load, Network};
use crate::newton::CompletedSolution;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing table: {0}")]
    MissingTable(&'static str),
    #[error("line {line}: unknown bus reference {bus}")]
    UnknownBus { line: usize, bus: u64 },
    #[error("no slack bus in case")]
    NoSlack,
    #[error("multiple slack buses: {0:?}")]
    MultipleSlack(Vec<u64>),
    #[error("record key {key}: expected shape {expected}, got {got}")]
    Shape {
        key: &'static str,
        expected: String,
        got: String,
    },
    #[error("record key {key}: {msg}")]
    Domain { key: &'static str, msg: String },
    #[error("non-finite value under key {0}")]
    NonFinite(&'static str),
    #[error("record is missing derived outputs: {0}")]
    Incomplete(&'static str),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw numeric tables of a MATPOWER case.
struct RawCase {
    base_mva: f64,
    bus: Vec<(usize, Vec<f64>)>,
    gen: Vec<(usize, Vec<f64>)>,
    branch: Vec<(usize, Vec<f64>)>,
    gencost: Vec<(usize, Vec<f64>)>,
}

fn parse_tables(text: &str) -> Result<RawCase, CaseError> {
    let mut base_mva = None;
    let mut tables: HashMap<String, Vec<(usize, Vec<f64>)>> = HashMap::new();
    let mut current: Option<String> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let code = raw.split('%').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        if let Some(rest) = code.strip_prefix("mpc.baseMVA") {
            let val = rest
                .trim_start_matches(|c: char| c == '=' || c.is_whitespace())
                .trim_end_matches(';')
                .trim();
            base_mva = Some(val.parse::<f64>().map_err(|_| CaseError::Parse {
                line,
                msg: format!("bad baseMVA value '{val}'"),
            })?);
            continue;
        }
        if current.is_none() {
            if let Some(rest) = code.strip_prefix("mpc.") {
                if let Some(eq) = rest.find('=') {
                    let name = rest[..eq].trim().to_string();
                    let tail = rest[eq + 1..].trim();
                    if tail.starts_with('[') {
                        current = Some(name.clone());
                        tables.entry(name).or_default();
                        let tail = tail.trim_start_matches('[').trim();
                        if !tail.is_empty() {
                            push_rows(&mut tables, &mut current, tail, line)?;
                        }
                        continue;
                    }
                }
            }
            continue;
        }
        push_rows(&mut tables, &mut current, code, line)?;
    }

    let base_mva = base_mva.ok_or(CaseError::MissingTable("baseMVA"))?;
    let bus = tables
        .remove("bus")
        .filter(|t| !t.is_empty())
        .ok_or(CaseError::MissingTable("bus"))?;
    let gen = tables
        .remove("gen")
        .filter(|t| !t.is_empty())
        .ok_or(CaseError::MissingTable("gen"))?;
    let branch = tables
        .remove("branch")
        .filter(|t| !t.is_empty())
        .ok_or(CaseError::MissingTable("branch"))?;
    let gencost = tables.remove("gencost").unwrap_or_default();
    Ok(RawCase {
        base_mva,
        bus,
        gen,
        branch,
        gencost,
    })
}

fn push_rows(
    tables: &mut HashMap<String, Vec<(usize, Vec<f64>)>>,
    current: &mut Option<String>,
    code: &str,
    line: usize,
) -> Result<(), CaseError> {
    let name = current.clone().unwrap();
    // A table ends at '];'; rows are separated by ';'.
    let mut text = code;
    let mut done = false;
    if let Some(pos) = text.find(']') {
        text = &text[..pos];
        done = true;
    }
    for row in text.split(';') {
        let row = row.trim();
        if row.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = row.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let vals = vals.map_err(|_| CaseError::Parse {
            line,
            msg: format!("bad numeric row in mpc.{name}: '{row}'"),
        })?;
        tables.get_mut(&name).unwrap().push((line, vals));
    }
    if done {
        *current = None;
    }
    Ok(())
}

/// Parses a MATPOWER-format case into a per-unit [`Network`].
pub fn parse_matpower(text: &str) -> Result<Network, CaseError> {
    let raw = parse_tables(text)?;
    let base = raw.base_mva;

    let mut buses = Vec::with_capacity(raw.bus.len());
    let mut loads = Vec::new();
    let mut ext_bus_ids = Vec::with_capacity(raw.bus.len());
    let mut index_of: HashMap<u64, usize> = HashMap::new();
    let mut slack_ids = Vec::new();

    for (line, row) in &raw.bus {
        if row.len() < 13 {
            return Err(CaseError::Parse {
                line: *line,
                msg: format!("bus row has {} columns, expected >= 13", row.len()),
            });
        }
        let ext = row[0] as u64;
        let kind = match row[1] as u8 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => {
                slack_ids.push(ext);
                BusKind::Slack
            }
            other => {
                return Err(CaseError::Parse {
                    line: *line,
                    msg: format!("bus {ext} has unsupported type {other}"),
                })
            }
        };
        let idx = buses.len();
        index_of.insert(ext, idx);
        ext_bus_ids.push(ext);
        buses.push(Bus {
            kind,
            gs: row[4] / base,
            bs: row[5] / base,
            vmax: row[11],
            vmin: row[12],
        });
        let (pd, qd) = (row[2] / base, row[3] / base);
        if pd != 0.0 || qd != 0.0 {
            loads.push(Load { bus: idx, pd, qd });
        }
    }
    if slack_ids.is_empty() {
        return Err(CaseError::NoSlack);
    }
    if slack_ids.len() > 1 {
        return Err(CaseError::MultipleSlack(slack_ids));
    }

    let mut generators = Vec::with_capacity(raw.gen.len());
    for (k, (line, row)) in raw.gen.iter().enumerate() {
        if row.len() < 10 {
            return Err(CaseError::Parse {
                line: *line,
                msg: format!("gen row has {} columns, expected >= 10", row.len()),
            });
        }
        let ext = row[0] as u64;
        let bus = *index_of
            .get(&ext)
            .ok_or(CaseError::UnknownBus { line: *line, bus: ext })?;
        // Quadratic/linear cost coefficients from gencost, when present.
        let (cost_a, cost_b) = raw
            .gencost
            .get(k)
            .map(|(_, c)| gencost_coeffs(c))
            .unwrap_or((0.0, 0.0));
        generators.push(Generator {
            bus,
            pg: row[1] / base,
            qg: row[2] / base,
            qmax: row[3] / base,
            qmin: row[4] / base,
            vset: row[5],
            in_service: row[7] > 0.0,
            pmax: row[8] / base,
            pmin: row[9] / base,
            cost_a,
            cost_b,
        });
    }

    let mut branches = Vec::with_capacity(raw.branch.len());
    for (line, row) in &raw.branch {
        if row.len() < 11 {
            return Err(CaseError::Parse {
                line: *line,
                msg: format!("branch row has {} columns, expected >= 11", row.len()),
            });
        }
        let f_ext = row[0] as u64;
        let t_ext = row[1] as u64;
        let from = *index_of
            .get(&f_ext)
            .ok_or(CaseError::UnknownBus { line: *line, bus: f_ext })?;
        let to = *index_of
            .get(&t_ext)
            .ok_or(CaseError::UnknownBus { line: *line, bus: t_ext })?;
        let (angmin, angmax) = if row.len() >= 13 {
            angle_limits(row[11], row[12])
        } else {
            (-TAU, TAU)
        };
        branches.push(Branch {
            from,
            to,
            r: row[2],
            x: row[3],
            b_charging: row[4],
            rate: row[5] / base,
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            shift: row[9].to_radians(),
            in_service: row[10] > 0.0,
            angmin,
            angmax,
        });
    }

    Ok(Network {
        base_mva: base,
        buses,
        generators,
        loads,
        branches,
        ext_bus_ids,
    })
}

fn gencost_coeffs(row: &[f64]) -> (f64, f64) {
    // Polynomial model 2 with NCOST >= 2: coefficients are listed from
    // the highest order down.
    if row.len() >= 4 && row[0] == 2.0 {
        let ncost = row[3] as usize;
        let coeffs = &row[4..];
        match ncost {
            3 if coeffs.len() >= 2 => (coeffs[0], coeffs[1]),
            2 if !coeffs.is_empty() => (0.0, coeffs[0]),
            _ => (0.0, 0.0),
        }
    } else {
        (0.0, 0.0)
    }
}

fn angle_limits(angmin_deg: f64, angmax_deg: f64) -> (f64, f64) {
    // MATPOWER treats 0,0 and +/-360 as unconstrained.
    if (angmin_deg == 0.0 && angmax_deg == 0.0) || angmin_deg <= -360.0 || angmax_deg >= 360.0 {
        (-TAU, TAU)
    } else {
        (angmin_deg.to_radians(), angmax_deg.to_radians())
    }
}

/// Emits a MATPOWER case equivalent to the network (for round-trips and
/// corpus export). Values are converted back to MW/MVAr and degrees.
pub fn emit_matpower(net: &Network, name: &str) -> String {
    let b = net.base_mva;
    let mut out = String::new();
    out.push_str(&format!("function mpc = {name}\n"));
    out.push_str("mpc.version = '2';\n");
    out.push_str(&format!("mpc.baseMVA = {b};\n"));

    let (pd, qd) = net.bus_demand();
    out.push_str("mpc.bus = [\n");
    for (i, bus) in net.buses.iter().enumerate() {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t1\t0\t1\t1\t{}\t{};\n",
            net.ext_bus_ids[i],
            bus.kind.code(),
            pd[i] * b,
            qd[i] * b,
            bus.gs * b,
            bus.bs * b,
            bus.vmax,
            bus.vmin,
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.gen = [\n");
    for g in &net.generators {
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{};\n",
            net.ext_bus_ids[g.bus],
            g.pg * b,
            g.qg * b,
            g.qmax * b,
            g.qmin * b,
            g.vset,
            b,
            if g.in_service { 1 } else { 0 },
            g.pmax * b,
            g.pmin * b,
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.branch = [\n");
    for br in &net.branches {
        let (angmin, angmax) = if br.angmin <= -TAU && br.angmax >= TAU {
            (-360.0, 360.0)
        } else {
            (br.angmin.to_degrees(), br.angmax.to_degrees())
        };
        out.push_str(&format!(
            "\t{}\t{}\t{}\t{}\t{}\t{}\t0\t0\t{}\t{}\t{}\t{}\t{};\n",
            net.ext_bus_ids[br.from],
            net.ext_bus_ids[br.to],
            br.r,
            br.x,
            br.b_charging,
            br.rate * b,
            if br.tap == 1.0 { 0.0 } else { br.tap },
            br.shift.to_degrees(),
            if br.in_service { 1 } else { 0 },
            angmin,
            angmax,
        ));
    }
    out.push_str("];\n");

    out.push_str("mpc.gencost = [\n");
    for g in &net.generators {
        out.push_str(&format!("\t2\t0\t0\t3\t{}\t{}\t0;\n", g.cost_a, g.cost_b));
    }
    out.push_str("];\n");
    out
}

// ---------------------------------------------------------------------
// Sample records
// ---------------------------------------------------------------------

/// Provenance header of one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Perturbation event description, e.g. "remove_lines[3,7]".
    pub event: String,
    /// Feasibility regime tag.
    pub regime: String,
    /// Topology tag: "N", "N-1" or "N-2".
    pub topology: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusArrays {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<[f64; 2]>,
    pub bus_gen: Vec<[f64; 2]>,
    pub bus_demand: Vec<[f64; 2]>,
    pub bus_voltages: Vec<[f64; 2]>,
    pub bus_type: Vec<u8>,
    pub shunt: Vec<[f64; 2]>,
    pub limits: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArrays {
    /// (pmin, pmax, qmin, qmax) per generator.
    pub limits: Vec<[f64; 4]>,
    /// (pg, qg) per generator.
    pub generation: Vec<[f64; 2]>,
    /// 1 when the generator sits at the slack bus.
    pub slack_gen: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadArrays {
    pub demand: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchArrays {
    /// COO connectivity: [sources, destinations] over dense bus indices.
    pub edge_index: [Vec<usize>; 2],
    /// (r, x, g_from, b_from, g_to, b_to, tap, shift_degrees) per branch.
    pub edge_attr: Vec<[f64; 8]>,
    /// (p_from, q_from, p_to, q_to) per branch.
    pub edge_label: Vec<[f64; 4]>,
    pub edge_limits: Vec<[f64; 1]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkArrays {
    pub edge_index: [Vec<usize>; 2],
}

/// One solved scenario in the component-level graph schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub provenance: Provenance,
    pub bus: BusArrays,
    pub gen: GenArrays,
    pub load: LoadArrays,
    pub branch: BranchArrays,
    /// Generator-to-bus connectivity.
    pub gen_link: LinkArrays,
    /// Load-to-bus connectivity.
    pub load_link: LinkArrays,
}

/// Serializes a solved scenario. Every derived output must be present
/// in the completed solution.
pub fn write_sample(
    net: &Network,
    sol: &CompletedSolution,
    prov: Provenance,
) -> Result<SampleRecord, CaseError> {
    let n = net.n_buses();
    if sol.state.n() != n || sol.p_net.len() != n {
        return Err(CaseError::Incomplete("bus-level outputs"));
    }
    if sol.flows.len() != net.branches.len() {
        return Err(CaseError::Incomplete("branch flows"));
    }
    let (pd, qd) = net.bus_demand();
    let slack = net.slack_bus().ok_or(CaseError::NoSlack)?;

    let mut bus = BusArrays {
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        bus_gen: Vec::with_capacity(n),
        bus_demand: Vec::with_capacity(n),
        bus_voltages: Vec::with_capacity(n),
        bus_type: Vec::with_capacity(n),
        shunt: Vec::with_capacity(n),
        limits: Vec::with_capacity(n),
    };
    for i in 0..n {
        let b = &net.buses[i];
        let (vm, va) = (sol.state.vm[i], sol.state.va[i]);
        let (x, y) = match b.kind {
            BusKind::Pq => ([pd[i], qd[i]], [va, vm]),
            BusKind::Pv => ([sol.p_net[i], vm], [sol.q_net[i], va]),
            BusKind::Slack => ([va, vm], [sol.p_net[i], sol.q_net[i]]),
        };
        bus.x.push(x);
        bus.y.push(y);
        bus.bus_gen.push([sol.pg_bus[i], sol.qg_bus[i]]);
        bus.bus_demand.push([pd[i], qd[i]]);
        bus.bus_voltages.push([va, vm]);
        bus.bus_type.push(b.kind.code());
        bus.shunt.push([b.gs, b.bs]);
        bus.limits.push([b.vmin, b.vmax]);
    }

    let mut gen = GenArrays {
        limits: Vec::new(),
        generation: Vec::new(),
        slack_gen: Vec::new(),
    };
    let mut gen_src = Vec::new();
    let mut gen_dst = Vec::new();
    for g in &net.generators {
        gen.limits.push([g.pmin, g.pmax, g.qmin, g.qmax]);
        // Bus-level implied outputs are attributed proportionally when a
        // bus hosts several units; with one unit per bus this is exact.
        let units_here = net
            .generators
            .iter()
            .filter(|o| o.in_service && o.bus == g.bus)
            .count()
            .max(1) as f64;
        let (pg, qg) = if g.in_service {
            (sol.pg_bus[g.bus] / units_here, sol.qg_bus[g.bus] / units_here)
        } else {
            (0.0, 0.0)
        };
        gen.generation.push([pg, qg]);
        gen.slack_gen.push(u8::from(g.bus == slack));
        gen_src.push(gen_src.len());
        gen_dst.push(g.bus);
    }

    let mut load = LoadArrays { demand: Vec::new() };
    let mut load_src = Vec::new();
    let mut load_dst = Vec::new();
    for l in &net.loads {
        load.demand.push([l.pd, l.qd]);
        load_src.push(load_src.len());
        load_dst.push(l.bus);
    }

    let mut branch = BranchArrays {
        edge_index: [Vec::new(), Vec::new()],
        edge_attr: Vec::new(),
        edge_label: Vec::new(),
        edge_limits: Vec::new(),
    };
    for (br, f) in net.branches.iter().zip(&sol.flows) {
        if !br.in_service {
            continue;
        }
        branch.edge_index[0].push(br.from);
        branch.edge_index[1].push(br.to);
        branch.edge_attr.push([
            br.r,
            br.x,
            0.0,
            br.b_charging / 2.0,
            0.0,
            br.b_charging / 2.0,
            br.tap,
            br.shift.to_degrees(),
        ]);
        branch.edge_label.push([f.p_from, f.q_from, f.p_to, f.q_to]);
        branch.edge_limits.push([br.rate]);
    }

    let record = SampleRecord {
        provenance: prov,
        bus,
        gen,
        load,
        branch,
        gen_link: LinkArrays {
            edge_index: [gen_src, gen_dst],
        },
        load_link: LinkArrays {
            edge_index: [load_src, load_dst],
        },
    };
    validate_record(&record)?;
    Ok(record)
}

pub fn record_to_json(record: &SampleRecord) -> Result<String, CaseError> {
    Ok(serde_json::to_string_pretty(record)?)
}

/// Parses and validates a serialized sample record.
pub fn read_sample(bytes: &[u8]) -> Result<SampleRecord, CaseError> {
    let record: SampleRecord = serde_json::from_slice(bytes)?;
    validate_record(&record)?;
    Ok(record)
}

fn validate_record(r: &SampleRecord) -> Result<(), CaseError> {
    let n = r.bus.x.len();
    let check_bus = |key: &'static str, len: usize| -> Result<(), CaseError> {
        if len != n {
            return Err(CaseError::Shape {
                key,
                expected: format!("[{n}, _]"),
                got: format!("[{len}, _]"),
            });
        }
        Ok(())
    };
    check_bus("bus.y", r.bus.y.len())?;
    check_bus("bus.bus_gen", r.bus.bus_gen.len())?;
    check_bus("bus.bus_demand", r.bus.bus_demand.len())?;
    check_bus("bus.bus_voltages", r.bus.bus_voltages.len())?;
    check_bus("bus.bus_type", r.bus.bus_type.len())?;
    check_bus("bus.shunt", r.bus.shunt.len())?;
    check_bus("bus.limits", r.bus.limits.len())?;

    let mut slack_count = 0;
    for &t in &r.bus.bus_type {
        match t {
            1 | 2 => {}
            3 => slack_count += 1,
            other => {
                return Err(CaseError::Domain {
                    key: "bus.bus_type",
                    msg: format!("value {other} outside {{1,2,3}}"),
                })
            }
        }
    }
    if slack_count != 1 {
        return Err(CaseError::Domain {
            key: "bus.bus_type",
            msg: format!("expected exactly one slack flag, found {slack_count}"),
        });
    }

    let ng = r.gen.limits.len();
    if r.gen.generation.len() != ng || r.gen.slack_gen.len() != ng {
        return Err(CaseError::Shape {
            key: "gen.generation",
            expected: format!("[{ng}, 2]"),
            got: format!("[{}, 2]", r.gen.generation.len()),
        });
    }
    if r.gen_link.edge_index[0].len() != ng || r.gen_link.edge_index[1].len() != ng {
        return Err(CaseError::Shape {
            key: "gen_link.edge_index",
            expected: format!("[2, {ng}]"),
            got: format!("[2, {}]", r.gen_link.edge_index[0].len()),
        });
    }
    let nl = r.load.demand.len();
    if r.load_link.edge_index[0].len() != nl || r.load_link.edge_index[1].len() != nl {
        return Err(CaseError::Shape {
            key: "load_link.edge_index",
            expected: format!("[2, {nl}]"),
            got: format!("[2, {}]", r.load_link.edge_index[0].len()),
        });
    }

    let ne = r.branch.edge_index[0].len();
    if r.branch.edge_index[1].len() != ne {
        return Err(CaseError::Shape {
            key: "edge_index",
            expected: format!("[2, {ne}]"),
            got: format!(
                "[{}, {}]",
                r.branch.edge_index[0].len(),
                r.branch.edge_index[1].len()
            ),
        });
    }
    if r.branch.edge_attr.len() != ne {
        return Err(CaseError::Shape {
            key: "edge_attr",
            expected: format!("[{ne}, 8]"),
            got: format!("[{}, 8]", r.branch.edge_attr.len()),
        });
    }
    if r.branch.edge_label.len() != ne {
        return Err(CaseError::Shape {
            key: "edge_label",
            expected: format!("[{ne}, 4]"),
            got: format!("[{}, 4]", r.branch.edge_label.len()),
        });
    }
    if r.branch.edge_limits.len() != ne {
        return Err(CaseError::Shape {
            key: "edge_limits",
            expected: format!("[{ne}, 1]"),
            got: format!("[{}, 1]", r.branch.edge_limits.len()),
        });
    }
    for (key, idx) in [("edge_index", &r.branch.edge_index)] {
        for &b in idx[0].iter().chain(idx[1].iter()) {
            if b >= n {
                return Err(CaseError::Domain {
                    key,
                    msg: format!("bus index {b} out of range (n = {n})"),
                });
            }
        }
    }

    let finite2 = |key: &'static str, rows: &[[f64; 2]]| -> Result<(), CaseError> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CaseError::NonFinite(key));
        }
        Ok(())
    };
    finite2("bus.x", &r.bus.x)?;
    finite2("bus.y", &r.bus.y)?;
    finite2("bus.bus_voltages", &r.bus.bus_voltages)?;
    finite2("bus.bus_gen", &r.bus.bus_gen)?;
    finite2("gen.generation", &r.gen.generation)?;
    finite2("load.demand", &r.load.demand)?;
    if r.branch.edge_attr.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CaseError::NonFinite("edge_attr"));
    }
    if r.branch.edge_label.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CaseError::NonFinite("edge_label"));
    }
    Ok(())
}

/// Rebuilds a per-unit network and its solved state from a record.
/// Consumes only input-side fields plus `bus_voltages`; the caller
/// decides whether the state is a stored label or a prediction.
pub fn record_to_network(r: &SampleRecord) -> Result<(Network, PfState), CaseError> {
    let n = r.bus.x.len();
    let mut buses = Vec::with_capacity(n);
    for i in 0..n {
        buses.push(Bus {
            kind: BusKind::from_code(r.bus.bus_type[i]).ok_or(CaseError::Domain {
                key: "bus.bus_type",
                msg: format!("value {}", r.bus.bus_type[i]),
            })?,
            gs: r.bus.shunt[i][0],
            bs: r.bus.shunt[i][1],
            vmin: r.bus.limits[i][0],
            vmax: r.bus.limits[i][1],
        });
    }
    let mut generators = Vec::new();
    for (k, lim) in r.gen.limits.iter().enumerate() {
        let bus = r.gen_link.edge_index[1][k];
        generators.push(Generator {
            bus,
            pg: r.gen.generation[k][0],
            qg: r.gen.generation[k][1],
            pmin: lim[0],
            pmax: lim[1],
            qmin: lim[2],
            qmax: lim[3],
            vset: r.bus.bus_voltages[bus][1],
            cost_a: 0.0,
            cost_b: 0.0,
            in_service: true,
        });
    }
    let mut loads = Vec::new();
    for (k, d) in r.load.demand.iter().enumerate() {
        loads.push(Load {
            bus: r.load_link.edge_index[1][k],
            pd: d[0],
            qd: d[1],
        });
    }
    let mut branches = Vec::new();
    for (k, a) in r.branch.edge_attr.iter().enumerate() {
        branches.push(Branch {
            from: r.branch.edge_index[0][k],
            to: r.branch.edge_index[1][k],
            r: a[0],
            x: a[1],
            b_charging: a[3] + a[5],
            tap: a[6],
            shift: a[7].to_radians(),
            rate: r.branch.edge_limits[k][0],
            angmin: -TAU,
            angmax: TAU,
            in_service: true,
        });
    }
    let state = PfState {
        vm: r.bus.bus_voltages.iter().map(|v| v[1]).collect(),
        va: r.bus.bus_voltages.iter().map(|v| v[0]).collect(),
    };
    Ok((
        Network {
            base_mva: 100.0,
            buses,
            generators,
            loads,
            branches,
            ext_bus_ids: (0..n as u64).collect(),
        },
        state,
    ))
}

// ---------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------

/// One (regime, topology, split) cell of a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCell {
    pub regime: String,
    pub topology: String,
    pub split: String,
    pub required: usize,
    pub paths: Vec<String>,
    /// Samples missing from the corpus for this cell.
    pub shortfall: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: String,
    pub scale: f64,
    pub cells: Vec<ManifestCell>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS_CASE: &str = r#"
function mpc = case2
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
    1  3  0    0   0  0  1  1.0  0  345  1  1.1  0.9;
    2  1  90   30  0  5  1  1.0  0  345  1  1.1  0.9;
];
mpc.gen = [
    1  50  10  80  -80  1.02  100  1  200  0;
];
mpc.branch = [
    1  2  0.01  0.1  0.02  250  0  0  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  3  0.02  2.0  0;
];
"#;

    #[test]
    fn parses_two_bus_literal() {
        let net = parse_matpower(TWO_BUS_CASE).unwrap();
        assert_eq!(net.n_buses(), 2);
        assert_eq!(net.buses[0].kind, BusKind::Slack);
        assert_eq!(net.loads.len(), 1);
        assert_eq!(net.loads[0].pd, 0.9);
        assert_eq!(net.loads[0].qd, 0.3);
        assert_eq!(net.buses[1].bs, 0.05);
        assert_eq!(net.generators[0].pg, 0.5);
        assert_eq!(net.generators[0].pmax, 2.0);
        assert_eq!(net.generators[0].cost_a, 0.02);
        assert_eq!(net.generators[0].cost_b, 2.0);
        assert_eq!(net.branches[0].tap, 1.0);
        assert_eq!(net.branches[0].rate, 2.5);
        net.validate().unwrap();
    }

    #[test]
    fn parse_emit_parse_is_idempotent() {
        let net1 = parse_matpower(TWO_BUS_CASE).unwrap();
        let text = emit_matpower(&net1, "case2");
        let net2 = parse_matpower(&text).unwrap();
        let text2 = emit_matpower(&net2, "case2");
        assert_eq!(text, text2);
        assert_eq!(net1.n_buses(), net2.n_buses());
        assert_eq!(net1.loads[0].pd, net2.loads[0].pd);
        assert_eq!(net1.branches[0].x, net2.branches[0].x);
        assert_eq!(net1.generators[0].cost_a, net2.generators[0].cost_a);
    }

    #[test]
    fn two_slack_buses_error_names_both() {
        let text = TWO_BUS_CASE.replace("2  1  90", "2  3  90");
        match parse_matpower(&text) {
            Err(CaseError::MultipleSlack(ids)) => assert_eq!(ids, vec![1, 2]),
            other => panic!("expected MultipleSlack, got {other:?}"),
        }
    }

    #[test]
    fn missing_table_reported() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [ 1 3 0 0 0 0 1 1 0 345 1 1.1 0.9; ];";
        match parse_matpower(text) {
            Err(CaseError::MissingTable("gen")) => {}
            other => panic!("expected MissingTable(gen), got {other:?}"),
        }
    }

    #[test]
    fn unknown_bus_reference_has_line_number() {
        let text = TWO_BUS_CASE.replace("1  50  10", "9  50  10");
        match parse_matpower(&text) {
            Err(CaseError::UnknownBus { bus: 9, .. }) => {}
            other => panic!("expected UnknownBus, got {other:?}"),
        }
    }

    fn sample_for_two_bus() -> SampleRecord {
        let net = parse_matpower(TWO_BUS_CASE).unwrap();
        let out = crate::newton::solve(&net, &Default::default()).unwrap();
        assert!(out.converged);
        let adm = crate::grid::build_admittance(&net).unwrap();
        let sol = crate::newton::complete(&net, &adm, &out.state).unwrap();
        write_sample(
            &net,
            &sol,
            Provenance {
                seed: 1,
                event: "none".into(),
                regime: "feasible".into(),
                topology: "N".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn record_round_trip_identity() {
        let rec = sample_for_two_bus();
        let json = record_to_json(&rec).unwrap();
        let back = read_sample(json.as_bytes()).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn record_shape_violations_detected() {
        let mut rec = sample_for_two_bus();
        rec.branch.edge_attr[0] = rec.branch.edge_attr[0]; // keep shape
        rec.branch.edge_label.pop();
        match validate_record(&rec) {
            Err(CaseError::Shape { key: "edge_label", .. }) => {}
            other => panic!("expected edge_label shape error, got {other:?}"),
        }

        let mut rec = sample_for_two_bus();
        rec.bus.bus_type[1] = 4;
        match validate_record(&rec) {
            Err(CaseError::Domain { key: "bus.bus_type", .. }) => {}
            other => panic!("expected bus_type domain error, got {other:?}"),
        }
    }

    #[test]
    fn pq_pv_slack_feature_placement() {
        let rec = sample_for_two_bus();
        // Slack x = (theta, vm); PQ x = (pd, qd).
        assert_eq!(rec.bus.x[0], [0.0, 1.02]);
        assert_eq!(rec.bus.x[1], [0.9, 0.3]);
        // PQ y = (theta, vm) equals bus_voltages row.
        assert_eq!(rec.bus.y[1], rec.bus.bus_voltages[1]);
        // Slack y = net powers; generation minus demand at that bus.
        let p_net = rec.bus.bus_gen[0][0] - rec.bus.bus_demand[0][0];
        assert!((rec.bus.y[0][0] - p_net).abs() < 1e-12);
    }

    #[test]
    fn edge_label_consistent_with_branch_flows() {
        let rec = sample_for_two_bus();
        let (net, state) = record_to_network(&rec).unwrap();
        let flows = crate::grid::branch_flows(&net, &state.vm, &state.va).unwrap();
        for (f, lbl) in flows.iter().zip(&rec.branch.edge_label) {
            assert!((f.p_from - lbl[0]).abs() < 1e-8);
            assert!((f.q_from - lbl[1]).abs() < 1e-8);
            assert!((f.p_to - lbl[2]).abs() < 1e-8);
            assert!((f.q_to - lbl[3]).abs() < 1e-8);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let rec = sample_for_two_bus();
        let json = record_to_json(&rec).unwrap();
        let tampered = json.replacen("\"bus_gen\"", "\"bus_gen_extra\"", 1);
        assert!(read_sample(tampered.as_bytes()).is_err());
    }
}
