//! Per-unit network data model, admittance matrix assembly, connectivity
//! analysis, and branch-flow evaluation.
//!
//! All electrical quantities are stored in per-unit on the system base;
//! angles are radians. Tap ratios and phase shifts follow the usual
//! two-port transformer model: the complex tap `T = tau * e^{j*shift}`
//! sits on the "from" side of the branch.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bus classification. The integer codes match the sample-record
/// `bus_type` flag values (1 = PQ, 2 = PV, 3 = slack).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Pq = 1,
    Pv = 2,
    Slack = 3,
}

impl BusKind {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(BusKind::Pq),
            2 => Some(BusKind::Pv),
            3 => Some(BusKind::Slack),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub kind: BusKind,
    /// Shunt conductance (p.u.).
    pub gs: f64,
    /// Shunt susceptance (p.u.).
    pub bs: f64,
    pub vmin: f64,
    pub vmax: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    /// Active power setpoint (p.u.).
    pub pg: f64,
    /// Reactive output (p.u.); an output quantity for PV/slack buses.
    pub qg: f64,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    /// Voltage magnitude setpoint (p.u.).
    pub vset: f64,
    /// Quadratic cost coefficient.
    pub cost_a: f64,
    /// Linear cost coefficient.
    pub cost_b: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub pd: f64,
    pub qd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance (p.u.), split evenly between ends.
    pub b_charging: f64,
    /// Tap ratio; 1.0 when no transformer.
    pub tap: f64,
    /// Phase shift (radians).
    pub shift: f64,
    /// Flow limit (p.u.), informational.
    pub rate: f64,
    /// Angle-difference limits (radians); +/- 2*pi when unconstrained.
    pub angmin: f64,
    pub angmax: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub branches: Vec<Branch>,
    /// External bus numbers as they appeared in the source file,
    /// indexed by the dense internal bus index.
    pub ext_bus_ids: Vec<u64>,
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("branch {0} has zero series impedance (r = x = 0)")]
    ZeroImpedance(usize),
    #[error("branch {0} has non-positive tap ratio")]
    BadTap(usize),
    #[error("branch {0} is a self-loop at bus {1}")]
    SelfLoop(usize, usize),
    #[error("expected exactly one slack bus, found buses {0:?}")]
    SlackCount(Vec<u64>),
    #[error("live network is disconnected: {0} components")]
    Disconnected(usize),
    #[error("{kind} {index} references unknown bus {bus}")]
    DanglingReference {
        kind: &'static str,
        index: usize,
        bus: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_bus(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Total active/reactive demand at each bus.
    pub fn bus_demand(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pd = vec![0.0; self.n_buses()];
        let mut qd = vec![0.0; self.n_buses()];
        for l in &self.loads {
            pd[l.bus] += l.pd;
            qd[l.bus] += l.qd;
        }
        (pd, qd)
    }

    /// Scheduled generation at each bus from in-service units.
    pub fn bus_generation(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pg = vec![0.0; self.n_buses()];
        let mut qg = vec![0.0; self.n_buses()];
        for g in self.generators.iter().filter(|g| g.in_service) {
            pg[g.bus] += g.pg;
            qg[g.bus] += g.qg;
        }
        (pg, qg)
    }

    /// Checks structural invariants: reference resolution, exactly one
    /// slack bus, connectivity of the live graph.
    pub fn validate(&self) -> Result<(), GridError> {
        let n = self.n_buses();
        for (i, g) in self.generators.iter().enumerate() {
            if g.bus >= n {
                return Err(GridError::DanglingReference {
                    kind: "generator",
                    index: i,
                    bus: g.bus,
                });
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            if l.bus >= n {
                return Err(GridError::DanglingReference {
                    kind: "load",
                    index: i,
                    bus: l.bus,
                });
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(GridError::DanglingReference {
                    kind: "branch",
                    index: i,
                    bus: br.from.max(br.to),
                });
            }
            if br.from == br.to {
                return Err(GridError::SelfLoop(i, br.from));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(GridError::ZeroImpedance(i));
            }
            if br.tap <= 0.0 {
                return Err(GridError::BadTap(i));
            }
        }
        let slack: Vec<u64> = self
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(i, _)| self.ext_bus_ids.get(i).copied().unwrap_or(i as u64))
            .collect();
        if slack.len() != 1 {
            return Err(GridError::SlackCount(slack));
        }
        let labels = connected_components(self);
        let ncomp = labels.iter().copied().max().map_or(0, |m| m + 1);
        if ncomp > 1 {
            return Err(GridError::Disconnected(ncomp));
        }
        Ok(())
    }
}

/// Two-port admittance entries of one branch.
#[derive(Debug, Clone, Copy)]
pub struct TwoPort {
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

impl TwoPort {
    /// Entries for a branch with series impedance r + jx, total charging
    /// b_c, tap ratio tau and phase shift (from-side transformer).
    pub fn of_branch(br: &Branch) -> TwoPort {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let bc2 = Complex64::new(0.0, br.b_charging / 2.0);
        let t = Complex64::from_polar(br.tap, br.shift);
        TwoPort {
            yff: (ys + bc2) / (br.tap * br.tap),
            yft: -ys / t.conj(),
            ytf: -ys / t,
            ytt: ys + bc2,
        }
    }
}

/// Sparse complex nodal admittance matrix plus per-branch two-ports.
///
/// Rows are stored as sorted (column, value) adjacency lists; only the
/// diagonal and live neighbors carry entries.
#[derive(Debug, Clone)]
pub struct Admittance {
    pub rows: Vec<Vec<(usize, Complex64)>>,
    /// Aligned with `Network::branches`; `None` for open branches.
    pub two_ports: Vec<Option<TwoPort>>,
}

impl Admittance {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i]
            .iter()
            .find(|(c, _)| *c == j)
            .map(|(_, y)| *y)
            .unwrap_or_default()
    }
}

/// Assembles Y = G + jB from live branches and bus shunts.
pub fn build_admittance(net: &Network) -> Result<Admittance, GridError> {
    let n = net.n_buses();
    let mut diag = vec![Complex64::default(); n];
    let mut off: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n];
    let mut two_ports = Vec::with_capacity(net.branches.len());

    for (idx, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            two_ports.push(None);
            continue;
        }
        if br.r == 0.0 && br.x == 0.0 {
            return Err(GridError::ZeroImpedance(idx));
        }
        if br.tap <= 0.0 {
            return Err(GridError::BadTap(idx));
        }
        let tp = TwoPort::of_branch(br);
        diag[br.from] += tp.yff;
        diag[br.to] += tp.ytt;
        off[br.from].push((br.to, tp.yft));
        off[br.to].push((br.from, tp.ytf));
        two_ports.push(Some(tp));
    }
    for (i, b) in net.buses.iter().enumerate() {
        diag[i] += Complex64::new(b.gs, b.bs);
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        // Parallel branches between the same pair accumulate.
        let mut row: Vec<(usize, Complex64)> = Vec::with_capacity(off[i].len() + 1);
        row.push((i, diag[i]));
        for &(j, y) in &off[i] {
            match row.iter_mut().find(|(c, _)| *c == j) {
                Some((_, acc)) => *acc += y,
                None => row.push((j, y)),
            }
        }
        row.sort_by_key(|(c, _)| *c);
        rows.push(row);
    }
    Ok(Admittance { rows, two_ports })
}

/// Four real power flows of one branch, in p.u.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

/// Complex flows S_from = V_f (Y_ff V_f + Y_ft V_t)^*, and the mirror
/// at the "to" end, evaluated per live branch. Open branches report zero.
pub fn branch_flows(net: &Network, vm: &[f64], va: &[f64]) -> Result<Vec<BranchFlow>, GridError> {
    let n = net.n_buses();
    if vm.len() != n || va.len() != n {
        return Err(GridError::Dimension {
            expected: n,
            got: vm.len().min(va.len()),
        });
    }
    let mut flows = Vec::with_capacity(net.branches.len());
    for br in &net.branches {
        if !br.in_service {
            flows.push(BranchFlow::default());
            continue;
        }
        let tp = TwoPort::of_branch(br);
        let vf = Complex64::from_polar(vm[br.from], va[br.from]);
        let vt = Complex64::from_polar(vm[br.to], va[br.to]);
        let sf = vf * (tp.yff * vf + tp.yft * vt).conj();
        let st = vt * (tp.ytf * vf + tp.ytt * vt).conj();
        flows.push(BranchFlow {
            p_from: sf.re,
            q_from: sf.im,
            p_to: st.re,
            q_to: st.im,
        });
    }
    Ok(flows)
}

/// Labels buses by connected component of the live-branch graph.
/// Labels are dense, assigned in order of first appearance.
pub fn connected_components(net: &Network) -> Vec<usize> {
    let n = net.n_buses();
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for br in net.branches.iter().filter(|b| b.in_service) {
        let (a, b) = (
            find(&mut parent, br.from),
            find(&mut parent, br.to),
        );
        if a != b {
            parent[a] = b;
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        let root = find(&mut parent, i);
        if labels[root] == usize::MAX {
            labels[root] = next;
            next += 1;
        }
        labels[i] = labels[root];
    }
    labels
}
