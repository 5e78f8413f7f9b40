//! Physics-residual mathematics: nodal power-balance mismatches, the
//! complex mismatch magnitude, Joule losses, global demand, and the
//! slack-redispatch chain used when completing external predictions.
//!
//! Two independent formula routes are kept deliberately separate: the
//! admittance-matrix form (used by the solver) and the branch-expanded
//! trigonometric form (used as a cross-check oracle). They must agree
//! to tight tolerance on any network/state pair.

use crate::grid::{Admittance, BusKind, GridError, Network};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voltage state over all buses: magnitudes (p.u.) and angles (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfState {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl PfState {
    pub fn flat(n: usize) -> PfState {
        PfState {
            vm: vec![1.0; n],
            va: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.vm.len()
    }
}

/// Scheduled net injections. `None` marks a free output quantity
/// (q at PV buses, p and q at the slack): its residual is defined as
/// zero because the implied value is used.
#[derive(Debug, Clone)]
pub struct Injections {
    pub p: Vec<Option<f64>>,
    pub q: Vec<Option<f64>>,
}

impl Injections {
    /// Scheduled injections for a power-flow solve: p known everywhere
    /// but the slack, q known only at PQ buses.
    pub fn scheduled(net: &Network) -> Injections {
        let (pd, qd) = net.bus_demand();
        let (pg, qg) = net.bus_generation();
        let mut p = Vec::with_capacity(net.n_buses());
        let mut q = Vec::with_capacity(net.n_buses());
        for (i, bus) in net.buses.iter().enumerate() {
            match bus.kind {
                BusKind::Slack => {
                    p.push(None);
                    q.push(None);
                }
                BusKind::Pv => {
                    p.push(Some(pg[i] - pd[i]));
                    q.push(None);
                }
                BusKind::Pq => {
                    p.push(Some(pg[i] - pd[i]));
                    q.push(Some(qg[i] - qd[i]));
                }
            }
        }
        Injections { p, q }
    }

    /// Injections with every quantity pinned, for scoring fully
    /// specified solutions (stored labels or end-to-end predictions).
    pub fn full(p: Vec<f64>, q: Vec<f64>) -> Injections {
        Injections {
            p: p.into_iter().map(Some).collect(),
            q: q.into_iter().map(Some).collect(),
        }
    }
}

/// Per-bus active/reactive mismatches and their complex magnitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MismatchReport {
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
    pub ds: Vec<f64>,
    pub mean_ds: f64,
    pub max_ds: f64,
}

impl MismatchReport {
    fn from_deltas(dp: Vec<f64>, dq: Vec<f64>) -> MismatchReport {
        let ds: Vec<f64> = dp
            .iter()
            .zip(&dq)
            .map(|(p, q)| p.hypot(*q))
            .collect();
        let n = ds.len().max(1);
        let mean_ds = ds.iter().sum::<f64>() / n as f64;
        let max_ds = ds.iter().copied().fold(0.0, f64::max);
        MismatchReport {
            dp,
            dq,
            ds,
            mean_ds,
            max_ds,
        }
    }
}

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("network has no in-service slack generator")]
    NoSlackGenerator,
}

/// Net complex power injected into the network at each bus, computed
/// from the admittance matrix: P_i + jQ_i = V_i (Y V)_i^*.
pub fn network_injections(adm: &Admittance, state: &PfState) -> (Vec<f64>, Vec<f64>) {
    let n = adm.n();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (vi, ti) = (state.vm[i], state.va[i]);
        let mut pi = 0.0;
        let mut qi = 0.0;
        for &(j, y) in &adm.rows[i] {
            let tij = ti - state.va[j];
            let (s, c) = tij.sin_cos();
            pi += state.vm[j] * (y.re * c + y.im * s);
            qi += state.vm[j] * (y.re * s - y.im * c);
        }
        p[i] = vi * pi;
        q[i] = vi * qi;
    }
    (p, q)
}

/// Nodal balance residuals in admittance form. Free-output components
/// contribute zero by definition.
pub fn mismatch(
    net: &Network,
    adm: &Admittance,
    state: &PfState,
    inj: &Injections,
) -> Result<MismatchReport, GridError> {
    let n = net.n_buses();
    if state.n() != n || adm.n() != n {
        return Err(GridError::Dimension {
            expected: n,
            got: state.n().min(adm.n()),
        });
    }
    let (p_of_x, q_of_x) = network_injections(adm, state);
    let dp: Vec<f64> = (0..n)
        .map(|i| inj.p[i].map_or(0.0, |p| p - p_of_x[i]))
        .collect();
    let dq: Vec<f64> = (0..n)
        .map(|i| inj.q[i].map_or(0.0, |q| q - q_of_x[i]))
        .collect();
    Ok(MismatchReport::from_deltas(dp, dq))
}

/// Per-branch trigonometric pieces of the branch-expanded balance form.
/// The series admittance is parameterized as y*e^{j*delta} with
/// y = |1/(r+jx)| and delta = arg(1/(r+jx)); the convention is fixed by
/// numerical agreement with the admittance form.
struct BranchTrig {
    y: f64,
    delta: f64,
    bc2: f64,
    tau: f64,
    shift: f64,
}

impl BranchTrig {
    fn of(net: &Network, idx: usize) -> BranchTrig {
        let br = &net.branches[idx];
        let denom = br.r * br.r + br.x * br.x;
        let y = 1.0 / denom.sqrt();
        let delta = (-br.x).atan2(br.r); // arg(1/(r+jx))
        BranchTrig {
            y,
            delta,
            bc2: br.b_charging / 2.0,
            tau: br.tap,
            shift: br.shift,
        }
    }

    fn p_from(&self, vi: f64, vj: f64, ti: f64, tj: f64) -> f64 {
        (vi / self.tau).powi(2) * self.y * self.delta.cos()
            - vi * vj * self.y / self.tau * (ti - tj - self.shift - self.delta).cos()
    }

    fn q_from(&self, vi: f64, vj: f64, ti: f64, tj: f64) -> f64 {
        -(vi / self.tau).powi(2) * (self.y * self.delta.sin() + self.bc2)
            - vi * vj * self.y / self.tau * (ti - tj - self.shift - self.delta).sin()
    }

    fn p_to(&self, vi: f64, vj: f64, ti: f64, tj: f64) -> f64 {
        vj * vj * self.y * self.delta.cos()
            - vi * vj * self.y / self.tau * (tj - ti + self.shift - self.delta).cos()
    }

    fn q_to(&self, vi: f64, vj: f64, ti: f64, tj: f64) -> f64 {
        -vj * vj * (self.y * self.delta.sin() + self.bc2)
            - vi * vj * self.y / self.tau * (tj - ti + self.shift - self.delta).sin()
    }
}

/// Branch-expanded dual of [`mismatch`]: same residuals, assembled from
/// per-branch trigonometric terms plus explicit shunt consumption,
/// without forming the admittance matrix.
pub fn mismatch_branch_form(
    net: &Network,
    state: &PfState,
    inj: &Injections,
) -> Result<MismatchReport, GridError> {
    let n = net.n_buses();
    if state.n() != n {
        return Err(GridError::Dimension {
            expected: n,
            got: state.n(),
        });
    }
    let mut p_flow = vec![0.0; n];
    let mut q_flow = vec![0.0; n];
    for (idx, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let bt = BranchTrig::of(net, idx);
        let (vi, vj) = (state.vm[br.from], state.vm[br.to]);
        let (ti, tj) = (state.va[br.from], state.va[br.to]);
        p_flow[br.from] += bt.p_from(vi, vj, ti, tj);
        q_flow[br.from] += bt.q_from(vi, vj, ti, tj);
        p_flow[br.to] += bt.p_to(vi, vj, ti, tj);
        q_flow[br.to] += bt.q_to(vi, vj, ti, tj);
    }
    let dp: Vec<f64> = (0..n)
        .map(|i| {
            inj.p[i].map_or(0.0, |p| {
                p - net.buses[i].gs * state.vm[i] * state.vm[i] - p_flow[i]
            })
        })
        .collect();
    let dq: Vec<f64> = (0..n)
        .map(|i| {
            inj.q[i].map_or(0.0, |q| {
                q + net.buses[i].bs * state.vm[i] * state.vm[i] - q_flow[i]
            })
        })
        .collect();
    Ok(MismatchReport::from_deltas(dp, dq))
}

/// Total series active loss, assembled per branch from the expanded
/// trigonometric form. Nonnegative whenever all r >= 0.
pub fn joule_losses(net: &Network, state: &PfState) -> f64 {
    let mut total = 0.0;
    for (idx, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let bt = BranchTrig::of(net, idx);
        let (vi, vj) = (state.vm[br.from], state.vm[br.to]);
        let (ti, tj) = (state.va[br.from], state.va[br.to]);
        total += (bt.p_from(vi, vj, ti, tj) + bt.p_to(vi, vj, ti, tj)).abs();
    }
    total
}

/// Global active consumption: demand plus shunt draw plus series losses.
pub fn global_demand(net: &Network, state: &PfState) -> f64 {
    let (pd, _) = net.bus_demand();
    let shunt: f64 = net
        .buses
        .iter()
        .zip(&state.vm)
        .map(|(b, v)| b.gs * v * v)
        .sum();
    pd.iter().sum::<f64>() + shunt + joule_losses(net, state)
}

/// Result of rebalancing total generation onto the slack unit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SlackRedispatch {
    /// Slack active output that balances the system exactly.
    pub p_slack: f64,
    /// Diagnostic redispatch parameter; piecewise in whether global
    /// demand falls short of or exceeds the scheduled total.
    pub lambda: f64,
}

/// Sets the slack unit's active output to absorb the residual between
/// global demand and the fixed non-slack setpoints. Lambda is reported
/// as a diagnostic; the balance itself is exact by construction.
pub fn slack_redispatch(net: &Network, p_global: f64) -> Result<SlackRedispatch, BalanceError> {
    let slack_bus = net.slack_bus().ok_or(BalanceError::NoSlackGenerator)?;
    let slack_gen = net
        .generators
        .iter()
        .find(|g| g.in_service && g.bus == slack_bus)
        .ok_or(BalanceError::NoSlackGenerator)?;

    let sum_non_slack: f64 = net
        .generators
        .iter()
        .filter(|g| g.in_service && g.bus != slack_bus)
        .map(|g| g.pg)
        .sum();
    let sum_all = sum_non_slack + slack_gen.pg;
    let p_slack = p_global - sum_non_slack;

    let lambda = if p_global < sum_all {
        (p_global - sum_non_slack - slack_gen.pmax) / (2.0 * (slack_gen.pg - slack_gen.pmin))
    } else {
        (p_global - sum_non_slack - 2.0 * slack_gen.pg - slack_gen.pmax)
            / (2.0 * (slack_gen.pmax - slack_gen.pg))
    };
    Ok(SlackRedispatch { p_slack, lambda })
}

/// Reactive generation implied by the voltage profile at each bus:
/// q_g = q_d - b_s v^2 + sum of reactive flows into incident branches.
pub fn implied_reactive(net: &Network, state: &PfState) -> Vec<f64> {
    let n = net.n_buses();
    let (_, qd) = net.bus_demand();
    let mut q_flow = vec![0.0; n];
    for (idx, br) in net.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let bt = BranchTrig::of(net, idx);
        let (vi, vj) = (state.vm[br.from], state.vm[br.to]);
        let (ti, tj) = (state.va[br.from], state.va[br.to]);
        q_flow[br.from] += bt.q_from(vi, vj, ti, tj);
        q_flow[br.to] += bt.q_to(vi, vj, ti, tj);
    }
    (0..n)
        .map(|i| qd[i] - net.buses[i].bs * state.vm[i] * state.vm[i] + q_flow[i])
        .collect()
}
