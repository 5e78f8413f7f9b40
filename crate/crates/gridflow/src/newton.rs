//! Newton-Raphson power-flow solver with analytic Jacobian and
//! condition-number diagnostics.
//!
//! Unknown ordering: angles at all non-slack buses first (ascending bus
//! index), then voltage magnitudes at PQ buses. The residual rows follow
//! the same layout: active mismatches at non-slack buses, reactive
//! mismatches at PQ buses.

use crate::balance::{mismatch, Injections, MismatchReport, PfState};
use crate::grid::{Admittance, BusKind, GridError, Network};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone)]
pub enum Start {
    /// All unknown magnitudes at 1.0 p.u., all angles at 0; known
    /// magnitudes pinned to their setpoints.
    Flat,
    Warm(PfState),
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Convergence threshold on the max complex mismatch (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    pub start: Start,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 30,
            start: Start::Flat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    IterationLimit,
    SingularSystem,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub converged: bool,
    pub failure: Option<FailureKind>,
    pub state: PfState,
    pub iterations: usize,
    pub final_mismatch: MismatchReport,
    pub wall_time: f64,
    /// Norm of the first and last Newton steps, for diagnostics.
    pub first_step_norm: f64,
    pub last_step_norm: f64,
}

/// Index map from bus space to the reduced unknown vector.
pub struct UnknownMap {
    /// Buses with a free angle (PV and PQ), in ascending order.
    pub ang_buses: Vec<usize>,
    /// Buses with a free magnitude (PQ), in ascending order.
    pub mag_buses: Vec<usize>,
    /// Position of each bus in `ang_buses`, or usize::MAX.
    pub ang_pos: Vec<usize>,
    /// Position of each bus in `mag_buses`, or usize::MAX.
    pub mag_pos: Vec<usize>,
}

impl UnknownMap {
    pub fn of(net: &Network) -> UnknownMap {
        let n = net.n_buses();
        let mut ang_buses = Vec::new();
        let mut mag_buses = Vec::new();
        let mut ang_pos = vec![usize::MAX; n];
        let mut mag_pos = vec![usize::MAX; n];
        for (i, b) in net.buses.iter().enumerate() {
            if b.kind != BusKind::Slack {
                ang_pos[i] = ang_buses.len();
                ang_buses.push(i);
            }
            if b.kind == BusKind::Pq {
                mag_pos[i] = mag_buses.len();
                mag_buses.push(i);
            }
        }
        UnknownMap {
            ang_buses,
            mag_buses,
            ang_pos,
            mag_pos,
        }
    }

    pub fn dim(&self) -> usize {
        self.ang_buses.len() + self.mag_buses.len()
    }
}

/// Analytic Jacobian of the mismatch residual with respect to the
/// unknowns. Entries are the partials of F = S_sched - S(x), so each
/// block is the negated sensitivity of the injected power.
pub fn jacobian(adm: &Admittance, state: &PfState, map: &UnknownMap) -> DMatrix<f64> {
    let na = map.ang_buses.len();
    let dim = map.dim();
    let mut jac = DMatrix::zeros(dim, dim);

    // Injected powers at every bus (needed for the diagonal terms).
    let (p_of_x, q_of_x) = crate::balance::network_injections(adm, state);

    for (row_a, &i) in map.ang_buses.iter().enumerate() {
        let vi = state.vm[i];
        for &(j, y) in &adm.rows[i] {
            let tij = state.va[i] - state.va[j];
            let (s, c) = tij.sin_cos();
            if j == i {
                // dP_i/dtheta_i and dP_i/dv_i
                let dp_dti = -q_of_x[i] - y.im * vi * vi;
                jac[(row_a, row_a)] = -dp_dti;
                if map.mag_pos[i] != usize::MAX {
                    let dp_dvi = p_of_x[i] / vi + y.re * vi;
                    jac[(row_a, na + map.mag_pos[i])] = -dp_dvi;
                }
            } else {
                let vj = state.vm[j];
                if map.ang_pos[j] != usize::MAX {
                    let dp_dtj = vi * vj * (y.re * s - y.im * c);
                    jac[(row_a, map.ang_pos[j])] = -dp_dtj;
                }
                if map.mag_pos[j] != usize::MAX {
                    let dp_dvj = vi * (y.re * c + y.im * s);
                    jac[(row_a, na + map.mag_pos[j])] = -dp_dvj;
                }
            }
        }
    }

    for (row_m, &i) in map.mag_buses.iter().enumerate() {
        let row = na + row_m;
        let vi = state.vm[i];
        for &(j, y) in &adm.rows[i] {
            let tij = state.va[i] - state.va[j];
            let (s, c) = tij.sin_cos();
            if j == i {
                let dq_dti = p_of_x[i] - y.re * vi * vi;
                jac[(row, map.ang_pos[i])] = -dq_dti;
                let dq_dvi = q_of_x[i] / vi - y.im * vi;
                jac[(row, na + map.mag_pos[i])] = -dq_dvi;
            } else {
                let vj = state.vm[j];
                if map.ang_pos[j] != usize::MAX {
                    let dq_dtj = -vi * vj * (y.re * c + y.im * s);
                    jac[(row, map.ang_pos[j])] = -dq_dtj;
                }
                if map.mag_pos[j] != usize::MAX {
                    let dq_dvj = vi * (y.re * s - y.im * c);
                    jac[(row, na + map.mag_pos[j])] = -dq_dvj;
                }
            }
        }
    }
    jac
}

/// Residual vector in unknown ordering.
fn residual(rep: &MismatchReport, map: &UnknownMap) -> DVector<f64> {
    let mut f = DVector::zeros(map.dim());
    for (k, &i) in map.ang_buses.iter().enumerate() {
        f[k] = rep.dp[i];
    }
    let na = map.ang_buses.len();
    for (k, &i) in map.mag_buses.iter().enumerate() {
        f[na + k] = rep.dq[i];
    }
    f
}

/// Convergence measure: max over buses of the complex mismatch
/// restricted to the equations the solver must satisfy.
fn solved_max_ds(rep: &MismatchReport) -> f64 {
    rep.max_ds
}

pub fn initial_state(net: &Network, start: &Start) -> PfState {
    match start {
        Start::Warm(s) => s.clone(),
        Start::Flat => {
            let n = net.n_buses();
            let mut vm = vec![1.0; n];
            let va = vec![0.0; n];
            // Known magnitudes (PV and slack) are inputs, pinned to the
            // generator setpoint.
            for g in net.generators.iter().filter(|g| g.in_service) {
                if net.buses[g.bus].kind != BusKind::Pq {
                    vm[g.bus] = g.vset;
                }
            }
            PfState { vm, va }
        }
    }
}

/// Newton solve against explicit injections (the CPF corrector reuses
/// this entry point with continuation-scaled injections).
pub fn solve_with_injections(
    net: &Network,
    adm: &Admittance,
    inj: &Injections,
    options: &SolveOptions,
) -> Result<SolveOutcome, GridError> {
    let t0 = Instant::now();
    let map = UnknownMap::of(net);
    let mut state = initial_state(net, &options.start);

    let mut rep = mismatch(net, adm, &state, inj)?;
    let mut iterations = 0;
    let mut first_step_norm = 0.0;
    let mut last_step_norm = 0.0;
    let mut failure = None;

    while solved_max_ds(&rep) > options.tol {
        if iterations >= options.max_iter {
            failure = Some(FailureKind::IterationLimit);
            break;
        }
        let jac = jacobian(adm, &state, &map);
        let f = residual(&rep, &map);
        let lu = jac.lu();
        let step = match lu.solve(&(-&f)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                failure = Some(FailureKind::SingularSystem);
                break;
            }
        };
        let norm = step.norm();
        if iterations == 0 {
            first_step_norm = norm;
        }
        last_step_norm = norm;
        let na = map.ang_buses.len();
        for (k, &i) in map.ang_buses.iter().enumerate() {
            state.va[i] += step[k];
        }
        for (k, &i) in map.mag_buses.iter().enumerate() {
            state.vm[i] += step[na + k];
        }
        iterations += 1;
        rep = mismatch(net, adm, &state, inj)?;
        if !rep.max_ds.is_finite() {
            failure = Some(FailureKind::SingularSystem);
            break;
        }
    }

    let converged = failure.is_none() && solved_max_ds(&rep) <= options.tol;
    Ok(SolveOutcome {
        converged,
        failure,
        state,
        iterations,
        final_mismatch: rep,
        wall_time: t0.elapsed().as_secs_f64(),
        first_step_norm,
        last_step_norm,
    })
}

/// Full power-flow solve from the network's scheduled injections.
pub fn solve(net: &Network, options: &SolveOptions) -> Result<SolveOutcome, GridError> {
    let adm = crate::grid::build_admittance(net)?;
    let inj = Injections::scheduled(net);
    solve_with_injections(net, &adm, &inj, options)
}

/// 1-norm condition estimate of the Jacobian; +infinity when exactly
/// singular. Scale-invariant by construction.
pub fn condition_estimate(jac: &DMatrix<f64>) -> f64 {
    let norm1 = matrix_norm1(jac);
    match jac.clone().lu().try_inverse() {
        Some(inv) => norm1 * matrix_norm1(&inv),
        None => f64::INFINITY,
    }
}

fn matrix_norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Stage-(b) completion of a converged solve: slack and PV outputs plus
/// branch flows, all derived analytically from the voltage solution.
#[derive(Debug, Clone)]
pub struct CompletedSolution {
    pub state: PfState,
    /// Net injections P_i(x), Q_i(x) at every bus.
    pub p_net: Vec<f64>,
    pub q_net: Vec<f64>,
    /// Per-bus generation after completion: slack p and PV/slack q
    /// implied by the solution, other values from the schedule.
    pub pg_bus: Vec<f64>,
    pub qg_bus: Vec<f64>,
    pub flows: Vec<crate::grid::BranchFlow>,
}

pub fn complete(net: &Network, adm: &Admittance, state: &PfState) -> Result<CompletedSolution, GridError> {
    let (p_net, q_net) = crate::balance::network_injections(adm, state);
    let (pd, qd) = net.bus_demand();
    let (pg_sched, _) = net.bus_generation();
    let n = net.n_buses();
    let mut pg_bus = vec![0.0; n];
    let mut qg_bus = vec![0.0; n];
    let has_gen: Vec<bool> = {
        let mut v = vec![false; n];
        for g in net.generators.iter().filter(|g| g.in_service) {
            v[g.bus] = true;
        }
        v
    };
    for i in 0..n {
        match net.buses[i].kind {
            BusKind::Slack => {
                pg_bus[i] = p_net[i] + pd[i];
                qg_bus[i] = q_net[i] + qd[i];
            }
            BusKind::Pv => {
                pg_bus[i] = pg_sched[i];
                qg_bus[i] = q_net[i] + qd[i];
            }
            BusKind::Pq => {
                // A PQ bus with an in-service unit keeps its schedule.
                if has_gen[i] {
                    pg_bus[i] = pg_sched[i];
                }
            }
        }
    }
    let flows = crate::grid::branch_flows(net, &state.vm, &state.va)?;
    Ok(CompletedSolution {
        state: state.clone(),
        p_net,
        q_net,
        pg_bus,
        qg_bus,
        flows,
    })
}
