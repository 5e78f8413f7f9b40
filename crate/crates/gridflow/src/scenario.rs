//! Scenario generation: load sampling, topology perturbation, setpoint
//! diversification, solve-and-accept labelling, the post-hoc operating
//! constraint checker, and dataset manifest assembly.
//!
//! Each scenario derives its random stream from (corpus seed, scenario
//! index), so corpora are reproducible independent of worker count.

use crate::balance::Injections;
use crate::caseio::{DatasetManifest, ManifestCell, Provenance, SampleRecord};
use crate::cpf::{self, ContinuationSpec, CpfStatus};
use crate::grid::{connected_components, BusKind, GridError, Network};
use crate::newton::{complete, solve, FailureKind, SolveOptions};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("load polytope is degenerate (no base demand to scale)")]
    DegeneratePolytope,
    #[error("dispatchable capacity {capacity:.4} p.u. cannot meet demand {demand:.4} p.u.")]
    InsufficientCapacity { capacity: f64, demand: f64 },
    #[error("record has {got} live branches, network has {expected}")]
    BranchMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Case(#[from] crate::caseio::CaseError),
    #[error(transparent)]
    Cpf(#[from] crate::cpf::CpfError),
}

// ---------------------------------------------------------------------
// Load sampling
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadMethod {
    /// Independent uniform scaling of each load within +/- 20% of its
    /// base value, power factor held.
    Box,
    /// Hit-and-run walk over the convex set
    /// { pd >= 0, pd <= 2 x base, sum(pd) <= 1.3 x sum(base) },
    /// with per-load power factor drawn uniformly in [0.85, 1.0].
    Polytope,
}

/// Draws one load profile. Returns per-load (pd, qd) aligned with
/// `net.loads`.
pub fn sample_loads(
    net: &Network,
    rng: &mut ChaCha8Rng,
    method: LoadMethod,
) -> Result<Vec<(f64, f64)>, ScenarioError> {
    let base: Vec<(f64, f64)> = net.loads.iter().map(|l| (l.pd, l.qd)).collect();
    match method {
        LoadMethod::Box => Ok(base
            .iter()
            .map(|&(pd, qd)| {
                let f = rng.gen_range(0.8..=1.2);
                (pd * f, qd * f)
            })
            .collect()),
        LoadMethod::Polytope => {
            let base_pd: Vec<f64> = base.iter().map(|b| b.0).collect();
            let total: f64 = base_pd.iter().sum();
            if total <= 0.0 || base_pd.iter().any(|&p| p < 0.0) {
                return Err(ScenarioError::DegeneratePolytope);
            }
            let pd = hit_and_run(&base_pd, total * 1.3, rng, 10 * base_pd.len().max(4));
            Ok(pd
                .into_iter()
                .map(|p| {
                    let pf = rng.gen_range(0.85..=1.0_f64);
                    (p, p * pf.acos().tan())
                })
                .collect())
        }
    }
}

/// Hit-and-run over { 0 <= x_i <= 2 b_i, sum(x) <= cap }, started at b.
fn hit_and_run(base: &[f64], cap: f64, rng: &mut ChaCha8Rng, steps: usize) -> Vec<f64> {
    let n = base.len();
    let mut x: Vec<f64> = base.to_vec();
    for _ in 0..steps {
        // Random direction on the sphere (Box-Muller normals).
        let mut dir: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|d| *d /= norm);

        // Chord limits along the direction from the box and the budget.
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            if dir[i] == 0.0 {
                continue;
            }
            let to_zero = -x[i] / dir[i];
            let to_top = (2.0 * base[i] - x[i]) / dir[i];
            let (a, b) = if dir[i] > 0.0 { (to_zero, to_top) } else { (to_top, to_zero) };
            lo = lo.max(a);
            hi = hi.min(b);
        }
        let ds: f64 = dir.iter().sum();
        if ds != 0.0 {
            let t = (cap - x.iter().sum::<f64>()) / ds;
            if ds > 0.0 {
                hi = hi.min(t);
            } else {
                lo = lo.max(t);
            }
        }
        if lo >= hi {
            continue;
        }
        let t = rng.gen_range(lo..hi);
        for i in 0..n {
            x[i] = (x[i] + t * dir[i]).max(0.0);
        }
    }
    x
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; deterministic stream consumption of exactly two draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------
// Topology perturbation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    RemoveGens,
    RemoveLines,
    RemoveGenAndLine,
    NoRemoval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationEvent {
    pub kind: EventKind,
    pub removed_gens: Vec<usize>,
    pub removed_lines: Vec<usize>,
    /// Set when no legal removal existed and the draw degraded to
    /// NoRemoval.
    pub fallback: bool,
}

impl PerturbationEvent {
    pub fn describe(&self) -> String {
        match self.kind {
            EventKind::NoRemoval => "none".to_string(),
            EventKind::RemoveGens => format!("remove_gens{:?}", self.removed_gens),
            EventKind::RemoveLines => format!("remove_lines{:?}", self.removed_lines),
            EventKind::RemoveGenAndLine => format!(
                "remove_gen{:?}_line{:?}",
                self.removed_gens, self.removed_lines
            ),
        }
    }

    /// "N", "N-1" or "N-2" from the number of removed components.
    pub fn topology_tag(&self) -> String {
        match self.removed_gens.len() + self.removed_lines.len() {
            0 => "N".to_string(),
            k => format!("N-{k}"),
        }
    }
}

fn is_connected(net: &Network) -> bool {
    let labels = connected_components(net);
    labels.iter().all(|&l| l == 0)
}

/// Generators that may be switched off: everything except the last
/// in-service unit at the slack bus.
fn removable_gens(net: &Network) -> Vec<usize> {
    let slack = match net.slack_bus() {
        Some(s) => s,
        None => return Vec::new(),
    };
    let slack_units = net
        .generators
        .iter()
        .filter(|g| g.in_service && g.bus == slack)
        .count();
    net.generators
        .iter()
        .enumerate()
        .filter(|(_, g)| g.in_service && (g.bus != slack || slack_units > 1))
        .map(|(i, _)| i)
        .collect()
}

fn apply_gen_removal(net: &mut Network, gens: &[usize]) {
    for &g in gens {
        net.generators[g].in_service = false;
    }
    // A PV bus that lost its only unit becomes a plain demand bus.
    for i in 0..net.n_buses() {
        if net.buses[i].kind == BusKind::Pv
            && !net.generators.iter().any(|g| g.in_service && g.bus == i)
        {
            net.buses[i].kind = BusKind::Pq;
        }
    }
}

/// Applies one of four equally probable perturbation events. Draws that
/// would island the network or strip the slack bus of generation are
/// resampled within the same event kind, so the kind frequencies stay
/// uniform.
pub fn perturb_topology(net: &Network, rng: &mut ChaCha8Rng) -> (Network, PerturbationEvent) {
    let kind = match rng.gen_range(0..4u8) {
        0 => EventKind::RemoveGens,
        1 => EventKind::RemoveLines,
        2 => EventKind::RemoveGenAndLine,
        _ => EventKind::NoRemoval,
    };
    let fallback_event = |fallback: bool| PerturbationEvent {
        kind: if fallback { EventKind::NoRemoval } else { kind },
        removed_gens: Vec::new(),
        removed_lines: Vec::new(),
        fallback,
    };
    if kind == EventKind::NoRemoval {
        return (net.clone(), fallback_event(false));
    }

    let live_lines: Vec<usize> = net
        .branches
        .iter()
        .enumerate()
        .filter(|(_, b)| b.in_service)
        .map(|(i, _)| i)
        .collect();

    for _ in 0..200 {
        let mut cand = net.clone();
        let mut removed_gens = Vec::new();
        let mut removed_lines = Vec::new();

        match kind {
            EventKind::RemoveGens | EventKind::RemoveGenAndLine => {
                let count = if kind == EventKind::RemoveGenAndLine {
                    1
                } else {
                    rng.gen_range(1..=2usize)
                };
                let pool = removable_gens(&cand);
                if pool.len() < count {
                    continue;
                }
                removed_gens = pool
                    .choose_multiple(rng, count)
                    .copied()
                    .collect::<Vec<_>>();
                removed_gens.sort_unstable();
                apply_gen_removal(&mut cand, &removed_gens);
            }
            _ => {}
        }
        match kind {
            EventKind::RemoveLines | EventKind::RemoveGenAndLine => {
                let count = if kind == EventKind::RemoveGenAndLine {
                    1
                } else {
                    rng.gen_range(1..=2usize)
                };
                if live_lines.len() < count {
                    continue;
                }
                removed_lines = live_lines
                    .choose_multiple(rng, count)
                    .copied()
                    .collect::<Vec<_>>();
                removed_lines.sort_unstable();
                for &l in &removed_lines {
                    cand.branches[l].in_service = false;
                }
            }
            _ => {}
        }

        // Invariants: still connected, slack still generating, and at
        // least one in-service unit somewhere.
        if !is_connected(&cand) {
            continue;
        }
        let slack = match cand.slack_bus() {
            Some(s) => s,
            None => continue,
        };
        if !cand.generators.iter().any(|g| g.in_service && g.bus == slack) {
            continue;
        }
        return (
            cand,
            PerturbationEvent {
                kind,
                removed_gens,
                removed_lines,
                fallback: false,
            },
        );
    }
    // No legal removal of this kind exists (e.g. a radial 2-bus net).
    (net.clone(), fallback_event(true))
}

// ---------------------------------------------------------------------
// Setpoint diversification
// ---------------------------------------------------------------------

/// Margin over total demand covered by the dispatch, absorbing losses.
const DISPATCH_MARGIN: f64 = 1.03;

/// Re-dispatches in-service generators by a randomly permuted merit
/// order and draws fresh voltage setpoints. Mutates `net` in place.
pub fn diversify_setpoints(net: &mut Network, rng: &mut ChaCha8Rng) -> Result<(), ScenarioError> {
    let (pd, _) = net.bus_demand();
    let demand: f64 = pd.iter().sum::<f64>() * DISPATCH_MARGIN;

    let live: Vec<usize> = net
        .generators
        .iter()
        .enumerate()
        .filter(|(_, g)| g.in_service)
        .map(|(i, _)| i)
        .collect();
    let capacity: f64 = live.iter().map(|&i| net.generators[i].pmax).sum();
    if capacity < demand {
        return Err(ScenarioError::InsufficientCapacity { capacity, demand });
    }

    // Random merit order: each unit starts at its minimum, then the
    // remaining need is filled unit by unit in permuted order.
    let mut order = live.clone();
    order.shuffle(rng);
    let floor: f64 = live
        .iter()
        .map(|&i| net.generators[i].pmin.max(0.0))
        .sum();
    let mut remaining = (demand - floor).max(0.0);
    for &i in &live {
        let g = &mut net.generators[i];
        g.pg = g.pmin.max(0.0);
    }
    for &i in &order {
        let g = &mut net.generators[i];
        let room = (g.pmax - g.pg).max(0.0);
        let add = remaining.min(room);
        g.pg += add;
        remaining -= add;
    }

    // One setpoint per generating bus, shared by co-located units.
    let mut buses: Vec<usize> = live.iter().map(|&i| net.generators[i].bus).collect();
    buses.sort_unstable();
    buses.dedup();
    for bus in buses {
        let lo = net.buses[bus].vmin.max(0.95);
        let hi = net.buses[bus].vmax.min(1.1);
        let vset = if lo < hi { rng.gen_range(lo..hi) } else { lo };
        for g in net.generators.iter_mut().filter(|g| g.in_service) {
            if g.bus == bus {
                g.vset = vset;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub seed: u64,
    pub event: String,
    pub reason: String,
}

#[derive(Debug)]
pub enum GenOutcome {
    Accepted(Box<SampleRecord>),
    Rejected(Rejection),
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    pub method: LoadMethod,
    pub tol: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            method: LoadMethod::Box,
            tol: 1e-8,
        }
    }
}

/// Per-scenario seed derived from the corpus seed and scenario index
/// (SplitMix64 finalizer, so neighbouring indices decorrelate).
pub fn scenario_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(0x94d049bb133111eb);
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}

/// One pass of the single-sample workflow: perturb topology, draw a
/// load profile, re-dispatch, solve, and accept only converged cases.
pub fn generate_sample(
    base_net: &Network,
    seed: u64,
    options: &GenerateOptions,
) -> Result<GenOutcome, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut net, event) = perturb_topology(base_net, &mut rng);

    let profile = sample_loads(&net, &mut rng, options.method)?;
    for (l, (pd, qd)) in net.loads.iter_mut().zip(&profile) {
        l.pd = *pd;
        l.qd = *qd;
    }

    if let Err(e) = diversify_setpoints(&mut net, &mut rng) {
        return Ok(GenOutcome::Rejected(Rejection {
            seed,
            event: event.describe(),
            reason: e.to_string(),
        }));
    }

    let opts = SolveOptions {
        tol: options.tol,
        ..Default::default()
    };
    let out = solve(&net, &opts)?;
    if !out.converged {
        let reason = match out.failure {
            Some(FailureKind::IterationLimit) => "iteration limit".to_string(),
            Some(FailureKind::SingularSystem) => "singular system".to_string(),
            None => "not converged".to_string(),
        };
        return Ok(GenOutcome::Rejected(Rejection {
            seed,
            event: event.describe(),
            reason,
        }));
    }

    let adm = crate::grid::build_admittance(&net)?;
    let sol = complete(&net, &adm, &out.state)?;
    let record = crate::caseio::write_sample(
        &net,
        &sol,
        Provenance {
            seed,
            event: event.describe(),
            regime: "feasible".to_string(),
            topology: event.topology_tag(),
        },
    )?;

    // Acceptance is definitional: a record is only emitted when its
    // solution satisfies the enforced operating constraints. The dispatch
    // targets demand plus a fixed loss margin, so the slack occasionally
    // lands slightly negative; those draws are rejected here.
    let accept_tol = (options.tol * 100.0).max(1e-6);
    let report = check_constraints(&net, &record, accept_tol)?;
    if !report.pass {
        let worst = report
            .residuals
            .iter()
            .filter(|r| r.severity == Severity::Enforced && r.residual > accept_tol)
            .max_by(|a, b| a.residual.total_cmp(&b.residual))
            .map(|r| format!("{} ({:.3e})", r.tag, r.residual))
            .unwrap_or_else(|| "enforced constraint".to_string());
        return Ok(GenOutcome::Rejected(Rejection {
            seed,
            event: event.describe(),
            reason: format!("constraint violation: {worst}"),
        }));
    }
    Ok(GenOutcome::Accepted(Box::new(record)))
}

/// Network with demand and non-slack generation scaled by `s` (the
/// operating condition at continuation position lambda, where
/// s = 1 + lambda * (mult - 1)).
fn scaled_network(net: &Network, s: f64) -> Network {
    let slack = net.slack_bus();
    let mut out = net.clone();
    for l in &mut out.loads {
        l.pd *= s;
        l.qd *= s;
    }
    for g in &mut out.generators {
        if g.in_service && Some(g.bus) != slack {
            g.pg *= s;
        }
    }
    out
}

/// Stressed counterparts of a feasible scenario: traces the loadability
/// curve towards `mult` x the scenario's injections and lifts the nose
/// point (close-to-infeasible) plus up to four predecessors
/// (approaching-infeasible). Returns an empty vector when the trace
/// reaches the target without finding a nose.
pub fn generate_stressed(
    base_net: &Network,
    seed: u64,
    options: &GenerateOptions,
    mult: f64,
) -> Result<Vec<SampleRecord>, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut net, event) = perturb_topology(base_net, &mut rng);
    let profile = sample_loads(&net, &mut rng, options.method)?;
    for (l, (pd, qd)) in net.loads.iter_mut().zip(&profile) {
        l.pd = *pd;
        l.qd = *qd;
    }
    if diversify_setpoints(&mut net, &mut rng).is_err() {
        return Ok(Vec::new());
    }

    let base_inj = Injections::scheduled(&net);
    let target_inj = Injections::scheduled(&scaled_network(&net, mult));
    let mut spec = ContinuationSpec::new(base_inj, target_inj);
    spec.max_lambda = None;
    spec.corrector_tol = options.tol;
    let path = cpf::trace(&net, &spec)?;
    if path.status != CpfStatus::NoseFound {
        return Ok(Vec::new());
    }
    let extraction = cpf::extract_cases(&spec, &path, 5);

    let mut records = Vec::new();
    let last = extraction.cases.len() - 1;
    for (k, case) in extraction.cases.iter().enumerate() {
        let s = 1.0 + case.lambda * (mult - 1.0);
        let scaled = scaled_network(&net, s);
        let adm = crate::grid::build_admittance(&scaled)?;
        let sol = complete(&scaled, &adm, &case.state)?;
        let regime = if k == last {
            "close_to_infeasible"
        } else {
            "approaching_infeasible"
        };
        records.push(crate::caseio::write_sample(
            &scaled,
            &sol,
            Provenance {
                seed,
                event: format!("{}+lambda{:.6}", event.describe(), case.lambda),
                regime: regime.to_string(),
                topology: event.topology_tag(),
            },
        )?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------
// Operating-constraint checker
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    /// Counted towards the pass flag.
    Enforced,
    /// Reported only: limits the sampling formulation deliberately
    /// relaxes (reactive generation, PQ voltage bands, branch ratings).
    Informational,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub tag: String,
    pub severity: Severity,
    /// Worst violation magnitude; 0 when satisfied.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationReport {
    pub residuals: Vec<ConstraintResidual>,
    pub worst_enforced: f64,
    pub pass: bool,
}

impl ViolationReport {
    pub fn residual(&self, tag: &str) -> f64 {
        self.residuals
            .iter()
            .find(|r| r.tag == tag)
            .map_or(0.0, |r| r.residual)
    }
}

/// Evaluates the operating constraints of a record against its network.
/// This is a formula path independent of the solver: flows and balances
/// are recomputed directly from the record's branch attributes and
/// voltages.
pub fn check_constraints(
    net: &Network,
    record: &SampleRecord,
    tol: f64,
) -> Result<ViolationReport, ScenarioError> {
    let n = record.bus.x.len();
    let live: Vec<&crate::grid::Branch> =
        net.branches.iter().filter(|b| b.in_service).collect();
    let ne = record.branch.edge_index[0].len();
    if live.len() != ne {
        return Err(ScenarioError::BranchMismatch {
            expected: live.len(),
            got: ne,
        });
    }

    let vm: Vec<f64> = record.bus.bus_voltages.iter().map(|v| v[1]).collect();
    let va: Vec<f64> = record.bus.bus_voltages.iter().map(|v| v[0]).collect();

    // Recomputed branch flows from the stored attributes alone.
    let mut flows = Vec::with_capacity(ne);
    for k in 0..ne {
        let a = &record.branch.edge_attr[k];
        let (f, t) = (record.branch.edge_index[0][k], record.branch.edge_index[1][k]);
        let ys = Complex64::new(a[0], a[1]).inv();
        let ysh_f = Complex64::new(a[2], a[3]);
        let ysh_t = Complex64::new(a[4], a[5]);
        let tap = Complex64::from_polar(a[6], a[7].to_radians());
        let vf = Complex64::from_polar(vm[f], va[f]);
        let vt = Complex64::from_polar(vm[t], va[t]);
        let yff = (ys + ysh_f) / (a[6] * a[6]);
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;
        let ytt = ys + ysh_t;
        let sf = vf * (yff * vf + yft * vt).conj();
        let st = vt * (ytf * vf + ytt * vt).conj();
        flows.push((sf, st));
    }

    let mut residuals = Vec::new();
    let mut push = |tag: &str, severity: Severity, residual: f64| {
        residuals.push(ConstraintResidual {
            tag: tag.to_string(),
            severity,
            residual,
        });
    };

    let slack_idx = record
        .bus
        .bus_type
        .iter()
        .position(|&t| t == 3)
        .unwrap_or(0);

    // Slack active generation must be non-negative.
    let slack_pg: f64 = record
        .gen
        .generation
        .iter()
        .zip(&record.gen.slack_gen)
        .filter(|(_, &s)| s == 1)
        .map(|(g, _)| g[0])
        .sum();
    push("slack_pg_nonneg", Severity::Enforced, (-slack_pg).max(0.0));

    // Active setpoints within capability at non-slack units.
    let mut pg_resid: f64 = 0.0;
    let mut qg_resid: f64 = 0.0;
    for (k, g) in record.gen.generation.iter().enumerate() {
        let lim = &record.gen.limits[k];
        if record.gen.slack_gen[k] == 0 {
            pg_resid = pg_resid.max(lim[0] - g[0]).max(g[0] - lim[1]);
        }
        qg_resid = qg_resid.max(lim[2] - g[1]).max(g[1] - lim[3]);
    }
    push("pg_limits", Severity::Enforced, pg_resid.max(0.0));
    push("qg_limits", Severity::Informational, qg_resid.max(0.0));

    // Voltage bands: enforced where the magnitude is an input (PV and
    // slack buses), informational at PQ buses; non-negative everywhere.
    let mut vm_pv_resid: f64 = 0.0;
    let mut vm_pq_resid: f64 = 0.0;
    let mut vm_neg: f64 = 0.0;
    for i in 0..n {
        let lim = &record.bus.limits[i];
        let over = (lim[0] - vm[i]).max(vm[i] - lim[1]).max(0.0);
        if record.bus.bus_type[i] == 1 {
            vm_pq_resid = vm_pq_resid.max(over);
        } else {
            vm_pv_resid = vm_pv_resid.max(over);
        }
        vm_neg = vm_neg.max(-vm[i]);
    }
    push("vm_bounds_pv_slack", Severity::Enforced, vm_pv_resid);
    push("vm_nonneg", Severity::Enforced, vm_neg.max(0.0));
    push("vm_bounds_pq", Severity::Informational, vm_pq_resid);

    // Reference angle pinned to zero.
    push("slack_angle_zero", Severity::Enforced, va[slack_idx].abs());

    // Angle-difference limits from the network's live branches.
    let mut ang_resid: f64 = 0.0;
    for (k, br) in live.iter().enumerate() {
        let f = record.branch.edge_index[0][k];
        let t = record.branch.edge_index[1][k];
        let d = va[f] - va[t];
        ang_resid = ang_resid.max(br.angmin - d).max(d - br.angmax);
    }
    push("angle_diff_limits", Severity::Enforced, ang_resid.max(0.0));

    // Nodal balance: generation - demand - shunt - outgoing flows.
    let mut p_resid: f64 = 0.0;
    let mut q_resid: f64 = 0.0;
    let mut p_out = vec![0.0; n];
    let mut q_out = vec![0.0; n];
    for k in 0..ne {
        let (f, t) = (record.branch.edge_index[0][k], record.branch.edge_index[1][k]);
        p_out[f] += flows[k].0.re;
        q_out[f] += flows[k].0.im;
        p_out[t] += flows[k].1.re;
        q_out[t] += flows[k].1.im;
    }
    for i in 0..n {
        let v2 = vm[i] * vm[i];
        let dp = record.bus.bus_gen[i][0]
            - record.bus.bus_demand[i][0]
            - record.bus.shunt[i][0] * v2
            - p_out[i];
        let dq = record.bus.bus_gen[i][1] - record.bus.bus_demand[i][1]
            + record.bus.shunt[i][1] * v2
            - q_out[i];
        p_resid = p_resid.max(dp.abs());
        q_resid = q_resid.max(dq.abs());
    }
    push("p_balance", Severity::Enforced, p_resid);
    push("q_balance", Severity::Enforced, q_resid);

    // Stored labels must reproduce the recomputed flows.
    let mut flow_resid: f64 = 0.0;
    for (k, lbl) in record.branch.edge_label.iter().enumerate() {
        flow_resid = flow_resid
            .max((lbl[0] - flows[k].0.re).abs())
            .max((lbl[1] - flows[k].0.im).abs())
            .max((lbl[2] - flows[k].1.re).abs())
            .max((lbl[3] - flows[k].1.im).abs());
    }
    push("flow_consistency", Severity::Enforced, flow_resid);

    // Apparent-power ratings, where defined.
    let mut rating_resid: f64 = 0.0;
    for (k, lim) in record.branch.edge_limits.iter().enumerate() {
        if lim[0] > 0.0 {
            let s = flows[k].0.norm().max(flows[k].1.norm());
            rating_resid = rating_resid.max(s - lim[0]);
        }
    }
    push("branch_ratings", Severity::Informational, rating_resid.max(0.0));

    let worst_enforced = residuals
        .iter()
        .filter(|r| r.severity == Severity::Enforced)
        .map(|r| r.residual)
        .fold(0.0, f64::max);
    Ok(ViolationReport {
        pass: worst_enforced <= tol,
        worst_enforced,
        residuals,
    })
}

// ---------------------------------------------------------------------
// Manifest assembly
// ---------------------------------------------------------------------

/// Corpus catalogue entry used when assembling task manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: String,
    pub regime: String,
    pub topology: String,
    pub split: String,
}

pub const TASK_IDS: [&str; 12] = [
    "1.1", "1.2", "1.3", "2.1", "2.2", "2.3", "3.1", "3.2", "3.3", "4.1", "4.2", "4.3",
];

struct TaskRecipe {
    train_topologies: &'static [&'static str],
    /// (regime, total train count across topologies)
    train_mix: &'static [(&'static str, usize)],
}

fn task_recipe(task: &str) -> Option<TaskRecipe> {
    let all: &[&str] = &["N", "N-1", "N-2"];
    let feas = |n: usize| -> &'static [(&'static str, usize)] {
        match n {
            54000 => &[("feasible", 54000)],
            36000 => &[("feasible", 36000)],
            18000 => &[("feasible", 18000)],
            _ => unreachable!(),
        }
    };
    Some(match task {
        "1.1" => TaskRecipe {
            train_topologies: &["N"],
            train_mix: feas(54000),
        },
        "1.2" => TaskRecipe {
            train_topologies: &["N", "N-1"],
            train_mix: feas(54000),
        },
        "1.3" | "2.1" | "3.1" | "3.2" | "3.3" => TaskRecipe {
            train_topologies: all,
            train_mix: feas(54000),
        },
        "2.2" => TaskRecipe {
            train_topologies: all,
            train_mix: feas(36000),
        },
        "2.3" => TaskRecipe {
            train_topologies: all,
            train_mix: feas(18000),
        },
        "4.1" => TaskRecipe {
            train_topologies: all,
            train_mix: &[("feasible", 48600), ("close_to_infeasible", 5400)],
        },
        "4.2" => TaskRecipe {
            train_topologies: all,
            train_mix: &[
                ("feasible", 27000),
                ("close_to_infeasible", 5400),
                ("approaching_infeasible", 21600),
            ],
        },
        "4.3" => TaskRecipe {
            train_topologies: all,
            train_mix: &[
                ("close_to_infeasible", 10800),
                ("approaching_infeasible", 43200),
            ],
        },
        _ => return None,
    })
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("unknown task id '{0}'; valid ids: {}", TASK_IDS.join(", "))]
    UnknownTask(String),
    #[error("scale factor must be positive, got {0}")]
    BadScale(f64),
}

/// Test-side counts per topology, fixed across all tasks.
const TEST_FEASIBLE_PER_TOPOLOGY: usize = 2000;
const TEST_CLOSE_PER_TOPOLOGY: usize = 200;

/// Assembles the train/test file lists for one benchmark task id,
/// preserving its regime/topology mix at any corpus scale.
pub fn build_manifest(
    corpus: &[CorpusEntry],
    task: &str,
    scale: f64,
) -> Result<DatasetManifest, ManifestError> {
    let recipe = task_recipe(task).ok_or_else(|| ManifestError::UnknownTask(task.to_string()))?;
    if !(scale > 0.0) {
        return Err(ManifestError::BadScale(scale));
    }

    let mut cells = Vec::new();
    let n_topo = recipe.train_topologies.len();
    for &(regime, total) in recipe.train_mix {
        let per_topology = total as f64 / n_topo as f64;
        for &topo in recipe.train_topologies {
            cells.push(make_cell(corpus, regime, topo, "train", per_topology * scale));
        }
    }
    for &topo in ["N", "N-1", "N-2"].iter() {
        cells.push(make_cell(
            corpus,
            "feasible",
            topo,
            "test",
            TEST_FEASIBLE_PER_TOPOLOGY as f64 * scale,
        ));
        cells.push(make_cell(
            corpus,
            "close_to_infeasible",
            topo,
            "test",
            TEST_CLOSE_PER_TOPOLOGY as f64 * scale,
        ));
    }
    Ok(DatasetManifest {
        task: task.to_string(),
        scale,
        cells,
    })
}

fn make_cell(
    corpus: &[CorpusEntry],
    regime: &str,
    topology: &str,
    split: &str,
    required: f64,
) -> ManifestCell {
    let required = required.round() as usize;
    let paths: Vec<String> = corpus
        .iter()
        .filter(|e| e.regime == regime && e.topology == topology && e.split == split)
        .take(required)
        .map(|e| e.path.clone())
        .collect();
    ManifestCell {
        regime: regime.to_string(),
        topology: topology.to_string(),
        split: split.to_string(),
        required,
        shortfall: required - paths.len(),
        paths,
    }
}
