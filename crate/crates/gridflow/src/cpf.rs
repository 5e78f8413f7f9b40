//! Continuation power flow: traces the solution branch from a base
//! operating point towards a target injection profile until either the
//! target is reached or the voltage-stability nose is hit.
//!
//! The continuation parameter lambda blends scheduled injections as
//! s(lambda) = s_base + lambda * (s_target - s_base). Prediction uses
//! the tangent of the augmented system; correction re-solves the plain
//! power flow at fixed lambda from the predicted state, so the traced
//! branch is always a genuine solution of the balance equations.

use crate::balance::{Injections, PfState};
use crate::grid::{GridError, Network};
use crate::newton::{
    condition_estimate, jacobian, solve_with_injections, SolveOptions, Start, UnknownMap,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CpfError {
    #[error("base and target schedules are identical: nothing to continue")]
    DegenerateDirection,
    #[error("base and target schedules disagree on which equations are active at bus {0}")]
    MismatchedPattern(usize),
    #[error("injection vectors have {got} buses, network has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone)]
pub struct ContinuationSpec {
    pub base: Injections,
    pub target: Injections,
    /// First predictor step in arc length.
    pub initial_step: f64,
    /// Below this step the corrector failure is declared the nose.
    pub min_step: f64,
    pub max_step: f64,
    pub corrector_tol: f64,
    /// Stop once lambda reaches this value; `None` continues past the
    /// target direction until the nose itself.
    pub max_lambda: Option<f64>,
    /// Safety bound on accepted points.
    pub max_points: usize,
}

impl ContinuationSpec {
    pub fn new(base: Injections, target: Injections) -> ContinuationSpec {
        ContinuationSpec {
            base,
            target,
            initial_step: 0.1,
            min_step: 1e-4,
            max_step: 0.1,
            corrector_tol: 1e-8,
            max_lambda: Some(1.0),
            max_points: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpfStatus {
    /// The corrector kept failing at the minimum step: the last accepted
    /// point sits at the loadability limit.
    NoseFound,
    /// Lambda reached `max_lambda` with a converged solution.
    TargetReached,
    /// The base case itself did not solve.
    Failed,
}

#[derive(Debug, Clone)]
pub struct CpfPoint {
    pub lambda: f64,
    pub state: PfState,
    /// 1-norm condition estimate of the power-flow Jacobian here.
    pub condition: f64,
}

#[derive(Debug, Clone)]
pub struct CpfPath {
    pub points: Vec<CpfPoint>,
    pub status: CpfStatus,
    /// Index into `points` of the nose (last accepted point) when
    /// status is `NoseFound`.
    pub nose_index: Option<usize>,
}

impl CpfPath {
    /// Condition estimates along the path, in step order.
    pub fn condition_trace(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.condition).collect()
    }

    /// Tab-separated table of (lambda, min |v|, condition) per point.
    pub fn to_table(&self) -> String {
        let mut out = String::from("lambda\tvm_min\tcondition\n");
        for p in &self.points {
            let vmin = p.state.vm.iter().cloned().fold(f64::INFINITY, f64::min);
            out.push_str(&format!("{:.6}\t{:.6}\t{:.6e}\n", p.lambda, vmin, p.condition));
        }
        out
    }
}

/// Scheduled injections at a blend position.
pub fn injections_at(spec: &ContinuationSpec, lambda: f64) -> Injections {
    let blend = |b: &Option<f64>, t: &Option<f64>| match (b, t) {
        (Some(b), Some(t)) => Some(b + lambda * (t - b)),
        _ => None,
    };
    Injections {
        p: spec
            .base
            .p
            .iter()
            .zip(&spec.target.p)
            .map(|(b, t)| blend(b, t))
            .collect(),
        q: spec
            .base
            .q
            .iter()
            .zip(&spec.target.q)
            .map(|(b, t)| blend(b, t))
            .collect(),
    }
}

fn validate_spec(net: &Network, spec: &ContinuationSpec) -> Result<(), CpfError> {
    let n = net.n_buses();
    for v in [&spec.base.p, &spec.base.q, &spec.target.p, &spec.target.q] {
        if v.len() != n {
            return Err(CpfError::Dimension {
                expected: n,
                got: v.len(),
            });
        }
    }
    let mut any = false;
    for i in 0..n {
        for (b, t) in [
            (&spec.base.p[i], &spec.target.p[i]),
            (&spec.base.q[i], &spec.target.q[i]),
        ] {
            match (b, t) {
                (Some(b), Some(t)) => {
                    if (t - b).abs() > 0.0 {
                        any = true;
                    }
                }
                (None, None) => {}
                _ => return Err(CpfError::MismatchedPattern(i)),
            }
        }
    }
    if !any {
        return Err(CpfError::DegenerateDirection);
    }
    Ok(())
}

/// Direction of the residual with respect to lambda, in unknown/row
/// ordering (active rows first, then reactive rows at PQ buses).
fn lambda_direction(spec: &ContinuationSpec, map: &UnknownMap) -> DVector<f64> {
    let mut d = DVector::zeros(map.dim());
    for (k, &i) in map.ang_buses.iter().enumerate() {
        if let (Some(b), Some(t)) = (spec.base.p[i], spec.target.p[i]) {
            d[k] = t - b;
        }
    }
    let na = map.ang_buses.len();
    for (k, &i) in map.mag_buses.iter().enumerate() {
        if let (Some(b), Some(t)) = (spec.base.q[i], spec.target.q[i]) {
            d[na + k] = t - b;
        }
    }
    d
}

fn apply_step(state: &mut PfState, map: &UnknownMap, dx: &DVector<f64>, h: f64) {
    let na = map.ang_buses.len();
    for (k, &i) in map.ang_buses.iter().enumerate() {
        state.va[i] += h * dx[k];
    }
    for (k, &i) in map.mag_buses.iter().enumerate() {
        state.vm[i] += h * dx[na + k];
    }
}

/// Traces the continuation path. Step control doubles the arc step after
/// three consecutive corrector successes, halves it on failure, and
/// declares the nose when a failure occurs at the minimum step.
pub fn trace(net: &Network, spec: &ContinuationSpec) -> Result<CpfPath, CpfError> {
    validate_spec(net, spec)?;
    let adm = crate::grid::build_admittance(net)?;
    let map = UnknownMap::of(net);
    let d = lambda_direction(spec, &map);

    let base_opts = SolveOptions {
        tol: spec.corrector_tol,
        max_iter: 30,
        start: Start::Flat,
    };
    let base = solve_with_injections(net, &adm, &injections_at(spec, 0.0), &base_opts)?;
    if !base.converged {
        return Ok(CpfPath {
            points: Vec::new(),
            status: CpfStatus::Failed,
            nose_index: None,
        });
    }

    let point_of = |lambda: f64, state: &PfState| -> CpfPoint {
        let jac = jacobian(&adm, state, &map);
        CpfPoint {
            lambda,
            state: state.clone(),
            condition: condition_estimate(&jac),
        }
    };

    let mut points = vec![point_of(0.0, &base.state)];
    let mut lambda = 0.0;
    let mut state = base.state;
    let mut h = spec.initial_step.clamp(spec.min_step, spec.max_step);
    let mut successes = 0usize;

    let corrector_opts = |warm: PfState| SolveOptions {
        tol: spec.corrector_tol,
        max_iter: 15,
        start: Start::Warm(warm),
    };

    while points.len() < spec.max_points {
        if let Some(maxl) = spec.max_lambda {
            if lambda >= maxl {
                return Ok(CpfPath {
                    points,
                    status: CpfStatus::TargetReached,
                    nose_index: None,
                });
            }
        }

        // Tangent predictor: J dx + d dlambda = 0 with dlambda = 1,
        // normalized over the augmented (dx, dlambda) vector.
        let jac = jacobian(&adm, &state, &map);
        let tangent = jac.clone().lu().solve(&(-&d));
        let (dx, dlam) = match tangent {
            Some(t) if t.iter().all(|v| v.is_finite()) => {
                let scale = (t.norm_squared() + 1.0).sqrt();
                (t / scale, 1.0 / scale)
            }
            _ => {
                // Singular Jacobian on the branch: the current point is
                // the best available nose estimate.
                let nose_index = Some(points.len() - 1);
                return Ok(CpfPath {
                    points,
                    status: CpfStatus::NoseFound,
                    nose_index,
                });
            }
        };

        let mut next_lambda = lambda + h * dlam;
        let mut step = h;
        if let Some(maxl) = spec.max_lambda {
            if next_lambda > maxl {
                step = (maxl - lambda) / dlam;
                next_lambda = maxl;
            }
        }
        let mut predicted = state.clone();
        apply_step(&mut predicted, &map, &dx, step);

        let inj = injections_at(spec, next_lambda);
        let out = solve_with_injections(net, &adm, &inj, &corrector_opts(predicted))?;
        if out.converged {
            lambda = next_lambda;
            state = out.state;
            points.push(point_of(lambda, &state));
            successes += 1;
            if successes >= 3 {
                h = (h * 2.0).min(spec.max_step);
                successes = 0;
            }
        } else {
            successes = 0;
            if h <= spec.min_step {
                let nose_index = Some(points.len() - 1);
                return Ok(CpfPath {
                    points,
                    status: CpfStatus::NoseFound,
                    nose_index,
                });
            }
            h = (h / 2.0).max(spec.min_step);
        }
    }

    // Point budget exhausted without hitting the nose or the target.
    Ok(CpfPath {
        points,
        status: CpfStatus::Failed,
        nose_index: None,
    })
}

/// A solved operating point lifted off the continuation path.
#[derive(Debug, Clone)]
pub struct ExtractedCase {
    pub lambda: f64,
    pub injections: Injections,
    pub state: PfState,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    /// Cases ordered from deepest pre-nose point to the nose itself.
    pub cases: Vec<ExtractedCase>,
    /// True when the path held fewer points than requested.
    pub truncated: bool,
}

/// Lifts the nose point plus the `count - 1` points preceding it (or the
/// tail of the path when no nose was found).
pub fn extract_cases(spec: &ContinuationSpec, path: &CpfPath, count: usize) -> Extraction {
    let end = match path.nose_index {
        Some(i) => i + 1,
        None => path.points.len(),
    };
    let start = end.saturating_sub(count);
    let cases = path.points[start..end]
        .iter()
        .map(|p| ExtractedCase {
            lambda: p.lambda,
            injections: injections_at(spec, p.lambda),
            state: p.state.clone(),
        })
        .collect::<Vec<_>>();
    Extraction {
        truncated: cases.len() < count,
        cases,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, BusKind, Generator, Load};
    use crate::newton::solve_with_injections;
    use std::f64::consts::TAU;

    /// Lossless 2-bus feeder: slack at fixed 1.0 p.u. feeding one PQ
    /// load over a pure reactance.
    fn feeder(x: f64, pd: f64) -> Network {
        Network {
            base_mva: 100.0,
            buses: vec![
                Bus { kind: BusKind::Slack, gs: 0.0, bs: 0.0, vmin: 0.9, vmax: 1.1 },
                Bus { kind: BusKind::Pq, gs: 0.0, bs: 0.0, vmin: 0.9, vmax: 1.1 },
            ],
            generators: vec![Generator {
                bus: 0, pg: 0.0, qg: 0.0, pmin: 0.0, pmax: 10.0,
                qmin: -10.0, qmax: 10.0, vset: 1.0,
                cost_a: 0.0, cost_b: 1.0, in_service: true,
            }],
            loads: vec![Load { bus: 1, pd, qd: 0.0 }],
            branches: vec![Branch {
                from: 0, to: 1, r: 0.0, x, b_charging: 0.0, tap: 1.0,
                shift: 0.0, rate: 0.0, angmin: -TAU, angmax: TAU, in_service: true,
            }],
            ext_bus_ids: vec![1, 2],
        }
    }

    fn feeder_spec(x: f64, base_pd: f64, target_pd: f64) -> (Network, ContinuationSpec) {
        let net = feeder(x, base_pd);
        let base = Injections::scheduled(&net);
        let target_net = feeder(x, target_pd);
        let target = Injections::scheduled(&target_net);
        (net, ContinuationSpec::new(base, target))
    }

    /// Brute-force loadability oracle: bisection on the largest load the
    /// plain solver still converges for from a flat start.
    fn bisect_loadability(x: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 4.0_f64);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let net = feeder(x, mid);
            let out = crate::newton::solve(&net, &Default::default()).unwrap();
            if out.converged {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn nose_matches_analytic_limit() {
        // Unit-voltage lossless feeder noses at p = v^2 / (2x).
        let x = 0.5;
        let analytic = 1.0 / (2.0 * x);
        let oracle = bisect_loadability(x);
        assert!((oracle - analytic).abs() / analytic < 0.02, "oracle {oracle}");

        let (net, mut spec) = feeder_spec(x, 0.1, 2.0);
        spec.max_lambda = None;
        let path = trace(&net, &spec).unwrap();
        assert_eq!(path.status, CpfStatus::NoseFound);
        let nose = &path.points[path.nose_index.unwrap()];
        let p_at_nose = 0.1 + nose.lambda * (2.0 - 0.1);
        assert!(
            (p_at_nose - analytic).abs() / analytic < 0.01,
            "nose load {p_at_nose}, analytic {analytic}"
        );
        // Low-voltage check: the nose of this feeder sits at v = 1/sqrt(2).
        let v_nose = nose.state.vm[1];
        assert!((v_nose - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05, "v {v_nose}");
    }

    #[test]
    fn condition_spikes_at_nose() {
        let (net, mut spec) = feeder_spec(0.5, 0.1, 2.0);
        spec.max_lambda = None;
        let path = trace(&net, &spec).unwrap();
        let trace_vals = path.condition_trace();
        let at_nose = *trace_vals.last().unwrap();
        let mut sorted = trace_vals.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!(
            at_nose > 10.0 * median,
            "condition at nose {at_nose}, median {median}"
        );
    }

    #[test]
    fn modest_target_is_reached() {
        let (net, spec) = feeder_spec(0.5, 0.1, 0.5);
        let path = trace(&net, &spec).unwrap();
        assert_eq!(path.status, CpfStatus::TargetReached);
        let last = path.points.last().unwrap();
        assert!((last.lambda - 1.0).abs() < 1e-12);
        // The endpoint solves the target schedule exactly.
        let adm = crate::grid::build_admittance(&net).unwrap();
        let out = solve_with_injections(
            &net,
            &adm,
            &injections_at(&spec, 1.0),
            &SolveOptions {
                start: Start::Warm(last.state.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn lambda_increases_monotonically() {
        let (net, mut spec) = feeder_spec(0.5, 0.1, 2.0);
        spec.max_lambda = None;
        let path = trace(&net, &spec).unwrap();
        for w in path.points.windows(2) {
            assert!(w[1].lambda > w[0].lambda);
        }
    }

    #[test]
    fn degenerate_direction_rejected() {
        let net = feeder(0.5, 0.1);
        let inj = Injections::scheduled(&net);
        let spec = ContinuationSpec::new(inj.clone(), inj);
        match trace(&net, &spec) {
            Err(CpfError::DegenerateDirection) => {}
            other => panic!("expected DegenerateDirection, got {other:?}"),
        }
    }

    #[test]
    fn extraction_takes_nose_and_preceding_points() {
        let (net, mut spec) = feeder_spec(0.5, 0.1, 2.0);
        spec.max_lambda = None;
        let path = trace(&net, &spec).unwrap();
        let ext = extract_cases(&spec, &path, 5);
        assert_eq!(ext.cases.len(), 5);
        assert!(!ext.truncated);
        let nose_lambda = path.points[path.nose_index.unwrap()].lambda;
        assert_eq!(ext.cases.last().unwrap().lambda, nose_lambda);
        for w in ext.cases.windows(2) {
            assert!(w[0].lambda < w[1].lambda);
        }

        // Every extracted case re-solves from its own stored state.
        let adm = crate::grid::build_admittance(&net).unwrap();
        for c in &ext.cases {
            let out = solve_with_injections(
                &net,
                &adm,
                &c.injections,
                &SolveOptions {
                    start: Start::Warm(c.state.clone()),
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(out.converged);
        }
    }

    #[test]
    fn truncation_flagged_on_short_paths() {
        let (net, mut spec) = feeder_spec(0.5, 0.1, 2.0);
        spec.max_lambda = None;
        spec.initial_step = spec.max_step;
        let path = trace(&net, &spec).unwrap();
        let have = path.nose_index.unwrap() + 1;
        let ext = extract_cases(&spec, &path, have + 3);
        assert!(ext.truncated);
        assert_eq!(ext.cases.len(), have);
    }
}
