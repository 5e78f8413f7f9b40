//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single pass/fail line; oracles are recomputed locally instead
//! of reusing the library's internals wherever practical.

use std::f64::consts::TAU;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridflow::balance::{mismatch, mismatch_branch_form, Injections, PfState};
use gridflow::caseio::{parse_matpower, read_sample, record_to_json, Provenance, SampleRecord};
use gridflow::cpf::{extract_cases, injections_at, trace, ContinuationSpec, CpfStatus};
use gridflow::grid::{
    build_admittance, connected_components, Branch, Bus, BusKind, Generator, Network,
};
use gridflow::metrics::{evaluate_predictions, label_predictions, pbl};
use gridflow::newton::{
    complete, jacobian, solve, solve_with_injections, SolveOptions, Start, UnknownMap,
};
use gridflow::scenario::{
    build_manifest, check_constraints, generate_sample, perturb_topology, scenario_seed,
    EventKind, GenOutcome, GenerateOptions,
};

fn criterion(n: usize, name: &str, body: impl FnOnce()) {
    let result = catch_unwind(AssertUnwindSafe(body));
    match &result {
        Ok(()) => println!("criterion {n} ({name}): pass"),
        Err(_) => println!("criterion {n} ({name}): FAIL"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn case_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("cases").join(name)
}

fn load_case(name: &str) -> Network {
    let text = std::fs::read_to_string(case_path(name)).unwrap();
    parse_matpower(&text).unwrap()
}

fn dummy_provenance() -> Provenance {
    Provenance {
        seed: 0,
        event: "none".into(),
        regime: "feasible".into(),
        topology: "N".into(),
    }
}

// -------------------------------------------------------------------
// 1. Flat-start convergence on the standard cases, and the recomputed
//    power-balance loss of the emitted record stays at reference scale.
// -------------------------------------------------------------------
#[test]
fn acceptance_01_solver_fidelity() {
    criterion(1, "solver fidelity on standard cases", || {
        for name in ["case14.m", "case30.m", "case57.m", "case118.m"] {
            let net = load_case(name);
            let out = solve(&net, &SolveOptions::default()).unwrap();
            assert!(out.converged, "{name}: no convergence");
            assert!(out.iterations <= 30, "{name}: {} iterations", out.iterations);
            assert!(
                out.final_mismatch.max_ds <= 1e-8,
                "{name}: max |dS| = {:.3e}",
                out.final_mismatch.max_ds
            );

            let adm = build_admittance(&net).unwrap();
            let sol = complete(&net, &adm, &out.state).unwrap();
            let record =
                gridflow::caseio::write_sample(&net, &sol, dummy_provenance()).unwrap();
            let (_, max_ds) = pbl(&record, &out.state).unwrap();
            assert!(max_ds <= 1e-6, "{name}: recomputed PBL = {:.3e}", max_ds);
        }
    });
}

// -------------------------------------------------------------------
// 2. The admittance-matrix mismatch and the branch-expanded
//    trigonometric mismatch agree on random networks and states.
// -------------------------------------------------------------------

/// Random connected network: a ring plus random chords with taps,
/// shifts, charging, and bus shunts.
fn random_network(rng: &mut ChaCha8Rng) -> Network {
    let n = rng.gen_range(4..=30usize);
    let mut buses = Vec::with_capacity(n);
    for i in 0..n {
        buses.push(Bus {
            kind: if i == 0 { BusKind::Slack } else { BusKind::Pq },
            gs: rng.gen_range(-0.05..0.05),
            bs: rng.gen_range(-0.2..0.2),
            vmin: 0.9,
            vmax: 1.1,
        });
    }
    let branch = |from: usize, to: usize, rng: &mut ChaCha8Rng| Branch {
        from,
        to,
        r: rng.gen_range(0.005..0.1),
        x: rng.gen_range(0.02..0.4),
        b_charging: rng.gen_range(0.0..0.3),
        tap: if rng.gen_bool(0.3) {
            rng.gen_range(0.9..1.1)
        } else {
            1.0
        },
        shift: if rng.gen_bool(0.2) {
            rng.gen_range(-0.2..0.2)
        } else {
            0.0
        },
        rate: 0.0,
        angmin: -TAU,
        angmax: TAU,
        in_service: true,
    };
    let mut branches: Vec<Branch> = (0..n).map(|i| branch(i, (i + 1) % n, rng)).collect();
    for _ in 0..n / 2 {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            branches.push(branch(a, b, rng));
        }
    }
    Network {
        base_mva: 100.0,
        buses,
        generators: vec![],
        loads: vec![],
        branches,
        ext_bus_ids: (1..=n as u64).collect(),
    }
}

#[test]
fn acceptance_02_mismatch_form_equivalence() {
    criterion(2, "admittance vs branch-form mismatch", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let net = random_network(&mut rng);
            let n = net.n_buses();
            let state = PfState {
                vm: (0..n).map(|_| rng.gen_range(0.9..1.1)).collect(),
                va: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            };
            let inj = Injections::full(
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let adm = build_admittance(&net).unwrap();
            let a = mismatch(&net, &adm, &state, &inj).unwrap();
            let b = mismatch_branch_form(&net, &state, &inj).unwrap();
            for i in 0..n {
                assert!(
                    (a.dp[i] - b.dp[i]).abs() <= 1e-10,
                    "dp[{i}]: {} vs {}",
                    a.dp[i],
                    b.dp[i]
                );
                assert!(
                    (a.dq[i] - b.dq[i]).abs() <= 1e-10,
                    "dq[{i}]: {} vs {}",
                    a.dq[i],
                    b.dq[i]
                );
            }
        }
    });
}

// -------------------------------------------------------------------
// 3. Analytic Jacobian vs an independent central-difference oracle.
// -------------------------------------------------------------------
#[test]
fn acceptance_03_jacobian_matches_finite_differences() {
    criterion(3, "analytic Jacobian vs finite differences", || {
        let net = load_case("case14.m");
        let adm = build_admittance(&net).unwrap();
        let map = UnknownMap::of(&net);
        let inj = Injections::scheduled(&net);
        let na = map.ang_buses.len();
        let dim = map.dim();

        // Residual in unknown ordering (dp at angle unknowns, dq at
        // magnitude unknowns), recomputed here from the public mismatch.
        let residual = |state: &PfState| -> Vec<f64> {
            let rep = mismatch(&net, &adm, state, &inj).unwrap();
            let mut f = Vec::with_capacity(dim);
            for &i in &map.ang_buses {
                f.push(rep.dp[i]);
            }
            for &i in &map.mag_buses {
                f.push(rep.dq[i]);
            }
            f
        };

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..20 {
            let n = net.n_buses();
            let state = PfState {
                vm: (0..n).map(|_| rng.gen_range(0.95..1.05)).collect(),
                va: (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            };
            let analytic = jacobian(&adm, &state, &map);
            for col in 0..dim {
                let mut plus = state.clone();
                let mut minus = state.clone();
                if col < na {
                    plus.va[map.ang_buses[col]] += h;
                    minus.va[map.ang_buses[col]] -= h;
                } else {
                    plus.vm[map.mag_buses[col - na]] += h;
                    minus.vm[map.mag_buses[col - na]] -= h;
                }
                let fp = residual(&plus);
                let fm = residual(&minus);
                for row in 0..dim {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    let a = analytic[(row, col)];
                    let scale = a.abs().max(1.0);
                    assert!(
                        (a - fd).abs() <= 1e-5 * scale,
                        "entry ({row},{col}): analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    });
}

// -------------------------------------------------------------------
// 4. Nose detection: analytic 2-bus limit and the qualitative
//    condition-number signature on a full case.
// -------------------------------------------------------------------

/// Slack feeding a PQ bus over a lossless reactance.
fn feeder(x: f64) -> Network {
    Network {
        base_mva: 100.0,
        buses: vec![
            Bus {
                kind: BusKind::Slack,
                gs: 0.0,
                bs: 0.0,
                vmin: 0.9,
                vmax: 1.1,
            },
            Bus {
                kind: BusKind::Pq,
                gs: 0.0,
                bs: 0.0,
                vmin: 0.9,
                vmax: 1.1,
            },
        ],
        generators: vec![Generator {
            bus: 0,
            pg: 0.0,
            qg: 0.0,
            pmin: 0.0,
            pmax: 10.0,
            qmin: -10.0,
            qmax: 10.0,
            vset: 1.0,
            cost_a: 0.0,
            cost_b: 1.0,
            in_service: true,
        }],
        loads: vec![],
        branches: vec![Branch {
            from: 0,
            to: 1,
            r: 0.0,
            x,
            b_charging: 0.0,
            tap: 1.0,
            shift: 0.0,
            rate: 0.0,
            angmin: -TAU,
            angmax: TAU,
            in_service: true,
        }],
        ext_bus_ids: vec![1, 2],
    }
}

fn feeder_injections(p_load: f64) -> Injections {
    Injections {
        p: vec![None, Some(-p_load)],
        q: vec![None, Some(0.0)],
    }
}

/// Network with demand and all non-slack generation scaled by `s`.
fn scaled(net: &Network, s: f64) -> Network {
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

fn case14_stress_spec() -> (Network, ContinuationSpec) {
    let net = load_case("case14.m");
    let base = Injections::scheduled(&net);
    let target = Injections::scheduled(&scaled(&net, 2.5));
    let mut spec = ContinuationSpec::new(base, target);
    spec.max_lambda = None; // run past the target to the stability limit
    (net, spec)
}

#[test]
fn acceptance_04_nose_accuracy_and_condition_signature() {
    criterion(4, "nose accuracy and conditioning signature", || {
        // Analytic anchor: loadability of a unity-voltage source behind a
        // pure reactance is v^2 / (2x).
        let x = 0.25;
        let net = feeder(x);
        let exact = 1.0 / (2.0 * x);

        // Independent oracle: bisection on raw Newton solvability.
        let adm = build_admittance(&net).unwrap();
        let solvable = |p: f64| {
            solve_with_injections(&net, &adm, &feeder_injections(p), &SolveOptions::default())
                .unwrap()
                .converged
        };
        let (mut lo, mut hi) = (0.1, 4.0);
        assert!(solvable(lo) && !solvable(hi));
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if solvable(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!((oracle - exact).abs() <= 0.01 * exact, "oracle {oracle}");

        // The continuation trace must land on the same limit.
        let mut spec = ContinuationSpec::new(feeder_injections(0.2), feeder_injections(3.0));
        spec.max_lambda = None;
        let path = trace(&net, &spec).unwrap();
        assert_eq!(path.status, CpfStatus::NoseFound);
        let nose = &path.points[path.nose_index.unwrap()];
        let nose_load = -injections_at(&spec, nose.lambda).p[1].unwrap();
        assert!(
            (nose_load - exact).abs() <= 0.01 * exact,
            "nose load {nose_load} vs {exact}"
        );

        // Full case: stressing all injections 2.5x and beyond must hit a
        // nose, with lambda strictly increasing and the Jacobian
        // conditioning blowing up at the limit.
        let (net14, spec14) = case14_stress_spec();
        let path14 = trace(&net14, &spec14).unwrap();
        assert_eq!(path14.status, CpfStatus::NoseFound);
        let nose_idx = path14.nose_index.unwrap();
        for w in path14.points[..=nose_idx].windows(2) {
            assert!(w[0].lambda < w[1].lambda, "lambda not strictly increasing");
        }
        let mut trace_vals = path14.condition_trace();
        trace_vals.sort_by(f64::total_cmp);
        let median = trace_vals[trace_vals.len() / 2];
        let at_nose = path14.points[nose_idx].condition;
        assert!(
            at_nose >= 100.0 * median,
            "condition at nose {at_nose:.3e} vs median {median:.3e}"
        );
    });
}

// -------------------------------------------------------------------
// 5. Stressed-case extraction: one nose sample plus four approaching
//    samples, and the nose sample is genuinely hard from a cold start.
// -------------------------------------------------------------------
#[test]
fn acceptance_05_stressed_extraction_hardness() {
    criterion(5, "stressed-case extraction and hardness", || {
        let (net, spec) = case14_stress_spec();
        let path = trace(&net, &spec).unwrap();
        assert_eq!(path.status, CpfStatus::NoseFound);
        let extraction = extract_cases(&spec, &path, 5);
        assert_eq!(extraction.cases.len(), 5);
        assert!(!extraction.truncated);
        let nose_lambda = path.points[path.nose_index.unwrap()].lambda;
        assert_eq!(extraction.cases.last().unwrap().lambda, nose_lambda);
        for w in extraction.cases.windows(2) {
            assert!(w[0].lambda < w[1].lambda);
        }

        let base_iters = solve(&net, &SolveOptions::default()).unwrap().iterations;
        let adm = build_admittance(&net).unwrap();
        let nose_inj = injections_at(&spec, nose_lambda);
        let cold = solve_with_injections(
            &net,
            &adm,
            &nose_inj,
            &SolveOptions {
                start: Start::Flat,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            !cold.converged || cold.iterations > 2 * base_iters,
            "nose case unexpectedly easy: converged in {} (base {base_iters})",
            cold.iterations
        );
    });
}

// -------------------------------------------------------------------
// 6. Topology perturbation statistics on the largest case.
// -------------------------------------------------------------------
#[test]
fn acceptance_06_perturbation_statistics() {
    criterion(6, "perturbation event statistics", || {
        let net = load_case("case118.m");
        let mut rng = ChaCha8Rng::seed_from_u64(118);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let (out, event) = perturb_topology(&net, &mut rng);
            let k = match event.kind {
                EventKind::RemoveGens => 0,
                EventKind::RemoveLines => 1,
                EventKind::RemoveGenAndLine => 2,
                EventKind::NoRemoval => 3,
            };
            counts[k] += 1;
            let comp = connected_components(&out);
            assert!(comp.iter().all(|&c| c == comp[0]), "disconnected network");
            assert!(out.slack_bus().is_some(), "slack lost");
        }
        for (k, &c) in counts.iter().enumerate() {
            let f = c as f64 / draws as f64;
            assert!(
                (f - 0.25).abs() <= 0.02,
                "event kind {k} frequency {f:.4}"
            );
        }
    });
}

// -------------------------------------------------------------------
// 7. End-to-end corpus: every emitted record passes the operating
//    checker, and re-scoring the stored labels reproduces the solver's
//    balance residual.
// -------------------------------------------------------------------
#[test]
fn acceptance_07_end_to_end_corpus() {
    criterion(7, "end-to-end corpus consistency", || {
        let net = load_case("case14.m");
        let options = GenerateOptions::default();
        let mut samples: Vec<(String, SampleRecord)> = Vec::new();
        let mut i = 0u64;
        while samples.len() < 1000 {
            let seed = scenario_seed(77, i);
            i += 1;
            if let GenOutcome::Accepted(record) = generate_sample(&net, seed, &options).unwrap() {
                let (r_net, _) = gridflow::caseio::record_to_network(&record).unwrap();
                let report = check_constraints(&r_net, &record, 1e-6).unwrap();
                assert!(
                    report.pass,
                    "sample {i}: worst enforced residual {:.3e}",
                    report.worst_enforced
                );
                samples.push((format!("sample_{i}"), *record));
            }
        }

        let predictions = label_predictions(&samples);
        let report = evaluate_predictions(&samples, &predictions).unwrap();
        assert_eq!(report.per_sample.len(), 1000);
        for s in &report.per_sample {
            assert!(
                s.max_ds <= options.tol,
                "{}: PBL {:.3e} above solver tol",
                s.id,
                s.max_ds
            );
        }
    });
}

// -------------------------------------------------------------------
// 8. Manifest cell counts preserve each task's topology/regime mix at
//    any scale, checked against an independently tabulated recipe.
// -------------------------------------------------------------------
#[test]
fn acceptance_08_manifest_ratios() {
    criterion(8, "manifest mix ratios under scaling", || {
        // (task, train topologies, [(regime, train total)])
        let table: &[(&str, &[&str], &[(&str, usize)])] = &[
            ("1.1", &["N"], &[("feasible", 54000)]),
            ("1.2", &["N", "N-1"], &[("feasible", 54000)]),
            ("1.3", &["N", "N-1", "N-2"], &[("feasible", 54000)]),
            ("2.1", &["N", "N-1", "N-2"], &[("feasible", 54000)]),
            ("2.2", &["N", "N-1", "N-2"], &[("feasible", 36000)]),
            ("2.3", &["N", "N-1", "N-2"], &[("feasible", 18000)]),
            ("3.1", &["N", "N-1", "N-2"], &[("feasible", 54000)]),
            ("3.2", &["N", "N-1", "N-2"], &[("feasible", 54000)]),
            ("3.3", &["N", "N-1", "N-2"], &[("feasible", 54000)]),
            (
                "4.1",
                &["N", "N-1", "N-2"],
                &[("feasible", 48600), ("close_to_infeasible", 5400)],
            ),
            (
                "4.2",
                &["N", "N-1", "N-2"],
                &[
                    ("feasible", 27000),
                    ("close_to_infeasible", 5400),
                    ("approaching_infeasible", 21600),
                ],
            ),
            (
                "4.3",
                &["N", "N-1", "N-2"],
                &[
                    ("close_to_infeasible", 10800),
                    ("approaching_infeasible", 43200),
                ],
            ),
        ];

        for &scale in &[1.0, 0.1, 0.013] {
            for &(task, topologies, mix) in table {
                let manifest = build_manifest(&[], task, scale).unwrap();
                // Expected train cells: even split across topologies.
                for &(regime, total) in mix {
                    for &topo in topologies {
                        let want =
                            (total as f64 / topologies.len() as f64 * scale).round() as usize;
                        let cell = manifest
                            .cells
                            .iter()
                            .find(|c| {
                                c.split == "train" && c.regime == regime && c.topology == topo
                            })
                            .unwrap_or_else(|| panic!("{task}: missing {regime}/{topo}"));
                        assert_eq!(cell.required, want, "{task} {regime}/{topo} @ {scale}");
                    }
                }
                let n_train = manifest.cells.iter().filter(|c| c.split == "train").count();
                assert_eq!(n_train, mix.len() * topologies.len(), "{task}: extra cells");
                // Test side is fixed: 2000 feasible + 200 close per topology.
                for topo in ["N", "N-1", "N-2"] {
                    for (regime, base) in [("feasible", 2000.0), ("close_to_infeasible", 200.0)] {
                        let cell = manifest
                            .cells
                            .iter()
                            .find(|c| {
                                c.split == "test" && c.regime == regime && c.topology == topo
                            })
                            .unwrap();
                        assert_eq!(cell.required, (base * scale).round() as usize);
                    }
                }
            }
        }

        // The flagship mix ratio, spelled out.
        let m = build_manifest(&[], "4.2", 1.0).unwrap();
        let total = |regime: &str| -> usize {
            m.cells
                .iter()
                .filter(|c| c.split == "train" && c.regime == regime)
                .map(|c| c.required)
                .sum()
        };
        assert_eq!(
            (
                total("feasible"),
                total("close_to_infeasible"),
                total("approaching_infeasible")
            ),
            (27000, 5400, 21600)
        );
    });
}

// -------------------------------------------------------------------
// 9. Schema conformance: array shapes on the 14-bus case and a lossless
//    serialization round trip.
// -------------------------------------------------------------------
#[test]
fn acceptance_09_schema_shapes_and_round_trip() {
    criterion(9, "record schema shapes and round trip", || {
        let net = load_case("case14.m");
        let options = GenerateOptions::default();
        // Find an accepted draw that kept the full topology.
        let mut record = None;
        for i in 0..500u64 {
            if let GenOutcome::Accepted(r) =
                generate_sample(&net, scenario_seed(9, i), &options).unwrap()
            {
                if r.provenance.topology == "N" {
                    record = Some(*r);
                    break;
                }
            }
        }
        let r = record.expect("no full-topology sample in 500 draws");

        assert_eq!(r.bus.x.len(), 14);
        assert_eq!(r.bus.y.len(), 14);
        assert_eq!(r.bus.bus_voltages.len(), 14);
        assert_eq!(r.gen.limits.len(), 5);
        assert_eq!(r.gen.generation.len(), 5);
        assert_eq!(r.load.demand.len(), 11);
        assert_eq!(r.branch.edge_index[0].len(), 20);
        assert_eq!(r.branch.edge_index[1].len(), 20);
        assert_eq!(r.branch.edge_attr.len(), 20);
        assert_eq!(r.branch.edge_label.len(), 20);
        assert_eq!(r.gen_link.edge_index[0].len(), 5);
        assert_eq!(r.load_link.edge_index[0].len(), 11);

        let json = record_to_json(&r).unwrap();
        let back = read_sample(json.as_bytes()).unwrap();
        assert_eq!(back, r, "serialization round trip is lossy");
    });
}

// -------------------------------------------------------------------
// 10. Corpus generation is byte-identical regardless of worker count.
// -------------------------------------------------------------------
#[test]
fn acceptance_10_worker_count_determinism() {
    criterion(10, "worker-count determinism", || {
        let bin = env!("CARGO_BIN_EXE_gridflow");
        let case = case_path("case14.m");
        let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
        for (dir, workers) in dirs.iter().zip(["1", "4"]) {
            let status = Command::new(bin)
                .args([
                    "generate",
                    "--case",
                    case.to_str().unwrap(),
                    "--seed",
                    "1234",
                    "--count",
                    "60",
                    "--workers",
                    workers,
                    "--out",
                    dir.path().to_str().unwrap(),
                ])
                .output()
                .unwrap();
            assert!(status.status.success());
        }

        let list = |d: &tempfile::TempDir| -> Vec<String> {
            let mut v: Vec<String> = std::fs::read_dir(d.path())
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            v.sort();
            v
        };
        let (a, b) = (list(&dirs[0]), list(&dirs[1]));
        assert_eq!(a, b, "file sets differ across worker counts");
        assert!(a.iter().any(|f| f.starts_with("sample_")));
        for f in &a {
            let x = std::fs::read(dirs[0].path().join(f)).unwrap();
            let y = std::fs::read(dirs[1].path().join(f)).unwrap();
            assert_eq!(x, y, "{f}: bytes differ across worker counts");
        }
    });
}
