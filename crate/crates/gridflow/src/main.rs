//! Batch front door for the gridflow library: parse and validate case
//! files, solve single cases, trace loadability curves, generate corpora,
//! assemble task manifests, and score prediction files.
//!
//! Exit codes: 0 success, 2 usage error, 3 solver failure, 4 data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use gridflow::balance::Injections;
use gridflow::caseio::{self, parse_matpower, SampleRecord};
use gridflow::cpf::{self, ContinuationSpec, CpfStatus};
use gridflow::grid::{connected_components, Network};
use gridflow::metrics::{self, Prediction};
use gridflow::newton::{solve, SolveOptions};
use gridflow::scenario::{
    self, build_manifest, check_constraints, generate_sample, generate_stressed, scenario_seed,
    CorpusEntry, GenOutcome, GenerateOptions, LoadMethod,
};

#[derive(Parser)]
#[command(name = "gridflow", version, about = "Power-flow scenario generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory; defaults to $GRIDFLOW_OUT, then the current
    /// directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn resolve(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("GRIDFLOW_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a case file and report its structure.
    Parse {
        #[arg(long)]
        case: PathBuf,
    },
    /// Solve the power flow for a case file and dump the outcome.
    Solve {
        #[arg(long)]
        case: PathBuf,
        /// Convergence tolerance on max |dS| (p.u.).
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Trace the continuation curve towards a scaled operating point.
    Cpf {
        #[arg(long)]
        case: PathBuf,
        /// Injection multiplier defining the stress direction.
        #[arg(long, default_value_t = 2.5)]
        mult: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Number of cases to extract at the end of the path.
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Generate a scenario corpus from a base case.
    Generate {
        #[arg(long)]
        case: PathBuf,
        /// Corpus seed; per-scenario seeds are derived from it.
        #[arg(long)]
        seed: u64,
        /// Number of scenario draws (accepted count may be lower).
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Worker threads; output is identical for any value.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Load sampling method.
        #[arg(long, default_value = "box")]
        method: String,
        /// Also trace each draw to its loadability nose and emit
        /// close/approaching-infeasible records.
        #[arg(long, default_value_t = false)]
        stressed: bool,
        /// Injection multiplier for --stressed tracing.
        #[arg(long, default_value_t = 2.5)]
        mult: f64,
        /// Split tag recorded in the corpus index.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Assemble the train/test manifest for one benchmark task id.
    Manifest {
        /// Directory holding a corpus index (corpus.json).
        #[arg(long)]
        corpus: PathBuf,
        /// Task id, e.g. 1.1 or 4.2.
        #[arg(long)]
        task: String,
        /// Scale factor applied to every cell of the task's sample grid.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a prediction file against a corpus.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON array of {id, vm, va}; omit to score the stored labels.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Re-verify operating constraints for stored sample records.
    Check {
        /// A sample file or a directory of sample files.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

/// Command failure paired with its process exit code.
enum CliError {
    /// Exit 3: the numeric method did not produce a usable answer.
    Solver(String),
    /// Exit 4: unreadable or invalid input data.
    Data(String),
    /// Exit 2: a well-formed request for something that does not exist.
    Usage(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Data(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Solver(m) | CliError::Data(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Machine-readable error record on stderr.
            eprintln!(
                "{}",
                json!({ "error": e.message(), "exit_code": e.code() })
            );
            ExitCode::from(e.code())
        }
    }
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let net = parse_matpower(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    net.validate()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(net)
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Parse { case } => cmd_parse(&case),
        Command::Solve { case, tol } => cmd_solve(&case, tol),
        Command::Cpf {
            case,
            mult,
            tol,
            count,
            out,
        } => cmd_cpf(&case, mult, tol, count, &out.resolve()),
        Command::Generate {
            case,
            seed,
            count,
            workers,
            method,
            stressed,
            mult,
            split,
            tol,
            out,
        } => {
            let method = match method.as_str() {
                "box" => LoadMethod::Box,
                "polytope" => LoadMethod::Polytope,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown load method '{other}'; expected box or polytope"
                    )))
                }
            };
            cmd_generate(
                &case,
                seed,
                count,
                workers,
                method,
                stressed,
                mult,
                &split,
                tol,
                &out.resolve(),
            )
        }
        Command::Manifest {
            corpus,
            task,
            scale,
            out,
        } => cmd_manifest(&corpus, &task, scale, &out.resolve()),
        Command::Evaluate {
            corpus,
            predictions,
            out,
        } => cmd_evaluate(&corpus, predictions.as_deref(), &out.resolve()),
        Command::Check { corpus, tol } => cmd_check(&corpus, tol),
    }
}

fn cmd_parse(case: &Path) -> Result<(), CliError> {
    let net = load_network(case)?;
    let comp = connected_components(&net);
    let islands = {
        let mut roots: Vec<usize> = comp.clone();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "file": case.display().to_string(),
            "base_mva": net.base_mva,
            "buses": net.buses.len(),
            "generators": net.generators.len(),
            "loads": net.loads.len(),
            "branches": net.branches.len(),
            "islands": islands,
            "slack_bus": net.slack_bus().map(|i| net.ext_bus_ids[i]),
        }))
        .map_err(data_err)?
    );
    Ok(())
}

fn cmd_solve(case: &Path, tol: f64) -> Result<(), CliError> {
    let net = load_network(case)?;
    let opts = SolveOptions {
        tol,
        ..Default::default()
    };
    let out = solve(&net, &opts).map_err(data_err)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "converged": out.converged,
            "iterations": out.iterations,
            "max_mismatch": out.final_mismatch.max_ds,
            "mean_mismatch": out.final_mismatch.mean_ds,
            "wall_time_s": out.wall_time,
            "vm": out.state.vm,
            "va": out.state.va,
        }))
        .map_err(data_err)?
    );
    if !out.converged {
        return Err(CliError::Solver(format!(
            "power flow did not converge in {} iterations (max |dS| = {:.3e})",
            out.iterations, out.final_mismatch.max_ds
        )));
    }
    Ok(())
}

/// Copy of the network with demand and non-slack generation scaled by `s`.
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

fn cmd_cpf(case: &Path, mult: f64, tol: f64, count: usize, out_dir: &Path) -> Result<(), CliError> {
    let net = load_network(case)?;
    let base = Injections::scheduled(&net);
    let target = Injections::scheduled(&scaled_network(&net, mult));
    let mut spec = ContinuationSpec::new(base, target);
    spec.max_lambda = None;
    spec.corrector_tol = tol;

    let path = cpf::trace(&net, &spec).map_err(data_err)?;
    print!("{}", path.to_table());
    println!("status: {:?}", path.status);
    if let Some(i) = path.nose_index {
        println!(
            "nose: lambda = {:.6} (injection multiplier {:.4})",
            path.points[i].lambda,
            1.0 + path.points[i].lambda * (mult - 1.0)
        );
    }
    if path.status == CpfStatus::Failed {
        return Err(CliError::Solver("base case did not converge".into()));
    }

    let extraction = cpf::extract_cases(&spec, &path, count);
    fs::create_dir_all(out_dir).map_err(data_err)?;
    for (k, c) in extraction.cases.iter().enumerate() {
        let file = out_dir.join(format!("cpf_case_{k:02}.json"));
        let body = serde_json::to_string_pretty(&json!({
            "lambda": c.lambda,
            "p": c.injections.p,
            "q": c.injections.q,
            "vm": c.state.vm,
            "va": c.state.va,
        }))
        .map_err(data_err)?;
        fs::write(&file, body).map_err(data_err)?;
    }
    println!(
        "extracted {} case(s) to {}{}",
        extraction.cases.len(),
        out_dir.display(),
        if extraction.truncated {
            " (path shorter than requested)"
        } else {
            ""
        }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    case: &Path,
    seed: u64,
    count: usize,
    workers: usize,
    method: LoadMethod,
    stressed: bool,
    mult: f64,
    split: &str,
    tol: f64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let net = load_network(case)?;
    let options = GenerateOptions { method, tol };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers) // 0 = one per core
        .build()
        .map_err(data_err)?;

    // Each index owns a derived seed, so the result vector is a pure
    // function of (seed, count) and the worker count only affects speed.
    let results: Vec<Result<Vec<SampleRecord>, scenario::Rejection>> = pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| {
                let s = scenario_seed(seed, i);
                if stressed {
                    match generate_stressed(&net, s, &options, mult) {
                        Ok(records) if !records.is_empty() => Ok(records),
                        Ok(_) => Err(scenario::Rejection {
                            seed: s,
                            event: String::new(),
                            reason: "no nose found before the target".into(),
                        }),
                        Err(e) => Err(scenario::Rejection {
                            seed: s,
                            event: String::new(),
                            reason: e.to_string(),
                        }),
                    }
                } else {
                    match generate_sample(&net, s, &options) {
                        Ok(GenOutcome::Accepted(r)) => Ok(vec![*r]),
                        Ok(GenOutcome::Rejected(rej)) => Err(rej),
                        Err(e) => Err(scenario::Rejection {
                            seed: s,
                            event: String::new(),
                            reason: e.to_string(),
                        }),
                    }
                }
            })
            .collect()
    });

    fs::create_dir_all(out_dir).map_err(data_err)?;
    let mut index: Vec<CorpusEntry> = Vec::new();
    let mut rejections = String::new();
    let mut accepted = 0usize;
    for (i, res) in results.iter().enumerate() {
        match res {
            Ok(records) => {
                for (k, record) in records.iter().enumerate() {
                    let name = if records.len() == 1 {
                        format!("sample_{i:06}.json")
                    } else {
                        format!("sample_{i:06}_{k}.json")
                    };
                    let body = caseio::record_to_json(record).map_err(data_err)?;
                    fs::write(out_dir.join(&name), body).map_err(data_err)?;
                    index.push(CorpusEntry {
                        path: name,
                        regime: record.provenance.regime.clone(),
                        topology: record.provenance.topology.clone(),
                        split: split.to_string(),
                    });
                    accepted += 1;
                }
            }
            Err(rej) => {
                rejections.push_str(&serde_json::to_string(&rej).map_err(data_err)?);
                rejections.push('\n');
            }
        }
    }

    fs::write(
        out_dir.join("corpus.json"),
        serde_json::to_string_pretty(&index).map_err(data_err)?,
    )
    .map_err(data_err)?;
    fs::write(out_dir.join("rejections.jsonl"), rejections).map_err(data_err)?;
    println!(
        "accepted {accepted} record(s) from {count} draw(s) into {}",
        out_dir.display()
    );
    Ok(())
}

fn read_corpus_index(corpus: &Path) -> Result<(PathBuf, Vec<CorpusEntry>), CliError> {
    let (root, index_path) = if corpus.is_dir() {
        (corpus.to_path_buf(), corpus.join("corpus.json"))
    } else {
        (
            corpus.parent().unwrap_or(Path::new(".")).to_path_buf(),
            corpus.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&index_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", index_path.display())))?;
    let entries: Vec<CorpusEntry> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", index_path.display())))?;
    Ok((root, entries))
}

fn cmd_manifest(corpus: &Path, task: &str, scale: f64, out_dir: &Path) -> Result<(), CliError> {
    let (_, entries) = read_corpus_index(corpus)?;
    let manifest = build_manifest(&entries, task, scale).map_err(|e| match e {
        scenario::ManifestError::UnknownTask(_) => CliError::Usage(e.to_string()),
        scenario::ManifestError::BadScale(_) => CliError::Usage(e.to_string()),
    })?;
    fs::create_dir_all(out_dir).map_err(data_err)?;
    let file = out_dir.join(format!("manifest_{}.json", task.replace('.', "_")));
    fs::write(
        &file,
        serde_json::to_string_pretty(&manifest).map_err(data_err)?,
    )
    .map_err(data_err)?;

    let mut required = 0usize;
    let mut shortfall = 0usize;
    for c in &manifest.cells {
        required += c.required;
        shortfall += c.shortfall;
    }
    println!(
        "task {task}: {} cells, {required} sample(s) required, {shortfall} missing -> {}",
        manifest.cells.len(),
        file.display()
    );
    Ok(())
}

fn load_samples(root: &Path, entries: &[CorpusEntry]) -> Result<Vec<(String, SampleRecord)>, CliError> {
    entries
        .iter()
        .map(|e| {
            let p = root.join(&e.path);
            let bytes =
                fs::read(&p).map_err(|err| CliError::Data(format!("{}: {err}", p.display())))?;
            let record = caseio::read_sample(&bytes)
                .map_err(|err| CliError::Data(format!("{}: {err}", p.display())))?;
            Ok((e.path.clone(), record))
        })
        .collect()
}

fn cmd_evaluate(
    corpus: &Path,
    predictions: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (root, entries) = read_corpus_index(corpus)?;
    let samples = load_samples(&root, &entries)?;

    let preds: Vec<Prediction> = match predictions {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        // No prediction file: score the stored solver labels, which
        // doubles as a corpus self-check.
        None => metrics::label_predictions(&samples),
    };

    let report = metrics::evaluate_predictions(&samples, &preds).map_err(data_err)?;

    fs::create_dir_all(out_dir).map_err(data_err)?;
    let file = out_dir.join("evaluation.json");
    fs::write(
        &file,
        serde_json::to_string_pretty(&report).map_err(data_err)?,
    )
    .map_err(data_err)?;

    println!("samples\tmean_mismatch\tmax_mismatch");
    for g in &report.groups {
        println!(
            "{}/{}\t{}\t{:.6e}\t{:.6e}",
            g.regime, g.topology, g.count, g.mean_ds, g.max_ds
        );
    }
    println!(
        "overall\t{}\t{:.6e}\t{:.6e}",
        report.per_sample.len(),
        report.overall_mean_ds,
        report.overall_max_ds
    );
    println!("report written to {}", file.display());
    Ok(())
}

fn cmd_check(corpus: &Path, tol: f64) -> Result<(), CliError> {
    let files: Vec<PathBuf> = if corpus.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(corpus)
            .map_err(|e| CliError::Data(format!("{}: {e}", corpus.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && p.file_name()
                        .is_some_and(|n| n.to_string_lossy().starts_with("sample_"))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![corpus.to_path_buf()]
    };
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no sample files found in {}",
            corpus.display()
        )));
    }

    let mut failures = 0usize;
    for f in &files {
        let bytes = fs::read(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let record =
            caseio::read_sample(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let (net, _) = caseio::record_to_network(&record).map_err(data_err)?;
        let report = check_constraints(&net, &record, tol).map_err(data_err)?;
        if !report.pass {
            failures += 1;
        }
        println!(
            "{}\t{}\tworst_enforced={:.3e}",
            f.display(),
            if report.pass { "pass" } else { "FAIL" },
            report.worst_enforced
        );
        if !report.pass {
            for r in report.residuals.iter().filter(|r| r.residual > tol) {
                println!("\t{:?}\t{}\t{:.3e}", r.severity, r.tag, r.residual);
            }
        }
    }
    println!("{} / {} file(s) pass", files.len() - failures, files.len());
    if failures > 0 {
        return Err(CliError::Solver(format!(
            "{failures} record(s) violate enforced constraints at tol {tol:.1e}"
        )));
    }
    Ok(())
}
