//! Benchmark scoring: power-balance loss aggregates, size-weighted
//! runtime accounting, interpretability statistics, and unsupervised
//! evaluation of externally produced voltage predictions.
//!
//! Scoring never compares against stored labels: a prediction is judged
//! solely by how well it satisfies the nodal balance equations
//! reconstructed from the record's input side. Quantities the balance
//! equations leave free (reactive power at PV buses, both powers at the
//! slack bus) are completed analytically, so their residuals are zero
//! by construction.

use crate::balance::{mismatch, Injections, PfState};
use crate::caseio::{record_to_network, SampleRecord};
use crate::grid::BusKind;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("non-finite prediction value at bus {0}")]
    NonFinite(usize),
    #[error("prediction has {got} buses, record has {expected}")]
    Shape { expected: usize, got: usize },
    #[error("empty batch list")]
    EmptyBatches,
    #[error("batch sizes sum to zero")]
    ZeroTotalSize,
    #[error("predictions missing for sample ids: {0:?}")]
    MissingIds(Vec<String>),
    #[error(transparent)]
    Case(#[from] crate::caseio::CaseError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Balance(#[from] crate::balance::BalanceError),
}

/// Power balance loss of a voltage assignment against a record's input
/// side: (mean |dS|, max |dS|) over all buses.
pub fn pbl(record: &SampleRecord, state: &PfState) -> Result<(f64, f64), MetricsError> {
    let (net, _) = record_to_network(record)?;
    let n = net.n_buses();
    if state.n() != n {
        return Err(MetricsError::Shape {
            expected: n,
            got: state.n(),
        });
    }
    for i in 0..n {
        if !state.vm[i].is_finite() || !state.va[i].is_finite() {
            return Err(MetricsError::NonFinite(i));
        }
    }
    let adm = crate::grid::build_admittance(&net)?;
    let inj = Injections::scheduled(&net);
    let rep = mismatch(&net, &adm, state, &inj)?;
    Ok((rep.mean_ds, rep.max_ds))
}

/// Size-weighted mean runtime per sample over solver batches.
pub fn runtime_stat(runtimes: &[f64], sizes: &[usize]) -> Result<f64, MetricsError> {
    if runtimes.is_empty() || runtimes.len() != sizes.len() {
        return Err(MetricsError::EmptyBatches);
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(MetricsError::ZeroTotalSize);
    }
    let weighted: f64 = runtimes
        .iter()
        .zip(sizes)
        .map(|(r, &s)| r * s as f64)
        .sum();
    Ok(weighted / total as f64)
}

/// Corpus aggregate of one per-sample statistic: per-sample means are
/// averaged (with their standard deviation); minima and maxima are
/// taken across samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatBlock {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
}

fn aggregate(per_sample: &[(f64, f64, f64)]) -> Option<StatBlock> {
    if per_sample.is_empty() {
        return None;
    }
    let k = per_sample.len() as f64;
    let mean = per_sample.iter().map(|s| s.0).sum::<f64>() / k;
    let var = per_sample
        .iter()
        .map(|s| (s.0 - mean).powi(2))
        .sum::<f64>()
        / k;
    Some(StatBlock {
        mean,
        std: var.sqrt(),
        min: per_sample.iter().map(|s| s.1).fold(f64::INFINITY, f64::min),
        max: per_sample
            .iter()
            .map(|s| s.2)
            .fold(f64::NEG_INFINITY, f64::max),
        samples: per_sample.len(),
    })
}

/// Physics-facing summary statistics of a corpus of solved states.
/// Blocks are `None` (and flagged) when the corpus has no bus of the
/// required kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpretabilityStats {
    /// Voltage magnitude at PQ buses.
    pub pq_vm: Option<StatBlock>,
    /// Net reactive injection at PV buses.
    pub pv_qnet: Option<StatBlock>,
    /// Absolute angle difference across live branches.
    pub branch_angle: Option<StatBlock>,
    /// Slack net active and reactive injection.
    pub slack_p: Option<StatBlock>,
    pub slack_q: Option<StatBlock>,
}

impl InterpretabilityStats {
    /// Plain-text table in the benchmark layout.
    pub fn to_table(&self) -> String {
        let mut out = String::from("block\tmean\tstd\tmin\tmax\tsamples\n");
        for (name, block) in [
            ("pq_vm", &self.pq_vm),
            ("pv_qnet", &self.pv_qnet),
            ("branch_angle", &self.branch_angle),
            ("slack_p", &self.slack_p),
            ("slack_q", &self.slack_q),
        ] {
            match block {
                Some(b) => out.push_str(&format!(
                    "{name}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                    b.mean, b.std, b.min, b.max, b.samples
                )),
                None => out.push_str(&format!("{name}\t(absent)\n")),
            }
        }
        out
    }
}

/// Per-sample (mean, min, max) of one quantity list.
fn triple(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, min, max))
}

/// Interpretability statistics over (record, solved state) pairs. The
/// state may be the stored label or an external prediction; PV/slack
/// powers are recomputed from it analytically.
pub fn interpretability(
    samples: &[(&SampleRecord, &PfState)],
) -> Result<InterpretabilityStats, MetricsError> {
    let mut pq = Vec::new();
    let mut pv = Vec::new();
    let mut ang = Vec::new();
    let mut sp = Vec::new();
    let mut sq = Vec::new();

    for (record, state) in samples {
        let (net, _) = record_to_network(record)?;
        let adm = crate::grid::build_admittance(&net)?;
        let (p_net, q_net) = crate::balance::network_injections(&adm, state);

        let vals: Vec<f64> = net
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Pq)
            .map(|(i, _)| state.vm[i])
            .collect();
        if let Some(t) = triple(&vals) {
            pq.push(t);
        }
        let vals: Vec<f64> = net
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Pv)
            .map(|(i, _)| q_net[i])
            .collect();
        if let Some(t) = triple(&vals) {
            pv.push(t);
        }
        let vals: Vec<f64> = net
            .branches
            .iter()
            .filter(|b| b.in_service)
            .map(|b| (state.va[b.from] - state.va[b.to]).abs())
            .collect();
        if let Some(t) = triple(&vals) {
            ang.push(t);
        }
        if let Some(s) = net.slack_bus() {
            sp.push((p_net[s], p_net[s], p_net[s]));
            sq.push((q_net[s], q_net[s], q_net[s]));
        }
    }

    Ok(InterpretabilityStats {
        pq_vm: aggregate(&pq),
        pv_qnet: aggregate(&pv),
        branch_angle: aggregate(&ang),
        slack_p: aggregate(&sp),
        slack_q: aggregate(&sq),
    })
}

/// External prediction for one sample: voltage magnitude and angle at
/// every bus, keyed by the sample id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub regime: String,
    pub topology: String,
    pub mean_ds: f64,
    pub max_ds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupScore {
    pub regime: String,
    pub topology: String,
    pub count: usize,
    /// Mean over the group of per-sample mean |dS|.
    pub mean_ds: f64,
    pub max_ds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_sample: Vec<SampleScore>,
    pub groups: Vec<GroupScore>,
    pub overall_mean_ds: f64,
    pub overall_max_ds: f64,
    pub interpretability: InterpretabilityStats,
    /// Size-weighted seconds per sample, when batches were timed.
    pub runtime_per_sample: Option<f64>,
}

impl EvaluationReport {
    pub fn to_summary(&self) -> String {
        let mut out = format!(
            "samples: {}\noverall mean |dS|: {:.3e}\noverall max |dS|: {:.3e}\n",
            self.per_sample.len(),
            self.overall_mean_ds,
            self.overall_max_ds
        );
        out.push_str("regime\ttopology\tcount\tmean_ds\tmax_ds\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.3e}\t{:.3e}\n",
                g.regime, g.topology, g.count, g.mean_ds, g.max_ds
            ));
        }
        out.push_str(&self.interpretability.to_table());
        out
    }
}

/// Scores prediction files against a corpus, unsupervised: only record
/// inputs and predicted voltages enter the residuals.
pub fn evaluate_predictions(
    samples: &[(String, SampleRecord)],
    predictions: &[Prediction],
) -> Result<EvaluationReport, MetricsError> {
    let by_id: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing: Vec<String> = samples
        .iter()
        .filter(|(id, _)| !by_id.contains_key(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingIds(missing));
    }

    let mut per_sample = Vec::with_capacity(samples.len());
    let mut states = Vec::with_capacity(samples.len());
    for (id, record) in samples {
        let pred = by_id[id.as_str()];
        let state = PfState {
            vm: pred.vm.clone(),
            va: pred.va.clone(),
        };
        let (mean_ds, max_ds) = pbl(record, &state)?;
        per_sample.push(SampleScore {
            id: id.clone(),
            regime: record.provenance.regime.clone(),
            topology: record.provenance.topology.clone(),
            mean_ds,
            max_ds,
        });
        states.push(state);
    }

    let mut group_map: HashMap<(String, String), Vec<&SampleScore>> = HashMap::new();
    for s in &per_sample {
        group_map
            .entry((s.regime.clone(), s.topology.clone()))
            .or_default()
            .push(s);
    }
    let mut groups: Vec<GroupScore> = group_map
        .into_iter()
        .map(|((regime, topology), scores)| GroupScore {
            regime,
            topology,
            count: scores.len(),
            mean_ds: scores.iter().map(|s| s.mean_ds).sum::<f64>() / scores.len() as f64,
            max_ds: scores
                .iter()
                .map(|s| s.max_ds)
                .fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    groups.sort_by(|a, b| (&a.regime, &a.topology).cmp(&(&b.regime, &b.topology)));

    let overall_mean_ds = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|s| s.mean_ds).sum::<f64>() / per_sample.len() as f64
    };
    let overall_max_ds = per_sample
        .iter()
        .map(|s| s.max_ds)
        .fold(0.0, f64::max);

    let pairs: Vec<(&SampleRecord, &PfState)> = samples
        .iter()
        .map(|(_, r)| r)
        .zip(states.iter())
        .collect();
    let interp = interpretability(&pairs)?;

    Ok(EvaluationReport {
        per_sample,
        groups,
        overall_mean_ds,
        overall_max_ds,
        interpretability: interp,
        runtime_per_sample: None,
    })
}

/// Predictions that replay the corpus' own stored voltage labels.
pub fn label_predictions(samples: &[(String, SampleRecord)]) -> Vec<Prediction> {
    samples
        .iter()
        .map(|(id, r)| Prediction {
            id: id.clone(),
            vm: r.bus.bus_voltages.iter().map(|v| v[1]).collect(),
            va: r.bus.bus_voltages.iter().map(|v| v[0]).collect(),
        })
        .collect()
}
