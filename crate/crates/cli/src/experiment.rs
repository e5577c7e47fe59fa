//! The four subcommands as library functions. Each validates its input
//! completely before the output directory is created.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use madmm_core::admm::{self, IterateTrace, Mechanism};
use madmm_core::analysis::{
    self, contraction_certificate, delta_lower_bound, optimality_residual, rate_spectra, recover_y, AttackerKnowledge,
    RateInputs,
};
use madmm_core::data::{self, RawTable, ReferenceComparison, Schema};
use madmm_core::model::centralized_solve;
use madmm_core::privacy::{privacy_bound, PrivacyLedger};
use madmm_core::rng::{derive_seed, Purpose};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, PreprocessConfig, Problem};
use crate::metrics::{aggregate_runs, average_loss, MetricRow};
use crate::{HarnessError, Result};

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    /// Final privacy bound; `None` for non-private runs.
    pub beta: Option<f64>,
    #[serde(rename = "L_mean_final")]
    pub l_mean_final: f64,
    #[serde(rename = "L_range_final")]
    pub l_range_final: f64,
    pub iterations: usize,
    pub config_digest: String,
    pub mechanism: Mechanism,
    pub n_runs: usize,
    /// Largest consensus residual over runs at the last iteration.
    pub consensus_residual_final: f64,
}

fn run_seed(seed: u64, run: usize) -> u64 {
    derive_seed(seed, Purpose::Run, run as u64, 0)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Runs every seeded run on a pool of `threads` workers. Results come back
/// in run order, so the output does not depend on scheduling.
fn run_all(config: &ExperimentConfig, problem: &Problem) -> Result<Vec<IterateTrace>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))?;
    pool.install(|| {
        (0..config.n_runs)
            .into_par_iter()
            .map(|l| {
                let opts = problem.run_options(run_seed(config.seed, l));
                admm::run(&problem.net, &problem.datasets, &problem.cfg, &problem.schedule, &opts).map_err(HarnessError::from)
            })
            .collect()
    })
}

/// Runs `n_runs` seeded runs and writes `metrics.csv`, `aggregate.csv`,
/// `ledger.csv` (private runs only), per-run trace CSVs under `traces/` and
/// `summary.json`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let problem = config.prepare()?;
    let digest = config.digest()?;
    let ledger: Option<PrivacyLedger> = match &problem.noise {
        Some(noise) if problem.mechanism.is_private() => Some(privacy_bound(
            &problem.schedule,
            noise,
            &problem.cfg,
            &problem.net,
            &problem.sizes(),
            problem.horizon,
        )?),
        _ => None,
    };

    let traces = run_all(config, &problem)?;
    let horizon = problem.horizon;
    let mut rows = Vec::with_capacity(traces.len() * (horizon + 1));
    let mut series = Vec::with_capacity(traces.len());
    for (l, trace) in traces.iter().enumerate() {
        let mut losses = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let loss = average_loss(trace, t, &problem.datasets)?;
            losses.push(loss);
            rows.push(MetricRow {
                run: l,
                t,
                loss,
                privacy: ledger.as_ref().map(|g| g.prefix(t)),
                consensus_residual: trace.consensus_residual(t),
            });
        }
        series.push(losses);
    }
    let agg = aggregate_runs(&series)?;

    fs::create_dir_all(out.join("traces"))?;
    let mut w = create(&out.join("metrics.csv"))?;
    writeln!(w, "{}", MetricRow::HEADER)?;
    for row in &rows {
        writeln!(w, "{}", row.to_csv_line())?;
    }
    w.flush()?;

    let mut w = create(&out.join("aggregate.csv"))?;
    writeln!(w, "t,L_mean,L_range")?;
    for t in 0..=horizon {
        writeln!(w, "{t},{},{}", agg.mean[t], agg.range[t])?;
    }
    w.flush()?;

    if let Some(g) = &ledger {
        g.write_csv(create(&out.join("ledger.csv"))?)?;
    }
    for (l, trace) in traces.iter().enumerate() {
        trace.write_summary_csv(l, create(&out.join("traces").join(format!("run_{l}_summary.csv")))?)?;
        trace.write_vectors_csv(l, create(&out.join("traces").join(format!("run_{l}_vectors.csv")))?)?;
    }

    let summary = RunSummary {
        beta: ledger.as_ref().map(|g| g.beta),
        l_mean_final: agg.mean[horizon],
        l_range_final: agg.range[horizon],
        iterations: horizon,
        config_digest: digest,
        mechanism: problem.mechanism,
        n_runs: config.n_runs,
        consensus_residual_final: traces.iter().map(|t| t.consensus_residual(horizon)).fold(0.0, f64::max),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Contents of `analysis.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSummary {
    pub iterations: usize,
    pub mu: f64,
    pub certificate_violations: Vec<usize>,
    pub delta_min: f64,
    pub delta_max: f64,
    pub final_stationarity: f64,
    pub final_consensus: f64,
    /// `max_i ||f_i(T) - f*||`.
    pub final_distance: f64,
    pub config_digest: String,
}

/// Runs the non-private variant of the configured experiment once and
/// writes the contraction certificate (`certificate.csv`), the rate bound
/// with its spectra per iteration (`delta.csv`), optimality residuals
/// (`optimality.csv`) and `analysis.json`.
pub fn analyze(config: &ExperimentConfig, out: &Path) -> Result<AnalysisSummary> {
    let problem = config.prepare()?;
    let spec = config.analysis.unwrap_or_default();
    let fstar = centralized_solve(&problem.datasets, &problem.cfg, spec.fstar_tol)?;
    let mut opts = problem.run_options(run_seed(config.seed, 0));
    opts.mechanism = Mechanism::None;
    opts.noise = None;
    let trace = admm::run(&problem.net, &problem.datasets, &problem.cfg, &problem.schedule, &opts)?;
    let rows = contraction_certificate(
        &trace,
        &fstar,
        &problem.net,
        &problem.datasets,
        &problem.cfg,
        &problem.schedule,
        spec.mu,
    )?;

    let base = RateInputs::from_schedule(&problem.net, &problem.datasets, &problem.cfg, &problem.schedule, 1, spec.mu);
    let mut deltas = Vec::with_capacity(problem.horizon);
    for t in 1..=problem.horizon {
        let inputs = base.with_penalties(problem.schedule.penalties_at(t));
        deltas.push((delta_lower_bound(&inputs)?, rate_spectra(&inputs)?));
    }

    let mut residuals = Vec::with_capacity(problem.horizon + 1);
    for t in 0..=problem.horizon {
        let f = trace.primal_matrix(t);
        let y = recover_y(&trace.dual_matrix(t), &problem.net)?;
        let r = optimality_residual(&f, &y, &problem.datasets, &problem.cfg, &problem.net)?;
        let dist = (0..trace.n_nodes()).map(|i| (trace.primal(t, i) - &fstar).norm()).fold(0.0, f64::max);
        residuals.push((r, dist));
    }

    fs::create_dir_all(out)?;
    analysis::write_certificate_csv(&rows, create(&out.join("certificate.csv"))?)?;
    let mut w = create(&out.join("delta.csv"))?;
    writeln!(w, "t,delta,sigma_min_laplacian,sigma_tilde_max,sigma_bar_max,sigma_bar_min")?;
    for (k, (delta, s)) in deltas.iter().enumerate() {
        writeln!(
            w,
            "{},{delta},{},{},{},{}",
            k + 1,
            s.sigma_min_laplacian,
            s.sigma_tilde_max,
            s.sigma_bar_max,
            s.sigma_bar_min
        )?;
    }
    w.flush()?;
    let mut w = create(&out.join("optimality.csv"))?;
    writeln!(w, "t,stationarity,consensus,distance_to_optimum")?;
    for (t, (r, dist)) in residuals.iter().enumerate() {
        writeln!(w, "{t},{},{},{dist}", r.stationarity, r.consensus)?;
    }
    w.flush()?;

    let (last, last_dist) = residuals.last().expect("horizon is at least 1");
    let summary = AnalysisSummary {
        iterations: problem.horizon,
        mu: spec.mu,
        certificate_violations: rows.iter().filter(|r| !r.holds).map(|r| r.t).collect(),
        delta_min: deltas.iter().map(|d| d.0).fold(f64::INFINITY, f64::min),
        delta_max: deltas.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max),
        final_stationarity: last.stationarity,
        final_consensus: last.consensus,
        final_distance: *last_dist,
        config_digest: config.digest()?,
    };
    write_json(&out.join("analysis.json"), &summary)?;
    Ok(summary)
}

/// Contents of `attack.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub node: usize,
    /// `reconstructed` or `unknown_schedule`.
    pub outcome: String,
    pub abs_cosine: Option<f64>,
    pub estimate: Option<Vec<f64>>,
    /// `y x` of the hidden sample, for scoring only.
    pub hidden_direction: Vec<f64>,
    pub config_digest: String,
}

/// Runs the configured experiment once and attacks the first sample of the
/// target node. Writes `attack.csv` (when the schedule is revealed) and
/// `attack.json`.
pub fn attack(config: &ExperimentConfig, out: &Path) -> Result<AttackSummary> {
    let problem = config.prepare()?;
    if problem.mechanism == Mechanism::Dvp {
        return Err(HarnessError::Config("the attack targets penalty perturbation or noise-free runs".into()));
    }
    let spec = config.attack.unwrap_or_default();
    if spec.node >= problem.net.n_nodes() {
        return Err(HarnessError::Config(format!("attack node {} is not in the network", spec.node)));
    }
    let target = &problem.datasets[spec.node];
    let (x, y) = target.sample(0);
    let known = target.select(&(1..target.len()).collect::<Vec<_>>());
    let knowledge = AttackerKnowledge {
        known,
        theta: problem.schedule.theta_for(spec.node),
        penalties: spec
            .reveal_schedule
            .then(|| (1..=problem.horizon).map(|t| problem.schedule.penalty_at(spec.node, t)).collect()),
    };
    let trace = admm::run(&problem.net, &problem.datasets, &problem.cfg, &problem.schedule, &problem.run_options(run_seed(config.seed, 0)))?;
    let hidden = &x * y;
    let result = analysis::attack_reconstruct(&trace, spec.node, &knowledge, &problem.net, &problem.cfg);

    fs::create_dir_all(out)?;
    let summary = match result {
        Ok(report) => {
            report.write_csv(create(&out.join("attack.csv"))?)?;
            AttackSummary {
                node: spec.node,
                outcome: "reconstructed".into(),
                abs_cosine: Some(report.abs_cosine(&hidden)),
                estimate: Some(report.estimate.iter().copied().collect()),
                hidden_direction: hidden.iter().copied().collect(),
                config_digest: config.digest()?,
            }
        }
        Err(madmm_core::Error::UnknownSchedule) => AttackSummary {
            node: spec.node,
            outcome: "unknown_schedule".into(),
            abs_cosine: None,
            estimate: None,
            hidden_direction: hidden.iter().copied().collect(),
            config_digest: config.digest()?,
        },
        Err(e) => return Err(e.into()),
    };
    write_json(&out.join("attack.json"), &summary)?;
    Ok(summary)
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub samples: usize,
    pub dim: usize,
    pub dropped_rows: usize,
    pub feature_names: Vec<String>,
    pub reference: Option<ReferenceComparison>,
    /// Differences from the published census size; informational only.
    pub deviations: Vec<String>,
}

/// Cleans, encodes and scales a raw table. Writes `dataset.csv` and
/// `report.json`.
pub fn preprocess(config: &PreprocessConfig, out: &Path) -> Result<PreprocessReport> {
    let schema = Schema::from_json(&fs::read_to_string(config.base_dir.join(&config.schema))?)?;
    let raw = RawTable::from_path(schema, &config.base_dir.join(&config.input))?;
    let result = data::preprocess(&raw)?;
    let reference = config.compare_reference.then(|| ReferenceComparison::new(&result));
    let report = PreprocessReport {
        samples: result.dataset.len(),
        dim: result.dataset.dim(),
        dropped_rows: result.dropped_rows,
        feature_names: result.feature_names.clone(),
        deviations: reference.as_ref().map(ReferenceComparison::deviations).unwrap_or_default(),
        reference,
    };
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("dataset.csv"))?;
    data::write_dataset(&result.dataset, &mut w)?;
    w.flush()?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
