//! Modified consensus ADMM with node-private penalties.
//!
//! Iteration `t` (for `t = 1..=T`) runs, for every node `i`,
//!
//! ```text
//! f_i(t) = argmin_f  O(f, D_i) + 2 lambda_i(t-1)^T f
//!                    + eta_i(t) * sum_{j in V_i} || f + eps_i(t) - (f_i(t-1) + f_j(t-1)) / 2 ||^2
//! ```
//!
//! then broadcasts, then updates its dual with the shared step `theta`:
//!
//! ```text
//! lambda_i(t) = lambda_i(t-1) + theta / 2 * sum_{j in V_i} (f_i(t) - f_j(t))
//! ```
//!
//! `eps_i(t)` is zero for non-private runs. With dual variable perturbation
//! the noise instead shifts the dual by `eta_i(t) V_i eps_i(t)` for that one
//! primal solve.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ScheduleCondition, ScheduleViolation};
use crate::graph::Network;
use crate::model::{ErmConfig, ErmObjective, LabeledDataset, Objective};
use crate::privacy::{self, NoiseSchedule};
use crate::rng::{self, Purpose};
use crate::solver::{self, SolveReport, SolverSettings};
use crate::{Error, Result};

/// Geometric per-node penalties `eta_i(t) = eta_i(1) q_i^(t-1)` and the dual step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub eta1: Vec<f64>,
    pub q: Vec<f64>,
    pub theta: f64,
    /// Optional per-node dual steps overriding `theta`. Convergence with
    /// these is only checked empirically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_theta: Option<Vec<f64>>,
}

impl PenaltySchedule {
    pub fn new(eta1: Vec<f64>, q: Vec<f64>, theta: f64) -> Result<Self> {
        if eta1.len() != q.len() {
            return Err(Error::DimensionMismatch { expected: eta1.len(), got: q.len() });
        }
        Ok(Self { eta1, q, theta, node_theta: None })
    }

    /// Same `eta(t) = eta1 q^(t-1)` at every node.
    pub fn shared(n_nodes: usize, eta1: f64, q: f64, theta: f64) -> Self {
        Self { eta1: vec![eta1; n_nodes], q: vec![q; n_nodes], theta, node_theta: None }
    }

    /// `eta_i(t) = theta` for all nodes and iterations: the simplified
    /// conventional ADMM.
    pub fn constant(n_nodes: usize, theta: f64) -> Self {
        Self::shared(n_nodes, theta, 1.0, theta)
    }

    pub fn n_nodes(&self) -> usize {
        self.eta1.len()
    }

    /// `eta_i(t)` for `t >= 1`.
    pub fn penalty_at(&self, node: usize, t: usize) -> f64 {
        assert!(t >= 1, "penalties are indexed from t = 1");
        self.eta1[node] * self.q[node].powi((t - 1) as i32)
    }

    pub fn penalties_at(&self, t: usize) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.penalty_at(i, t)).collect()
    }

    pub fn theta_for(&self, node: usize) -> f64 {
        self.node_theta.as_ref().map_or(self.theta, |v| v[node])
    }
}

/// Checks `eta_i(t+1) >= eta_i(t) >= theta > 0` with finite penalties for
/// every node and `t <= horizon`. All violations are returned.
pub fn validate_schedules(s: &PenaltySchedule, horizon: usize) -> std::result::Result<(), Vec<ScheduleViolation>> {
    let mut violations = Vec::new();
    if s.eta1.len() != s.q.len() || s.node_theta.as_ref().is_some_and(|v| v.len() != s.eta1.len()) {
        return Err(vec![ScheduleViolation { node: 0, t: 0, condition: ScheduleCondition::NonFinite }]);
    }
    for i in 0..s.n_nodes() {
        let theta = s.theta_for(i);
        if !(theta > 0.0) || !theta.is_finite() {
            violations.push(ScheduleViolation { node: i, t: 0, condition: ScheduleCondition::NonPositiveStep });
            continue;
        }
        for t in 1..=horizon.max(1) {
            let eta = s.penalty_at(i, t);
            if !eta.is_finite() {
                violations.push(ScheduleViolation { node: i, t, condition: ScheduleCondition::NonFinite });
                break;
            }
            if eta < theta {
                violations.push(ScheduleViolation { node: i, t, condition: ScheduleCondition::BelowStep });
                break;
            }
            if t < horizon && s.penalty_at(i, t + 1) < eta {
                violations.push(ScheduleViolation { node: i, t, condition: ScheduleCondition::Decreasing });
                break;
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Non-private M-ADMM.
    None,
    /// Noise inside the penalty term.
    Pp,
    /// Noise added to the dual before the primal solve.
    Dvp,
}

impl Mechanism {
    pub fn is_private(self) -> bool {
        !matches!(self, Mechanism::None)
    }
}

/// Primal and dual variables of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub f: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl NodeState {
    pub fn new(f: DVector<f64>) -> Self {
        let d = f.len();
        Self { f, lambda: DVector::zeros(d) }
    }
}

/// Objective of one primal update, divided by `max(1, 2 eta V)` so that the
/// solver tolerance stays meaningful when the penalty grows geometrically.
struct PrimalSurrogate<'a, O: Objective + ?Sized> {
    local: &'a O,
    lambda: &'a DVector<f64>,
    anchors: Vec<DVector<f64>>,
    eta: f64,
    noise: Option<&'a DVector<f64>>,
    scale: f64,
}

impl<O: Objective + ?Sized> Objective for PrimalSurrogate<'_, O> {
    fn dim(&self) -> usize {
        self.local.dim()
    }

    fn value(&self, f: &DVector<f64>) -> f64 {
        self.value_and_gradient(f).0
    }

    fn gradient(&self, f: &DVector<f64>) -> DVector<f64> {
        self.value_and_gradient(f).1
    }

    fn value_and_gradient(&self, f: &DVector<f64>) -> (f64, DVector<f64>) {
        let (mut value, mut grad) = self.local.value_and_gradient(f);
        value += 2.0 * self.lambda.dot(f);
        grad += self.lambda * 2.0;
        for anchor in &self.anchors {
            let mut r = f - anchor;
            if let Some(eps) = self.noise {
                r += eps;
            }
            value += self.eta * r.norm_squared();
            grad += r * (2.0 * self.eta);
        }
        (value / self.scale, grad / self.scale)
    }
}

fn check_len(v: &DVector<f64>, d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
    }
    Ok(())
}

/// One primal update for an arbitrary local objective.
///
/// `own_prev` is `f_i(t-1)` (also the warm start) and `neighbor_prev` holds
/// `f_j(t-1)` for `j` in `V_i`. `noise` is the penalty perturbation `eps_i(t)`.
pub fn primal_update<O: Objective + ?Sized>(
    local: &O,
    lambda: &DVector<f64>,
    own_prev: &DVector<f64>,
    neighbor_prev: &[&DVector<f64>],
    eta: f64,
    noise: Option<&DVector<f64>>,
    settings: &SolverSettings,
) -> Result<SolveReport> {
    let d = local.dim();
    check_len(lambda, d)?;
    check_len(own_prev, d)?;
    for f in neighbor_prev {
        check_len(f, d)?;
    }
    if let Some(eps) = noise {
        check_len(eps, d)?;
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("penalty must be positive, got {eta}")));
    }
    let anchors: Vec<DVector<f64>> = neighbor_prev.iter().map(|fj| (own_prev + *fj) * 0.5).collect();
    let v = anchors.len() as f64;
    let surrogate = PrimalSurrogate { local, lambda, anchors, eta, noise, scale: (2.0 * eta * v).max(1.0) };
    let report = solver::minimize(&surrogate, own_prev.clone(), settings)?;
    if !report.converged {
        return Err(Error::SolverDidNotConverge { gradient_norm: report.gradient_norm, iterations: report.iterations });
    }
    Ok(report)
}

/// Primal update of node `i` with the logistic ERM objective.
pub fn madmm_primal_update(
    data: &LabeledDataset,
    cfg: &ErmConfig,
    state: &NodeState,
    neighbor_f: &[&DVector<f64>],
    eta: f64,
    noise: Option<&DVector<f64>>,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    let local = ErmObjective::logistic(data, cfg);
    primal_update(&local, &state.lambda, &state.f, neighbor_f, eta, noise, settings).map(|r| r.solution)
}

/// Residual of the primal stationarity condition
/// `grad O(f) + 2 lambda + eta sum_j (2 f - f_i(t-1) - f_j(t-1)) + 2 eta V eps`.
pub fn primal_kkt_residual(
    local_gradient: &DVector<f64>,
    lambda: &DVector<f64>,
    f_new: &DVector<f64>,
    own_prev: &DVector<f64>,
    neighbor_prev: &[&DVector<f64>],
    eta: f64,
    noise: Option<&DVector<f64>>,
) -> DVector<f64> {
    let mut r = local_gradient + lambda * 2.0;
    for fj in neighbor_prev {
        r += (f_new * 2.0 - own_prev - *fj) * eta;
    }
    if let Some(eps) = noise {
        r += eps * (2.0 * eta * neighbor_prev.len() as f64);
    }
    r
}

/// `lambda_i + theta / 2 * sum_j (f_i - f_j)`.
pub fn dual_update(
    lambda: &DVector<f64>,
    own_f_next: &DVector<f64>,
    neighbor_f_next: &[&DVector<f64>],
    theta: f64,
) -> Result<DVector<f64>> {
    let d = lambda.len();
    check_len(own_f_next, d)?;
    let mut out = lambda.clone();
    for fj in neighbor_f_next {
        check_len(fj, d)?;
        out += (own_f_next - *fj) * (0.5 * theta);
    }
    Ok(out)
}

/// How `f_i(0)` is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialPrimal {
    /// Independent standard normal draws per node, from the run seed.
    StandardNormal,
    Zeros,
    Given(Vec<DVector<f64>>),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mechanism: Mechanism,
    pub noise: Option<NoiseSchedule>,
    pub horizon: usize,
    pub seed: u64,
    pub solver: SolverSettings,
    pub init: InitialPrimal,
    /// Solve the per-node updates of an iteration on the rayon pool.
    pub parallel: bool,
}

impl RunOptions {
    pub fn non_private(horizon: usize, seed: u64) -> Self {
        Self {
            mechanism: Mechanism::None,
            noise: None,
            horizon,
            seed,
            solver: SolverSettings::default(),
            init: InitialPrimal::StandardNormal,
            parallel: false,
        }
    }

    pub fn private(mechanism: Mechanism, noise: NoiseSchedule, horizon: usize, seed: u64) -> Self {
        Self { mechanism, noise: Some(noise), ..Self::non_private(horizon, seed) }
    }
}

/// All node variables at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub primal: Vec<DVector<f64>>,
    pub dual: Vec<DVector<f64>>,
    /// `eps_i(t)`; zero at `t = 0` and for non-private runs.
    pub noise: Vec<DVector<f64>>,
    /// `eta_i(t)`; zero at `t = 0`.
    pub penalty: Vec<f64>,
}

/// Snapshots for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateTrace {
    pub mechanism: Mechanism,
    pub snapshots: Vec<Snapshot>,
    edges: Vec<(usize, usize)>,
}

impl IterateTrace {
    pub fn horizon(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.snapshots[0].primal.len()
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].primal[0].len()
    }

    pub fn at(&self, t: usize) -> Result<&Snapshot> {
        self.snapshots.get(t).ok_or(Error::IterationOutOfRange { t, len: self.snapshots.len() })
    }

    pub fn primal(&self, t: usize, node: usize) -> &DVector<f64> {
        &self.snapshots[t].primal[node]
    }

    pub fn dual(&self, t: usize, node: usize) -> &DVector<f64> {
        &self.snapshots[t].dual[node]
    }

    /// `N x d` matrix with row `i` equal to `f_i(t)`.
    pub fn primal_matrix(&self, t: usize) -> DMatrix<f64> {
        stack_rows(&self.snapshots[t].primal)
    }

    pub fn dual_matrix(&self, t: usize) -> DMatrix<f64> {
        stack_rows(&self.snapshots[t].dual)
    }

    /// Largest `||f_i(t) - f_j(t)||` over edges (zero for a single node).
    pub fn consensus_residual(&self, t: usize) -> f64 {
        let f = &self.snapshots[t].primal;
        self.edges.iter().map(|&(i, j)| (&f[i] - &f[j]).norm()).fold(0.0, f64::max)
    }

    /// `||sum_i lambda_i(t)||`.
    pub fn dual_sum_norm(&self, t: usize) -> f64 {
        let d = self.dim();
        self.snapshots[t].dual.iter().fold(DVector::zeros(d), |acc, l| acc + l).norm()
    }

    /// Per-node summary rows: `run_id,t,node,f_norm,consensus_residual,eta,eps_norm`.
    pub fn write_summary_csv<W: Write>(&self, run_id: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run_id", "t", "node", "f_norm", "consensus_residual", "eta", "eps_norm"])?;
        for (t, snap) in self.snapshots.iter().enumerate() {
            let residual = self.consensus_residual(t);
            for i in 0..snap.primal.len() {
                w.write_record(&[
                    run_id.to_string(),
                    t.to_string(),
                    i.to_string(),
                    snap.primal[i].norm().to_string(),
                    residual.to_string(),
                    snap.penalty[i].to_string(),
                    snap.noise[i].norm().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Full primal vectors: `run_id,t,node,v1..vd`.
    pub fn write_vectors_csv<W: Write>(&self, run_id: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["run_id".to_string(), "t".to_string(), "node".to_string()];
        header.extend((1..=self.dim()).map(|k| format!("v{k}")));
        w.write_record(&header)?;
        for (t, snap) in self.snapshots.iter().enumerate() {
            for (i, f) in snap.primal.iter().enumerate() {
                let mut row = vec![run_id.to_string(), t.to_string(), i.to_string()];
                row.extend(f.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn stack_rows(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k])
}

fn initial_primal(init: &InitialPrimal, n: usize, d: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    match init {
        InitialPrimal::StandardNormal => Ok((0..n)
            .map(|i| {
                let mut rng = rng::stream(seed, Purpose::Init, i as u64, 0);
                DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng))
            })
            .collect()),
        InitialPrimal::Zeros => Ok(vec![DVector::zeros(d); n]),
        InitialPrimal::Given(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: v.len() });
            }
            for f in v {
                check_len(f, d)?;
            }
            Ok(v.clone())
        }
    }
}

fn check_problem(net: &Network, datasets: &[LabeledDataset], cfg: &ErmConfig) -> Result<usize> {
    if net.n_nodes() != cfg.n_nodes {
        return Err(Error::DimensionMismatch { expected: net.n_nodes(), got: cfg.n_nodes });
    }
    cfg.validate(datasets)?;
    Ok(datasets[0].dim())
}

/// Noise `eps_i(t)` drawn from the `(seed, node, t)` stream.
pub fn draw_noise(noise: &NoiseSchedule, seed: u64, node: usize, t: usize, d: usize) -> Result<DVector<f64>> {
    let mut rng = rng::stream(seed, Purpose::Noise, node as u64, t as u64);
    privacy::sample_penalty_noise(noise.alpha_at(node, t), d, &mut rng)
}

/// Runs `T = opts.horizon` synchronous rounds of (private) M-ADMM.
pub fn run(
    net: &Network,
    datasets: &[LabeledDataset],
    cfg: &ErmConfig,
    schedule: &PenaltySchedule,
    opts: &RunOptions,
) -> Result<IterateTrace> {
    let d = check_problem(net, datasets, cfg)?;
    let n = net.n_nodes();
    if schedule.n_nodes() != n {
        return Err(Error::DimensionMismatch { expected: n, got: schedule.n_nodes() });
    }
    validate_schedules(schedule, opts.horizon).map_err(Error::ScheduleInvalid)?;
    let noise_schedule = if opts.mechanism.is_private() {
        let noise = opts
            .noise
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("private mechanisms need a noise schedule".into()))?;
        if noise.n_nodes() != n {
            return Err(Error::DimensionMismatch { expected: n, got: noise.n_nodes() });
        }
        let sizes: Vec<usize> = datasets.iter().map(LabeledDataset::len).collect();
        let thetas: Vec<f64> = (0..n).map(|i| schedule.theta_for(i)).collect();
        privacy::check_theta_condition_per_node(&thetas, &sizes, cfg, net).map_err(Error::ThetaConditionViolated)?;
        Some(noise)
    } else {
        None
    };

    let f0 = initial_primal(&opts.init, n, d, opts.seed)?;
    let mut snapshots = Vec::with_capacity(opts.horizon + 1);
    snapshots.push(Snapshot {
        primal: f0,
        dual: vec![DVector::zeros(d); n],
        noise: vec![DVector::zeros(d); n],
        penalty: vec![0.0; n],
    });

    for t in 1..=opts.horizon {
        let prev = snapshots.last().expect("t = 0 snapshot");
        let node_step = |i: usize| -> Result<(DVector<f64>, DVector<f64>, f64)> {
            let eta = schedule.penalty_at(i, t);
            let eps = match noise_schedule {
                Some(ns) => draw_noise(ns, opts.seed, i, t, d)?,
                None => DVector::zeros(d),
            };
            let neighbors: Vec<&DVector<f64>> = net.neighbors(i).iter().map(|&j| &prev.primal[j]).collect();
            let local = ErmObjective::logistic(&datasets[i], cfg);
            let report = match opts.mechanism {
                Mechanism::None => primal_update(&local, &prev.dual[i], &prev.primal[i], &neighbors, eta, None, &opts.solver)?,
                Mechanism::Pp => {
                    primal_update(&local, &prev.dual[i], &prev.primal[i], &neighbors, eta, Some(&eps), &opts.solver)?
                }
                Mechanism::Dvp => {
                    let shifted = privacy::dvp_dual_shift(&prev.dual[i], eta, neighbors.len(), &eps)?;
                    primal_update(&local, &shifted, &prev.primal[i], &neighbors, eta, None, &opts.solver)?
                }
            };
            Ok((report.solution, eps, eta))
        };
        let results: Vec<Result<_>> = if opts.parallel {
            (0..n).into_par_iter().map(node_step).collect()
        } else {
            (0..n).map(node_step).collect()
        };
        let mut primal = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        let mut penalty = Vec::with_capacity(n);
        for r in results {
            let (f, eps, eta) = r?;
            primal.push(f);
            noise.push(eps);
            penalty.push(eta);
        }
        let dual = (0..n)
            .map(|i| {
                let neighbors: Vec<&DVector<f64>> = net.neighbors(i).iter().map(|&j| &primal[j]).collect();
                dual_update(&prev.dual[i], &primal[i], &neighbors, schedule.theta_for(i))
            })
            .collect::<Result<Vec<_>>>()?;
        snapshots.push(Snapshot { primal, dual, noise, penalty });
    }

    Ok(IterateTrace { mechanism: opts.mechanism, snapshots, edges: net.edges().to_vec() })
}

/// Edge variables of the four-step ADMM, indexed like
/// [`ConventionalTrace::pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairSnapshot {
    pub w: Vec<DVector<f64>>,
    pub lambda_a: Vec<DVector<f64>>,
    pub lambda_b: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct ConventionalTrace {
    /// Node-level view with `lambda_i = sum_j lambda^a_ij`.
    pub trace: IterateTrace,
    /// Directed pairs `(i, j)` with `j` a neighbor of `i`.
    pub pairs: Vec<(usize, usize)>,
    pub pair_snapshots: Vec<PairSnapshot>,
}

impl ConventionalTrace {
    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (i, j))
    }
}

/// Conventional ADMM with auxiliary `w_ij` and duals `lambda^a_ij`,
/// `lambda^b_ij` (all duals start at zero, `w_ij(0) = (f_i(0) + f_j(0)) / 2`).
///
/// Kept as an independent oracle for the simplified node-level iteration.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn conventional_admm_run(
    net: &Network,
    datasets: &[LabeledDataset],
    cfg: &ErmConfig,
    eta: f64,
    horizon: usize,
    init: &InitialPrimal,
    seed: u64,
    settings: &SolverSettings,
) -> Result<ConventionalTrace> {
    let d = check_problem(net, datasets, cfg)?;
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("penalty must be positive, got {eta}")));
    }
    let n = net.n_nodes();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| net.neighbors(i).iter().map(move |&j| (i, j))).collect();
    let index = |i: usize, j: usize| pairs.iter().position(|&p| p == (i, j)).expect("pair exists");

    let f0 = initial_primal(init, n, d, seed)?;
    let w0 = pairs.iter().map(|&(i, j)| (&f0[i] + &f0[j]) * 0.5).collect();
    let mut pair_snapshots = vec![PairSnapshot {
        w: w0,
        lambda_a: vec![DVector::zeros(d); pairs.len()],
        lambda_b: vec![DVector::zeros(d); pairs.len()],
    }];
    let mut snapshots = vec![Snapshot {
        primal: f0,
        dual: vec![DVector::zeros(d); n],
        noise: vec![DVector::zeros(d); n],
        penalty: vec![0.0; n],
    }];

    for _t in 1..=horizon {
        let prev = snapshots.last().expect("snapshot");
        let pp = pair_snapshots.last().expect("pair snapshot");

        // f-update: O(f) + sum_j [(la_ij - lb_ji)^T f + eta/2 ||f - w_ij||^2 + eta/2 ||w_ji - f||^2]
        let mut primal = Vec::with_capacity(n);
        for i in 0..n {
            let mut linear = DVector::zeros(d);
            let mut anchors = Vec::new();
            for &j in net.neighbors(i) {
                let ij = index(i, j);
                let ji = index(j, i);
                linear += &pp.lambda_a[ij] - &pp.lambda_b[ji];
                anchors.push(pp.w[ij].clone());
                anchors.push(pp.w[ji].clone());
            }
            let local = ErmObjective::logistic(&datasets[i], cfg);
            let scale = (2.0 * eta * net.degree(i) as f64).max(1.0);
            let objective = solver::FnObjective::new(d, |f: &DVector<f64>| {
                let (mut v, mut g) = local.value_and_gradient(f);
                v += linear.dot(f);
                g += &linear;
                for a in &anchors {
                    let r = f - a;
                    v += 0.5 * eta * r.norm_squared();
                    g += r * eta;
                }
                (v / scale, g / scale)
            });
            let report = solver::minimize(&objective, prev.primal[i].clone(), settings)?;
            if !report.converged {
                return Err(Error::SolverDidNotConverge {
                    gradient_norm: report.gradient_norm,
                    iterations: report.iterations,
                });
            }
            primal.push(report.solution);
        }

        // w-update: argmin_w -la^T w + lb^T w + eta/2 (||f_i - w||^2 + ||w - f_j||^2)
        let w: Vec<DVector<f64>> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| (&primal[i] + &primal[j]) * 0.5 + (&pp.lambda_a[k] - &pp.lambda_b[k]) / (2.0 * eta))
            .collect();
        let lambda_a: Vec<DVector<f64>> =
            pairs.iter().enumerate().map(|(k, &(i, _))| &pp.lambda_a[k] + (&primal[i] - &w[k]) * eta).collect();
        let lambda_b: Vec<DVector<f64>> =
            pairs.iter().enumerate().map(|(k, &(_, j))| &pp.lambda_b[k] + (&w[k] - &primal[j]) * eta).collect();

        let dual = (0..n)
            .map(|i| net.neighbors(i).iter().fold(DVector::zeros(d), |acc, &j| acc + &lambda_a[index(i, j)]))
            .collect();
        snapshots.push(Snapshot { primal, dual, noise: vec![DVector::zeros(d); n], penalty: vec![eta; n] });
        pair_snapshots.push(PairSnapshot { w, lambda_a, lambda_b });
    }

    Ok(ConventionalTrace {
        trace: IterateTrace { mechanism: Mechanism::None, snapshots, edges: net.edges().to_vec() },
        pairs,
        pair_snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::model::{centralized_solve, local_gradient};
    use approx::assert_relative_eq;

    struct Quadratic(DVector<f64>);

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, f: &DVector<f64>) -> f64 {
            0.5 * (f - &self.0).norm_squared()
        }
        fn gradient(&self, f: &DVector<f64>) -> DVector<f64> {
            f - &self.0
        }
    }

    fn tight() -> SolverSettings {
        SolverSettings { tol: 1e-12, ..Default::default() }
    }

    #[test]
    fn penalty_schedule_values() {
        let s = PenaltySchedule::new(vec![0.55, 0.5, 0.7], vec![1.2, 1.1, 1.0], 0.5).unwrap();
        assert_eq!(s.penalty_at(0, 1), 0.55);
        assert_relative_eq!(s.penalty_at(1, 3), 0.605, epsilon = 1e-15);
        assert_eq!(s.penalty_at(2, 40), 0.7);
    }

    #[test]
    fn schedule_validation() {
        let ok = PenaltySchedule::new(vec![0.55, 0.65, 0.6, 0.55, 0.6], vec![1.01, 1.03, 1.1, 1.2, 1.02], 0.5).unwrap();
        assert!(validate_schedules(&ok, 500).is_ok());

        let low = PenaltySchedule::shared(1, 0.4, 1.0, 0.5);
        let v = validate_schedules(&low, 10).unwrap_err();
        assert_eq!(v[0].condition, ScheduleCondition::BelowStep);
        assert_eq!(v[0].t, 1);

        let dec = PenaltySchedule::shared(1, 5.0, 0.9, 0.5);
        let v = validate_schedules(&dec, 10).unwrap_err();
        assert_eq!((v[0].t, v[0].condition), (1, ScheduleCondition::Decreasing));

        let huge = PenaltySchedule::shared(1, 0.5, 10.0, 0.5);
        let v = validate_schedules(&huge, 400).unwrap_err();
        assert_eq!(v[0].condition, ScheduleCondition::NonFinite);

        let bad_theta = PenaltySchedule::shared(2, 0.5, 1.0, 0.0);
        assert_eq!(validate_schedules(&bad_theta, 3).unwrap_err().len(), 2);
    }

    #[test]
    fn isolated_node_primal_is_local_minimizer() {
        let data = synthetic(1, 3, &[30], 4, 1.5).unwrap().remove(0);
        let cfg = ErmConfig::logistic(1.0, 0.5, 1);
        let state = NodeState::new(DVector::from_vec(vec![0.3, -0.2, 1.0]));
        let f = madmm_primal_update(&data, &cfg, &state, &[], 0.7, None, &tight()).unwrap();
        let fc = centralized_solve(&[data], &cfg, 1e-12).unwrap();
        assert!((f - fc).amax() <= 1e-10);
    }

    #[test]
    fn quadratic_primal_closed_form() {
        let a = DVector::from_vec(vec![1.0, -2.0]);
        let b = DVector::from_vec(vec![0.4, 0.1]);
        // every anchor (f_i + f_j)/2 equals b when f_i = f_j = b
        let neighbors = [&b, &b, &b];
        let eta = 0.75;
        let lambda = DVector::zeros(2);
        let r = primal_update(&Quadratic(a.clone()), &lambda, &b, &neighbors, eta, None, &tight()).unwrap();
        let v = 3.0;
        let closed = (&a + &b * (2.0 * eta * v)) / (1.0 + 2.0 * eta * v);
        assert!((r.solution - closed).amax() <= 1e-11);
    }

    #[test]
    fn primal_update_satisfies_kkt() {
        let shards = synthetic(3, 4, &[20, 20, 20], 9, 1.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.3, 3);
        let own = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.5]);
        let n1 = DVector::from_vec(vec![-0.4, 0.0, 0.3, 0.2]);
        let n2 = DVector::from_vec(vec![0.9, -0.1, 0.0, 0.1]);
        let lambda = DVector::from_vec(vec![0.05, -0.2, 0.1, 0.0]);
        let eps = DVector::from_vec(vec![0.3, -0.1, 0.05, 0.2]);
        let eta = 0.5;
        let settings = SolverSettings::default();
        let state = NodeState { f: own.clone(), lambda: lambda.clone() };
        let f = madmm_primal_update(&shards[0], &cfg, &state, &[&n1, &n2], eta, Some(&eps), &settings).unwrap();
        let g = crate::model::local_gradient(&f, &shards[0], &cfg).unwrap();
        let r = primal_kkt_residual(&g, &lambda, &f, &own, &[&n1, &n2], eta, Some(&eps));
        assert!(r.norm() <= 10.0 * settings.tol, "residual {}", r.norm());
    }

    #[test]
    fn pp_and_dual_shift_agree() {
        let shards = synthetic(2, 3, &[15, 15], 2, 1.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.2, 2);
        let own = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let nb = DVector::from_vec(vec![-0.4, 0.0, 0.3]);
        let lambda = DVector::from_vec(vec![0.05, -0.2, 0.1]);
        let eps = DVector::from_vec(vec![0.3, -0.1, 0.05]);
        let local = ErmObjective::logistic(&shards[0], &cfg);
        let pp = primal_update(&local, &lambda, &own, &[&nb], 0.5, Some(&eps), &tight()).unwrap();
        let shifted = privacy::dvp_dual_shift(&lambda, 0.5, 1, &eps).unwrap();
        let dvp = primal_update(&local, &shifted, &own, &[&nb], 0.5, None, &tight()).unwrap();
        assert!((pp.solution - dvp.solution).amax() <= 1e-10);
    }

    #[test]
    fn dual_update_examples() {
        let z = DVector::from_vec(vec![0.3]);
        let same = DVector::from_vec(vec![1.2]);
        assert_eq!(dual_update(&z, &same, &[&same, &same], 0.5).unwrap(), z);

        let f1 = DVector::from_vec(vec![1.0]);
        let f2 = DVector::from_vec(vec![0.0]);
        let zero = DVector::zeros(1);
        assert_relative_eq!(dual_update(&zero, &f1, &[&f2], 0.5).unwrap()[0], 0.25);
        assert_relative_eq!(dual_update(&zero, &f2, &[&f1], 0.5).unwrap()[0], -0.25);

        let wrong = DVector::zeros(2);
        assert!(matches!(dual_update(&zero, &wrong, &[], 0.5), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_node_run_reaches_local_optimum_in_one_step() {
        let net = Network::new(1, &[]).unwrap();
        let data = synthetic(1, 3, &[25], 11, 2.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.4, 1);
        let schedule = PenaltySchedule::constant(1, 0.5);
        let mut opts = RunOptions::non_private(1, 3);
        opts.solver = tight();
        let trace = run(&net, &data, &cfg, &schedule, &opts).unwrap();
        let fc = centralized_solve(&data, &cfg, 1e-12).unwrap();
        assert!((trace.primal(1, 0) - fc).amax() <= 1e-10);
        assert_eq!(trace.dual(1, 0).norm(), 0.0);
    }

    #[test]
    fn identical_data_keeps_symmetric_iterates() {
        let net = Network::complete(4).unwrap();
        let shard = synthetic(1, 3, &[40], 5, 1.5).unwrap().remove(0);
        let data = vec![shard.clone(); 4];
        let cfg = ErmConfig::logistic(1.0, 0.4, 4);
        let schedule = PenaltySchedule::constant(4, 0.5);
        let mut opts = RunOptions::non_private(30, 1);
        opts.init = InitialPrimal::Given(vec![DVector::from_vec(vec![0.5, -1.0, 2.0]); 4]);
        let trace = run(&net, &data, &cfg, &schedule, &opts).unwrap();
        for t in 0..=30 {
            assert_eq!(trace.consensus_residual(t), 0.0);
        }
        // Duals stay zero, so each round is a proximal step
        // grad O(f(t)) + 2 eta V (f(t) - f(t-1)) = 0 moving towards f_c*.
        let fc = centralized_solve(&data, &cfg, 1e-12).unwrap();
        let mut last = f64::INFINITY;
        for t in 1..=30 {
            assert_eq!(trace.dual(t, 0).norm(), 0.0);
            let f = trace.primal(t, 0);
            let r = local_gradient(f, &shard, &cfg).unwrap() + (f - trace.primal(t - 1, 0)) * 3.0;
            assert!(r.norm() <= 1e-8, "t = {t}: {}", r.norm());
            let dist = (f - &fc).norm();
            assert!(dist < last);
            last = dist;
        }
    }

    #[test]
    fn dual_sum_is_conserved() {
        let net = Network::ring_with_chord(5).unwrap();
        let data = synthetic(5, 3, &[20; 5], 8, 1.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.2, 5);
        let schedule = PenaltySchedule::new(vec![0.55, 0.65, 0.6, 0.55, 0.6], vec![1.01, 1.03, 1.1, 1.2, 1.02], 0.5).unwrap();
        let noise = NoiseSchedule::shared(5, 3.0, 1.02);
        for mechanism in [Mechanism::None, Mechanism::Pp, Mechanism::Dvp] {
            let opts = RunOptions { mechanism, noise: Some(noise.clone()), ..RunOptions::non_private(40, 2) };
            let trace = run(&net, &data, &cfg, &schedule, &opts).unwrap();
            for t in 0..=40 {
                assert!(trace.dual_sum_norm(t) <= 1e-10, "{mechanism:?} t={t}");
            }
        }
    }

    #[test]
    fn parallel_and_sequential_runs_match_bitwise() {
        let net = Network::ring_with_chord(5).unwrap();
        let data = synthetic(5, 4, &[30; 5], 1, 1.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.2, 5);
        let schedule = PenaltySchedule::shared(5, 0.5, 1.02, 0.5);
        let mut opts = RunOptions::private(Mechanism::Pp, NoiseSchedule::shared(5, 3.0, 1.01), 25, 77);
        let a = run(&net, &data, &cfg, &schedule, &opts).unwrap();
        opts.parallel = true;
        let b = run(&net, &data, &cfg, &schedule, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn private_runs_enforce_guards() {
        let net = Network::complete(2).unwrap();
        let data = synthetic(2, 2, &[5, 5], 1, 1.0).unwrap();
        let cfg = ErmConfig::logistic(5.0, 0.0, 2);
        let schedule = PenaltySchedule::constant(2, 0.2);
        // 2 c1 = 0.5 < (B/C)(rho/N + 2 theta V) = 0.4 fails
        let opts = RunOptions::private(Mechanism::Pp, NoiseSchedule::shared(2, 1.0, 1.0), 3, 0);
        assert!(matches!(run(&net, &data, &cfg, &schedule, &opts), Err(Error::ThetaConditionViolated(_))));

        let no_noise = RunOptions { noise: None, ..opts.clone() };
        assert!(matches!(run(&net, &data, &cfg, &PenaltySchedule::constant(2, 1.0), &no_noise), Err(Error::InvalidParameter(_))));

        let bad = PenaltySchedule::shared(2, 0.4, 1.0, 0.5);
        assert!(matches!(
            run(&net, &data, &cfg, &bad, &RunOptions::non_private(3, 0)),
            Err(Error::ScheduleInvalid(_))
        ));
    }

    #[test]
    fn conventional_dual_symmetries_and_midpoints() {
        let net = Network::erdos_renyi(4, 0.6, 3).unwrap();
        let data = synthetic(4, 3, &[10; 4], 3, 1.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.3, 4);
        let conv = conventional_admm_run(&net, &data, &cfg, 0.5, 15, &InitialPrimal::StandardNormal, 4, &tight()).unwrap();
        for (t, ps) in conv.pair_snapshots.iter().enumerate() {
            for (k, &(i, j)) in conv.pairs.iter().enumerate() {
                let ji = conv.pair_index(j, i).unwrap();
                assert!((&ps.lambda_a[k] - &ps.lambda_b[k]).amax() <= 1e-12);
                assert!((&ps.lambda_a[k] + &ps.lambda_a[ji]).amax() <= 1e-12);
                assert!((&ps.lambda_b[k] + &ps.lambda_b[ji]).amax() <= 1e-12);
                let mid = (conv.trace.primal(t, i) + conv.trace.primal(t, j)) * 0.5;
                assert!((&ps.w[k] - mid).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn trace_csv_shapes() {
        let net = Network::path(2).unwrap();
        let data = synthetic(2, 2, &[4, 4], 1, 1.0).unwrap();
        let cfg = ErmConfig::logistic(1.0, 0.3, 2);
        let trace = run(&net, &data, &cfg, &PenaltySchedule::constant(2, 0.5), &RunOptions::non_private(2, 0)).unwrap();
        let mut buf = Vec::new();
        trace.write_summary_csv(0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(text.starts_with("run_id,t,node,f_norm,consensus_residual,eta,eps_norm\n"));
        let mut buf = Vec::new();
        trace.write_vectors_csv(3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("run_id,t,node,v1,v2\n3,0,0,"));
    }
}
