//! Post-hoc analysis of M-ADMM traces: the rate lower bound, the
//! contraction certificate, first-order optimality residuals, and the
//! reconstruction attack against a node whose penalties are public.
//!
//! Matrix conventions: `N x d` matrices hold one node per row, `L = D - A`
//! is the Laplacian and `S = D + A` the signless Laplacian. Duals are mapped
//! to `Y` through `2 Lambda = sqrt(L) Y` (minimum-norm solution), and the
//! stacked state is `Z = [Y; F]` with the weighted norm
//! `||Z||_J^2 = ||Y||_F^2 / theta + <F, W S F>_F`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::admm::{stack_rows, IterateTrace, Mechanism, PenaltySchedule};
use crate::graph::{self, Network, SqrtFactors, ABSOLUTE_ZERO, RELATIVE_ZERO};
use crate::model::{curvature_constants, local_gradient, ErmConfig, LabeledDataset, Loss, Logistic};
use crate::{Error, Result};

/// Largest allowed component of `Lambda` outside the range of `L`,
/// relative to `max(1, ||Lambda||_F)`.
pub const COLUMN_SPACE_TOL: f64 = 1e-8;

/// Relative slack of the contraction check.
pub const CERTIFICATE_SLACK: f64 = 1e-8;

pub const DEFAULT_MU: f64 = 2.0;

fn check_rows(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m.nrows() });
    }
    Ok(())
}

fn recover_with(factors: &SqrtFactors, lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let outside = (lambda - &factors.range_projector * lambda).norm();
    if outside > COLUMN_SPACE_TOL * lambda.norm().max(1.0) {
        return Err(Error::NotInColumnSpace(outside));
    }
    Ok(&factors.sqrt_pinv * lambda * 2.0)
}

/// Minimum-norm `Y` with `sqrt(L) Y = 2 Lambda`.
pub fn recover_y(lambda: &DMatrix<f64>, net: &Network) -> Result<DMatrix<f64>> {
    check_rows(lambda, net.n_nodes())?;
    let factors = graph::psd_sqrt_factors(&net.laplacian())?;
    recover_with(&factors, lambda)
}

/// Everything the rate bound depends on at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RateInputs {
    pub theta: f64,
    /// Diagonal of `W(t)`.
    pub penalties: Vec<f64>,
    pub laplacian: DMatrix<f64>,
    pub signless: DMatrix<f64>,
    /// `m_o`.
    pub min_strong_convexity: f64,
    /// `M_O`.
    pub max_lipschitz: f64,
    pub mu: f64,
}

impl RateInputs {
    pub fn new(net: &Network, theta: f64, penalties: Vec<f64>, m_o: f64, big_m: f64, mu: f64) -> Self {
        Self {
            theta,
            penalties,
            laplacian: net.laplacian(),
            signless: net.signless_laplacian(),
            min_strong_convexity: m_o,
            max_lipschitz: big_m,
            mu,
        }
    }

    /// Inputs for iteration `t` of a penalty schedule, with curvature taken
    /// from the data.
    pub fn from_schedule(
        net: &Network,
        datasets: &[LabeledDataset],
        cfg: &ErmConfig,
        schedule: &PenaltySchedule,
        t: usize,
        mu: f64,
    ) -> Self {
        let k = curvature_constants(datasets, cfg);
        Self::new(net, schedule.theta, schedule.penalties_at(t), k.min_strong_convexity, k.max_lipschitz, mu)
    }

    pub fn with_penalties(&self, penalties: Vec<f64>) -> Self {
        Self { penalties, ..self.clone() }
    }
}

/// Spectral quantities entering the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateSpectra {
    /// Smallest nonzero singular value of `L`.
    pub sigma_min_laplacian: f64,
    /// Largest singular value of `W S`.
    pub sigma_tilde_max: f64,
    /// Largest singular value of `(W - theta I) L`.
    pub sigma_bar_max: f64,
    /// Smallest nonzero singular value of `(W - theta I) L`; zero when the
    /// product vanishes.
    pub sigma_bar_min: f64,
}

pub fn rate_spectra(inputs: &RateInputs) -> Result<RateSpectra> {
    let n = inputs.laplacian.nrows();
    if inputs.penalties.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: inputs.penalties.len() });
    }
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&inputs.penalties));
    let shifted = &w - DMatrix::identity(n, n) * inputs.theta;
    let sigma_min_laplacian = graph::spectral_bounds(&inputs.laplacian)?.sigma_min_nonzero;
    let sigma_tilde_max = graph::singular_values(&(&w * &inputs.signless))?.first().copied().unwrap_or(0.0);
    let bar = graph::singular_values(&(shifted * &inputs.laplacian))?;
    let sigma_bar_max = bar.first().copied().unwrap_or(0.0);
    let sigma_bar_min = if sigma_bar_max < ABSOLUTE_ZERO {
        0.0
    } else {
        bar.iter().rev().copied().find(|&s| s > RELATIVE_ZERO * sigma_bar_max).unwrap_or(sigma_bar_max)
    };
    let sigma_bar_max = if sigma_bar_max < ABSOLUTE_ZERO { 0.0 } else { sigma_bar_max };
    Ok(RateSpectra { sigma_min_laplacian, sigma_tilde_max, sigma_bar_max, sigma_bar_min })
}

/// Lower bound on the contraction exponent `delta(t)`:
///
/// ```text
/// min{ theta s / (mu^2 st),
///      (2 m_o + 2 sb_min) / ((mu^2 M_O^2 + mu sb_max^2) / (theta s (mu - 1)) + st) }
/// ```
///
/// with `s = sigma_min(L)`, `st = sigma_max(W S)` and `sb` the singular
/// values of `(W - theta I) L`.
pub fn delta_lower_bound(inputs: &RateInputs) -> Result<f64> {
    if !(inputs.min_strong_convexity > 0.0) {
        return Err(Error::NotStronglyConvex(inputs.min_strong_convexity));
    }
    if !(inputs.mu > 1.0) || !inputs.mu.is_finite() {
        return Err(Error::InvalidParameter(format!("mu must exceed 1, got {}", inputs.mu)));
    }
    if !(inputs.theta > 0.0) {
        return Err(Error::InvalidParameter(format!("theta must be positive, got {}", inputs.theta)));
    }
    if let Some(&eta) = inputs.penalties.iter().find(|&&eta| !(eta >= inputs.theta) || !eta.is_finite()) {
        return Err(Error::InvalidParameter(format!("penalty {eta} is below theta = {}", inputs.theta)));
    }
    let sp = rate_spectra(inputs)?;
    let (theta, mu) = (inputs.theta, inputs.mu);
    let first = theta * sp.sigma_min_laplacian / (mu * mu * sp.sigma_tilde_max);
    let big_m = inputs.max_lipschitz;
    let denom = (mu * mu * big_m * big_m + mu * sp.sigma_bar_max * sp.sigma_bar_max)
        / (theta * sp.sigma_min_laplacian * (mu - 1.0))
        + sp.sigma_tilde_max;
    let second = (2.0 * inputs.min_strong_convexity + 2.0 * sp.sigma_bar_min) / denom;
    Ok(first.min(second))
}

/// One iteration of the contraction check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertificateRow {
    pub t: usize,
    pub delta: f64,
    /// `(1 + delta) ||Z(t) - Z*||^2_J(t)`.
    pub lhs: f64,
    /// `||Z(t-1) - Z*||^2_J(t)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Fixed data shared by every step of a certificate.
#[derive(Debug, Clone)]
pub struct CertificateContext {
    pub factors: SqrtFactors,
    pub signless: DMatrix<f64>,
    pub y_star: DMatrix<f64>,
    pub f_star: DMatrix<f64>,
    pub rate: RateInputs,
}

impl CertificateContext {
    /// Builds `Z*` from the consensus optimum `fstar`: every row of `F*`
    /// equals `fstar` and `Y*` is the least-squares solution of
    /// `grad O(F*) + sqrt(L) Y* = 0`.
    pub fn new(
        net: &Network,
        datasets: &[LabeledDataset],
        cfg: &ErmConfig,
        fstar: &DVector<f64>,
        theta: f64,
        mu: f64,
    ) -> Result<Self> {
        if !(mu > 1.0) {
            return Err(Error::InvalidParameter(format!("mu must exceed 1, got {mu}")));
        }
        let n = net.n_nodes();
        if datasets.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: datasets.len() });
        }
        let f_star = stack_rows(&vec![fstar.clone(); n]);
        let factors = graph::psd_sqrt_factors(&net.laplacian())?;
        let y_star = least_squares_y_with(&factors, &f_star, datasets, cfg)?;
        let k = curvature_constants(datasets, cfg);
        let rate = RateInputs::new(net, theta, vec![theta; n], k.min_strong_convexity, k.max_lipschitz, mu);
        Ok(Self { factors, signless: net.signless_laplacian(), y_star, f_star, rate })
    }

    /// `||Z - Z*||^2_J` for penalties `W`.
    pub fn distance_sq(&self, y: &DMatrix<f64>, f: &DMatrix<f64>, penalties: &[f64]) -> f64 {
        let dy = y - &self.y_star;
        let df = f - &self.f_star;
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(penalties));
        let weighted = w * &self.signless * &df;
        dy.norm_squared() / self.rate.theta + df.dot(&weighted)
    }

    /// Checks `(1 + delta) ||Z(t) - Z*||^2_J(t) <= ||Z(t-1) - Z*||^2_J(t)`.
    pub fn certify_step(
        &self,
        t: usize,
        prev: (&DMatrix<f64>, &DMatrix<f64>),
        curr: (&DMatrix<f64>, &DMatrix<f64>),
        penalties: &[f64],
    ) -> Result<CertificateRow> {
        let delta = delta_lower_bound(&self.rate.with_penalties(penalties.to_vec()))?;
        let lhs = (1.0 + delta) * self.distance_sq(curr.0, curr.1, penalties);
        let rhs = self.distance_sq(prev.0, prev.1, penalties);
        Ok(CertificateRow { t, delta, lhs, rhs, holds: lhs <= rhs * (1.0 + CERTIFICATE_SLACK) })
    }
}

/// Contraction certificate for every iteration `t = 1..=T` of a
/// non-private trace.
pub fn contraction_certificate(
    trace: &IterateTrace,
    fstar: &DVector<f64>,
    net: &Network,
    datasets: &[LabeledDataset],
    cfg: &ErmConfig,
    schedule: &PenaltySchedule,
    mu: f64,
) -> Result<Vec<CertificateRow>> {
    if trace.mechanism != Mechanism::None {
        return Err(Error::InvalidParameter("the contraction certificate needs a non-private trace".into()));
    }
    if trace.n_nodes() != net.n_nodes() {
        return Err(Error::DimensionMismatch { expected: net.n_nodes(), got: trace.n_nodes() });
    }
    let ctx = CertificateContext::new(net, datasets, cfg, fstar, schedule.theta, mu)?;
    let mut prev_y = recover_with(&ctx.factors, &trace.dual_matrix(0))?;
    let mut prev_f = trace.primal_matrix(0);
    let mut rows = Vec::with_capacity(trace.horizon());
    for t in 1..=trace.horizon() {
        let y = recover_with(&ctx.factors, &trace.dual_matrix(t))?;
        let f = trace.primal_matrix(t);
        rows.push(ctx.certify_step(t, (&prev_y, &prev_f), (&y, &f), &trace.snapshots[t].penalty)?);
        prev_y = y;
        prev_f = f;
    }
    Ok(rows)
}

pub fn write_certificate_csv<W: Write>(rows: &[CertificateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "delta", "lhs", "rhs", "holds"])?;
    for r in rows {
        w.write_record(&[r.t.to_string(), r.delta.to_string(), r.lhs.to_string(), r.rhs.to_string(), r.holds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `N x d` matrix of local gradients, row `i` = `grad O(f_i, D_i)`.
pub fn stacked_gradient(fhat: &DMatrix<f64>, datasets: &[LabeledDataset], cfg: &ErmConfig) -> Result<DMatrix<f64>> {
    check_rows(fhat, datasets.len())?;
    let rows = datasets
        .iter()
        .enumerate()
        .map(|(i, data)| local_gradient(&fhat.row(i).transpose(), data, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_rows(&rows))
}

fn least_squares_y_with(
    factors: &SqrtFactors,
    fhat: &DMatrix<f64>,
    datasets: &[LabeledDataset],
    cfg: &ErmConfig,
) -> Result<DMatrix<f64>> {
    Ok(-(&factors.sqrt_pinv * stacked_gradient(fhat, datasets, cfg)?))
}

/// Minimum-norm least-squares solution of `grad O(F) + sqrt(L) Y = 0`.
pub fn least_squares_y(fhat: &DMatrix<f64>, datasets: &[LabeledDataset], cfg: &ErmConfig, net: &Network) -> Result<DMatrix<f64>> {
    let factors = graph::psd_sqrt_factors(&net.laplacian())?;
    least_squares_y_with(&factors, fhat, datasets, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalityResidual {
    /// `||grad O(F) + sqrt(L) Y||_F`.
    pub stationarity: f64,
    /// `||sqrt(L) F||_F`.
    pub consensus: f64,
}

pub fn optimality_residual(
    fhat: &DMatrix<f64>,
    y: &DMatrix<f64>,
    datasets: &[LabeledDataset],
    cfg: &ErmConfig,
    net: &Network,
) -> Result<OptimalityResidual> {
    let n = net.n_nodes();
    check_rows(fhat, n)?;
    check_rows(y, n)?;
    if y.ncols() != fhat.ncols() {
        return Err(Error::DimensionMismatch { expected: fhat.ncols(), got: y.ncols() });
    }
    let sqrt_l = graph::psd_sqrt(&net.laplacian())?;
    let grad = stacked_gradient(fhat, datasets, cfg)?;
    Ok(OptimalityResidual { stationarity: (grad + &sqrt_l * y).norm(), consensus: (&sqrt_l * fhat).norm() })
}

/// What the attacker knows about the target node.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerKnowledge {
    /// Every sample of the target node except the first.
    pub known: LabeledDataset,
    /// Dual step of the target node.
    pub theta: f64,
    /// `eta_i(t)` for `t = 1..=T`; `None` when the penalties stay private.
    pub penalties: Option<Vec<f64>>,
}

/// Right-hand side of the primal stationarity condition at one iteration,
/// split into its three parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTerm {
    pub t: usize,
    /// `-(1 / (2 eta V)) (C / B) sum_{n >= 2} y_n L'(y_n f^T x_n) x_n`.
    pub known_loss: DVector<f64>,
    /// `-(1 / (2 eta V)) (rho / N f + 2 lambda(t-1))`.
    pub regularization_dual: DVector<f64>,
    /// `-(1 / (2 V)) sum_j (2 f(t) - f(t-1) - f_j(t-1))`.
    pub consensus: DVector<f64>,
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub node: usize,
    /// `-(1/T) sum_t RHS(t)`, a positive multiple of `y_1 x_1` up to the
    /// noise average.
    pub estimate: DVector<f64>,
    pub terms: Vec<AttackTerm>,
}

impl AttackReport {
    /// `|cos|` between the estimate and `v`; the sign is not identifiable.
    pub fn abs_cosine(&self, v: &DVector<f64>) -> f64 {
        abs_cosine(&self.estimate, v)
    }

    /// Rows `t,component,v1..vd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.estimate.len();
        let mut header = vec!["t".to_string(), "component".to_string()];
        header.extend((1..=d).map(|k| format!("v{k}")));
        w.write_record(&header)?;
        let mut row = |t: String, name: &str, v: &DVector<f64>| -> Result<()> {
            let mut r = vec![t, name.to_string()];
            r.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&r)?;
            Ok(())
        };
        for term in &self.terms {
            let t = term.t.to_string();
            row(t.clone(), "known_loss", &term.known_loss)?;
            row(t.clone(), "regularization_dual", &term.regularization_dual)?;
            row(t.clone(), "consensus", &term.consensus)?;
            row(t, "rhs", &term.rhs)?;
        }
        row("all".to_string(), "estimate", &self.estimate)?;
        w.flush()?;
        Ok(())
    }
}

pub fn abs_cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (a.dot(b) / denom).abs()
    }
}

/// Reconstructs the direction of the hidden first sample of `node` from
/// the public iterates of the node and its neighbors.
///
/// The dual `lambda_i(t)` is replayed from the iterates with the known
/// `theta`. Without the penalty sequence the attack cannot proceed.
pub fn attack_reconstruct(
    trace: &IterateTrace,
    node: usize,
    knowledge: &AttackerKnowledge,
    net: &Network,
    cfg: &ErmConfig,
) -> Result<AttackReport> {
    let penalties = knowledge.penalties.as_ref().ok_or(Error::UnknownSchedule)?;
    let horizon = trace.horizon();
    if horizon == 0 {
        return Err(Error::IterationOutOfRange { t: 1, len: trace.snapshots.len() });
    }
    if penalties.len() < horizon {
        return Err(Error::LengthMismatch(horizon, penalties.len()));
    }
    if node >= net.n_nodes() || trace.n_nodes() != net.n_nodes() {
        return Err(Error::DimensionMismatch { expected: net.n_nodes(), got: trace.n_nodes() });
    }
    let d = trace.dim();
    if knowledge.known.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: knowledge.known.dim() });
    }
    let neighbors = net.neighbors(node);
    let v = neighbors.len();
    if v == 0 {
        return Err(Error::IsolatedNode(node));
    }
    let v = v as f64;
    let b = (knowledge.known.len() + 1) as f64;
    let loss = Logistic;
    let reg = cfg.reg_weight();

    let mut lambda = DVector::zeros(d);
    let mut terms = Vec::with_capacity(horizon);
    let mut sum = DVector::zeros(d);
    for t in 1..=horizon {
        let eta = penalties[t - 1];
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!("penalty at t = {t} must be positive, got {eta}")));
        }
        let f = trace.primal(t, node);
        let f_prev = trace.primal(t - 1, node);

        let mut known_grad = DVector::zeros(d);
        for n in 0..knowledge.known.len() {
            let (x, y) = knowledge.known.sample(n);
            let e = loss.eval(y * f.dot(&x));
            known_grad += x * (y * e.first);
        }
        let known_loss = known_grad * (-(cfg.c / b) / (2.0 * eta * v));
        let regularization_dual = (f * reg + &lambda * 2.0) * (-1.0 / (2.0 * eta * v));
        let mut consensus = DVector::zeros(d);
        for &j in neighbors {
            consensus += f * 2.0 - f_prev - trace.primal(t - 1, j);
        }
        consensus *= -1.0 / (2.0 * v);
        let rhs = &known_loss + &regularization_dual + &consensus;
        sum += &rhs;
        terms.push(AttackTerm { t, known_loss, regularization_dual, consensus, rhs });

        for &j in neighbors {
            lambda += (f - trace.primal(t, j)) * (0.5 * knowledge.theta);
        }
    }
    Ok(AttackReport { node, estimate: -sum / horizon as f64, terms })
}

/// What the attacker would see for the hidden sample at iteration `t`:
/// `(C / (2 eta V B)) y L'(y f^T x) x`.
pub fn hidden_sample_term(f: &DVector<f64>, x: &DVector<f64>, y: f64, eta: f64, degree: usize, samples: usize, cfg: &ErmConfig) -> DVector<f64> {
    let e = Logistic.eval(y * f.dot(x));
    x * (cfg.c * y * e.first / (2.0 * eta * degree as f64 * samples as f64))
}
