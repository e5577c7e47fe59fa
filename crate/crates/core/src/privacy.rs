//! Penalty-perturbation noise and the cumulative privacy-loss accountant.
//!
//! Node `i` at iteration `t` contributes `C (1.4 c1 + alpha_i(t)) / (eta_i(t) V_i B_i)`
//! to its running privacy loss; the network bound `beta` is the largest
//! per-node total after `T` iterations.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::admm::PenaltySchedule;
use crate::graph::Network;
use crate::model::{ErmConfig, LabeledDataset};
use crate::{Error, Result};

/// Geometric noise parameters `alpha_i(t) = alpha_i(1) q_i^(t-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha1: Vec<f64>,
    pub q: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha1: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if alpha1.len() != q.len() {
            return Err(Error::DimensionMismatch { expected: alpha1.len(), got: q.len() });
        }
        if let Some(&a) = alpha1.iter().find(|&&a| !(a > 0.0)) {
            return Err(Error::InvalidScale(a));
        }
        if let Some(&q) = q.iter().find(|&&q| !(q > 0.0)) {
            return Err(Error::InvalidScale(q));
        }
        Ok(Self { alpha1, q })
    }

    pub fn shared(n_nodes: usize, alpha1: f64, q: f64) -> Self {
        Self { alpha1: vec![alpha1; n_nodes], q: vec![q; n_nodes] }
    }

    pub fn n_nodes(&self) -> usize {
        self.alpha1.len()
    }

    pub fn alpha_at(&self, node: usize, t: usize) -> f64 {
        assert!(t >= 1, "noise parameters are indexed from t = 1");
        self.alpha1[node] * self.q[node].powi((t - 1) as i32)
    }
}

/// Draws `eps` in `R^d` with density proportional to `exp(-alpha ||eps||)`:
/// the norm is Gamma(shape d, scale 1/alpha) and the direction is uniform on
/// the sphere (a normalised standard normal vector). `alpha = +inf` yields
/// the zero vector.
pub fn sample_penalty_noise<R: Rng + ?Sized>(alpha: f64, d: usize, rng: &mut R) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidScale(alpha));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("noise dimension must be at least 1".into()));
    }
    if alpha.is_infinite() {
        return Ok(DVector::zeros(d));
    }
    let gamma = Gamma::new(d as f64, 1.0 / alpha).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let norm = gamma.sample(rng);
    let mut dir = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
    let mut len = dir.norm();
    while len == 0.0 {
        dir = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
        len = dir.norm();
    }
    Ok(dir * (norm / len))
}

/// Nodes violating `2 c1 < (B_i / C) (rho / N + 2 theta V_i)`.
pub fn check_theta_condition(
    theta: f64,
    datasets: &[LabeledDataset],
    cfg: &ErmConfig,
    net: &Network,
) -> std::result::Result<(), Vec<usize>> {
    let sizes: Vec<usize> = datasets.iter().map(LabeledDataset::len).collect();
    check_theta_condition_per_node(&vec![theta; sizes.len()], &sizes, cfg, net)
}

/// Same as [`check_theta_condition`] with a dual step per node and sample
/// counts given directly.
pub fn check_theta_condition_per_node(
    thetas: &[f64],
    sizes: &[usize],
    cfg: &ErmConfig,
    net: &Network,
) -> std::result::Result<(), Vec<usize>> {
    let violating: Vec<usize> = (0..sizes.len())
        .filter(|&i| {
            let rhs = sizes[i] as f64 / cfg.c * (cfg.reg_weight() + 2.0 * thetas[i] * net.degree(i) as f64);
            !(2.0 * cfg.c1 < rhs)
        })
        .collect();
    if violating.is_empty() {
        Ok(())
    } else {
        Err(violating)
    }
}

/// `lambda + eta V eps`: the dual perturbation equivalent to penalty noise.
pub fn dvp_dual_shift(lambda: &DVector<f64>, eta: f64, degree: usize, eps: &DVector<f64>) -> Result<DVector<f64>> {
    if lambda.len() != eps.len() {
        return Err(Error::DimensionMismatch { expected: lambda.len(), got: eps.len() });
    }
    Ok(lambda + eps * (eta * degree as f64))
}

/// One term of the accountant.
pub fn privacy_term(c: f64, c1: f64, alpha: f64, eta: f64, degree: usize, samples: usize) -> f64 {
    c * (1.4 * c1 + alpha) / (eta * degree as f64 * samples as f64)
}

/// Per-iteration privacy-loss terms and their running sums.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    /// `terms[i][t-1]` is node `i`'s term at iteration `t`.
    pub terms: Vec<Vec<f64>>,
    pub cumulative: Vec<Vec<f64>>,
    pub beta: f64,
}

impl PrivacyLedger {
    pub fn from_terms(terms: Vec<Vec<f64>>) -> Result<Self> {
        let horizon = terms.first().map_or(0, Vec::len);
        if let Some(row) = terms.iter().find(|r| r.len() != horizon) {
            return Err(Error::LengthMismatch(horizon, row.len()));
        }
        if terms.iter().flatten().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidParameter("privacy terms must be positive".into()));
        }
        let cumulative: Vec<Vec<f64>> = terms
            .iter()
            .map(|row| {
                row.iter()
                    .scan(0.0, |acc, &x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        let beta = cumulative.iter().filter_map(|c| c.last().copied()).fold(0.0, f64::max);
        Ok(Self { terms, cumulative, beta })
    }

    pub fn horizon(&self) -> usize {
        self.terms.first().map_or(0, Vec::len)
    }

    /// `P(t)`, the largest node total after `t` iterations (`P(0) = 0`).
    pub fn prefix(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.cumulative.iter().map(|c| c[t - 1]).fold(0.0, f64::max)
    }

    /// `P(1), ..., P(T)`.
    pub fn prefix_series(&self) -> Vec<f64> {
        (1..=self.horizon()).map(|t| self.prefix(t)).collect()
    }

    /// Rows `node,t,term,cumulative` followed by a `# beta,<value>` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["node", "t", "term", "cumulative"])?;
            for (i, (terms, cum)) in self.terms.iter().zip(&self.cumulative).enumerate() {
                for (t, (x, c)) in terms.iter().zip(cum).enumerate() {
                    w.write_record(&[i.to_string(), (t + 1).to_string(), x.to_string(), c.to_string()])?;
                }
            }
            w.flush()?;
        }
        writeln!(out, "# beta,{}", self.beta)?;
        Ok(())
    }
}

/// Upper bound on the total privacy loss of penalty
/// perturbation over `horizon` iterations.
pub fn privacy_bound(
    penalty: &PenaltySchedule,
    noise: &NoiseSchedule,
    cfg: &ErmConfig,
    net: &Network,
    sizes: &[usize],
    horizon: usize,
) -> Result<PrivacyLedger> {
    let n = net.n_nodes();
    for len in [penalty.n_nodes(), noise.n_nodes(), sizes.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    if let Some(i) = (0..n).find(|&i| net.degree(i) == 0) {
        return Err(Error::IsolatedNode(i));
    }
    let terms = (0..n)
        .map(|i| {
            (1..=horizon)
                .map(|t| {
                    privacy_term(cfg.c, cfg.c1, noise.alpha_at(i, t), penalty.penalty_at(i, t), net.degree(i), sizes[i])
                })
                .collect()
        })
        .collect();
    PrivacyLedger::from_terms(terms)
}
