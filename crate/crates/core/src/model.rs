//! Regularized ERM objective for binary classification.
//!
//! Node `i` holds `O(f, D_i) = (C / B_i) * sum_n L(y_n f^T x_n) + (rho / N) * R(f)`
//! with `R(f) = ||f||^2 / 2`; the network objective is the sum over nodes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::solver::{self, SolverSettings};
use crate::{Error, Result};

/// Slack allowed on the unit-norm feature cap.
pub const NORM_CAP_TOL: f64 = 1e-12;

/// Loss value with its first and second derivative at a margin `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

/// Margin-based classification loss `L(z)`.
pub trait Loss: Sync {
    fn eval(&self, z: f64) -> LossEval;
    /// Upper bound on `L''`.
    fn curvature_bound(&self) -> f64;
}

/// `L(z) = log(1 + exp(-z))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logistic;

impl Loss for Logistic {
    fn eval(&self, z: f64) -> LossEval {
        let e = (-z.abs()).exp();
        let value = (-z).max(0.0) + e.ln_1p();
        // L'(z) = -1 / (1 + e^z)
        let first = if z >= 0.0 { -e / (1.0 + e) } else { -1.0 / (1.0 + e) };
        // L''(z) = e^{-|z|} / (1 + e^{-|z|})^2; floored so strict convexity
        // survives underflow for |z| beyond ~745.
        let second = (e / ((1.0 + e) * (1.0 + e))).max(f64::MIN_POSITIVE);
        LossEval { value, first, second }
    }

    fn curvature_bound(&self) -> f64 {
        0.25
    }
}

/// Logistic loss with a finiteness check on the input.
pub fn logistic_loss(z: f64) -> Result<LossEval> {
    if !z.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(Logistic.eval(z))
}

/// Samples of one node: `B x d` feature matrix (one sample per row) and
/// labels in `{-1, +1}`. Every row has Euclidean norm at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DMatrix<f64>,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidDataset("feature dimension must be at least 1".into()));
        }
        if let Some(y) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidDataset(format!("label {y} is not +1 or -1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for (n, row) in features.row_iter().enumerate() {
            let norm = row.norm();
            if norm > 1.0 + NORM_CAP_TOL {
                return Err(Error::InvalidDataset(format!("sample {n} has norm {norm} > 1")));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: r.len() });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), d, &flat), labels)
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Number of samples `B_i`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, n: usize) -> (DVector<f64>, f64) {
        (self.features.row(n).transpose(), self.labels[n])
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = self.features.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { features, labels }
    }

    /// Concatenates datasets of equal dimension.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let d = parts.first().map(|p| p.dim()).ok_or_else(|| Error::InvalidDataset("nothing to concatenate".into()))?;
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = DMatrix::zeros(total, d);
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for p in parts {
            if p.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: p.dim() });
            }
            features.rows_mut(row, p.len()).copy_from(&p.features);
            labels.extend_from_slice(&p.labels);
            row += p.len();
        }
        Ok(Self { features, labels })
    }

    fn margins(&self, f: &DVector<f64>) -> DVector<f64> {
        let mut z = &self.features * f;
        for (zi, y) in z.iter_mut().zip(&self.labels) {
            *zi *= y;
        }
        z
    }
}

/// Loss weight `C`, regularization weight `rho`, node count `N`, and the
/// loss curvature bound `c1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErmConfig {
    pub c: f64,
    pub rho: f64,
    pub n_nodes: usize,
    pub c1: f64,
}

impl ErmConfig {
    pub fn logistic(c: f64, rho: f64, n_nodes: usize) -> Self {
        Self { c, rho, n_nodes, c1: Logistic.curvature_bound() }
    }

    /// `rho / N`, the per-node regularization weight.
    pub fn reg_weight(&self) -> f64 {
        self.rho / self.n_nodes as f64
    }

    /// Checks positivity and `C <= B_i` for every node.
    pub fn validate(&self, datasets: &[LabeledDataset]) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidParameter(format!("C must be positive, got {}", self.c)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be nonnegative, got {}", self.rho)));
        }
        if !(self.c1 > 0.0) {
            return Err(Error::InvalidParameter(format!("c1 must be positive, got {}", self.c1)));
        }
        if datasets.len() != self.n_nodes {
            return Err(Error::DimensionMismatch { expected: self.n_nodes, got: datasets.len() });
        }
        let d = datasets.first().map(|x| x.dim()).unwrap_or(0);
        for (i, data) in datasets.iter().enumerate() {
            if data.is_empty() {
                return Err(Error::InvalidDataset(format!("node {i} has no samples")));
            }
            if data.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: data.dim() });
            }
            if self.c > data.len() as f64 {
                return Err(Error::InvalidParameter(format!(
                    "C = {} exceeds the sample count {} of node {i}",
                    self.c,
                    data.len()
                )));
            }
        }
        Ok(())
    }
}

/// A smooth objective that exposes its value and gradient.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, f: &DVector<f64>) -> f64;
    fn gradient(&self, f: &DVector<f64>) -> DVector<f64>;
    fn value_and_gradient(&self, f: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.value(f), self.gradient(f))
    }
}

/// `O(f, D_i)` for a given loss.
pub struct ErmObjective<'a, L: Loss = Logistic> {
    pub data: &'a LabeledDataset,
    pub cfg: &'a ErmConfig,
    pub loss: L,
}

impl<'a> ErmObjective<'a, Logistic> {
    pub fn logistic(data: &'a LabeledDataset, cfg: &'a ErmConfig) -> Self {
        Self { data, cfg, loss: Logistic }
    }
}

impl<L: Loss> Objective for ErmObjective<'_, L> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn value(&self, f: &DVector<f64>) -> f64 {
        self.value_and_gradient(f).0
    }

    fn gradient(&self, f: &DVector<f64>) -> DVector<f64> {
        self.value_and_gradient(f).1
    }

    fn value_and_gradient(&self, f: &DVector<f64>) -> (f64, DVector<f64>) {
        let b = self.data.len() as f64;
        let z = self.data.margins(f);
        let mut loss_sum = 0.0;
        let mut weights = DVector::zeros(z.len());
        for (n, &zn) in z.iter().enumerate() {
            let e = self.loss.eval(zn);
            loss_sum += e.value;
            weights[n] = self.data.labels[n] * e.first;
        }
        let w = self.cfg.reg_weight();
        let value = self.cfg.c / b * loss_sum + 0.5 * w * f.norm_squared();
        let grad = self.data.features.tr_mul(&weights) * (self.cfg.c / b) + f * w;
        (value, grad)
    }
}

fn check_dim(f: &DVector<f64>, data: &LabeledDataset) -> Result<()> {
    if f.len() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: f.len() });
    }
    Ok(())
}

/// `(C / B_i) sum_n L(y_n f^T x_n) + (rho / N) ||f||^2 / 2` with logistic loss.
pub fn local_objective(f: &DVector<f64>, data: &LabeledDataset, cfg: &ErmConfig) -> Result<f64> {
    check_dim(f, data)?;
    Ok(ErmObjective::logistic(data, cfg).value(f))
}

/// Gradient of [`local_objective`].
pub fn local_gradient(f: &DVector<f64>, data: &LabeledDataset, cfg: &ErmConfig) -> Result<DVector<f64>> {
    check_dim(f, data)?;
    Ok(ErmObjective::logistic(data, cfg).gradient(f))
}

/// Strong convexity and gradient-Lipschitz constants of each node objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureConstants {
    pub strong_convexity: Vec<f64>,
    pub lipschitz: Vec<f64>,
    /// `m_o`, the smallest strong-convexity constant.
    pub min_strong_convexity: f64,
    /// `M_O`, the largest Lipschitz constant.
    pub max_lipschitz: f64,
}

/// `m_i = rho / N` (the loss adds no uniform curvature) and
/// `M_i = C * c1 * max_n ||x_n||^2 + rho / N`.
pub fn curvature_constants(datasets: &[LabeledDataset], cfg: &ErmConfig) -> CurvatureConstants {
    let w = cfg.reg_weight();
    let strong_convexity = vec![w; datasets.len()];
    let lipschitz: Vec<f64> = datasets
        .iter()
        .map(|d| {
            let max_sq = d.features.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
            cfg.c * cfg.c1 * max_sq + w
        })
        .collect();
    CurvatureConstants {
        min_strong_convexity: strong_convexity.iter().cloned().fold(f64::INFINITY, f64::min),
        max_lipschitz: lipschitz.iter().cloned().fold(0.0, f64::max),
        strong_convexity,
        lipschitz,
    }
}

/// Sum of the node objectives, i.e. the centralized ERM objective.
pub struct NetworkObjective<'a> {
    pub datasets: &'a [LabeledDataset],
    pub cfg: &'a ErmConfig,
}

impl Objective for NetworkObjective<'_> {
    fn dim(&self) -> usize {
        self.datasets[0].dim()
    }

    fn value(&self, f: &DVector<f64>) -> f64 {
        self.value_and_gradient(f).0
    }

    fn gradient(&self, f: &DVector<f64>) -> DVector<f64> {
        self.value_and_gradient(f).1
    }

    fn value_and_gradient(&self, f: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut value = 0.0;
        let mut grad = DVector::zeros(f.len());
        for data in self.datasets {
            let (v, g) = ErmObjective::logistic(data, self.cfg).value_and_gradient(f);
            value += v;
            grad += g;
        }
        (value, grad)
    }
}

/// Minimizer `f_c*` of the centralized objective, with gradient norm at most `tol`.
pub fn centralized_solve(datasets: &[LabeledDataset], cfg: &ErmConfig, tol: f64) -> Result<DVector<f64>> {
    cfg.validate(datasets)?;
    if cfg.rho <= 0.0 {
        return Err(Error::NotStronglyConvex(cfg.rho));
    }
    let objective = NetworkObjective { datasets, cfg };
    let settings = SolverSettings { tol, max_iter: 200_000, ..SolverSettings::default() };
    let report = solver::minimize(&objective, DVector::zeros(objective.dim()), &settings)?;
    if !report.converged {
        return Err(Error::SolverDidNotConverge {
            gradient_norm: report.gradient_norm,
            iterations: report.iterations,
        });
    }
    Ok(report.solution)
}
