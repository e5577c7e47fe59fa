//! Communication graph and the spectral quantities used by the rate analysis.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Symmetry tolerance for [`psd_sqrt`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues in `[-PSD_TOL, 0)` are clamped to zero by [`psd_sqrt`].
pub const PSD_TOL: f64 = 1e-10;
/// Singular values below `RELATIVE_ZERO * sigma_max` count as zero.
pub const RELATIVE_ZERO: f64 = 1e-10;
/// A matrix whose singular values all fall below this is treated as zero.
pub const ABSOLUTE_ZERO: f64 = 1e-12;

/// Undirected, connected, unweighted graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Network {
    /// Validates the edge list and checks connectivity by breadth-first search.
    ///
    /// Each undirected edge must appear once; `(i, j)` and `(j, i)` together
    /// are a duplicate.
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidParameter("network needs at least one node".into()));
        }
        let mut neighbors = vec![Vec::new(); n_nodes];
        let mut canonical = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= n_nodes || j >= n_nodes || i == j {
                return Err(Error::InvalidEdge(i, j));
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            canonical.push((a, b));
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        canonical.sort_unstable();
        if let Some(w) = canonical.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidEdge(w[0].0, w[0].1));
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let mut seen = vec![false; n_nodes];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(unreachable) = seen.iter().position(|s| !s) {
            return Err(Error::DisconnectedGraph { unreachable });
        }

        Ok(Self { n_nodes, edges: canonical, neighbors })
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Self::path(n);
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((n - 1, 0));
        Self::new(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::new(n, &edges)
    }

    /// Cycle over `n` nodes plus one chord between nodes 0 and 2.
    ///
    /// This is the default five-node topology of the experiment suite.
    pub fn ring_with_chord(n: usize) -> Result<Self> {
        if n < 4 {
            return Self::complete(n);
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((n - 1, 0));
        edges.push((0, 2));
        Self::new(n, &edges)
    }

    /// G(n, p) random graph. Draws are repeated (with a fresh derived seed)
    /// until a connected graph appears, up to 1000 attempts.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("edge probability {p} not in [0, 1]")));
        }
        let mut last = Error::InvalidParameter("no attempt made".into());
        for attempt in 0..1000u64 {
            let mut rng = rng::stream(seed, Purpose::Graph, n as u64, attempt);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            match Self::new(n, &edges) {
                Ok(net) => return Ok(net),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// Parses one `i j` pair per line (0-indexed). Blank lines and lines
    /// starting with `#` are skipped. The node count is the largest index + 1
    /// unless `n_nodes` is given.
    pub fn from_edge_list(text: &str, n_nodes: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = || -> Result<usize> {
                parts
                    .next()
                    .ok_or_else(|| Error::Parse(format!("line {}: expected two indices", lineno + 1)))?
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let i = next()?;
            let j = next()?;
            if parts.next().is_some() {
                return Err(Error::Parse(format!("line {}: trailing tokens", lineno + 1)));
            }
            edges.push((i, j));
        }
        let n = match n_nodes {
            Some(n) => n,
            None => edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(1),
        };
        Self::new(n, &edges)
    }

    pub fn to_edge_list(&self) -> String {
        self.edges.iter().map(|(i, j)| format!("{i} {j}\n")).collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Canonical edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_nodes, self.n_nodes);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    pub fn degree_matrix(&self) -> DMatrix<f64> {
        let d: Vec<f64> = self.neighbors.iter().map(|l| l.len() as f64).collect();
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d))
    }

    /// `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        self.degree_matrix() - self.adjacency()
    }

    /// `D + A`.
    pub fn signless_laplacian(&self) -> DMatrix<f64> {
        self.degree_matrix() + self.adjacency()
    }
}

/// Smallest nonzero and largest singular values of a matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSummary {
    pub sigma_min_nonzero: f64,
    pub sigma_max: f64,
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric PSD matrix with small negative
/// eigenvalues clamped to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOL {
            return Err(Error::NotPsd(*v));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Symmetric PSD square root `S` with `S * S = m`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Square root of a symmetric PSD matrix together with its Moore-Penrose
/// pseudoinverse. Eigenvalues below `RELATIVE_ZERO * lambda_max` are treated
/// as the null space.
#[derive(Debug, Clone)]
pub struct SqrtFactors {
    pub sqrt: DMatrix<f64>,
    pub sqrt_pinv: DMatrix<f64>,
    /// Orthogonal projector onto the range of the matrix.
    pub range_projector: DMatrix<f64>,
}

pub fn psd_sqrt_factors(m: &DMatrix<f64>) -> Result<SqrtFactors> {
    let eig = psd_eigen(m)?;
    let n = m.nrows();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = RELATIVE_ZERO * lmax;
    let v = &eig.eigenvectors;
    let mut sqrt = DMatrix::zeros(n, n);
    let mut pinv = DMatrix::zeros(n, n);
    let mut proj = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let col = v.column(k);
        let outer = col * col.transpose();
        sqrt += &outer * lam.sqrt();
        if lam > cutoff && lam > 0.0 {
            pinv += &outer / lam.sqrt();
            proj += outer;
        }
    }
    Ok(SqrtFactors { sqrt, sqrt_pinv: pinv, range_projector: proj })
}

/// Singular values of `m`, in descending order. Symmetric inputs use the
/// symmetric eigendecomposition; other matrices use an SVD of the matrix
/// itself.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut values: Vec<f64> = if m.is_square() && max_asymmetry(m) <= SYMMETRY_TOL {
        let sym = (m + m.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().map(|v| v.abs()).collect()
    } else {
        m.clone().svd(false, false).singular_values.iter().cloned().collect()
    };
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(values)
}

pub fn spectral_bounds(m: &DMatrix<f64>) -> Result<SpectralSummary> {
    let values = singular_values(m)?;
    let sigma_max = values.first().copied().unwrap_or(0.0);
    if sigma_max < ABSOLUTE_ZERO {
        return Err(Error::ZeroMatrix);
    }
    let cutoff = RELATIVE_ZERO * sigma_max;
    let sigma_min_nonzero = values
        .iter()
        .rev()
        .copied()
        .find(|&s| s > cutoff)
        .unwrap_or(sigma_max);
    Ok(SpectralSummary { sigma_min_nonzero, sigma_max })
}
