use madmm_core::admm::IterateTrace;
use madmm_core::model::{logistic_loss, LabeledDataset};

use crate::{HarnessError, Result};

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run: usize,
    pub t: usize,
    pub loss: f64,
    /// Privacy bound prefix; absent for non-private runs.
    pub privacy: Option<f64>,
    pub consensus_residual: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "run,t,L,P,consensus_residual";

    pub fn to_csv_line(&self) -> String {
        let p = self.privacy.map(|p| p.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.run, self.t, self.loss, p, self.consensus_residual)
    }
}

/// `L(t) = (1/N) sum_i (1/B_i) sum_n loss(y f_i(t)^T x)`, with neither `C`
/// nor the regularizer.
pub fn average_loss(trace: &IterateTrace, t: usize, datasets: &[LabeledDataset]) -> Result<f64> {
    let snap = trace.at(t)?;
    if snap.primal.len() != datasets.len() {
        return Err(madmm_core::Error::DimensionMismatch { expected: snap.primal.len(), got: datasets.len() }.into());
    }
    let mut total = 0.0;
    for (f, data) in snap.primal.iter().zip(datasets) {
        let margins = data.features() * f;
        let mut node = 0.0;
        for (m, y) in margins.iter().zip(data.labels()) {
            node += logistic_loss(y * m)?.value;
        }
        total += node / data.len() as f64;
    }
    Ok(total / datasets.len() as f64)
}

/// Pointwise mean and spread (max minus min) over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub range: Vec<f64>,
}

pub fn aggregate_runs(series: &[Vec<f64>]) -> Result<Aggregate> {
    let first = series.first().ok_or_else(|| HarnessError::Config("no runs to aggregate".into()))?;
    let len = first.len();
    if let Some(bad) = series.iter().find(|s| s.len() != len) {
        return Err(madmm_core::Error::LengthMismatch(len, bad.len()).into());
    }
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut range = Vec::with_capacity(len);
    for t in 0..len {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for s in series {
            lo = lo.min(s[t]);
            hi = hi.max(s[t]);
            sum += s[t];
        }
        mean.push(sum / n);
        range.push(hi - lo);
    }
    Ok(Aggregate { mean, range })
}
