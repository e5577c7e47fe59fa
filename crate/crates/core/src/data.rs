//! Census-style table preprocessing, partitioning across nodes, and
//! synthetic two-cluster shards.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::LabeledDataset;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
    /// Present in the file but not used.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// Which raw label strings map to `+1` and `-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    /// Cell value marking a missing entry (compared after trimming).
    pub missing: String,
    pub label: LabelMapping,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.label_column()?;
        Ok(schema)
    }

    pub fn label_column(&self) -> Result<usize> {
        let labels: Vec<usize> =
            self.columns.iter().enumerate().filter(|(_, c)| c.kind == ColumnKind::Label).map(|(i, _)| i).collect();
        match labels.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Parse(format!("schema must declare exactly one label column, found {}", labels.len()))),
        }
    }
}

/// Untyped rows of trimmed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub schema: Schema,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    /// Reads headerless comma-separated rows. Blank lines are skipped; every
    /// other row must have one cell per schema column.
    pub fn from_csv<R: std::io::Read>(schema: Schema, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'|'))
            .from_reader(reader);
        let mut rows = Vec::new();
        for (n, record) in rdr.records().enumerate() {
            let record = record?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            if record.len() != schema.columns.len() {
                return Err(Error::Parse(format!(
                    "row {}: expected {} cells, found {}",
                    n + 1,
                    schema.columns.len(),
                    record.len()
                )));
            }
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(Self { schema, rows })
    }

    pub fn from_path(schema: Schema, path: &Path) -> Result<Self> {
        Self::from_csv(schema, std::fs::File::open(path)?)
    }
}

/// Preprocessed samples plus bookkeeping about what happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub dataset: LabeledDataset,
    pub feature_names: Vec<String>,
    pub dropped_rows: usize,
}

enum Block {
    Numeric { column: usize },
    OneHot { column: usize, categories: Vec<String> },
}

/// Applies, in order: drop rows containing the missing marker; one-hot
/// encode categorical columns (categories sorted); divide each column by
/// its maximum (columns with maximum <= 0 are left alone); divide each row
/// by `max(1, ||x||)`; map labels to `+1 / -1`.
pub fn preprocess(raw: &RawTable) -> Result<Preprocessed> {
    let schema = &raw.schema;
    let label_col = schema.label_column()?;
    let missing = schema.missing.trim();

    let kept: Vec<&Vec<String>> = raw.rows.iter().filter(|r| !r.iter().any(|c| c.trim() == missing)).collect();
    let dropped_rows = raw.rows.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }

    let mut blocks = Vec::new();
    let mut feature_names = Vec::new();
    for (c, col) in schema.columns.iter().enumerate() {
        match col.kind {
            ColumnKind::Numeric => {
                blocks.push(Block::Numeric { column: c });
                feature_names.push(col.name.clone());
            }
            ColumnKind::Categorical => {
                let categories: Vec<String> =
                    kept.iter().map(|r| r[c].trim().to_string()).collect::<BTreeSet<_>>().into_iter().collect();
                feature_names.extend(categories.iter().map(|v| format!("{}={}", col.name, v)));
                blocks.push(Block::OneHot { column: c, categories });
            }
            ColumnKind::Label | ColumnKind::Ignore => {}
        }
    }
    let d = feature_names.len();
    if d == 0 {
        return Err(Error::InvalidDataset("schema has no feature columns".into()));
    }

    let mut x = DMatrix::zeros(kept.len(), d);
    let mut labels = Vec::with_capacity(kept.len());
    for (n, row) in kept.iter().enumerate() {
        let mut k = 0;
        for block in &blocks {
            match block {
                Block::Numeric { column } => {
                    let cell = row[*column].trim();
                    x[(n, k)] = cell
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse(format!("row {}: {cell:?} is not a number", n + 1)))?;
                    k += 1;
                }
                Block::OneHot { column, categories } => {
                    let cell = row[*column].trim();
                    let pos = categories.binary_search_by(|c| c.as_str().cmp(cell)).expect("category seen");
                    x[(n, k + pos)] = 1.0;
                    k += categories.len();
                }
            }
        }
        let cell = row[label_col].trim();
        let y = if schema.label.positive.iter().any(|p| p.trim() == cell) {
            1.0
        } else if schema.label.negative.iter().any(|p| p.trim() == cell) {
            -1.0
        } else {
            return Err(Error::UnknownLabelValue(cell.to_string()));
        };
        labels.push(y);
    }

    for mut col in x.column_iter_mut() {
        let max = col.max();
        if max > 0.0 {
            col /= max;
        }
    }
    for mut row in x.row_iter_mut() {
        let norm = row.norm();
        if norm > 1.0 {
            row /= norm;
        }
    }

    Ok(Preprocessed { dataset: LabeledDataset::new(x, labels)?, feature_names, dropped_rows })
}

/// Published size of the cleaned census data.
pub const REFERENCE_SAMPLES: usize = 45_223;
pub const REFERENCE_DIM: usize = 105;

/// Comparison of a preprocessing result against the published size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceComparison {
    pub samples: usize,
    pub dim: usize,
    pub expected_samples: usize,
    pub expected_dim: usize,
    pub samples_match: bool,
    pub dim_match: bool,
}

impl ReferenceComparison {
    pub fn new(out: &Preprocessed) -> Self {
        let samples = out.dataset.len();
        let dim = out.dataset.dim();
        Self {
            samples,
            dim,
            expected_samples: REFERENCE_SAMPLES,
            expected_dim: REFERENCE_DIM,
            samples_match: samples == REFERENCE_SAMPLES,
            dim_match: dim == REFERENCE_DIM,
        }
    }

    pub fn deviations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.samples_match {
            out.push(format!("sample count {} differs from reference {}", self.samples, self.expected_samples));
        }
        if !self.dim_match {
            out.push(format!("dimension {} differs from reference {}", self.dim, self.expected_dim));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Even,
    Uneven,
}

/// Ratio of the geometric size profile used by [`PartitionMode::Uneven`].
pub const UNEVEN_RATIO: f64 = 0.7;

/// Shard sizes for `total` samples over `n` nodes.
///
/// Even: sizes differ by at most one, larger shards first. Uneven: one sample
/// per node plus the rest split proportionally to `0.7^k` (largest
/// remainders), sorted so sizes are nonincreasing.
pub fn shard_sizes(total: usize, n: usize, mode: PartitionMode) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::TooManyNodes { nodes: n, samples: total });
    }
    match mode {
        PartitionMode::Even => Ok((0..n).map(|k| total / n + usize::from(k < total % n)).collect()),
        PartitionMode::Uneven => {
            let weights: Vec<f64> = (0..n).map(|k| UNEVEN_RATIO.powi(k as i32)).collect();
            let wsum: f64 = weights.iter().sum();
            let rest = total - n;
            let exact: Vec<f64> = weights.iter().map(|w| rest as f64 * w / wsum).collect();
            let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
            let mut left = rest - sizes.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let fa = exact[a] - exact[a].floor();
                let fb = exact[b] - exact[b].floor();
                fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
            });
            for &k in &order {
                if left == 0 {
                    break;
                }
                sizes[k] += 1;
                left -= 1;
            }
            let mut sizes: Vec<usize> = sizes.into_iter().map(|s| s + 1).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            Ok(sizes)
        }
    }
}

/// Shuffles the samples with the seed and cuts them into shards of
/// [`shard_sizes`].
pub fn partition(data: &LabeledDataset, n_nodes: usize, mode: PartitionMode, seed: u64) -> Result<Vec<LabeledDataset>> {
    let sizes = shard_sizes(data.len(), n_nodes, mode)?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Partition, n_nodes as u64, data.len() as u64));
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&s| {
            let shard = data.select(&idx[start..start + s]);
            start += s;
            shard
        })
        .collect())
}

/// Two Gaussian clusters centred at `+separation * u` (label +1) and
/// `-separation * u` (label -1) for a random unit vector `u`, with isotropic
/// noise of standard deviation `1 / sqrt(d)` per coordinate. Rows are capped
/// to unit norm. Labels are fair coin flips.
pub fn synthetic(n_nodes: usize, d: usize, per_node: &[usize], seed: u64, separation: f64) -> Result<Vec<LabeledDataset>> {
    if n_nodes == 0 || d == 0 {
        return Err(Error::InvalidParameter("synthetic data needs at least one node and one feature".into()));
    }
    if per_node.len() != n_nodes {
        return Err(Error::DimensionMismatch { expected: n_nodes, got: per_node.len() });
    }
    if per_node.contains(&0) {
        return Err(Error::InvalidParameter("every node needs at least one sample".into()));
    }
    let mut dir_rng = rng::stream(seed, Purpose::Data, u64::MAX, 0);
    let mut u = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut dir_rng));
    u /= u.norm();
    let sigma = 1.0 / (d as f64).sqrt();

    (0..n_nodes)
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::Data, i as u64, 0);
            let b = per_node[i];
            let mut x = DMatrix::zeros(b, d);
            let mut labels = Vec::with_capacity(b);
            for n in 0..b {
                let y = if rand::Rng::random::<bool>(&mut r) { 1.0 } else { -1.0 };
                let noise = DVector::from_fn(d, |_, _| sigma * Distribution::<f64>::sample(&StandardNormal, &mut r));
                let mut row = &u * (y * separation) + noise;
                let norm = row.norm();
                if norm > 1.0 {
                    row /= norm;
                }
                x.set_row(n, &row.transpose());
                labels.push(y);
            }
            LabeledDataset::new(x, labels)
        })
        .collect()
}

/// Writes the normalized dataset: first line `d`, then `label,v1,...,vd`.
pub fn write_dataset<W: Write>(data: &LabeledDataset, mut out: W) -> Result<()> {
    writeln!(out, "{}", data.dim())?;
    for n in 0..data.len() {
        let (x, y) = data.sample(n);
        let mut line = format!("{y}");
        for v in x.iter() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<LabeledDataset> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))??;
    let d: usize = header.trim().parse().map_err(|e| Error::Parse(format!("header: {e}")))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", n + 1)))?;
        if values.len() != d + 1 {
            return Err(Error::DimensionMismatch { expected: d + 1, got: values.len() });
        }
        labels.push(values[0]);
        rows.push(values[1..].to_vec());
    }
    if rows.is_empty() {
        return Err(Error::InvalidDataset("dataset file has no rows".into()));
    }
    LabeledDataset::from_rows(&rows, labels)
}

/// Label counts per shard, handy for reports.
pub fn label_balance(shards: &[LabeledDataset]) -> BTreeMap<usize, (usize, usize)> {
    shards
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pos = s.labels().iter().filter(|&&y| y > 0.0).count();
            (i, (pos, s.len() - pos))
        })
        .collect()
}
