//! JSON experiment configuration and its translation into a validated problem.

use std::path::{Path, PathBuf};

use madmm_core::admm::{self, InitialPrimal, Mechanism, PenaltySchedule};
use madmm_core::data::{self, PartitionMode};
use madmm_core::graph::Network;
use madmm_core::model::{ErmConfig, LabeledDataset};
use madmm_core::privacy::{self, NoiseSchedule};
use madmm_core::solver::SolverSettings;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    /// Cycle over all nodes plus the chord (0, 2).
    RingWithChord { nodes: usize },
    Cycle { nodes: usize },
    Path { nodes: usize },
    Complete { nodes: usize },
    ErdosRenyi { nodes: usize, p: f64, seed: u64 },
    /// One `i j` pair per line.
    EdgeList { path: PathBuf, nodes: Option<usize> },
}

impl NetworkSpec {
    pub fn build(&self, base: &Path) -> Result<Network> {
        Ok(match self {
            NetworkSpec::RingWithChord { nodes } => Network::ring_with_chord(*nodes)?,
            NetworkSpec::Cycle { nodes } => Network::cycle(*nodes)?,
            NetworkSpec::Path { nodes } => Network::path(*nodes)?,
            NetworkSpec::Complete { nodes } => Network::complete(*nodes)?,
            NetworkSpec::ErdosRenyi { nodes, p, seed } => Network::erdos_renyi(*nodes, *p, *seed)?,
            NetworkSpec::EdgeList { path, nodes } => {
                let text = std::fs::read_to_string(base.join(path))?;
                Network::from_edge_list(&text, *nodes)?
            }
        })
    }
}

fn default_partition() -> PartitionMode {
    PartitionMode::Even
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Two-cluster synthetic data with `samples` rows in total, split
    /// across the nodes.
    Synthetic {
        dim: usize,
        samples: usize,
        separation: f64,
        #[serde(default = "default_partition")]
        partition: PartitionMode,
    },
    /// A normalized dataset file (`d` on the first line, then `label,v1..vd`).
    File {
        path: PathBuf,
        #[serde(default = "default_partition")]
        partition: PartitionMode,
    },
}

fn default_c1() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErmSpec {
    pub c: f64,
    pub rho: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PenaltySpec {
    Shared { eta1: f64, q: f64, theta: f64 },
    PerNode(PenaltySchedule),
}

impl PenaltySpec {
    pub fn schedule(&self, n: usize) -> Result<PenaltySchedule> {
        let s = match self {
            PenaltySpec::Shared { eta1, q, theta } => PenaltySchedule::shared(n, *eta1, *q, *theta),
            PenaltySpec::PerNode(s) => s.clone(),
        };
        if s.n_nodes() != n {
            return Err(HarnessError::Config(format!("penalty schedule has {} nodes, network has {n}", s.n_nodes())));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Shared { alpha1: f64, q: f64 },
    PerNode(NoiseSchedule),
}

impl NoiseSpec {
    pub fn schedule(&self, n: usize) -> Result<NoiseSchedule> {
        let s = match self {
            NoiseSpec::Shared { alpha1, q } => NoiseSchedule::new(vec![*alpha1; n], vec![*q; n])?,
            NoiseSpec::PerNode(s) => NoiseSchedule::new(s.alpha1.clone(), s.q.clone())?,
        };
        if s.n_nodes() != n {
            return Err(HarnessError::Config(format!("noise schedule has {} nodes, network has {n}", s.n_nodes())));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self { tol: s.tol, max_iter: s.max_iter }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Normal,
    Zeros,
}

fn default_mu() -> f64 {
    madmm_core::analysis::DEFAULT_MU
}

fn default_fstar_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Gradient tolerance of the centralized reference solve.
    #[serde(default = "default_fstar_tol")]
    pub fstar_tol: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { mu: default_mu(), fstar_tol: default_fstar_tol() }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub node: usize,
    /// Whether the attacker learns the target's penalty sequence.
    #[serde(default = "yes")]
    pub reveal_schedule: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self { node: 0, reveal_schedule: true }
    }
}

fn default_runs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub data: DataSpec,
    pub erm: ErmSpec,
    pub penalty: PenaltySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    pub horizon: usize,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub init: InitSpec,
    /// Worker threads for independent runs; all cores when absent. Left
    /// out of the digest since it never changes the results.
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_mechanism() -> Mechanism {
    Mechanism::None
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// SHA-256 of the compact JSON form of the configuration.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings { tol: self.solver.tol, max_iter: self.solver.max_iter, ..SolverSettings::default() }
    }

    /// Builds and validates everything needed to run, without touching the
    /// output directory.
    pub fn prepare(&self) -> Result<Problem> {
        if self.n_runs == 0 {
            return Err(HarnessError::Config("n_runs must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(HarnessError::Config("horizon must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(HarnessError::Config("threads must be at least 1".into()));
        }
        let net = self.network.build(&self.base_dir)?;
        let n = net.n_nodes();
        let datasets = self.datasets(n)?;
        let cfg = ErmConfig { c: self.erm.c, rho: self.erm.rho, n_nodes: n, c1: self.erm.c1 };
        cfg.validate(&datasets)?;
        let schedule = self.penalty.schedule(n)?;
        admm::validate_schedules(&schedule, self.horizon).map_err(madmm_core::Error::ScheduleInvalid)?;

        let sizes: Vec<usize> = datasets.iter().map(LabeledDataset::len).collect();
        let thetas: Vec<f64> = (0..n).map(|i| schedule.theta_for(i)).collect();
        let theta_check = privacy::check_theta_condition_per_node(&thetas, &sizes, &cfg, &net);
        let mut warnings = Vec::new();
        let noise = if self.mechanism.is_private() {
            let spec = self
                .noise
                .as_ref()
                .ok_or_else(|| HarnessError::Config("private mechanisms need a noise schedule".into()))?;
            theta_check.map_err(madmm_core::Error::ThetaConditionViolated)?;
            Some(spec.schedule(n)?)
        } else {
            if let Err(nodes) = theta_check {
                warnings.push(format!("theta condition fails at nodes {nodes:?}; harmless without noise"));
            }
            None
        };
        Ok(Problem {
            net,
            datasets,
            cfg,
            schedule,
            noise,
            mechanism: self.mechanism,
            horizon: self.horizon,
            solver: self.solver_settings(),
            init: match self.init {
                InitSpec::Normal => InitialPrimal::StandardNormal,
                InitSpec::Zeros => InitialPrimal::Zeros,
            },
            warnings,
        })
    }

    fn datasets(&self, n: usize) -> Result<Vec<LabeledDataset>> {
        match &self.data {
            DataSpec::Synthetic { dim, samples, separation, partition } => {
                let all = data::synthetic(1, *dim, &[*samples], self.seed, *separation)?.remove(0);
                Ok(data::partition(&all, n, *partition, self.seed)?)
            }
            DataSpec::File { path, partition } => {
                let file = std::fs::File::open(self.base_dir.join(path))?;
                let all = data::read_dataset(std::io::BufReader::new(file))?;
                Ok(data::partition(&all, n, *partition, self.seed)?)
            }
        }
    }
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub net: Network,
    pub datasets: Vec<LabeledDataset>,
    pub cfg: ErmConfig,
    pub schedule: PenaltySchedule,
    pub noise: Option<NoiseSchedule>,
    pub mechanism: Mechanism,
    pub horizon: usize,
    pub solver: SolverSettings,
    pub init: InitialPrimal,
    /// Non-fatal findings of validation.
    pub warnings: Vec<String>,
}

impl Problem {
    pub fn sizes(&self) -> Vec<usize> {
        self.datasets.iter().map(LabeledDataset::len).collect()
    }

    pub fn run_options(&self, seed: u64) -> admm::RunOptions {
        admm::RunOptions {
            mechanism: self.mechanism,
            noise: self.noise.clone(),
            horizon: self.horizon,
            seed,
            solver: self.solver,
            init: self.init.clone(),
            parallel: false,
        }
    }
}

/// Settings of the `preprocess` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub schema: PathBuf,
    pub input: PathBuf,
    /// Compare the result with the published census size.
    #[serde(default)]
    pub compare_reference: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PreprocessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "network": {"kind": "ring_with_chord", "nodes": 5},
        "data": {"source": "synthetic", "dim": 3, "samples": 100, "separation": 1.0},
        "erm": {"c": 1.0, "rho": 0.5},
        "penalty": {"eta1": 0.5, "q": 1.0, "theta": 0.5},
        "horizon": 10,
        "seed": 3
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(cfg.n_runs, 10);
        assert_eq!(cfg.mechanism, Mechanism::None);
        assert_eq!(cfg.erm.c1, 0.25);
        assert_eq!(cfg.init, InitSpec::Normal);
        let p = cfg.prepare().unwrap();
        assert_eq!(p.sizes(), vec![20; 5]);
        assert_eq!(p.schedule, PenaltySchedule::constant(5, 0.5));
    }

    #[test]
    fn per_node_schedules_parse() {
        let text = MINIMAL.replace(
            r#""penalty": {"eta1": 0.5, "q": 1.0, "theta": 0.5}"#,
            r#""penalty": {"eta1": [0.55, 0.65, 0.6, 0.55, 0.6], "q": [1.01, 1.03, 1.1, 1.2, 1.02], "theta": 0.5},
               "noise": {"alpha1": [3, 3, 3, 3, 3], "q": [1, 1, 1, 1, 1]}, "mechanism": "pp""#,
        );
        let cfg = ExperimentConfig::from_json(&text, Path::new(".")).unwrap();
        let p = cfg.prepare().unwrap();
        assert_eq!(p.schedule.q[3], 1.2);
        assert_eq!(p.noise.unwrap().alpha_at(2, 1), 3.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace(r#""seed": 3"#, r#""seed": 3, "sed": 4"#);
        assert!(ExperimentConfig::from_json(&text, Path::new(".")).is_err());
    }

    #[test]
    fn private_run_needs_noise_and_theta_condition() {
        let text = MINIMAL.replace(r#""seed": 3"#, r#""seed": 3, "mechanism": "pp""#);
        let cfg = ExperimentConfig::from_json(&text, Path::new(".")).unwrap();
        assert!(matches!(cfg.prepare(), Err(HarnessError::Config(_))));

        // B_i / C = 1, rho / N = 0.1: 0.5 < 0.1 + 2 theta V fails for theta = 0.05, V <= 3.
        let text = MINIMAL
            .replace(r#""c": 1.0"#, r#""c": 20.0"#)
            .replace(r#""theta": 0.5"#, r#""theta": 0.05"#)
            .replace(r#""seed": 3"#, r#""seed": 3, "mechanism": "pp", "noise": {"alpha1": 3, "q": 1}"#);
        let cfg = ExperimentConfig::from_json(&text, Path::new(".")).unwrap();
        assert!(matches!(
            cfg.prepare(),
            Err(HarnessError::Core(madmm_core::Error::ThetaConditionViolated(_)))
        ));
    }

    #[test]
    fn digest_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        let squashed: String = MINIMAL.split_whitespace().collect();
        let b = ExperimentConfig::from_json(&squashed, Path::new("/elsewhere")).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = ExperimentConfig::from_json(&MINIMAL.replace(r#""seed": 3"#, r#""seed": 4"#), Path::new(".")).unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
        let threaded = ExperimentConfig { threads: Some(7), ..a.clone() };
        assert_eq!(a.digest().unwrap(), threaded.digest().unwrap());
    }
}
