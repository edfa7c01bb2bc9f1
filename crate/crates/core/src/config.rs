//! JSON experiment documents.
//!
//! A document is parsed with unknown fields rejected, resolved (every default
//! filled in) and validated. The resolved form is what gets written next to
//! the outputs, and it parses back to the same value.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{Constants, DescentRegion, ExitCriterion};
use crate::engine::{NetworkState, RunConfig, Scenario, DEFAULT_DIVERGENCE_CAP};
use crate::error::{Error, Result};
use crate::network::{build_combination_matrix, CombinationRule, Topology};
use crate::noise::{DeclaredMoments, NoiseKind, NoiseModel};
use crate::problems::{
    BoxRegion, LogisticNNProblem, Problem, QuadraticProblem, ShiftedProblem, DEFAULT_QUADRATURE_NODES,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub network: NetworkSpec,
    pub problem: ProblemSpec,
    /// Per-agent `bᵀw + ½wᵀBw` added to the shared problem; empty or one per agent.
    #[serde(default)]
    pub agent_shifts: Vec<ShiftSpec>,
    #[serde(default = "zero_noise")]
    pub noise: NoiseKind,
    #[serde(default)]
    pub constants: ConstantsSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub replica_seeds: Vec<u64>,
    pub experiment: ExperimentSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn zero_noise() -> NoiseKind {
    NoiseKind::Composite { components: vec![] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub topology: TopologySpec,
    #[serde(default = "default_rule")]
    pub rule: CombinationRule,
}

fn default_rule() -> CombinationRule {
    CombinationRule::Averaging
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Complete {
        n_agents: usize,
        #[serde(default = "yes")]
        self_loops: bool,
    },
    Ring {
        n_agents: usize,
        #[serde(default = "yes")]
        self_loops: bool,
    },
    Line {
        n_agents: usize,
        #[serde(default = "yes")]
        self_loops: bool,
    },
    /// Undirected edge list.
    Edges {
        n_agents: usize,
        edges: Vec<(usize, usize)>,
        #[serde(default = "yes")]
        self_loops: bool,
    },
}

impl TopologySpec {
    pub fn build(&self) -> Result<Topology> {
        match *self {
            TopologySpec::Complete { n_agents, self_loops } => Topology::complete(n_agents, self_loops),
            TopologySpec::Ring { n_agents, self_loops } => Topology::ring(n_agents, self_loops),
            TopologySpec::Line { n_agents, self_loops } => Topology::line(n_agents, self_loops),
            TopologySpec::Edges { n_agents, ref edges, self_loops } => {
                Topology::new(n_agents, edges, vec![self_loops; n_agents])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Logistic {
        reg: f64,
        #[serde(default = "default_nodes")]
        quadrature_nodes: usize,
    },
    /// `½ wᵀHw`, rows of `H`.
    Quadratic { hessian: Vec<Vec<f64>> },
}

fn default_nodes() -> usize {
    DEFAULT_QUADRATURE_NODES
}

fn matrix_from_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(format!("{what} must be a {dim}x{dim} matrix")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Arc<dyn Problem>> {
        Ok(match self {
            ProblemSpec::Logistic { reg, quadrature_nodes } => {
                Arc::new(LogisticNNProblem::with_nodes(*reg, *quadrature_nodes)?)
            }
            ProblemSpec::Quadratic { hessian } => {
                Arc::new(QuadraticProblem::new(matrix_from_rows(hessian, hessian.len(), "problem.hessian")?)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub linear: Vec<f64>,
    /// Zero when absent.
    #[serde(default)]
    pub quadratic: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default = "half")]
    pub pi_confidence: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "one")]
    pub sigma_u2: f64,
    #[serde(default = "one")]
    pub sigma_l2: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn default_tau() -> f64 {
    0.1
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        Self { delta: 1.0, sigma2: 1.0, pi_confidence: 0.5, tau: 0.1, sigma_u2: 1.0, sigma_l2: 1.0 }
    }
}

impl ConstantsSpec {
    pub fn at(&self, mu: f64) -> Result<Constants> {
        Constants::new(mu, self.delta, self.sigma2, self.pi_confidence, self.tau, self.sigma_u2, self.sigma_l2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Every agent starts at this point.
    Consensus(Vec<f64>),
    /// One row per agent.
    Agents(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub mu: f64,
    #[serde(default = "default_iterations")]
    pub n_iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "default_stride")]
    pub trace_stride: usize,
    #[serde(default = "default_cap")]
    pub divergence_cap: f64,
    #[serde(default)]
    pub record_agents: bool,
    /// The origin when absent.
    #[serde(default)]
    pub init: Option<InitSpec>,
}

fn default_iterations() -> usize {
    1000
}

fn default_stride() -> usize {
    1
}

fn default_cap() -> f64 {
    DEFAULT_DIVERGENCE_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentSpec {
    SingleRun,
    EscapeSweep {
        mu_list: Vec<f64>,
        #[serde(default)]
        criterion: ExitCriterion,
        #[serde(default = "default_escape_horizon")]
        horizon: usize,
        #[serde(default)]
        run_to_horizon: bool,
    },
    DeviationSweep {
        mu_list: Vec<f64>,
        #[serde(default = "one")]
        horizon_t: f64,
        #[serde(default)]
        anchor_iteration: usize,
    },
    DescentCheck {
        region: DescentRegion,
        sampler: BoxRegion,
        n_replicas: usize,
        #[serde(default = "default_attempts")]
        max_attempts: usize,
    },
    SurfaceGrid {
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default = "default_points")]
        points: usize,
    },
}

fn default_escape_horizon() -> usize {
    50_000
}

fn default_attempts() -> usize {
    1_000_000
}

fn default_points() -> usize {
    81
}

impl ExperimentSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentSpec::SingleRun => "single_run",
            ExperimentSpec::EscapeSweep { .. } => "escape_sweep",
            ExperimentSpec::DeviationSweep { .. } => "deviation_sweep",
            ExperimentSpec::DescentCheck { .. } => "descent_check",
            ExperimentSpec::SurfaceGrid { .. } => "surface_grid",
        }
    }
}

impl ExperimentConfig {
    pub fn n_agents(&self) -> usize {
        match self.network.topology {
            TopologySpec::Complete { n_agents, .. }
            | TopologySpec::Ring { n_agents, .. }
            | TopologySpec::Line { n_agents, .. }
            | TopologySpec::Edges { n_agents, .. } => n_agents,
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let topology = self.network.topology.build()?;
        let matrix = build_combination_matrix(&topology, &self.network.rule)?;
        let base = self.problem.build()?;
        let m = base.dimension();
        let n = topology.n_agents();
        let problems: Vec<Arc<dyn Problem>> = if self.agent_shifts.is_empty() {
            vec![base; n]
        } else {
            if self.agent_shifts.len() != n {
                return Err(Error::Config(format!(
                    "agent_shifts has {} entries for {n} agents",
                    self.agent_shifts.len()
                )));
            }
            self.agent_shifts
                .iter()
                .map(|s| {
                    let b = match &s.quadratic {
                        Some(rows) => matrix_from_rows(rows, m, "agent_shifts.quadratic")?,
                        None => DMatrix::zeros(m, m),
                    };
                    Ok(Arc::new(ShiftedProblem::new(base.clone(), s.linear.clone(), b)?) as Arc<dyn Problem>)
                })
                .collect::<Result<_>>()?
        };
        let c = &self.constants;
        let declared = DeclaredMoments {
            sigma2: c.sigma2,
            sigma_u2: c.sigma_u2,
            sigma_l2: c.sigma_l2,
            ..DeclaredMoments::default()
        };
        let noise = NoiseModel::new(self.noise.clone(), declared)?;
        Scenario::new(matrix, problems, noise)
    }

    pub fn initial_state(&self) -> Result<NetworkState> {
        let n = self.n_agents();
        match &self.run.init {
            Some(InitSpec::Consensus(w)) => Ok(NetworkState::consensus(n, w)),
            Some(InitSpec::Agents(rows)) => NetworkState::from_rows(rows),
            None => Err(Error::Config("run.init is unresolved".into())),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            mu: self.run.mu,
            n_iterations: self.run.n_iterations,
            seed: self.run.seed,
            burn_in: self.run.burn_in,
            trace_stride: self.run.trace_stride,
            divergence_cap: self.run.divergence_cap,
            record_agents: self.run.record_agents,
            constants: Some(self.constants.at(self.run.mu)?),
        })
    }

    /// Every step size the experiment will use.
    pub fn step_sizes(&self) -> Vec<f64> {
        match &self.experiment {
            ExperimentSpec::EscapeSweep { mu_list, .. } | ExperimentSpec::DeviationSweep { mu_list, .. } => {
                mu_list.clone()
            }
            _ => vec![self.run.mu],
        }
    }

    fn resolve_and_validate(mut self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let scenario = self.scenario()?;
        let m = scenario.dimension();
        let n = scenario.n_agents();
        if self.run.init.is_none() {
            self.run.init = Some(InitSpec::Consensus(vec![0.0; m]));
        }
        let init = self.initial_state()?;
        if init.n_agents() != n || init.dimension() != m {
            return Err(Error::Config(format!(
                "run.init must give {n} agents of dimension {m}, got {} of dimension {}",
                init.n_agents(),
                init.dimension()
            )));
        }
        self.run_config()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        for mu in self.step_sizes() {
            if !(mu > 0.0) {
                return Err(Error::Config(format!("step sizes must be positive, got {mu}")));
            }
            self.constants.at(mu)?;
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.replica_seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("replica_seeds contains {dup} more than once")));
        }
        match &self.experiment {
            ExperimentSpec::SingleRun => {}
            ExperimentSpec::EscapeSweep { mu_list, criterion, horizon, .. } => {
                self.need_seeds()?;
                if mu_list.is_empty() || *horizon == 0 {
                    return Err(Error::Config("escape_sweep needs step sizes and a positive horizon".into()));
                }
                match criterion {
                    ExitCriterion::BallRadius { radius, center } => {
                        if !(*radius > 0.0) {
                            return Err(Error::Config("ball radius must be positive".into()));
                        }
                        if center.as_ref().is_some_and(|c| c.len() != m) {
                            return Err(Error::Config(format!("ball center must have dimension {m}")));
                        }
                    }
                    ExitCriterion::LossDrop { delta: x } | ExitCriterion::ScaledLossDrop { factor: x } => {
                        if !(*x > 0.0) {
                            return Err(Error::Config("loss drop must be positive".into()));
                        }
                    }
                }
            }
            ExperimentSpec::DeviationSweep { mu_list, horizon_t, .. } => {
                self.need_seeds()?;
                if mu_list.len() < 2 {
                    return Err(Error::Config("deviation_sweep needs at least two step sizes".into()));
                }
                if !(*horizon_t > 0.0) {
                    return Err(Error::Config("horizon_t must be positive".into()));
                }
            }
            ExperimentSpec::DescentCheck { sampler, n_replicas, .. } => {
                sampler.validate()?;
                if sampler.dimension() != m {
                    return Err(Error::Config(format!("sampler must have dimension {m}")));
                }
                if *n_replicas == 0 {
                    return Err(Error::Config("descent_check needs n_replicas >= 1".into()));
                }
            }
            ExperimentSpec::SurfaceGrid { lower, upper, points } => {
                if m != 2 || lower.len() != 2 || upper.len() != 2 {
                    return Err(Error::Config("surface_grid needs a two-dimensional problem and box".into()));
                }
                if *points < 2 || lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                    return Err(Error::Config("surface_grid needs points >= 2 and lower < upper".into()));
                }
            }
        }
        Ok(self)
    }

    fn need_seeds(&self) -> Result<()> {
        if self.replica_seeds.is_empty() {
            return Err(Error::Config(format!("{} needs replica_seeds", self.experiment.name())));
        }
        Ok(())
    }
}

/// Parse, resolve defaults and validate a JSON document.
pub fn validate_config(document: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(document).map_err(|e| Error::Config(e.to_string()))?;
    cfg.resolve_and_validate()
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    validate_config(&text)
}

/// Pretty JSON of the resolved document.
pub fn to_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}
