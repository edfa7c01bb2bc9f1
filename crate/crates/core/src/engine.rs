//! The adapt-then-combine diffusion recursion
//!
//! ```text
//! φ_k,i = w_k,i−1 − μ ∇̂J_k(w_k,i−1)        (adapt)
//! w_k,i = Σ_l a_lk φ_l,i                   (combine)
//! ```
//!
//! plus centroid bookkeeping and the short-term comparison model with the
//! Hessian frozen at an anchor point.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::analysis::{classify, Constants, SetKind};
use crate::error::{Error, Result};
use crate::network::CombinationMatrix;
use crate::noise::NoiseModel;
use crate::problems::{NetworkCost, Problem};
use crate::rng::{agent_stream, StreamRng};

pub const DEFAULT_DIVERGENCE_CAP: f64 = 1e6;

/// Everything fixed about a network: coupling, per-agent costs and noise.
#[derive(Debug, Clone)]
pub struct Scenario {
    matrix: CombinationMatrix,
    problems: Vec<Arc<dyn Problem>>,
    noise: NoiseModel,
    perron: Vec<f64>,
    cost: NetworkCost,
}

impl Scenario {
    pub fn new(matrix: CombinationMatrix, problems: Vec<Arc<dyn Problem>>, noise: NoiseModel) -> Result<Self> {
        let n = matrix.n_agents();
        if problems.len() != n {
            return Err(Error::Dimension { expected: n, found: problems.len() });
        }
        let perron = matrix.perron()?.as_slice().to_vec();
        let cost = NetworkCost::new(problems.clone(), perron.clone())?;
        for p in &problems {
            noise.check_compatible(p.as_ref())?;
        }
        Ok(Self { matrix, problems, noise, perron, cost })
    }

    /// Every agent shares `problem`.
    pub fn homogeneous(matrix: CombinationMatrix, problem: Arc<dyn Problem>, noise: NoiseModel) -> Result<Self> {
        let n = matrix.n_agents();
        Self::new(matrix, vec![problem; n], noise)
    }

    pub fn matrix(&self) -> &CombinationMatrix {
        &self.matrix
    }

    pub fn problems(&self) -> &[Arc<dyn Problem>] {
        &self.problems
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn perron(&self) -> &[f64] {
        &self.perron
    }

    /// The aggregate cost `Σ p_k J_k`.
    pub fn cost(&self) -> &NetworkCost {
        &self.cost
    }

    pub fn n_agents(&self) -> usize {
        self.problems.len()
    }

    pub fn dimension(&self) -> usize {
        self.cost.dimension()
    }
}

/// Stacked agent iterates, one row per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    n_agents: usize,
    dim: usize,
    data: Vec<f64>,
    pub iteration: usize,
}

impl NetworkState {
    pub fn consensus(n_agents: usize, w: &[f64]) -> Self {
        let data = (0..n_agents).flat_map(|_| w.iter().copied()).collect();
        Self { n_agents, dim: w.len(), data, iteration: 0 }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument("network state needs at least one agent and dimension".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension { expected: dim, found: bad.len() });
        }
        Ok(Self { n_agents: rows.len(), dim, data: rows.concat(), iteration: 0 })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn agent(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn agent_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_consensus(&self) -> bool {
        (1..self.n_agents).all(|k| self.agent(k) == self.agent(0))
    }

    fn check(&self, cap: f64) -> std::result::Result<(), String> {
        for k in 0..self.n_agents {
            let w = self.agent(k);
            if w.iter().any(|x| !x.is_finite()) {
                return Err(format!("agent {k} has a non-finite iterate {w:?}"));
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > cap {
                return Err(format!("agent {k} left the ball of radius {cap} (norm {norm:e})"));
            }
        }
        Ok(())
    }
}

/// Output of the adapt phase.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutput {
    pub phi: NetworkState,
    /// `∇̂J_k(w_k)` for each agent, row-stacked like the state.
    pub stochastic_grads: NetworkState,
}

/// One adapt phase; agent `k` draws from `rngs[k]`.
pub fn adapt_step(
    state: &NetworkState,
    problems: &[Arc<dyn Problem>],
    noise: &NoiseModel,
    mu: f64,
    rngs: &mut [StreamRng],
) -> Result<AdaptOutput> {
    let n = state.n_agents();
    if problems.len() != n || rngs.len() != n {
        return Err(Error::Dimension { expected: n, found: problems.len().min(rngs.len()) });
    }
    let mut phi = state.clone();
    let mut grads = state.clone();
    for k in 0..n {
        noise.stochastic_gradient_into(problems[k].as_ref(), state.agent(k), &mut rngs[k], grads.agent_mut(k))?;
        let g = grads.agent(k);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                iteration: state.iteration + 1,
                reason: format!("non-finite stochastic gradient at agent {k}"),
            });
        }
        for (p, gi) in phi.agent_mut(k).iter_mut().zip(g) {
            *p -= mu * gi;
        }
    }
    Ok(AdaptOutput { phi, stochastic_grads: grads })
}

fn combine_into(phi: &NetworkState, a: &CombinationMatrix, out: &mut NetworkState) {
    let m = phi.dim;
    let distinct = if a.has_shared_column() { 1 } else { phi.n_agents };
    for k in 0..distinct {
        let dst = &mut out.data[k * m..(k + 1) * m];
        dst.iter_mut().for_each(|x| *x = 0.0);
        for &(l, w) in a.column(k) {
            let src = &phi.data[l * m..(l + 1) * m];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    for k in distinct..phi.n_agents {
        out.data.copy_within(0..m, k * m);
    }
}

/// `w_k = Σ_l a_lk φ_l`. The returned state carries `phi.iteration`.
pub fn combine_step(phi: &NetworkState, a: &CombinationMatrix) -> Result<NetworkState> {
    if phi.n_agents() != a.n_agents() {
        return Err(Error::Dimension { expected: a.n_agents(), found: phi.n_agents() });
    }
    let mut out = phi.clone();
    combine_into(phi, a, &mut out);
    Ok(out)
}

/// `w_c = Σ_k p_k w_k`.
pub fn centroid(state: &NetworkState, p: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; state.dim];
    for (k, pk) in p.iter().enumerate().take(state.n_agents) {
        for (ci, wi) in c.iter_mut().zip(state.agent(k)) {
            *ci += pk * wi;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisagreementMoments {
    pub second: f64,
    pub fourth: f64,
}

/// `Σ_k p_k ‖w_k − w_c‖²` and `Σ_k p_k ‖w_k − w_c‖⁴`.
pub fn disagreement_moments(state: &NetworkState, p: &[f64]) -> DisagreementMoments {
    let c = centroid(state, p);
    let mut out = DisagreementMoments { second: 0.0, fourth: 0.0 };
    for (k, pk) in p.iter().enumerate().take(state.n_agents) {
        let d2: f64 = state.agent(k).iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        out.second += pk * d2;
        out.fourth += pk * d2 * d2;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTerms {
    /// `Σ p_k (∇J_k(w_k) − ∇J_k(w_c))`
    pub d: Vec<f64>,
    /// `Σ p_k (∇̂J_k(w_k) − ∇J_k(w_k))`
    pub s: Vec<f64>,
}

pub fn perturbation_terms(
    state: &NetworkState,
    problems: &[Arc<dyn Problem>],
    p: &[f64],
    stochastic_grads: &NetworkState,
) -> PerturbationTerms {
    let m = state.dimension();
    let c = centroid(state, p);
    let mut d = vec![0.0; m];
    let mut s = vec![0.0; m];
    let (mut gk, mut gc) = (vec![0.0; m], vec![0.0; m]);
    for (k, pk) in p.iter().enumerate() {
        problems[k].gradient_into(state.agent(k), &mut gk);
        problems[k].gradient_into(&c, &mut gc);
        for i in 0..m {
            d[i] += pk * (gk[i] - gc[i]);
            s[i] += pk * (stochastic_grads.agent(k)[i] - gk[i]);
        }
    }
    PerturbationTerms { d, s }
}

/// In-place stepper shared by every experiment driver.
pub struct Stepper<'a> {
    scenario: &'a Scenario,
    mu: f64,
    cap: f64,
    state: NetworkState,
    phi: NetworkState,
    grads: NetworkState,
    rngs: Vec<StreamRng>,
    track_noise: bool,
    aggregate_noise: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(scenario: &'a Scenario, mu: f64, seed: u64, init: NetworkState, cap: f64) -> Result<Self> {
        if init.n_agents() != scenario.n_agents() {
            return Err(Error::Dimension { expected: scenario.n_agents(), found: init.n_agents() });
        }
        if init.dimension() != scenario.dimension() {
            return Err(Error::Dimension { expected: scenario.dimension(), found: init.dimension() });
        }
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be >= 0, got {mu}")));
        }
        let rngs = (0..scenario.n_agents()).map(|k| agent_stream(seed, k)).collect();
        let m = scenario.dimension();
        Ok(Self {
            scenario,
            mu,
            cap,
            phi: init.clone(),
            grads: init.clone(),
            state: init,
            rngs,
            track_noise: false,
            aggregate_noise: vec![0.0; m],
            scratch: vec![0.0; m],
        })
    }

    /// Also compute `s_i = Σ p_k (∇̂J_k − ∇J_k)` at every step (costs one exact
    /// gradient per agent).
    pub fn track_noise(mut self, on: bool) -> Self {
        self.track_noise = on;
        self
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn centroid(&self) -> Vec<f64> {
        centroid(&self.state, self.scenario.perron())
    }

    /// Aggregate noise of the last step (zeros unless tracking is on).
    pub fn aggregate_noise(&self) -> &[f64] {
        &self.aggregate_noise
    }

    pub fn last_stochastic_grads(&self) -> &NetworkState {
        &self.grads
    }

    pub fn step(&mut self) -> Result<()> {
        let sc = self.scenario;
        let next = self.state.iteration + 1;
        let m = self.state.dim;
        if self.track_noise {
            self.aggregate_noise.iter_mut().for_each(|x| *x = 0.0);
        }
        for k in 0..self.state.n_agents {
            let problem = sc.problems[k].as_ref();
            let w = &self.state.data[k * m..(k + 1) * m];
            let g = &mut self.grads.data[k * m..(k + 1) * m];
            sc.noise.stochastic_gradient_into(problem, w, &mut self.rngs[k], g)?;
            if self.track_noise {
                problem.gradient_into(w, &mut self.scratch);
                let pk = sc.perron[k];
                for ((s, gi), ei) in self.aggregate_noise.iter_mut().zip(g.iter()).zip(&self.scratch) {
                    *s += pk * (gi - ei);
                }
            }
            let phi = &mut self.phi.data[k * m..(k + 1) * m];
            for ((p, wi), gi) in phi.iter_mut().zip(w).zip(g.iter()) {
                *p = wi - self.mu * gi;
            }
        }
        combine_into(&self.phi, &sc.matrix, &mut self.state);
        self.state.iteration = next;
        self.state.check(self.cap).map_err(|reason| Error::Diverged { iteration: next, reason })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mu: f64,
    pub n_iterations: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub trace_stride: usize,
    pub divergence_cap: f64,
    pub record_agents: bool,
    /// Label each record with its G/H/M set when present.
    pub constants: Option<Constants>,
}

impl RunConfig {
    pub fn new(mu: f64, n_iterations: usize, seed: u64) -> Self {
        Self {
            mu,
            n_iterations,
            seed,
            burn_in: 0,
            trace_stride: 1,
            divergence_cap: DEFAULT_DIVERGENCE_CAP,
            record_agents: false,
            constants: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidArgument(format!("mu must be positive, got {}", self.mu)));
        }
        if self.n_iterations == 0 {
            return Err(Error::InvalidArgument("n_iterations must be at least 1".into()));
        }
        if self.trace_stride == 0 {
            return Err(Error::InvalidArgument("trace_stride must be at least 1".into()));
        }
        if !(self.divergence_cap > 0.0) {
            return Err(Error::InvalidArgument("divergence_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub centroid: Vec<f64>,
    pub centroid_loss: f64,
    pub centroid_grad_norm2: f64,
    pub disagreement2: f64,
    pub disagreement4: f64,
    pub set_label: Option<SetKind>,
    pub burn_in: bool,
    pub per_agent_iterates: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trace: Vec<TraceRecord>,
    pub status: RunStatus,
    pub final_state: NetworkState,
}

fn record(scenario: &Scenario, cfg: &RunConfig, state: &NetworkState) -> TraceRecord {
    let p = scenario.perron();
    let c = centroid(state, p);
    let cost = scenario.cost();
    let grad = cost.gradient(&c);
    let dis = disagreement_moments(state, p);
    TraceRecord {
        iteration: state.iteration,
        centroid_loss: cost.loss(&c),
        centroid_grad_norm2: grad.iter().map(|g| g * g).sum(),
        disagreement2: dis.second,
        disagreement4: dis.fourth,
        set_label: cfg.constants.as_ref().map(|k| classify(&c, cost, k).kind),
        burn_in: state.iteration < cfg.burn_in,
        per_agent_iterates: cfg.record_agents.then(|| state.rows()),
        centroid: c,
    }
}

/// Iterate the diffusion recursion from `init`, recording every
/// `trace_stride`-th iteration (including iteration 0 and the last one).
pub fn run(scenario: &Scenario, cfg: &RunConfig, init: NetworkState) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut stepper = Stepper::new(scenario, cfg.mu, cfg.seed, init, cfg.divergence_cap)?;
    let mut trace = vec![record(scenario, cfg, stepper.state())];
    for i in 1..=cfg.n_iterations {
        match stepper.step() {
            Ok(()) => {}
            Err(Error::Diverged { iteration, reason }) => {
                return Ok(RunOutcome {
                    trace,
                    status: RunStatus::Diverged { iteration, reason },
                    final_state: stepper.state().clone(),
                });
            }
            Err(e) => return Err(e),
        }
        if i % cfg.trace_stride == 0 || i == cfg.n_iterations {
            trace.push(record(scenario, cfg, stepper.state()));
        }
    }
    Ok(RunOutcome { trace, status: RunStatus::Completed, final_state: stepper.state().clone() })
}

/// Short-term comparison at an anchor `w_c,i*`: the true centroid deviation
/// `w̃ = w_c,i* − w_c,i*+i` and the model deviation `w̃'` driven by the same
/// aggregate noise, with the gradient and Hessian frozen at the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortTermState {
    pub anchor: Vec<f64>,
    pub anchor_gradient: Vec<f64>,
    pub anchor_hessian: DMatrix<f64>,
    pub deviation_true: Vec<f64>,
    pub deviation_model: Vec<f64>,
}

impl ShortTermState {
    pub fn new(anchor: Vec<f64>, cost: &dyn Problem) -> Self {
        let m = anchor.len();
        Self {
            anchor_gradient: cost.gradient(&anchor),
            anchor_hessian: cost.hessian(&anchor),
            deviation_true: vec![0.0; m],
            deviation_model: vec![0.0; m],
            anchor,
        }
    }

    /// `w̃' ← (I − μ H*) w̃' + μ ∇J* + μ s`
    pub fn advance_model(&mut self, mu: f64, aggregate_noise: &[f64]) {
        let v = DVector::from_column_slice(&self.deviation_model);
        let hv = &self.anchor_hessian * &v;
        for i in 0..v.len() {
            self.deviation_model[i] = v[i] - mu * hv[i] + mu * self.anchor_gradient[i] + mu * aggregate_noise[i];
        }
    }

    pub fn set_true_centroid(&mut self, centroid: &[f64]) {
        for ((d, a), c) in self.deviation_true.iter_mut().zip(&self.anchor).zip(centroid) {
            *d = a - c;
        }
    }

    pub fn moments(&self, step: usize) -> DeviationMoments {
        let n2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let w2 = n2(&self.deviation_true);
        let gap2 = self.deviation_true.iter().zip(&self.deviation_model).map(|(a, b)| (a - b) * (a - b)).sum();
        DeviationMoments { step, w2, w3: w2.powf(1.5), w4: w2 * w2, gap2, model2: n2(&self.deviation_model) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationMoments {
    pub step: usize,
    /// ‖w̃‖²
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// ‖w̃ − w̃'‖²
    pub gap2: f64,
    /// ‖w̃'‖²
    pub model2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortTermTrace {
    pub anchor: Vec<f64>,
    /// One entry per step after the anchor, starting with step 0 (both deviations zero).
    pub steps: Vec<DeviationMoments>,
    /// Set when the horizon exceeds `T/μ`.
    pub horizon_warning: Option<String>,
}

/// Run `anchor_iteration` steps of the diffusion recursion, freeze the
/// anchor, then advance the true recursion and the short-term model side by
/// side for `horizon` steps with shared noise.
pub fn coupled_short_term_run(
    scenario: &Scenario,
    cfg: &RunConfig,
    init: NetworkState,
    anchor_iteration: usize,
    horizon: usize,
    horizon_t: f64,
) -> Result<ShortTermTrace> {
    if !(cfg.mu.is_finite() && cfg.mu > 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be positive, got {}", cfg.mu)));
    }
    let mut stepper = Stepper::new(scenario, cfg.mu, cfg.seed, init, cfg.divergence_cap)?;
    for _ in 0..anchor_iteration {
        stepper.step()?;
    }
    let stepper = stepper.track_noise(true);
    let mut stepper = stepper;
    let mut st = ShortTermState::new(stepper.centroid(), scenario.cost());
    let horizon_warning = (horizon as f64 > horizon_t / cfg.mu)
        .then(|| format!("horizon {horizon} exceeds T/mu = {}", horizon_t / cfg.mu));
    let mut steps = Vec::with_capacity(horizon + 1);
    steps.push(st.moments(0));
    for i in 1..=horizon {
        stepper.step()?;
        st.advance_model(cfg.mu, stepper.aggregate_noise());
        st.set_true_centroid(&stepper.centroid());
        steps.push(st.moments(i));
    }
    Ok(ShortTermTrace { anchor: st.anchor, steps, horizon_warning })
}
