//! Period-by-period lifelong learning over a dynamic environment.
//!
//! [`LlirlRunner`] maintains the cluster library: each period it explores
//! with a uniform policy, decides whether the environment is new, refines
//! the environment models with EM, retrieves the best-matching policy and
//! trains it. [`CaRunner`] is the single-policy continual-adaptation
//! baseline. Both draw policy initialization and action sampling from the
//! same named streams, so LLIRL with `ζ = 0` reproduces CA exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envmodel::{self, EnvModel, ModelMode};
use crate::envs::{self, DynamicEnvSequence, NavConfig, NavSettings, Transition};
use crate::error::{Error, Result};
use crate::mixture::{ClusterLibrary, EmSettings, MassRule};
use crate::policy::{self, GaussianPolicy, TrainSettings};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Llirl,
    Ca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifelongConfig {
    pub nav: NavSettings,
    pub train: TrainSettings,
    pub em: EmSettings,
    pub mode: ModelMode,
    /// Window length `h` of the environment-model samples.
    pub window: usize,
    /// Fixed predictive variance `σ²`.
    pub noise_var: f64,
    /// CRP concentration `ζ`.
    pub concentration: f64,
    /// Uniform-policy episodes collected per period for identification.
    pub exploration_episodes: usize,
    pub mass_rule: MassRule,
    pub seed: u64,
}

impl Default for LifelongConfig {
    fn default() -> Self {
        Self {
            nav: NavSettings::default(),
            train: TrainSettings::default(),
            em: EmSettings::default(),
            mode: ModelMode::Reward,
            window: 4,
            noise_var: 2.0,
            concentration: 1.0,
            exploration_episodes: 2,
            mass_rule: MassRule::Posterior,
            seed: 0,
        }
    }
}

impl LifelongConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.train.iterations == 0 || self.train.batch_size == 0 {
            return bad("iterations and batch size must be at least 1");
        }
        if !(self.train.lr > 0.0) || !(self.em.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.train.gamma) {
            return bad("discount must lie in [0, 1)");
        }
        if !(self.noise_var > 0.0) {
            return bad("noise variance must be positive");
        }
        if !(self.concentration >= 0.0) {
            return bad("concentration must be non-negative");
        }
        if self.window == 0 || self.window > self.nav.horizon {
            return bad("window must be between 1 and the horizon");
        }
        if self.nav.horizon == 0 || self.exploration_episodes == 0 || self.em.max_iterations == 0 {
            return bad("horizon, exploration episodes and EM iterations must be at least 1");
        }
        if !(self.nav.control_cost >= 0.0) || !(self.nav.max_action > 0.0) || !(self.nav.goal_tolerance > 0.0) {
            return bad("control cost, action bound and goal tolerance must be non-negative/positive");
        }
        Ok(())
    }
}

/// Everything recorded about one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    /// 1-based period index.
    pub period: usize,
    /// Cluster the period was assigned to (`l*`).
    pub cluster: usize,
    pub expanded: bool,
    pub num_clusters: usize,
    /// Average undiscounted batch return per policy iteration.
    pub learning_curve: Vec<f64>,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub em_last_change: f64,
    /// Posterior over existing clusters plus the candidate at decision time.
    pub decision_posterior: Vec<f64>,
    /// Converged E-step posterior over the clusters after the decision.
    pub em_posterior: Vec<f64>,
    /// Log-likelihood of the identified cluster's model before and after EM.
    pub map_log_likelihood_before: f64,
    pub map_log_likelihood_after: f64,
}

impl PeriodRecord {
    pub fn average_return(&self) -> f64 {
        mean(&self.learning_curve)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodFailure {
    pub period: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifelongResult {
    pub method: Method,
    pub records: Vec<PeriodRecord>,
    /// Final library (LLIRL only).
    pub library: Option<ClusterLibrary>,
    /// Set when a period failed; `records` then holds the completed periods.
    pub failure: Option<PeriodFailure>,
}

impl LifelongResult {
    pub fn period_averages(&self) -> Vec<f64> {
        self.records.iter().map(PeriodRecord::average_return).collect()
    }

    /// Mean over every (period, iteration) batch average.
    pub fn overall_average(&self) -> f64 {
        let all: Vec<f64> = self.records.iter().flat_map(|r| r.learning_curve.iter().copied()).collect();
        mean(&all)
    }

    /// Standard error of the per-period averages.
    pub fn standard_error(&self) -> f64 {
        standard_error(&self.period_averages())
    }

    pub fn num_clusters(&self) -> usize {
        self.library.as_ref().map_or(1, ClusterLibrary::len)
    }

    pub fn assignments(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.cluster).collect()
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation over `sqrt(n)`; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Episodes under a policy uniform on the action box.
pub fn explore<R: Rng + ?Sized>(
    config: &NavConfig,
    settings: &NavSettings,
    episodes: usize,
    rng: &mut R,
) -> Vec<Vec<Transition>> {
    let bound = settings.max_action;
    (0..episodes)
        .map(|_| {
            envs::rollout_episode(
                config,
                settings,
                |_, rng: &mut R| [rng.random_range(-bound..=bound), rng.random_range(-bound..=bound)],
                rng,
            )
        })
        .collect()
}

fn initial_policy(seed: u64) -> GaussianPolicy {
    GaussianPolicy::new(&mut stream_rng(seed, Stream::PolicyInit, 0))
}

fn train_period(
    policy: &GaussianPolicy,
    config: &NavConfig,
    cfg: &LifelongConfig,
    period: usize,
) -> Result<(GaussianPolicy, Vec<f64>)> {
    let mut rng = stream_rng(cfg.seed, Stream::PolicySampling, period);
    policy::train_in_env(policy, config, &cfg.nav, &cfg.train, &mut rng)
}

/// Stateful LLIRL learner; one call to [`LlirlRunner::run_period`] per
/// environment period.
#[derive(Debug, Clone)]
pub struct LlirlRunner {
    cfg: LifelongConfig,
    library: ClusterLibrary,
}

impl LlirlRunner {
    pub fn new(cfg: LifelongConfig) -> Result<Self> {
        cfg.validate()?;
        let model = EnvModel::new(
            cfg.mode,
            cfg.window,
            cfg.noise_var,
            &mut stream_rng(cfg.seed, Stream::ModelInit, 0),
        )?;
        let library = ClusterLibrary::new(initial_policy(cfg.seed), model, cfg.concentration, cfg.mass_rule)?;
        Ok(Self { cfg, library })
    }

    /// Continues from a saved library; the next period run is `library.period`.
    pub fn from_library(cfg: LifelongConfig, library: ClusterLibrary) -> Result<Self> {
        cfg.validate()?;
        if library.mode != cfg.mode || library.window != cfg.window || library.noise_var != cfg.noise_var {
            return Err(Error::InvalidConfig(
                "library model mode, window or noise variance differs from the configuration".into(),
            ));
        }
        let mut library = library;
        library.concentration = cfg.concentration;
        library.mass_rule = cfg.mass_rule;
        Ok(Self { cfg, library })
    }

    pub fn library(&self) -> &ClusterLibrary {
        &self.library
    }

    pub fn into_library(self) -> ClusterLibrary {
        self.library
    }

    pub fn config(&self) -> &LifelongConfig {
        &self.cfg
    }

    /// Next period index (1-based).
    pub fn period(&self) -> usize {
        self.library.period
    }

    pub fn run_period(&mut self, env: &NavConfig) -> Result<PeriodRecord> {
        let cfg = &self.cfg;
        let t = self.library.period;
        let mut candidate = EnvModel::new(
            cfg.mode,
            cfg.window,
            cfg.noise_var,
            &mut stream_rng(cfg.seed, Stream::ModelInit, t),
        )?;
        let mut explore_rng = stream_rng(cfg.seed, Stream::Exploration, t);
        let episodes = explore(env, &cfg.nav, cfg.exploration_episodes, &mut explore_rng);
        let data = envmodel::build_dataset_from_episodes(&episodes, cfg.mode, cfg.window);
        if data.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "exploration produced no windows of length {}",
                cfg.window
            )));
        }
        candidate.center_output_bias(&data)?;

        let decision = self.library.posterior(&candidate, &data)?;
        let expanded = self.library.maybe_expand(&decision, candidate)?;
        let before = self.library.log_likelihoods(&data)?;
        let em = self.library.em_update(&data, expanded, &cfg.em)?;
        let (cluster, after) = self.library.identify(&data)?;

        let start = self.library.clusters[cluster].policy.clone();
        let (trained, curve) = train_period(&start, env, cfg, t)?;
        self.library.clusters[cluster].policy = trained;

        let responsibilities = match cfg.mass_rule {
            MassRule::Posterior => &em.posterior,
            MassRule::Prior => &em.prior,
        };
        self.library.accumulate_mass(responsibilities)?;

        Ok(PeriodRecord {
            period: t,
            cluster,
            expanded,
            num_clusters: self.library.len(),
            learning_curve: curve,
            em_iterations: em.iterations,
            em_converged: em.converged,
            em_last_change: em.last_change,
            decision_posterior: decision.probs,
            em_posterior: em.posterior,
            map_log_likelihood_before: before[cluster],
            map_log_likelihood_after: after[cluster],
        })
    }
}

/// Single policy adapted continually across periods.
#[derive(Debug, Clone)]
pub struct CaRunner {
    cfg: LifelongConfig,
    policy: GaussianPolicy,
    period: usize,
}

impl CaRunner {
    pub fn new(cfg: LifelongConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            policy: initial_policy(cfg.seed),
            cfg,
            period: 1,
        })
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.policy
    }

    pub fn run_period(&mut self, env: &NavConfig) -> Result<PeriodRecord> {
        let t = self.period;
        let (trained, curve) = train_period(&self.policy, env, &self.cfg, t)?;
        self.policy = trained;
        self.period += 1;
        Ok(PeriodRecord {
            period: t,
            cluster: 0,
            expanded: false,
            num_clusters: 1,
            learning_curve: curve,
            em_iterations: 0,
            em_converged: true,
            em_last_change: 0.0,
            decision_posterior: vec![1.0],
            em_posterior: vec![1.0],
            map_log_likelihood_before: f64::NAN,
            map_log_likelihood_after: f64::NAN,
        })
    }
}

fn drive<F>(sequence: &DynamicEnvSequence, first_period: usize, mut step: F) -> (Vec<PeriodRecord>, Option<PeriodFailure>)
where
    F: FnMut(&NavConfig) -> Result<PeriodRecord>,
{
    let mut records = Vec::new();
    for (i, env) in sequence.configs.iter().enumerate().skip(first_period - 1) {
        match step(env) {
            Ok(r) => records.push(r),
            Err(e) => {
                let err = Error::Period {
                    period: i + 1,
                    source: Box::new(e),
                };
                return (
                    records,
                    Some(PeriodFailure {
                        period: i + 1,
                        message: err.to_string(),
                    }),
                );
            }
        }
    }
    (records, None)
}

/// LLIRL over the whole sequence.
pub fn run_llirl(sequence: &DynamicEnvSequence, cfg: &LifelongConfig) -> Result<LifelongResult> {
    resume_llirl(sequence, cfg, None)
}

/// LLIRL continuing from `library` (or from scratch); runs periods
/// `library.period ..= T`.
pub fn resume_llirl(
    sequence: &DynamicEnvSequence,
    cfg: &LifelongConfig,
    library: Option<ClusterLibrary>,
) -> Result<LifelongResult> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("empty environment sequence".into()));
    }
    let mut runner = match library {
        Some(lib) => LlirlRunner::from_library(cfg.clone(), lib)?,
        None => LlirlRunner::new(cfg.clone())?,
    };
    let first = runner.period();
    if first > sequence.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "library is at period {first} but the sequence has only {} periods",
            sequence.len()
        )));
    }
    let (records, failure) = drive(sequence, first, |env| runner.run_period(env));
    Ok(LifelongResult {
        method: Method::Llirl,
        records,
        library: Some(runner.into_library()),
        failure,
    })
}

/// Continual-adaptation baseline over the whole sequence.
pub fn run_ca(sequence: &DynamicEnvSequence, cfg: &LifelongConfig) -> Result<LifelongResult> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("empty environment sequence".into()));
    }
    let mut runner = CaRunner::new(cfg.clone())?;
    let (records, failure) = drive(sequence, 1, |env| runner.run_period(env));
    Ok(LifelongResult {
        method: Method::Ca,
        records,
        library: None,
        failure,
    })
}

pub fn run(method: Method, sequence: &DynamicEnvSequence, cfg: &LifelongConfig) -> Result<LifelongResult> {
    match method {
        Method::Llirl => run_llirl(sequence, cfg),
        Method::Ca => run_ca(sequence, cfg),
    }
}
