//! Experiment driver: configuration, seeded runs, ζ sweeps and output files.
//!
//! A run writes into its output directory:
//!
//! * `curves.csv`: `period,iteration,avg_return`, one row per policy iteration;
//! * `clusters.json`: per-period assignment trace with the environment config;
//! * `summary.json`: overall average return, its standard error, final `L`;
//! * `library.json`: the cluster library (LLIRL only);
//! * `error.json`: only when a period failed; earlier outputs are still written.
//!
//! Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envmodel::ModelMode;
use crate::envs::{self, DynamicEnvSequence, EnvType, NavConfig, NavSettings, Point, SequenceMode};
use crate::error::{Error, Result};
use crate::lifelong::{self, LifelongConfig, LifelongResult, Method};
use crate::mixture::{ClusterLibrary, EmSettings, MassRule};
use crate::policy::TrainSettings;

pub const CURVES_FILE: &str = "curves.csv";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LIBRARY_FILE: &str = "library.json";
pub const ERROR_FILE: &str = "error.json";
pub const SWEEP_FILE: &str = "sweep.json";

/// Flat experiment description; every field has a default so a config file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// 1, 2 or 3.
    pub env_type: u8,
    pub sequence: SequenceMode,
    /// Explicit goals cycled round-robin (Type I only); overrides `sequence`.
    pub goals: Option<Vec<Point>>,
    pub periods: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub window: usize,
    pub policy_lr: f64,
    pub model_lr: f64,
    pub gamma: f64,
    pub noise_var: f64,
    pub control_cost: f64,
    pub zeta: f64,
    /// When set, `sweep` runs one experiment per value.
    pub zeta_sweep: Option<Vec<f64>>,
    pub method: Method,
    pub exploration_episodes: usize,
    pub em_inner_steps: usize,
    pub em_max_iterations: usize,
    pub em_tolerance: f64,
    pub mass_rule: MassRule,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lc = LifelongConfig::default();
        Self {
            env_type: 1,
            sequence: SequenceMode::Random,
            goals: None,
            periods: 50,
            iterations: lc.train.iterations,
            batch_size: lc.train.batch_size,
            horizon: lc.nav.horizon,
            window: lc.window,
            policy_lr: lc.train.lr,
            model_lr: lc.em.lr,
            gamma: lc.train.gamma,
            noise_var: lc.noise_var,
            control_cost: lc.nav.control_cost,
            zeta: lc.concentration,
            zeta_sweep: None,
            method: Method::Llirl,
            exploration_episodes: lc.exploration_episodes,
            em_inner_steps: lc.em.inner_steps,
            em_max_iterations: lc.em.max_iterations,
            em_tolerance: lc.em.tolerance,
            mass_rule: lc.mass_rule,
            seed: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn env_kind(&self) -> Result<EnvType> {
        EnvType::from_index(self.env_type)
    }

    pub fn validate(&self) -> Result<()> {
        let env_type = self.env_kind()?;
        if self.periods == 0 {
            return Err(Error::InvalidConfig("periods must be at least 1".into()));
        }
        if let SequenceMode::Cycled { k: 0 } = self.sequence {
            return Err(Error::InvalidConfig("cycle length must be at least 1".into()));
        }
        if let Some(goals) = &self.goals {
            if env_type != EnvType::I {
                return Err(Error::InvalidConfig("explicit goals are only supported for env type 1".into()));
            }
            if goals.is_empty() || goals.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidConfig("goals must be a non-empty list of points in the unit square".into()));
            }
        }
        if let Some(z) = &self.zeta_sweep {
            if z.is_empty() || z.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidConfig("zeta sweep must be a non-empty list of non-negative values".into()));
            }
        }
        if self.em_inner_steps == 0 || !(self.em_tolerance > 0.0) {
            return Err(Error::InvalidConfig("EM inner steps and tolerance must be positive".into()));
        }
        self.lifelong()?.validate()
    }

    /// Algorithm settings derived from this config.
    pub fn lifelong(&self) -> Result<LifelongConfig> {
        let env_type = self.env_kind()?;
        Ok(LifelongConfig {
            nav: NavSettings {
                control_cost: self.control_cost,
                horizon: self.horizon,
                ..NavSettings::default()
            },
            train: TrainSettings {
                iterations: self.iterations,
                batch_size: self.batch_size,
                lr: self.policy_lr,
                gamma: self.gamma,
            },
            em: EmSettings {
                lr: self.model_lr,
                tolerance: self.em_tolerance,
                max_iterations: self.em_max_iterations,
                inner_steps: self.em_inner_steps,
            },
            mode: ModelMode::for_env_type(env_type),
            window: self.window,
            noise_var: self.noise_var,
            concentration: self.zeta,
            exploration_episodes: self.exploration_episodes,
            mass_rule: self.mass_rule,
            seed: self.seed,
        })
    }

    pub fn environment_sequence(&self) -> Result<DynamicEnvSequence> {
        let lc = self.lifelong()?;
        match &self.goals {
            Some(goals) => {
                let base: Vec<NavConfig> = goals.iter().map(|g| NavConfig::goal_only(*g)).collect();
                DynamicEnvSequence::cycled(&base, self.periods, self.seed)
            }
            None => envs::generate_sequence(self.env_kind()?, self.periods, self.sequence, &lc.nav, self.seed),
        }
    }

    /// One config per sweep value, each writing to `<out>/zeta_<i>`.
    pub fn expand_sweep(&self) -> Vec<ExperimentConfig> {
        let values = self.zeta_sweep.clone().unwrap_or_else(|| vec![self.zeta]);
        values
            .iter()
            .enumerate()
            .map(|(i, &zeta)| ExperimentConfig {
                zeta,
                zeta_sweep: None,
                out_dir: self.out_dir.as_ref().map(|d| d.join(format!("zeta_{i}"))),
                ..self.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTrace {
    pub t: usize,
    pub cluster: usize,
    pub expanded: bool,
    pub num_clusters: usize,
    pub decision_posterior: Vec<f64>,
    pub posterior: Vec<f64>,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub config: NavConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrace {
    pub method: Method,
    pub periods: Vec<PeriodTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub env_type: u8,
    pub seed: u64,
    pub zeta: f64,
    pub periods_completed: usize,
    pub overall_average: f64,
    pub standard_error: f64,
    pub final_clusters: usize,
    pub period_averages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorManifest {
    pub period: usize,
    pub message: String,
    pub periods_completed: usize,
}

/// Outcome of a run: the in-memory result plus its summary.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub sequence: DynamicEnvSequence,
    pub result: LifelongResult,
    pub summary: ExperimentSummary,
}

/// Runs the configured method without touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let sequence = cfg.environment_sequence()?;
    let result = lifelong::run(cfg.method, &sequence, &cfg.lifelong()?)?;
    let summary = summarize(cfg, &result);
    Ok(Experiment {
        sequence,
        result,
        summary,
    })
}

pub fn summarize(cfg: &ExperimentConfig, result: &LifelongResult) -> ExperimentSummary {
    ExperimentSummary {
        method: cfg.method,
        env_type: cfg.env_type,
        seed: cfg.seed,
        zeta: cfg.zeta,
        periods_completed: result.records.len(),
        overall_average: result.overall_average(),
        standard_error: result.standard_error(),
        final_clusters: result.num_clusters(),
        period_averages: result.period_averages(),
    }
}

pub fn curves_csv(result: &LifelongResult) -> String {
    let mut out = String::from("period,iteration,avg_return\n");
    for r in &result.records {
        for (j, v) in r.learning_curve.iter().enumerate() {
            writeln!(out, "{},{},{}", r.period, j, v).expect("writing to a String");
        }
    }
    out
}

pub fn cluster_trace(sequence: &DynamicEnvSequence, result: &LifelongResult) -> ClusterTrace {
    ClusterTrace {
        method: result.method,
        periods: result
            .records
            .iter()
            .map(|r| PeriodTrace {
                t: r.period,
                cluster: r.cluster,
                expanded: r.expanded,
                num_clusters: r.num_clusters,
                decision_posterior: r.decision_posterior.clone(),
                posterior: r.em_posterior.clone(),
                em_iterations: r.em_iterations,
                em_converged: r.em_converged,
                config: sequence.configs[r.period - 1].clone(),
            })
            .collect(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs one experiment and writes its outputs to `cfg.out_dir`. A failing
/// period still leaves the completed periods' outputs plus `error.json`,
/// and is reported as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::InvalidConfig("an output directory is required".into()))?;
    let experiment = execute(cfg)?;
    write_outputs(&out, &experiment)?;
    match &experiment.result.failure {
        Some(f) => Err(Error::RunFailed {
            completed: experiment.result.records.len(),
            message: f.message.clone(),
        }),
        None => Ok(experiment.summary),
    }
}

/// Writes every output file of `experiment` into `out`, creating it.
pub fn write_outputs(out: &Path, experiment: &Experiment) -> Result<()> {
    let Experiment {
        sequence,
        result,
        summary,
    } = experiment;
    fs::create_dir_all(out)?;
    fs::write(out.join(CURVES_FILE), curves_csv(result))?;
    write_json(&out.join(CLUSTERS_FILE), &cluster_trace(sequence, result))?;
    write_json(&out.join(SUMMARY_FILE), summary)?;
    if let Some(lib) = &result.library {
        lib.save(out.join(LIBRARY_FILE))?;
    }
    if let Some(f) = &result.failure {
        write_json(
            &out.join(ERROR_FILE),
            &ErrorManifest {
                period: f.period,
                message: f.message.clone(),
                periods_completed: result.records.len(),
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub zeta: f64,
    pub out_dir: Option<PathBuf>,
    pub final_clusters: Option<usize>,
    pub overall_average: Option<f64>,
    pub standard_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Fixed-width text table, one line per run.
    pub fn table(&self) -> String {
        let mut out = format!("{:>12} {:>5} {:>14} {:>10}  status\n", "zeta", "L", "avg return", "stderr");
        for r in &self.rows {
            let line = match (&r.error, r.final_clusters, r.overall_average, r.standard_error) {
                (None, Some(l), Some(avg), Some(se)) => format!("{:>12} {:>5} {:>14.4} {:>10.4}  ok", r.zeta, l, avg, se),
                (err, ..) => format!(
                    "{:>12} {:>5} {:>14} {:>10}  failed: {}",
                    r.zeta,
                    "-",
                    "-",
                    "-",
                    err.as_deref().unwrap_or("unknown")
                ),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Runs every config in turn; a failing run is recorded and the sweep
/// continues. Runs with an output directory write their files there.
pub fn sweep(cfgs: &[ExperimentConfig]) -> Result<SweepReport> {
    if cfgs.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one configuration".into()));
    }
    let rows = cfgs
        .iter()
        .map(|cfg| {
            let outcome = if cfg.out_dir.is_some() {
                run_experiment(cfg)
            } else {
                execute(cfg).map(|e| e.summary)
            };
            match outcome {
                Ok(s) => SweepRow {
                    zeta: cfg.zeta,
                    out_dir: cfg.out_dir.clone(),
                    final_clusters: Some(s.final_clusters),
                    overall_average: Some(s.overall_average),
                    standard_error: Some(s.standard_error),
                    error: None,
                },
                Err(e) => SweepRow {
                    zeta: cfg.zeta,
                    out_dir: cfg.out_dir.clone(),
                    final_clusters: None,
                    overall_average: None,
                    standard_error: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepReport { rows })
}

/// Expands `cfg`'s ζ list, runs the sweep and, when an output directory is
/// set, writes `sweep.json` next to the per-run subdirectories.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let report = sweep(&cfg.expand_sweep())?;
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out)?;
        write_json(&out.join(SWEEP_FILE), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryInfo {
    pub clusters: usize,
    pub masses: Vec<f64>,
    pub concentration: f64,
    pub period: usize,
    pub mode: ModelMode,
    pub window: usize,
    pub noise_var: f64,
    pub mass_rule: MassRule,
}

impl std::fmt::Display for LibraryInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "clusters:      {}", self.clusters)?;
        writeln!(f, "next period:   {}", self.period)?;
        writeln!(f, "zeta:          {}", self.concentration)?;
        writeln!(f, "model mode:    {:?}", self.mode)?;
        writeln!(f, "window:        {}", self.window)?;
        writeln!(f, "noise var:     {}", self.noise_var)?;
        writeln!(f, "mass rule:     {:?}", self.mass_rule)?;
        for (l, m) in self.masses.iter().enumerate() {
            writeln!(f, "  cluster {l:>3}  mass {m}")?;
        }
        Ok(())
    }
}

pub fn inspect_library(path: &Path) -> Result<LibraryInfo> {
    let lib = ClusterLibrary::load(path)?;
    Ok(LibraryInfo {
        clusters: lib.len(),
        masses: lib.clusters.iter().map(|c| c.mass).collect(),
        concentration: lib.concentration,
        period: lib.period,
        mode: lib.mode,
        window: lib.window,
        noise_var: lib.noise_var,
        mass_rule: lib.mass_rule,
    })
}

/// Adjusted Rand index between two labelings of the same items; 1 for
/// identical partitions, about 0 for independent ones. Two single-block
/// (or two all-singleton) partitions score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "labelings",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let pairs = |k: usize| (k * k.saturating_sub(1) / 2) as f64;
    let mut table = std::collections::BTreeMap::<(usize, usize), usize>::new();
    let mut rows = std::collections::BTreeMap::<usize, usize>::new();
    let mut cols = std::collections::BTreeMap::<usize, usize>::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&k| pairs(k)).sum();
    let sum_a: f64 = rows.values().map(|&k| pairs(k)).sum();
    let sum_b: f64 = cols.values().map(|&k| pairs(k)).sum();
    let expected = sum_a * sum_b / pairs(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            periods: 2,
            iterations: 2,
            batch_size: 2,
            horizon: 10,
            em_inner_steps: 2,
            ..ExperimentConfig::default()
        }
    }

    /// Pair-counting form: agreements over all unordered pairs.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += (sa && sb) as u8 as f64;
                only_a += sa as u8 as f64;
                only_b += sb as u8 as f64;
                total += 1.0;
            }
        }
        let expected = only_a * only_b / total;
        let max = 0.5 * (only_a + only_b);
        (both - expected) / (max - expected)
    }

    #[test]
    fn ari_matches_pair_counting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(4..30);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let fast = adjusted_rand_index(&a, &b).unwrap();
            let slow = ari_by_pairs(&a, &b);
            if slow.is_finite() {
                assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn ari_fixed_points() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() < 0.0);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"periods": 3, "zeta": 2.5}"#).unwrap();
        assert_eq!(cfg.periods, 3);
        assert_eq!(cfg.zeta, 2.5);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"peroids": 3}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            ExperimentConfig { env_type: 4, ..tiny() },
            ExperimentConfig { periods: 0, ..tiny() },
            ExperimentConfig { gamma: 1.0, ..tiny() },
            ExperimentConfig { sequence: SequenceMode::Cycled { k: 0 }, ..tiny() },
            ExperimentConfig { zeta_sweep: Some(vec![]), ..tiny() },
            ExperimentConfig { env_type: 2, goals: Some(vec![[0.1, 0.1]]), ..tiny() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn goals_override_sequence() {
        let cfg = ExperimentConfig {
            periods: 5,
            goals: Some(vec![[0.1, 0.1], [0.9, 0.9]]),
            ..tiny()
        };
        let seq = cfg.environment_sequence().unwrap();
        let goals: Vec<Point> = seq.configs.iter().map(|c| c.goal).collect();
        assert_eq!(goals, vec![[0.1, 0.1], [0.9, 0.9], [0.1, 0.1], [0.9, 0.9], [0.1, 0.1]]);
    }

    #[test]
    fn single_period_single_iteration_has_one_curve_row() {
        let cfg = ExperimentConfig {
            periods: 1,
            iterations: 1,
            ..tiny()
        };
        let e = execute(&cfg).unwrap();
        let csv = curves_csv(&e.result);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("period,iteration,avg_return\n1,0,"));
    }

    #[test]
    fn expand_sweep_assigns_subdirectories() {
        let cfg = ExperimentConfig {
            zeta_sweep: Some(vec![0.0, 2.0]),
            out_dir: Some(PathBuf::from("/tmp/x")),
            ..tiny()
        };
        let runs = cfg.expand_sweep();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[1].zeta, 2.0);
        assert_eq!(runs[1].out_dir, Some(PathBuf::from("/tmp/x/zeta_1")));
        assert!(runs.iter().all(|r| r.zeta_sweep.is_none()));
    }

    #[test]
    fn empty_sweep_is_a_config_error() {
        assert!(matches!(sweep(&[]), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let report = sweep(&[ExperimentConfig { gamma: 2.0, ..tiny() }, tiny()]).unwrap();
        assert!(report.rows[0].error.is_some());
        assert!(report.rows[1].error.is_none());
        assert!(report.table().contains("failed"));
    }
}
