//! Infinite mixture of environment models under a Chinese restaurant
//! process prior.
//!
//! The library pairs each environment cluster with the policy learned for
//! it. Every period the current data is scored against all clusters plus a
//! freshly initialized candidate; the candidate joins the library only when
//! its posterior strictly dominates. Cluster models are then refined by an
//! EM loop whose M-steps are always applied from the period-start snapshot.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envmodel::{self, EnvModel, ModelMode, WindowedDataset};
use crate::error::{Error, Result};
use crate::numerics::{self, Architecture, GradientVector, NetworkParams};
use crate::policy::{GaussianPolicy, ACTION_DIM};

/// Highest library file version this build reads and the one it writes.
pub const LIBRARY_FORMAT_VERSION: u32 = 1;
const LIBRARY_FORMAT_TAG: &str = "llirl-library";

/// Tolerance on `Σ responsibilities = 1` accepted by [`ClusterLibrary::accumulate_mass`].
pub const MASS_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub policy: GaussianPolicy,
    pub model: EnvModel,
    /// Accumulated soft assignment mass `n^(l)`.
    pub mass: f64,
}

/// What each completed period adds to the cluster masses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassRule {
    /// Converged E-step responsibilities (expected counts).
    #[default]
    Posterior,
    /// The CRP prior weights used inside that period's E-step.
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLibrary {
    pub clusters: Vec<Cluster>,
    /// CRP concentration `ζ`.
    pub concentration: f64,
    /// Current period `t`, 1-based.
    pub period: usize,
    pub mode: ModelMode,
    pub window: usize,
    pub noise_var: f64,
    pub mass_rule: MassRule,
}

/// Normalized probabilities over clusters. When produced by
/// [`ClusterLibrary::posterior`] the last entry is the candidate cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDistribution {
    pub probs: Vec<f64>,
    /// Predictive log-likelihood of the data under each entry's model.
    pub log_likelihoods: Vec<f64>,
}

impl PosteriorDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Combines per-entry log-likelihoods with prior weights in log space:
/// `p_l ∝ exp(ll_l) · prior_l`, shifted by the maximum before
/// exponentiating. Entries with zero prior get exactly zero.
pub fn posterior_from_log_likelihoods(log_likelihoods: &[f64], prior: &[f64]) -> Result<PosteriorDistribution> {
    if log_likelihoods.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            what: "posterior terms",
            expected: prior.len(),
            actual: log_likelihoods.len(),
        });
    }
    let terms: Vec<f64> = log_likelihoods
        .iter()
        .zip(prior)
        .map(|(&ll, &p)| if p > 0.0 { ll + p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegeneratePosterior);
    }
    let unnorm: Vec<f64> = terms.iter().map(|&t| (t - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(PosteriorDistribution {
        probs: unnorm.iter().map(|u| u / total).collect(),
        log_likelihoods: log_likelihoods.to_vec(),
    })
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Up to `steps` gradient steps of size `step` from `model`, the first along
/// `first_grad`. A step that would lower the log-likelihood is halved until it
/// does not; if none is found the descent stops, so the result never scores
/// below `model_ll`.
fn descend(
    mut model: EnvModel,
    model_ll: f64,
    first_grad: &GradientVector,
    data: &WindowedDataset,
    step: f64,
    steps: usize,
) -> Result<NetworkParams> {
    const MAX_HALVINGS: usize = 20;
    let mut ll = model_ll;
    let mut grad = first_grad.clone();
    for k in 0..steps {
        if k > 0 {
            let (_, g) = envmodel::nll_value_and_gradient(&model, data)?;
            if !g.is_finite() {
                return Err(Error::NonFinite("environment-model gradient"));
            }
            grad = g;
        }
        let mut lr = step;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut trial = model.net.clone();
            numerics::sgd_step_in_place(&mut trial, &grad, lr)?;
            let probe = EnvModel { net: trial, ..model.clone() };
            let trial_ll = envmodel::log_likelihood(&probe, data)?;
            if trial_ll >= ll {
                accepted = Some((probe.net, trial_ll));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((net, trial_ll)) => {
                model.net = net;
                ll = trial_ll;
            }
            None => break,
        }
    }
    Ok(model.net)
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    /// Environment-model learning rate `β`.
    pub lr: f64,
    /// Stop once the E-step posterior moves less than this (L∞).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Gradient steps per M-step, each restarted from the snapshot.
    pub inner_steps: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            lr: 0.001,
            tolerance: 1e-3,
            max_iterations: 10,
            inner_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmReport {
    /// Number of M-steps applied.
    pub iterations: usize,
    pub converged: bool,
    /// Final E-step posterior over the library's clusters.
    pub posterior: Vec<f64>,
    /// CRP prior weights used by the E-step, normalized over the clusters.
    pub prior: Vec<f64>,
    /// Posterior L∞ change at the last E-step (infinite if only one E-step ran).
    pub last_change: f64,
}

impl ClusterLibrary {
    /// Library holding one cluster at period 1.
    pub fn new(policy: GaussianPolicy, model: EnvModel, concentration: f64, mass_rule: MassRule) -> Result<Self> {
        if !(concentration >= 0.0) || concentration.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "concentration must be non-negative, got {concentration}"
            )));
        }
        Ok(Self {
            mode: model.mode,
            window: model.window,
            noise_var: model.noise_var,
            clusters: vec![Cluster {
                policy,
                model,
                mass: 0.0,
            }],
            concentration,
            period: 1,
            mass_rule,
        })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.clusters.iter().map(|c| c.mass).sum()
    }

    /// CRP prior over the `L` clusters and a new one (last entry).
    pub fn crp_prior(&self) -> Vec<f64> {
        let l = self.clusters.len();
        let mut prior = vec![0.0; l + 1];
        if self.period <= 1 {
            // the first environment always seats at the first table
            prior[0] = 1.0;
            return prior;
        }
        let denom = (self.period - 1) as f64 + self.concentration;
        for (p, c) in prior.iter_mut().zip(&self.clusters) {
            *p = c.mass / denom;
        }
        prior[l] = self.concentration / denom;
        prior
    }

    /// Posterior over the `L` clusters and the fresh `candidate` model.
    pub fn posterior(&self, candidate: &EnvModel, data: &WindowedDataset) -> Result<PosteriorDistribution> {
        let mut lls = self.log_likelihoods(data)?;
        lls.push(envmodel::log_likelihood(candidate, data)?);
        posterior_from_log_likelihoods(&lls, &self.crp_prior())
    }

    pub fn log_likelihoods(&self, data: &WindowedDataset) -> Result<Vec<f64>> {
        self.clusters
            .iter()
            .map(|c| envmodel::log_likelihood(&c.model, data))
            .collect()
    }

    /// Adds the candidate as a new cluster iff its posterior strictly exceeds
    /// every existing cluster's. The new cluster starts with zero mass and a
    /// copy of the policy of the most probable existing cluster.
    pub fn maybe_expand(&mut self, post: &PosteriorDistribution, candidate: EnvModel) -> Result<bool> {
        let l = self.clusters.len();
        if post.len() != l + 1 {
            return Err(Error::DimensionMismatch {
                what: "decision posterior",
                expected: l + 1,
                actual: post.len(),
            });
        }
        let existing = &post.probs[..l];
        let best = argmax(existing);
        if post.probs[l] > existing[best] {
            let policy = self.clusters[best].policy.clone();
            self.clusters.push(Cluster {
                policy,
                model: candidate,
                mass: 0.0,
            });
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Prior weights over the current clusters for this period's E-step,
    /// normalized. A cluster added this period carries the new-table weight
    /// `ζ/(t−1+ζ)`.
    pub fn em_prior(&self, expanded: bool) -> Vec<f64> {
        let l = self.clusters.len();
        let crp = self.crp_prior();
        let mut w: Vec<f64> = crp[..l].to_vec();
        if expanded {
            w[l - 1] = crp[l];
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        } else {
            w.iter_mut().for_each(|v| *v = 1.0 / l as f64);
        }
        w
    }

    /// Alternates E- and M-steps over the current clusters. Every M-step
    /// restarts from the snapshot `ϑ⁰` taken on entry and descends with step
    /// `β·P_l`, first along the gradient at the current iterate
    /// (`ϑ_l ← ϑ_l⁰ − β·P_l·∇NLL(ϑ_l)`), then for up to `inner_steps − 1`
    /// further steps; no cluster ends below its snapshot log-likelihood. On
    /// error every model is restored to the snapshot.
    pub fn em_update(&mut self, data: &WindowedDataset, expanded: bool, settings: &EmSettings) -> Result<EmReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("EM needs a non-empty dataset".into()));
        }
        let snapshot: Vec<NetworkParams> = self.clusters.iter().map(|c| c.model.net.clone()).collect();
        let prior = self.em_prior(expanded);
        let result = self.em_loop(data, &snapshot, &prior, settings);
        if result.is_err() {
            for (c, net) in self.clusters.iter_mut().zip(snapshot) {
                c.model.net = net;
            }
        }
        result
    }

    fn em_loop(
        &mut self,
        data: &WindowedDataset,
        snapshot: &[NetworkParams],
        prior: &[f64],
        settings: &EmSettings,
    ) -> Result<EmReport> {
        let mut previous: Option<Vec<f64>> = None;
        let mut base_lls: Option<Vec<f64>> = None;
        let mut iterations = 0;
        loop {
            let mut lls = Vec::with_capacity(self.clusters.len());
            let mut grads = Vec::with_capacity(self.clusters.len());
            for c in &self.clusters {
                let (ll, g) = envmodel::nll_value_and_gradient(&c.model, data)?;
                if !g.is_finite() {
                    return Err(Error::NonFinite("environment-model gradient"));
                }
                lls.push(ll);
                grads.push(g);
            }
            let base_lls = base_lls.get_or_insert_with(|| lls.clone());
            let post = posterior_from_log_likelihoods(&lls, prior)?.probs;
            let change = previous.as_deref().map_or(f64::INFINITY, |p| linf(&post, p));
            if change < settings.tolerance || iterations >= settings.max_iterations {
                return Ok(EmReport {
                    iterations,
                    converged: change < settings.tolerance,
                    posterior: post,
                    prior: prior.to_vec(),
                    last_change: change,
                });
            }
            for (l, c) in self.clusters.iter_mut().enumerate() {
                let step = settings.lr * post[l];
                c.model.net = if step > 0.0 {
                    let start = EnvModel { net: snapshot[l].clone(), ..c.model.clone() };
                    descend(start, base_lls[l], &grads[l], data, step, settings.inner_steps)?
                } else {
                    snapshot[l].clone()
                };
            }
            iterations += 1;
            previous = Some(post);
        }
    }

    /// `n_l += responsibilities_l` and advances the period counter.
    pub fn accumulate_mass(&mut self, responsibilities: &[f64]) -> Result<()> {
        if responsibilities.len() != self.clusters.len() {
            return Err(Error::DimensionMismatch {
                what: "responsibilities",
                expected: self.clusters.len(),
                actual: responsibilities.len(),
            });
        }
        let total: f64 = responsibilities.iter().sum();
        if (total - 1.0).abs() > MASS_SUM_TOLERANCE || responsibilities.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "responsibilities must be a probability vector, sum is {total}"
            )));
        }
        for (c, r) in self.clusters.iter_mut().zip(responsibilities) {
            c.mass += r;
        }
        self.period += 1;
        Ok(())
    }

    /// Cluster whose model best explains `data`, lowest index on ties,
    /// together with every cluster's log-likelihood.
    pub fn identify(&self, data: &WindowedDataset) -> Result<(usize, Vec<f64>)> {
        let lls = self.log_likelihoods(data)?;
        Ok((argmax(&lls), lls))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = LibraryFile::from(self);
        let text = serde_json::to_string(&file)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let corrupt = |reason: String| Error::CorruptFile {
            path: path.to_path_buf(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(LIBRARY_FORMAT_TAG) {
            return Err(corrupt("missing or unknown format tag".into()));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing version".into()))?;
        if version > LIBRARY_FORMAT_VERSION as u64 || version == 0 {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version.min(u32::MAX as u64) as u32,
                supported: LIBRARY_FORMAT_VERSION,
            });
        }
        let file: LibraryFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        file.into_library().map_err(|e| corrupt(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryFile {
    format: String,
    version: u32,
    concentration: f64,
    period: usize,
    mode: ModelMode,
    window: usize,
    noise_var: f64,
    mass_rule: MassRule,
    clusters: Vec<ClusterRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterRecord {
    mass: f64,
    theta_widths: Vec<usize>,
    theta: Vec<f64>,
    theta_log_std: Vec<f64>,
    vartheta_widths: Vec<usize>,
    vartheta: Vec<f64>,
}

fn arch_from_widths(widths: &[usize]) -> Result<Architecture> {
    if widths.len() < 2 {
        return Err(Error::InvalidArgument("architecture needs at least two widths".into()));
    }
    Architecture::new(widths[0], &widths[1..widths.len() - 1], widths[widths.len() - 1])
}

impl From<&ClusterLibrary> for LibraryFile {
    fn from(lib: &ClusterLibrary) -> Self {
        Self {
            format: LIBRARY_FORMAT_TAG.to_string(),
            version: LIBRARY_FORMAT_VERSION,
            concentration: lib.concentration,
            period: lib.period,
            mode: lib.mode,
            window: lib.window,
            noise_var: lib.noise_var,
            mass_rule: lib.mass_rule,
            clusters: lib
                .clusters
                .iter()
                .map(|c| ClusterRecord {
                    mass: c.mass,
                    theta_widths: c.policy.net.arch().widths().to_vec(),
                    theta: c.policy.net.values().to_vec(),
                    theta_log_std: c.policy.log_std.to_vec(),
                    vartheta_widths: c.model.net.arch().widths().to_vec(),
                    vartheta: c.model.net.values().to_vec(),
                })
                .collect(),
        }
    }
}

impl LibraryFile {
    fn into_library(self) -> Result<ClusterLibrary> {
        if self.clusters.is_empty() {
            return Err(Error::InvalidArgument("library has no clusters".into()));
        }
        if self.period == 0 || !(self.concentration >= 0.0) {
            return Err(Error::InvalidArgument("invalid period or concentration".into()));
        }
        let mut clusters = Vec::with_capacity(self.clusters.len());
        for rec in self.clusters {
            if !(rec.mass >= 0.0 && rec.mass.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid cluster mass {}", rec.mass)));
            }
            let log_std: [f64; ACTION_DIM] = rec
                .theta_log_std
                .as_slice()
                .try_into()
                .map_err(|_| Error::InvalidArgument("policy log std must have two entries".into()))?;
            let theta = NetworkParams::from_values(arch_from_widths(&rec.theta_widths)?, rec.theta)?;
            let vartheta = NetworkParams::from_values(arch_from_widths(&rec.vartheta_widths)?, rec.vartheta)?;
            clusters.push(Cluster {
                policy: GaussianPolicy::with_params(theta, log_std),
                model: EnvModel::from_params(vartheta, self.mode, self.window, self.noise_var)?,
                mass: rec.mass,
            });
        }
        Ok(ClusterLibrary {
            clusters,
            concentration: self.concentration,
            period: self.period,
            mode: self.mode,
            window: self.window,
            noise_var: self.noise_var,
            mass_rule: self.mass_rule,
        })
    }
}
