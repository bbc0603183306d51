//! Gaussian policy with a network-predicted mean and a learnable,
//! state-independent log standard deviation, trained by REINFORCE.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{self, NavConfig, NavSettings, Point, Transition};
use crate::error::{Error, Result};
use crate::numerics::{self, Architecture, GradientVector, NetworkParams};

pub const ACTION_DIM: usize = 2;
pub const STATE_DIM: usize = 2;

/// Initial exploration standard deviation.
pub const INITIAL_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: NetworkParams,
    pub log_std: [f64; ACTION_DIM],
}

/// Gradient of a scalar objective with respect to both policy parts.
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub net: GradientVector,
    pub log_std: [f64; ACTION_DIM],
}

impl PolicyGradient {
    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let arch = Architecture::mlp(STATE_DIM, ACTION_DIM).expect("static architecture");
        Self::with_params(NetworkParams::glorot(arch, rng), [INITIAL_STD.ln(); ACTION_DIM])
    }

    pub fn with_params(net: NetworkParams, log_std: [f64; ACTION_DIM]) -> Self {
        Self { net, log_std }
    }

    pub fn std(&self) -> [f64; ACTION_DIM] {
        [self.log_std[0].exp(), self.log_std[1].exp()]
    }

    pub fn mean(&self, s: Point) -> Result<Point> {
        let out = numerics::forward(&self.net, &s)?;
        Ok([out[0], out[1]])
    }

    /// Log-density of the unclipped action `a_raw` at state `s`.
    pub fn log_prob(&self, s: Point, a_raw: Point) -> Result<f64> {
        let mean = self.mean(s)?;
        Ok(self.log_prob_given_mean(mean, a_raw))
    }

    fn log_prob_given_mean(&self, mean: Point, a_raw: Point) -> f64 {
        (0..ACTION_DIM)
            .map(|k| {
                let z = (a_raw[k] - mean[k]) / self.log_std[k].exp();
                -0.5 * z * z - self.log_std[k] - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    }

    /// Draws `a_raw ~ N(mean(s), diag(σ²))` and returns it with its log-density.
    pub fn sample_action<R: Rng + ?Sized>(&self, s: Point, rng: &mut R) -> Result<(Point, f64)> {
        let mean = self.mean(s)?;
        Ok(self.sample_given_mean(mean, rng))
    }

    fn sample_given_mean<R: Rng + ?Sized>(&self, mean: Point, rng: &mut R) -> (Point, f64) {
        let std = self.std();
        let mut a = [0.0; ACTION_DIM];
        for k in 0..ACTION_DIM {
            let eps: f64 = rng.sample(StandardNormal);
            a[k] = mean[k] + std[k] * eps;
        }
        (a, self.log_prob_given_mean(mean, a))
    }

    /// Gradient of `Σ_i weights[i] · log π(actions[i] | states[i])`.
    pub fn weighted_log_prob_gradient(&self, states: &[Point], actions: &[Point], weights: &[f64]) -> Result<PolicyGradient> {
        if states.len() != actions.len() || states.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                what: "policy gradient samples",
                expected: states.len(),
                actual: actions.len().min(weights.len()),
            });
        }
        let cache = numerics::forward_batch(&self.net, numerics::stack_rows(states).view())?;
        let means = cache.output();
        let var = [
            (2.0 * self.log_std[0]).exp(),
            (2.0 * self.log_std[1]).exp(),
        ];
        let mut out_grad = Array2::zeros((states.len(), ACTION_DIM));
        let mut log_std = [0.0; ACTION_DIM];
        for (i, (a, &w)) in actions.iter().zip(weights).enumerate() {
            for k in 0..ACTION_DIM {
                let diff = a[k] - means[[i, k]];
                out_grad[[i, k]] = w * diff / var[k];
                log_std[k] += w * (diff * diff / var[k] - 1.0);
            }
        }
        let net = numerics::backward_batch(&self.net, &cache, out_grad.view())?;
        Ok(PolicyGradient { net, log_std })
    }

    /// `θ ← θ + lr · grad` (objective ascent).
    pub fn ascend(&self, grad: &PolicyGradient, lr: f64) -> Result<Self> {
        if !grad.is_finite() {
            return Err(Error::NonFinite("policy gradient"));
        }
        let mut descent = grad.net.clone();
        descent.scale(-1.0);
        let net = numerics::sgd_step(&self.net, &descent, lr)?;
        let log_std = [
            self.log_std[0] + lr * grad.log_std[0],
            self.log_std[1] + lr * grad.log_std[1],
        ];
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy log std"));
        }
        Ok(Self { net, log_std })
    }
}

/// One sampled trajectory with the raw (pre-clip) actions that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub raw_actions: Vec<Point>,
    pub log_probs: Vec<f64>,
}

impl Episode {
    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.r).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
    pub gamma: f64,
}

impl EpisodeBatch {
    pub fn average_return(&self) -> f64 {
        self.episodes.iter().map(Episode::undiscounted_return).sum::<f64>() / self.episodes.len() as f64
    }
}

/// `Σ_i γ^i r_i`.
pub fn discounted_return(transitions: &[Transition], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in transitions {
        total += discount * t.r;
        discount *= gamma;
    }
    total
}

/// Samples `m` episodes, stepping all of them in lockstep so each step is one
/// batched network evaluation. Noise is drawn in episode order each step.
pub fn collect_batch<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    config: &NavConfig,
    settings: &NavSettings,
    m: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<EpisodeBatch> {
    if m == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut episodes: Vec<Episode> = (0..m)
        .map(|_| Episode {
            transitions: Vec::with_capacity(settings.horizon),
            raw_actions: Vec::with_capacity(settings.horizon),
            log_probs: Vec::with_capacity(settings.horizon),
        })
        .collect();
    let mut states = vec![settings.start; m];
    let mut active: Vec<usize> = (0..m).collect();
    for _ in 0..settings.horizon {
        if active.is_empty() {
            break;
        }
        let batch: Vec<Point> = active.iter().map(|&i| states[i]).collect();
        let means = numerics::forward_batch(&policy.net, numerics::stack_rows(&batch).view())?.into_output();
        for (row, &i) in active.iter().enumerate() {
            let (a_raw, logp) = policy.sample_given_mean([means[[row, 0]], means[[row, 1]]], rng);
            let tr = envs::step(config, settings, states[i], a_raw);
            states[i] = tr.s_next;
            let ep = &mut episodes[i];
            ep.transitions.push(tr);
            ep.raw_actions.push(a_raw);
            ep.log_probs.push(logp);
        }
        active.retain(|&i| !episodes[i].transitions.last().is_some_and(|t| t.done));
    }
    Ok(EpisodeBatch { episodes, gamma })
}

/// One REINFORCE ascent step `θ ← θ + α·ĝ` with the estimate from
/// [`reinforce_gradient`].
pub fn reinforce_update(policy: &GaussianPolicy, batch: &EpisodeBatch, lr: f64) -> Result<GaussianPolicy> {
    let grad = reinforce_gradient(policy, batch)?;
    policy.ascend(&grad, lr)
}

/// Per-step advantages: discounted reward-to-go minus the batch mean of the
/// reward-to-go at the same time step, standardized over the whole batch.
/// Episodes that ended early simply do not contribute to later baselines.
pub fn advantages(batch: &EpisodeBatch) -> Vec<Vec<f64>> {
    let to_go: Vec<Vec<f64>> = batch
        .episodes
        .iter()
        .map(|ep| {
            let mut g = vec![0.0; ep.transitions.len()];
            let mut acc = 0.0;
            for (slot, tr) in g.iter_mut().zip(&ep.transitions).rev() {
                acc = tr.r + batch.gamma * acc;
                *slot = acc;
            }
            g
        })
        .collect();
    let horizon = to_go.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    for g in &to_go {
        for (t, v) in g.iter().enumerate() {
            sums[t] += v;
            counts[t] += 1;
        }
    }
    let mut adv: Vec<Vec<f64>> = to_go
        .iter()
        .map(|g| g.iter().enumerate().map(|(t, v)| v - sums[t] / counts[t] as f64).collect())
        .collect();
    let n = counts.iter().sum::<usize>() as f64;
    if n == 0.0 {
        return adv;
    }
    let mean = adv.iter().flatten().sum::<f64>() / n;
    let std = (adv.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut().flatten() {
        *a = if std > ADVANTAGE_EPS { (*a - mean) / std } else { 0.0 };
    }
    adv
}

const ADVANTAGE_EPS: f64 = 1e-8;

/// Policy-gradient estimate `(1/N)·Σ_t ∇log π(a_t|s_t)·Â_t` over all `N`
/// steps in the batch, with `Â_t` from [`advantages`].
pub fn reinforce_gradient(policy: &GaussianPolicy, batch: &EpisodeBatch) -> Result<PolicyGradient> {
    if batch.episodes.is_empty() {
        return Err(Error::InvalidArgument("empty episode batch".into()));
    }
    let adv = advantages(batch);
    let n = adv.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let mut states = Vec::with_capacity(n as usize);
    let mut actions = Vec::with_capacity(n as usize);
    let mut weights = Vec::with_capacity(n as usize);
    for (ep, ep_adv) in batch.episodes.iter().zip(&adv) {
        for ((tr, a), w) in ep.transitions.iter().zip(&ep.raw_actions).zip(ep_adv) {
            states.push(tr.s);
            actions.push(*a);
            weights.push(w / n);
        }
    }
    let grad = policy.weighted_log_prob_gradient(&states, &actions, &weights)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Policy iterations per period.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 100,
            batch_size: 16,
            lr: 0.02,
            gamma: 0.99,
        }
    }
}

/// Runs `iterations` rounds of {collect batch, REINFORCE update} and returns
/// the trained policy with the average undiscounted batch return per round.
pub fn train_in_env<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    config: &NavConfig,
    settings: &NavSettings,
    train: &TrainSettings,
    rng: &mut R,
) -> Result<(GaussianPolicy, Vec<f64>)> {
    if train.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut current = policy.clone();
    let mut curve = Vec::with_capacity(train.iterations);
    for _ in 0..train.iterations {
        let batch = collect_batch(&current, config, settings, train.batch_size, train.gamma, rng)?;
        curve.push(batch.average_return());
        current = reinforce_update(&current, &batch, train.lr)?;
    }
    Ok((current, curve))
}
