//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use llirl::envmodel::{self, EnvModel, ModelMode, WindowedDataset};
use llirl::mixture::{Cluster, ClusterLibrary, MassRule};
use llirl::envs::Transition;
use llirl::numerics::{Architecture, NetworkParams};
use llirl::policy::{GaussianPolicy, ACTION_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step of the fourth-order central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub const FD_EPS: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Below this magnitude entries are compared absolutely.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Loop-based forward pass; returns the output and the sign pattern of every
/// hidden pre-activation so kink crossings can be detected.
pub fn naive_forward(p: &NetworkParams, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let widths = p.arch().widths().to_vec();
    let layers = widths.len() - 1;
    let mut a = x.to_vec();
    let mut pattern = Vec::new();
    for k in 0..layers {
        let w = p.weights(k);
        let b = p.bias(k);
        let mut z = b.to_vec();
        for (i, ai) in a.iter().enumerate() {
            for (zj, wij) in z.iter_mut().zip(w.row(i)) {
                *zj += ai * wij;
            }
        }
        if k + 1 < layers {
            pattern.extend(z.iter().map(|&v| v > 0.0));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        } else {
            a = z;
        }
    }
    (a, pattern)
}

/// `|a − f| / max(|a|, |f|)`, or `|a − f|` when both are below the floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FD_ABS_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Glorot weights plus small random biases, so bias paths are exercised.
pub fn random_net(arch: Architecture, rng: &mut ChaCha8Rng) -> NetworkParams {
    let mut p = NetworkParams::glorot(arch, rng);
    for k in 0..p.arch().num_layers() {
        let (_, b) = p.layer_mut(k);
        for v in b {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    p
}

/// Parameter indices to probe: every bias plus `extra` random entries.
pub fn probe_indices(p: &NetworkParams, extra: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let widths = p.arch().widths().to_vec();
    let mut idx = Vec::new();
    let mut offset = 0;
    let layers = widths.len() - 1;
    for k in 0..layers {
        let w = widths[k] * widths[k + 1];
        idx.extend(offset + w..offset + w + widths[k + 1]);
        offset += w + widths[k + 1];
    }
    for _ in 0..extra {
        idx.push(rng.random_range(0..p.len()));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates skipped because a ±ε perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

/// Central differences of `f(params, pattern_sink)` over `indices`,
/// compared to `analytic`.
fn check_coordinates<F>(params: &NetworkParams, indices: &[usize], analytic: &[f64], f: F) -> FdReport
where
    F: Fn(&NetworkParams) -> (f64, Vec<bool>),
{
    let (_, base_pattern) = f(params);
    let mut report = FdReport::default();
    let mut p = params.clone();
    for &i in indices {
        match central_difference(&mut p, i, &base_pattern, &f) {
            None => report.skipped += 1,
            Some(numeric) => {
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric));
            }
        }
    }
    report
}

/// Fourth-order central difference along coordinate `i`. The step shrinks
/// tenfold (twice at most) while a probe point changes the ReLU sign
/// pattern; `None` if every step does.
pub fn central_difference<F>(p: &mut NetworkParams, i: usize, base_pattern: &[bool], f: &F) -> Option<f64>
where
    F: Fn(&NetworkParams) -> (f64, Vec<bool>),
{
    let orig = p.values()[i];
    let mut result = None;
    for h in [FD_EPS, FD_EPS * 0.1, FD_EPS * 0.01] {
        let mut at = |offset: f64| {
            p.values_mut()[i] = orig + offset;
            let (v, pattern) = f(p);
            (v, pattern == base_pattern)
        };
        let probes = [at(2.0 * h), at(h), at(-h), at(-2.0 * h)];
        if probes.iter().all(|(_, same)| *same) {
            let [(f2, _), (f1, _), (m1, _), (m2, _)] = probes;
            result = Some((-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h));
            break;
        }
    }
    p.values_mut()[i] = orig;
    result
}

/// Fourth-order central difference of a smooth scalar function.
pub fn central_difference_scalar(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (-f(x + 2.0 * FD_EPS) + 8.0 * f(x + FD_EPS) - 8.0 * f(x - FD_EPS) + f(x - 2.0 * FD_EPS)) / (12.0 * FD_EPS)
}

/// Policy log-density at a random state and action near the mean, checked
/// over probed network coordinates and both log-std entries.
pub fn policy_logp_instance(seed: u64) -> FdReport {
    let mut r = rng(seed);
    let net = random_net(Architecture::mlp(2, ACTION_DIM).unwrap(), &mut r);
    let log_std = [r.random_range(-3.5..-0.5), r.random_range(-3.5..-0.5)];
    let policy = GaussianPolicy::with_params(net, log_std);
    let s = [r.random::<f64>(), r.random::<f64>()];
    let mu = policy.mean(s).unwrap();
    let std = policy.std();
    let a = [
        mu[0] + std[0] * r.random_range(-2.0..2.0),
        mu[1] + std[1] * r.random_range(-2.0..2.0),
    ];
    let grad = policy.weighted_log_prob_gradient(&[s], &[a], &[1.0]).unwrap();
    let indices = probe_indices(&policy.net, 400, &mut r);
    let logp = |net: &NetworkParams, ls: [f64; 2]| -> (f64, Vec<bool>) {
        let (mu, pattern) = naive_forward(net, &s);
        let lp: f64 = (0..ACTION_DIM)
            .map(|d| {
                let sd = ls[d].exp();
                -0.5 * ((a[d] - mu[d]) / sd).powi(2) - ls[d] - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        (lp, pattern)
    };
    let mut report = check_coordinates(&policy.net, &indices, grad.net.values(), |net| logp(net, log_std));
    // the library's own log_prob must agree with the oracle density
    let lib = policy.log_prob(s, a).unwrap();
    let oracle = logp(&policy.net, log_std).0;
    report.max_rel_error = report.max_rel_error.max(relative_error(lib, oracle));
    for d in 0..ACTION_DIM {
        let numeric = central_difference_scalar(
            |v| {
                let mut ls = log_std;
                ls[d] = v;
                logp(&policy.net, ls).0
            },
            log_std[d],
        );
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(relative_error(grad.log_std[d], numeric));
    }
    report
}

/// Random transitions in the unit square (no environment semantics needed).
pub fn random_transitions(n: usize, r: &mut ChaCha8Rng) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let s = [r.random::<f64>(), r.random::<f64>()];
            let a = [r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)];
            Transition {
                s,
                a,
                r: -r.random::<f64>(),
                s_next: [(s[0] + a[0]).clamp(0.0, 1.0), (s[1] + a[1]).clamp(0.0, 1.0)],
                done: false,
            }
        })
        .collect()
}

pub fn random_dataset(mode: ModelMode, window: usize, rows: usize, r: &mut ChaCha8Rng) -> WindowedDataset {
    envmodel::build_dataset(&random_transitions(rows + window - 1, r), mode, window)
}

/// Environment-model NLL on a small random dataset; the mode cycles with
/// the seed and `σ²` is drawn from [0.05, 2].
pub fn env_nll_instance(seed: u64) -> FdReport {
    let mut r = rng(seed);
    let mode = [ModelMode::Reward, ModelMode::Transition, ModelMode::Joint][seed as usize % 3];
    let window = 4;
    let noise_var = r.random_range(0.05..2.0);
    let net = random_net(EnvModel::architecture(mode, window).unwrap(), &mut r);
    let model = EnvModel::from_params(net, mode, window, noise_var).unwrap();
    let data = random_dataset(mode, window, 6, &mut r);
    let (_, grad) = envmodel::nll_value_and_gradient(&model, &data).unwrap();
    let indices = probe_indices(&model.net, 400, &mut r);
    let d = model.output_dim() as f64;
    let nll = |net: &NetworkParams| -> (f64, Vec<bool>) {
        let mut total = 0.0;
        let mut pattern = Vec::new();
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            let (pred, pat) = naive_forward(net, &x);
            let sq: f64 = pred.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum();
            total += sq / (2.0 * noise_var) + 0.5 * d * (2.0 * std::f64::consts::PI * noise_var).ln();
            pattern.extend(pat);
        }
        (total, pattern)
    };
    let mut report = check_coordinates(&model.net, &indices, grad.values(), nll);
    let lib = -envmodel::log_likelihood(&model, &data).unwrap();
    report.max_rel_error = report.max_rel_error.max(relative_error(lib, nll(&model.net).0));
    report
}

pub fn tiny_policy() -> GaussianPolicy {
    GaussianPolicy::with_params(NetworkParams::zeros(Architecture::new(2, &[], 2).unwrap()), [0.0; 2])
}

pub fn tiny_model(seed: u64) -> EnvModel {
    let arch = Architecture::new(16, &[8], 4).unwrap();
    EnvModel::from_params(random_net(arch, &mut rng(seed)), ModelMode::Reward, 4, 1.0).unwrap()
}

/// Library with one small-network cluster per mass, at `period`.
pub fn library(masses: &[f64], period: usize, zeta: f64) -> ClusterLibrary {
    let mut lib = ClusterLibrary::new(tiny_policy(), tiny_model(0), zeta, MassRule::Posterior).unwrap();
    lib.clusters = masses
        .iter()
        .enumerate()
        .map(|(i, &mass)| Cluster {
            policy: tiny_policy(),
            model: tiny_model(i as u64),
            mass,
        })
        .collect();
    lib.period = period;
    lib
}
