//! Learned environment models and their Gaussian predictive likelihood.
//!
//! A model maps a window of `h` consecutive (state, action) pairs to the
//! matching rewards, next states, or interleaved (reward, next state) pairs.
//! Each output row is scored as an isotropic Gaussian with fixed variance.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvType, Transition};
use crate::error::{Error, Result};
use crate::numerics::{self, Architecture, GradientVector, NetworkParams};
use crate::policy::{ACTION_DIM, STATE_DIM};

/// Which part of the MDP the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Reward,
    Transition,
    Joint,
}

impl ModelMode {
    /// Output width per time step.
    pub fn step_dim(self) -> usize {
        match self {
            Self::Reward => 1,
            Self::Transition => STATE_DIM,
            Self::Joint => 1 + STATE_DIM,
        }
    }

    /// The mode matching the part of the MDP an environment type varies.
    pub fn for_env_type(env_type: EnvType) -> Self {
        match env_type {
            EnvType::I => Self::Reward,
            EnvType::II => Self::Transition,
            EnvType::III => Self::Joint,
        }
    }

    fn push_targets(self, tr: &Transition, out: &mut Vec<f64>) {
        match self {
            Self::Reward => out.push(tr.r),
            Self::Transition => out.extend_from_slice(&tr.s_next),
            Self::Joint => {
                out.push(tr.r);
                out.extend_from_slice(&tr.s_next);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub net: NetworkParams,
    pub mode: ModelMode,
    pub window: usize,
    pub noise_var: f64,
}

impl EnvModel {
    pub fn new<R: Rng + ?Sized>(mode: ModelMode, window: usize, noise_var: f64, rng: &mut R) -> Result<Self> {
        let arch = Self::architecture(mode, window)?;
        Self::from_params(NetworkParams::glorot(arch, rng), mode, window, noise_var)
    }

    pub fn from_params(net: NetworkParams, mode: ModelMode, window: usize, noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be positive, got {noise_var}")));
        }
        let expected = Self::architecture(mode, window)?;
        if net.arch().input_dim() != expected.input_dim() || net.arch().output_dim() != expected.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "environment model output width",
                expected: expected.output_dim(),
                actual: net.arch().output_dim(),
            });
        }
        Ok(Self {
            net,
            mode,
            window,
            noise_var,
        })
    }

    pub fn architecture(mode: ModelMode, window: usize) -> Result<Architecture> {
        if window == 0 {
            return Err(Error::InvalidArgument("window length must be at least 1".into()));
        }
        Architecture::mlp(window * (STATE_DIM + ACTION_DIM), window * mode.step_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.net.arch().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.arch().output_dim()
    }

    fn check(&self, data: &WindowedDataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if data.input_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "dataset input width",
                expected: self.input_dim(),
                actual: data.input_dim(),
            });
        }
        if data.output_dim() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "dataset output width",
                expected: self.output_dim(),
                actual: data.output_dim(),
            });
        }
        Ok(())
    }

    /// Sets the output-layer bias to the column means of `data`'s targets.
    pub fn center_output_bias(&mut self, data: &WindowedDataset) -> Result<()> {
        self.check(data)?;
        let means = data.targets.mean_axis(ndarray::Axis(0)).expect("non-empty dataset");
        let last = self.net.arch().num_layers() - 1;
        let (_, bias) = self.net.layer_mut(last);
        bias.copy_from_slice(means.as_slice().expect("contiguous"));
        Ok(())
    }

    /// Predictions for every input row.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(numerics::forward_batch(&self.net, inputs)?.into_output())
    }
}

/// Stacked windowed samples `(X, Y)`; row `i` of each matrix is one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl WindowedDataset {
    pub fn empty(mode: ModelMode, window: usize) -> Self {
        Self {
            inputs: Array2::zeros((0, window * (STATE_DIM + ACTION_DIM))),
            targets: Array2::zeros((0, window * mode.step_dim())),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &WindowedDataset) -> Result<WindowedDataset> {
        if self.input_dim() != other.input_dim() || self.output_dim() != other.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "dataset concatenation",
                expected: self.input_dim(),
                actual: other.input_dim(),
            });
        }
        let inputs = ndarray::concatenate(ndarray::Axis(0), &[self.inputs.view(), other.inputs.view()])
            .expect("matching widths");
        let targets = ndarray::concatenate(ndarray::Axis(0), &[self.targets.view(), other.targets.view()])
            .expect("matching widths");
        Ok(WindowedDataset { inputs, targets })
    }

    /// Sample `i` as `(x_i, y_i)` slices.
    pub fn sample(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        (self.inputs.row(i).to_vec(), self.targets.row(i).to_vec())
    }

    /// Same samples, rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> WindowedDataset {
        WindowedDataset {
            inputs: self.inputs.select(ndarray::Axis(0), order),
            targets: self.targets.select(ndarray::Axis(0), order),
        }
    }
}

/// Windows of `window` consecutive transitions of one episode, stride 1.
/// Returns an empty dataset when the episode is shorter than the window.
pub fn build_dataset(transitions: &[Transition], mode: ModelMode, window: usize) -> WindowedDataset {
    if window == 0 || transitions.len() < window {
        return WindowedDataset::empty(mode, window);
    }
    let rows = transitions.len() - window + 1;
    let in_dim = window * (STATE_DIM + ACTION_DIM);
    let out_dim = window * mode.step_dim();
    let mut xs = Vec::with_capacity(rows * in_dim);
    let mut ys = Vec::with_capacity(rows * out_dim);
    for win in transitions.windows(window) {
        for tr in win {
            xs.extend_from_slice(&tr.s);
            xs.extend_from_slice(&tr.a);
            mode.push_targets(tr, &mut ys);
        }
    }
    WindowedDataset {
        inputs: Array2::from_shape_vec((rows, in_dim), xs).expect("row-major windows"),
        targets: Array2::from_shape_vec((rows, out_dim), ys).expect("row-major windows"),
    }
}

/// Builds windows per episode and stacks them; no window crosses a reset.
pub fn build_dataset_from_episodes(episodes: &[Vec<Transition>], mode: ModelMode, window: usize) -> WindowedDataset {
    episodes
        .iter()
        .map(|ep| build_dataset(ep, mode, window))
        .fold(WindowedDataset::empty(mode, window), |acc, d| {
            acc.concat(&d).expect("same mode and window")
        })
}

fn log_norm_constant(model: &EnvModel) -> f64 {
    0.5 * model.output_dim() as f64 * (2.0 * PI * model.noise_var).ln()
}

/// `Σ_i [ −‖y_i − g(x_i)‖² / (2σ²) − (d/2)·log(2πσ²) ]`.
pub fn log_likelihood(model: &EnvModel, data: &WindowedDataset) -> Result<f64> {
    model.check(data)?;
    let pred = model.predict(data.inputs.view())?;
    let sq: f64 = pred.iter().zip(data.targets.iter()).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(-sq / (2.0 * model.noise_var) - data.len() as f64 * log_norm_constant(model))
}

/// Gradient of the negative log-likelihood with respect to the network
/// parameters, together with the log-likelihood at the same point.
pub fn nll_value_and_gradient(model: &EnvModel, data: &WindowedDataset) -> Result<(f64, GradientVector)> {
    model.check(data)?;
    let cache = numerics::forward_batch(&model.net, data.inputs.view())?;
    let residual = cache.output() - &data.targets;
    let sq: f64 = residual.iter().map(|r| r * r).sum();
    let loglik = -sq / (2.0 * model.noise_var) - data.len() as f64 * log_norm_constant(model);
    let out_grad = residual / model.noise_var;
    let grad = numerics::backward_batch(&model.net, &cache, out_grad.view())?;
    Ok((loglik, grad))
}

pub fn nll_gradient(model: &EnvModel, data: &WindowedDataset) -> Result<GradientVector> {
    nll_value_and_gradient(model, data).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transitions(n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| {
                let f = i as f64;
                Transition {
                    s: [0.1 * f, 0.2 * f],
                    a: [0.01 * f, -0.01 * f],
                    r: -f,
                    s_next: [0.1 * (f + 1.0), 0.2 * (f + 1.0)],
                    done: false,
                }
            })
            .collect()
    }

    #[test]
    fn window_of_one() {
        let trs = transitions(3);
        let d = build_dataset(&trs, ModelMode::Reward, 1);
        assert_eq!(d.len(), 3);
        let (x, y) = d.sample(1);
        assert_eq!(x, vec![0.1, 0.2, 0.01, -0.01]);
        assert_eq!(y, vec![-1.0]);
    }

    #[test]
    fn window_count_is_len_minus_h_plus_one() {
        let d = build_dataset(&transitions(5), ModelMode::Transition, 4);
        assert_eq!(d.len(), 2);
        assert_eq!(d.input_dim(), 16);
        assert_eq!(d.output_dim(), 8);
        assert!(build_dataset(&transitions(3), ModelMode::Reward, 4).is_empty());
    }

    #[test]
    fn window_ordering() {
        let trs = transitions(5);
        let d = build_dataset(&trs, ModelMode::Joint, 2);
        let (x, y) = d.sample(1);
        // window covers transitions 1 and 2
        assert_eq!(x, vec![0.1, 0.2, 0.01, -0.01, 0.2, 0.4, 0.02, -0.02]);
        assert_eq!(y, vec![-1.0, 0.2, 0.4, -2.0, 0.30000000000000004, 0.6000000000000001]);
        let j = build_dataset(&trs, ModelMode::Joint, 1);
        assert_eq!(j.sample(0).1.len(), 3);
    }

    #[test]
    fn episodes_are_not_bridged() {
        let eps = vec![transitions(5), transitions(3)];
        let d = build_dataset_from_episodes(&eps, ModelMode::Reward, 4);
        assert_eq!(d.len(), 2);
        let d = build_dataset_from_episodes(&eps, ModelMode::Reward, 2);
        assert_eq!(d.len(), 4 + 2);
    }

    fn zero_model(mode: ModelMode, h: usize, var: f64) -> EnvModel {
        EnvModel::from_params(
            NetworkParams::zeros(EnvModel::architecture(mode, h).unwrap()),
            mode,
            h,
            var,
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction_log_likelihood() {
        let model = zero_model(ModelMode::Reward, 1, 1.0);
        let data = WindowedDataset {
            inputs: Array2::zeros((1, 4)),
            targets: Array2::zeros((1, 1)),
        };
        let ll = log_likelihood(&model, &data).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
        let g = nll_gradient(&model, &data).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_log_likelihood() {
        let model = zero_model(ModelMode::Reward, 1, 1.0);
        let data = WindowedDataset {
            inputs: Array2::zeros((1, 4)),
            targets: Array2::from_elem((1, 1), 2f64.sqrt()),
        };
        let ll = log_likelihood(&model, &data).unwrap();
        assert!((ll + 1.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn doubling_data_doubles_log_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EnvModel::new(ModelMode::Joint, 2, 0.01, &mut rng).unwrap();
        let d = build_dataset(&transitions(9), ModelMode::Joint, 2);
        let once = log_likelihood(&model, &d).unwrap();
        let twice = log_likelihood(&model, &d.concat(&d).unwrap()).unwrap();
        assert!((twice - 2.0 * once).abs() <= 1e-9 * once.abs());
    }

    #[test]
    fn gradient_scales_inversely_with_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = EnvModel::new(ModelMode::Reward, 2, 0.01, &mut rng).unwrap();
        let d = build_dataset(&transitions(6), ModelMode::Reward, 2);
        let g1 = nll_gradient(&model, &d).unwrap();
        let wide = EnvModel {
            noise_var: 0.02,
            ..model.clone()
        };
        let g2 = nll_gradient(&wide, &d).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - 2.0 * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn shape_errors() {
        let model = zero_model(ModelMode::Reward, 2, 1.0);
        let d = build_dataset(&transitions(4), ModelMode::Transition, 2);
        assert!(matches!(log_likelihood(&model, &d), Err(Error::DimensionMismatch { .. })));
        assert!(log_likelihood(&model, &WindowedDataset::empty(ModelMode::Reward, 2)).is_err());
        assert!(EnvModel::from_params(model.net.clone(), ModelMode::Joint, 2, 1.0).is_err());
        assert!(EnvModel::from_params(model.net.clone(), ModelMode::Reward, 2, 0.0).is_err());
    }

    #[test]
    fn modes_follow_env_types() {
        assert_eq!(ModelMode::for_env_type(EnvType::I), ModelMode::Reward);
        assert_eq!(ModelMode::for_env_type(EnvType::II), ModelMode::Transition);
        assert_eq!(ModelMode::for_env_type(EnvType::III), ModelMode::Joint);
    }

    #[test]
    fn small_descent_step_does_not_increase_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = EnvModel::new(ModelMode::Joint, 4, 1.0, &mut rng).unwrap();
        let d = build_dataset(&transitions(20), ModelMode::Joint, 4);
        let (ll, g) = nll_value_and_gradient(&model, &d).unwrap();
        let stepped = EnvModel {
            net: numerics::sgd_step(&model.net, &g, 1e-6).unwrap(),
            ..model.clone()
        };
        assert!(log_likelihood(&stepped, &d).unwrap() >= ll);
    }

    #[test]
    fn centered_zero_model_predicts_target_means() {
        let mut model = zero_model(ModelMode::Joint, 2, 1.0);
        let d = build_dataset(&transitions(6), ModelMode::Joint, 2);
        model.center_output_bias(&d).unwrap();
        let pred = model.predict(d.inputs.view()).unwrap();
        let means = d.targets.mean_axis(ndarray::Axis(0)).unwrap();
        for row in pred.rows() {
            for (p, m) in row.iter().zip(&means) {
                assert!((p - m).abs() < 1e-12);
            }
        }
        let empty = WindowedDataset::empty(ModelMode::Joint, 2);
        assert!(model.center_output_bias(&empty).is_err());
    }
}
