//! Point-agent navigation in the unit square, with optional circular
//! puddles that bounce the agent back to its previous position.
//!
//! * Type I: the goal moves between periods, no puddles.
//! * Type II: three puddles move between periods, the goal stays fixed.
//! * Type III: both the goal and the puddles move.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub type Point = [f64; 2];

pub const PUDDLE_RADII: [f64; 3] = [0.05, 0.10, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvType {
    /// Goal changes; reward function varies.
    I,
    /// Puddles change; transition function varies.
    II,
    /// Both change.
    III,
}

impl EnvType {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::I),
            2 => Ok(Self::II),
            3 => Ok(Self::III),
            _ => Err(Error::InvalidConfig(format!("env type must be 1, 2 or 3, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Self::I => 1,
            Self::II => 2,
            Self::III => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Puddle {
    pub center: Point,
    pub radius: f64,
}

impl Puddle {
    pub fn contains(&self, p: Point) -> bool {
        distance(p, self.center) < self.radius
    }
}

/// One stationary navigation MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub env_type: EnvType,
    pub goal: Point,
    pub puddles: Vec<Puddle>,
}

impl NavConfig {
    pub fn goal_only(goal: Point) -> Self {
        Self {
            env_type: EnvType::I,
            goal,
            puddles: Vec::new(),
        }
    }

    pub fn in_puddle(&self, p: Point) -> bool {
        self.puddles.iter().any(|pd| pd.contains(p))
    }
}

/// Constants shared by every MDP in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavSettings {
    /// Coefficient of the `‖a‖₂` control cost.
    pub control_cost: f64,
    pub start: Point,
    pub horizon: usize,
    /// Episode ends once the agent is closer than this to the goal.
    pub goal_tolerance: f64,
    /// Goal used by every Type II configuration.
    pub fixed_goal: Point,
    pub max_action: f64,
}

impl Default for NavSettings {
    fn default() -> Self {
        Self {
            control_cost: 0.1,
            start: [0.5, 0.0],
            horizon: 100,
            goal_tolerance: 0.01,
            fixed_goal: [0.9, 0.9],
            max_action: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: Point,
    /// Clipped action actually applied.
    pub a: Point,
    pub r: f64,
    pub s_next: Point,
    pub done: bool,
}

pub fn distance(a: Point, b: Point) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

pub fn clip_action(a_raw: Point, max_action: f64) -> Point {
    [
        a_raw[0].clamp(-max_action, max_action),
        a_raw[1].clamp(-max_action, max_action),
    ]
}

/// Advances the agent by one velocity command.
pub fn step(config: &NavConfig, settings: &NavSettings, s: Point, a_raw: Point) -> Transition {
    let a = clip_action(a_raw, settings.max_action);
    let tentative = [(s[0] + a[0]).clamp(0.0, 1.0), (s[1] + a[1]).clamp(0.0, 1.0)];
    let s_next = if config.in_puddle(tentative) { s } else { tentative };
    let dist2 = squared_distance(s_next, config.goal);
    let r = -dist2 - settings.control_cost * (a[0] * a[0] + a[1] * a[1]).sqrt();
    Transition {
        s,
        a,
        r,
        s_next,
        done: dist2.sqrt() < settings.goal_tolerance,
    }
}

/// Runs one episode from the start point until termination or the horizon.
/// `policy` receives the current state and returns an unclipped action.
pub fn rollout_episode<R, P>(config: &NavConfig, settings: &NavSettings, mut policy: P, rng: &mut R) -> Vec<Transition>
where
    R: Rng + ?Sized,
    P: FnMut(Point, &mut R) -> Point,
{
    let mut s = settings.start;
    let mut out = Vec::with_capacity(settings.horizon);
    for _ in 0..settings.horizon {
        let a_raw = policy(s, rng);
        let tr = step(config, settings, s, a_raw);
        s = tr.s_next;
        out.push(tr);
        if tr.done {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// A fresh configuration every period.
    Random,
    /// `k` base configurations repeated round-robin.
    Cycled { k: usize },
}

/// The dynamic environment `[M_1, …, M_T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicEnvSequence {
    pub configs: Vec<NavConfig>,
    pub seed: u64,
    pub env_type: EnvType,
}

impl DynamicEnvSequence {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Repeats `base` round-robin for `periods` periods.
    pub fn cycled(base: &[NavConfig], periods: usize, seed: u64) -> Result<Self> {
        if base.is_empty() || periods == 0 {
            return Err(Error::InvalidArgument(
                "cycled sequence needs at least one base config and one period".into(),
            ));
        }
        Ok(Self {
            configs: (0..periods).map(|i| base[i % base.len()].clone()).collect(),
            seed,
            env_type: base[0].env_type,
        })
    }
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [rng.random::<f64>(), rng.random::<f64>()]
}

fn random_puddles<R: Rng + ?Sized>(rng: &mut R, settings: &NavSettings, goal: Point) -> Vec<Puddle> {
    let mut radii = PUDDLE_RADII;
    radii.shuffle(rng);
    let margin = settings.goal_tolerance;
    radii
        .iter()
        .map(|&radius| loop {
            let center = uniform_point(rng);
            if distance(center, settings.start) > radius + margin && distance(center, goal) > radius + margin {
                break Puddle { center, radius };
            }
        })
        .collect()
}

/// Draws one configuration of the given type.
pub fn random_config<R: Rng + ?Sized>(env_type: EnvType, settings: &NavSettings, rng: &mut R) -> NavConfig {
    match env_type {
        EnvType::I => NavConfig::goal_only(uniform_point(rng)),
        EnvType::II => NavConfig {
            env_type,
            goal: settings.fixed_goal,
            puddles: random_puddles(rng, settings, settings.fixed_goal),
        },
        EnvType::III => {
            let goal = uniform_point(rng);
            NavConfig {
                env_type,
                goal,
                puddles: random_puddles(rng, settings, goal),
            }
        }
    }
}

/// Seeded dynamic-environment sequence of length `periods`.
pub fn generate_sequence(
    env_type: EnvType,
    periods: usize,
    mode: SequenceMode,
    settings: &NavSettings,
    seed: u64,
) -> Result<DynamicEnvSequence> {
    if periods == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Environment, 0);
    match mode {
        SequenceMode::Random => Ok(DynamicEnvSequence {
            configs: (0..periods).map(|_| random_config(env_type, settings, &mut rng)).collect(),
            seed,
            env_type,
        }),
        SequenceMode::Cycled { k } => {
            if k == 0 {
                return Err(Error::InvalidArgument("cycle length must be at least 1".into()));
            }
            let base: Vec<NavConfig> = (0..k).map(|_| random_config(env_type, settings, &mut rng)).collect();
            DynamicEnvSequence::cycled(&base, periods, seed)
        }
    }
}
