//! Seeded fixtures shared by the benchmarks under `benches/`.

use llirl::envmodel::{self, EnvModel, ModelMode, WindowedDataset};
use llirl::lifelong::explore;
use llirl::mixture::{Cluster, ClusterLibrary, MassRule};
use llirl::{GaussianPolicy, NavConfig, NavSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two uniform-policy episodes on a Type I goal, windowed with `h = 4`.
pub fn exploration_dataset(mode: ModelMode) -> WindowedDataset {
    let cfg = NavConfig::goal_only([0.8, 0.8]);
    let episodes = explore(&cfg, &NavSettings::default(), 2, &mut rng(1));
    envmodel::build_dataset_from_episodes(&episodes, mode, 4)
}

pub fn env_model(mode: ModelMode, seed: u64) -> EnvModel {
    EnvModel::new(mode, 4, 1.0, &mut rng(seed)).expect("valid model")
}

/// Library with `clusters` randomly initialized clusters of unit mass.
pub fn library(clusters: usize, mode: ModelMode) -> ClusterLibrary {
    let policy = GaussianPolicy::new(&mut rng(2));
    let mut lib = ClusterLibrary::new(policy.clone(), env_model(mode, 10), 1.0, MassRule::Posterior)
        .expect("valid library");
    lib.clusters[0].mass = 1.0;
    for l in 1..clusters {
        lib.clusters.push(Cluster {
            policy: policy.clone(),
            model: env_model(mode, 10 + l as u64),
            mass: 1.0,
        });
    }
    lib.period = clusters + 1;
    lib
}
