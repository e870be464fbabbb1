pub mod config;
pub mod cost;
pub mod diagnostics;
pub mod diffusion;
pub mod divergence;
pub mod envs;
pub mod error;
pub mod imitation;
pub mod nn;
pub mod probe;
pub mod rl;
pub mod rng;
pub mod score;
pub mod scorematch;
pub mod stats;

pub use error::{Error, Result};
pub use config::ExperimentConfig;
pub use cost::{CostFn, StateCost};
pub use diffusion::DiffusionSchedule;
pub use divergence::{DsEstimate, GapReport};
pub use envs::{Demonstrations, EnvKind, EnvSpec, Policy};
pub use imitation::{BcConfig, IterationRecord, Method, RunResult, SmilingConfig};
pub use probe::{ProbeConfig, ProbeReport};
pub use rl::RlConfig;
pub use score::{GaussianScore, ScoreFn, ScoreModel};
pub use scorematch::ScoreTrainConfig;
