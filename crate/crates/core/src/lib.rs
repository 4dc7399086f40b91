//! Parallel attention/SSM hybrid language model with FLOP-aware token
//! routing between the two branches, plus training and throughput tooling.

pub mod bench;
pub mod block;
pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod lanes;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod router;
pub mod scalar;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use flops::FlopProfile;
pub use lanes::{ExecMode, Lanes};
pub use model::LanguageModel;
pub use params::{ParameterStore, Parameters};
pub use router::{SplitMode, SplitPlan};
pub use scalar::Scalar;
