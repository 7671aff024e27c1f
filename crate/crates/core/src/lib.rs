//! Token-level RLHF laboratory.
//!
//! Small, exactly solvable token MDPs with the full preference-learning
//! pipeline on top: Bradley–Terry preference simulation, linear reward MLE
//! with pessimism, exact KL-regularized planning, DPO and its implicit
//! token-wise reward, dense-vs-sparse policy-gradient training, and
//! token-reward tree exploration.

pub mod dpo;
pub mod error;
pub mod explorer;
pub mod features;
pub mod harness;
pub mod instances;
pub mod mdp;
pub mod optimizers;
pub mod pessimistic;
pub mod optim;
pub mod planner;
pub mod policy;
pub mod preference;
pub mod reward_model;
pub mod stats;

pub use error::{Error, Result};
pub use features::{FeatureSpec, FeatureTable};
pub use mdp::{Instance, MdpConfig, RewardTable, State, TokenMdp, Trajectory, TreeShape};
pub use policy::AutoregressivePolicy;
