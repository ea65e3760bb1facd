//! Shared-autonomy workbench core.
//!
//! * [`region`]: the radial-grid planning world and its reward terms.
//! * [`oracle`]: exact planner for small regions, used as a verification oracle
//!   and as the simulated expert.
//! * [`shared`]: observation augmentation, human-closeness reward, blended
//!   reward and arbitration between human and autonomous actions.
//! * [`agents`]: simulated humans, action perturbation and the human error angle.
//! * [`nn`], [`learn`]: dense networks with hand-written backprop and a PPO trainer.
//! * [`encoder`]: conditional VAE producing the human latent `z1`.
//! * [`assist`]: the shared-autonomy agent, its latent tracker and training task.
//! * [`checkpoint`], [`config`]: model files and the experiment document.
//! * [`eval`]: trajectory likelihood, episode statistics and test suites.
//! * [`stages`]: end-to-end experiment pipelines used by the CLI.

pub mod agents;
pub mod assist;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod learn;
pub mod nn;
pub mod oracle;
pub mod record;
pub mod region;
pub mod scalar;
pub mod shared;
pub mod stages;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used for trained models and checkpoints.
pub type Real = f32;

pub type Policy = nn::MlpPolicy<Real>;
pub type Cvae = encoder::CvaeModel<Real>;
pub type Mlp = nn::Mlp<Real>;
