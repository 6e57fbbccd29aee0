//! Listwise, reward-aware preference optimization for denoising diffusion
//! models, at toy scale.
//!
//! A group of reward-scored candidates for one prompt is turned into
//! zero-sum advantage weights ([`weights`]); the policy's implicit reward
//! relative to a frozen reference ([`implicit_reward`]) is then pushed along
//! those weights under a quadratic penalty ([`objectives`]). [`theory`]
//! checks the objective's closed-form optimum and the KL bound of the tilt it
//! induces; [`trainer`] runs the whole thing on a 2-D toy problem.

pub mod csv;
pub mod data;
pub mod dataset_io;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod implicit_reward;
pub mod numfmt;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod theory;
pub mod trainer;
pub mod weights;

pub use error::{LairError, Result};
