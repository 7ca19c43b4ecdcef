//! Score-based diffusion experiments on Gaussian mixtures: exact oracles,
//! a small score network, loss decompositions, SGLD training and
//! trajectory topology.

pub mod diffusion;
pub mod error;
pub mod estimate;
pub mod gmm;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod ot;
pub mod rng;
pub mod runner;
pub mod score;
pub mod topology;

pub use error::{Error, Result};
