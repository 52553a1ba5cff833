//! Data-driven synthesis of quadratic stochastic control barrier certificates
//! for polynomial systems with unknown dynamics.
//!
//! Pipeline: [`collect`] noisy trajectories, build data-conformity blocks in
//! [`conformity`], compile the synthesis conditions to a conic program in
//! [`soscompile`], solve it with [`sdpsolve`], recover the certificate and its
//! guarantees in [`synth`], and cross-check against the true model in
//! [`verify`].

pub mod cli;
pub mod collect;
pub mod config;
pub mod conformity;
pub mod noise;
pub mod polyalg;
pub mod region;
pub mod sdpsolve;
pub mod soscompile;
pub mod synth;
pub mod system;
pub mod verify;
