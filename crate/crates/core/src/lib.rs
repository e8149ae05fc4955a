//! Batch simulation and batch rendering for 3D navigation agents, with a
//! recurrent policy trained by large-batch PPO and the Lamb optimizer.
//!
//! The crate is organised along the data flow of one training iteration:
//! [`navsim`] steps N environments over shared [`scene`] assets, [`render`]
//! draws their observations into one megaframe, [`nn`] evaluates the policy,
//! and [`train`] updates it from the rollouts collected by [`rollout`].

pub mod cli;
pub mod geom;
pub mod navsim;
pub mod nn;
pub mod render;
pub mod rollout;
pub mod scene;
pub mod train;
