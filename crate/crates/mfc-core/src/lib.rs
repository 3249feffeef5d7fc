//! Mean-field control for large decentralized swarms.
//!
//! The crate models swarms of simple agents (point particles with a heading,
//! or velocity-controlled particles in a box) whose coupling runs entirely
//! through the empirical mean field: each agent sees a local aggregate of its
//! neighbors, and the objective is a functional of the agent distribution.
//! Training collapses the multi-agent problem into a single-agent one on the
//! space of mean fields: an upper-level policy observes a featurized mean
//! field and emits parameters for a lower-level kernel policy that every
//! agent then executes on its own local observation.
//!
//! Module map:
//!
//! * [`manifolds`] — the state spaces: a box in d dimensions and four quotient
//!   surfaces of `[-1,1]^2` (torus, Möbius strip, projective plane, Klein
//!   bottle) with geodesic-image distances, boundary wrapping, and 3-D
//!   embeddings for visualization.
//! * [`envs`] — swarm dynamics (Aggregation, Vicsek, Kuramoto) with
//!   mean-field rewards and neighbor search.
//! * [`features`] — mean-field featurization: RBF kernel means and
//!   histograms over anchor grids.
//! * [`nn`] — a small dense network with analytic backprop, a diagonal
//!   Gaussian head, and Adam.
//! * [`policies`] — the two-level policy: upper Gaussian policy over kernel
//!   parameters, lower RBF-mixture policy over agent actions, plus the
//!   kernel bandwidth sufficiency check.
//! * [`ppo`] — rollout collection, GAE, and the clipped-surrogate PPO update
//!   with a KL penalty; deterministic given (seed, iteration).
//! * [`limit`] — finite-state limit system: exact mean-field step,
//!   Wasserstein-1 distance, and the finite-N deviation sweep.
//! * [`rng`] — counter-style derivation of independent ChaCha streams from
//!   (seed, tags...), the backbone of reproducibility.

pub mod envs;
pub mod features;
pub mod limit;
pub mod manifolds;
pub mod nn;
pub mod policies;
pub mod ppo;
pub mod rng;
