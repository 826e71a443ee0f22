//! Risk-sensitive distributional reinforcement learning on exact finite
//! return distributions.
//!
//! The crate is organized around five layers:
//!
//! - [`dist`]: finite Dirac mixtures (`ReturnDistribution`), their algebra
//!   (affine maps, convolution, mixtures), quantile/CDF queries, and exact
//!   p-Wasserstein distances.
//! - [`risk`]: distortion risk measures (mean, CVaR, Wang, CPW, POW) with
//!   exact evaluation on Dirac mixtures and sampled estimators on quantile
//!   arrays.
//! - [`envs`]: episodic tabular MDPs with deterministic transitions and
//!   stochastic rewards, plus rollout simulation.
//! - [`operators`]: exact dynamic-programming operators — Markovian policy
//!   evaluation, mean value iteration, the risk-greedy optimality operator,
//!   the history-relied operators, policy iteration on histories, and a
//!   brute-force global oracle.
//! - [`agents`]: sampled quantile-table learners — a Markovian risk-greedy
//!   baseline and the trajectory (history-keyed) Q-learner.

pub mod agents;
pub mod dist;
pub mod envs;
pub mod operators;
pub mod risk;

pub use dist::{KeyedDistributionMap, ReturnDistribution};
pub use envs::TabularMdp;
pub use risk::RiskMeasure;
