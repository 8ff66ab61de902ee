//! Unsupervised inference of continuous interaction strengths between agents
//! from their trajectories, with the simulators, training loop, baselines and
//! metrics needed to check it end to end.

// `!(x > 0.0)` is used on purpose so NaN fails validation; graph ops return
// `Result` and so cannot be the operator traits.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::type_complexity
)]

pub mod autodiff;
pub mod eval;
pub mod model;
pub mod sim;
pub mod train;
