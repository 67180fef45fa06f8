//! Group-relative policy optimization: outcome and process advantages,
//! the clipped surrogate with a KL penalty toward a reference policy, the
//! plain clipped surrogate with supplied advantages, and the update step.

mod advantage;
pub mod bandit;
mod objective;
mod step;

pub use advantage::{outcome_advantages, process_advantages};
pub use objective::{
    grpo_objective, grpo_objective_exact_kl, grpo_objective_value, ppo_objective, FlatRollouts, GrpoConfig,
    KlEstimator, SurrogateStats, Supervision,
};
pub use step::{grpo_step, metrics_csv, METRICS_HEADER, sample_groups, update_on_rollouts, GrpoMetrics, Policy, Rollouts, Score};
