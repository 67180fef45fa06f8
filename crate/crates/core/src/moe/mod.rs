//! Fine-grained mixture-of-experts with shared experts, softmax affinity
//! routing, the expert-level balance loss and bias-based loss-free
//! balancing.

mod config;
mod layer;
mod router;
pub mod sim;

pub use config::{Activation, MoeLayerConfig, RoutingMode};
pub use layer::{moe_branch, moe_branch_plain, moe_forward, ExpertWeights, MoeOutput, MoeWeights};
pub use router::{
    affinities, balance_loss, bias_update, route, route_scores, top_k, LoadStats, RouterState, Routing,
};
