//! Mixture-of-experts extension of a trained encoder: expert seeding with an
//! identity-preserving gate branch, sentence/token routing, and the router
//! losses that teach experts to follow domains.

mod config;
mod extend;
mod layer;
mod loss;

pub use config::{Granularity, LayerSelection, MoeConfig, RoutingStrategy};
pub use extend::{extend_model, parameter_count, ParameterCount};
pub use layer::{swiglu_forward, ExpertMlp, MoeLayer, Router, RoutingRecord};
pub(crate) use layer::RoutingContext;
pub use loss::{mutual_information, mutual_information_loss, router_ce_loss};
