//! Multi-head latent mixture-of-experts.
//!
//! Tokens are split into `N_h` latent heads of width `d_h`; each head routes
//! independently to its own bank of experts. The crate contains reference
//! and IO-aware kernels for routing and expert computation, a two-tier
//! memory model that counts their HBM traffic, and a deterministic
//! simulation of head-parallel and expert-parallel communication.

pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod layer;
pub mod memory;
pub mod parallel;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use experts::{ClusterPlan, ExpertBackend, ExpertBank, ExpertTiles};
pub use memory::{Arena, TierConfig, TrafficLedger};
pub use rng::Rng;
pub use router::{RouteBlocks, RouterParams, TopKResult};
pub use tensor::{Scalar, Tensor};
pub use layer::{ExecConfig, LayerDims, MHLatentMoEParams, MoEModule, RouterMode};
pub use parallel::{CommReport, SkewModel, WorkerGroup};
