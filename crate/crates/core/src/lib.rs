//! FineRMoE: a mixture-of-experts feed-forward layer whose experts are
//! fine-grained along both the intermediate and the output dimension.
//!
//! A dense SwiGLU FFN is upcycled into `N = G_O·R_O·G_I·R_I` experts of
//! shape `h × H/G_I × h/G_O`. One router picks, per token, the top `T_I`
//! experts inside every group and one of `R_O` candidate groups for each of
//! the `G_O` output components; the selected group outputs are weighted,
//! summed and concatenated back to width `h`.
//!
//! ```
//! use finermoe::{upcycle, FineRConfig, Matrix, Rng, SwiGluWeights};
//!
//! let mut rng = Rng::new(7);
//! let dense = SwiGluWeights::<f32>::random(16, 32, 16, 0.1, &mut rng);
//! let cfg = FineRConfig::new(16, 32, 4, 1, 2, 2, 1);
//! let model = upcycle(&dense, &cfg, 7).unwrap();
//! let x: Matrix = rng.normal_matrix(3, 16, 1.0);
//! let out = model.forward(&x).unwrap();
//! assert_eq!(out.y.shape(), (3, 16));
//! assert_eq!(out.decision.token_indices(0).len(), 2);
//! ```

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experts;
pub mod loss_grad;
pub mod moe_layer;
pub mod numerics;
pub mod oracle;
pub mod router;
pub mod upcycle;

pub use checkpoint::{read_dense, read_model, read_moe, write_model, Checkpoint, FormatError};
pub use config::{ConfigError, DerivedDims, FineRConfig, Preset, RouterMode};
pub use error::{Error, Result};
pub use experts::{DenseFfnWeights, ExpertWeights, SharedExpertWeights, SwiGluWeights};
pub use loss_grad::{backward, balance_loss, fd_check, BalanceLossReport, LayerGradients, BALANCE_ALPHA};
pub use moe_layer::{build_dispatch_plan, forward, forward_forced, DispatchPlan, LayerOutput, MoEModel};
pub use numerics::{Accumulate, Matrix, Rng, Scalar};
pub use router::{route, route_separate, GroupLayout, RouterState, RoutingDecision};
pub use upcycle::{drop_upcycle, upcycle};
