//! Deformable 3-D image registration with sparse graph attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode tape
//!   with the op set the network needs, plus [`optim::Adam`].
//! - [`sga`]: max-relative graph convolution over a fixed stride-K
//!   row/column/depth graph, computed with circular rolls.
//! - [`ssaformer`]: the separable self-attention bottleneck block and a
//!   multi-head attention reference.
//! - [`network`]: the U-shaped registration model, spatial transformer and
//!   trainer.
//! - [`losses`] and [`metrics`]: similarity/smoothness losses, Dice and
//!   Jacobian folding statistics.
//! - [`synth`]: seeded synthetic phantoms and smooth ground-truth fields.
//! - [`io`]: the raw volume and checkpoint file formats.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod sga;
pub mod ssaformer;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use autodiff::{Axis3, ConvOpts, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, SimilarityKind};
pub use metrics::MetricReport;
pub use network::{NetworkConfig, RegistrationModel};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use sga::GraphSpec;
pub use tensor::Tensor;
pub use volume::{DeformationField, LabelMap, Volume};
