//! Clustering-free 3D point-cloud instance segmentation at desk scale.
//!
//! Every sampled point generates the filters of a tiny dynamic convolution
//! that decodes one instance mask over the whole cloud. Training targets for
//! the main instance head are assigned by an entropic optimal-transport
//! solver whose supplies are derived from prediction/target IoUs; a static
//! auxiliary head stabilises early training and feeds the cost matrix.
//!
//! Module map:
//! - [`scene`]: point-cloud container, farthest-point sampling, label masks
//! - [`mask`]: soft/binary mask algebra (Dice, IoU, binarisation)
//! - [`ot`]: transport problem, Sinkhorn solver, exact LP oracle, assignment
//! - [`net`]: per-point encoder + dynamic-convolution mask decoder with
//!   hand-rolled reverse-mode gradients
//! - [`train`]: the two-term loss, assignment strategies, Adam loop
//! - [`eval`]: NMS, instance finalisation, AP / coverage / detection metrics
//! - [`synth`]: deterministic synthetic scene generator and named suites
//! - [`io`]: text formats for scenes, checkpoints, metrics and predictions
//!
//! Data-parallel inner loops (mask decoding, cost matrices, per-scene
//! evaluation) run on rayon when the default `parallel` feature is enabled
//! and fall back to equivalent sequential loops without it. Both paths
//! produce bit-identical results: work is split into fixed chunks and
//! partial sums are folded in index order.

pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod mat;
pub mod net;
pub mod ot;
pub(crate) mod par;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
