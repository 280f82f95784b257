//! Contrastive pretraining over pairs of point-pixel pairs.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`]: synthetic RGB-D scenes, pinhole projection and backprojection.
//! - [`augment`]: jitter and the geometric/multi-view augmentation zoo.
//! - [`pairing`]: hardness, the clipped linear hardness schedule and the
//!   disturbed point-pixel pairing sampler.
//! - [`model`]: neighbourhood-aggregating 2D/3D encoders with hand-written
//!   reverse-mode gradients and early/late/hybrid fusion.
//! - [`loss`]: the pair InfoNCE loss, its unstabilised oracle, and the
//!   SGD+momentum optimiser with polynomial learning-rate decay.
//! - [`harness`]: pretraining loop, linear probe, collapse metric, ablation
//!   runner and config/CSV plumbing used by the `p4c` binary.

pub mod augment;
pub mod error;
pub mod geom;
pub mod harness;
pub mod io;
pub mod loss;
pub mod model;
pub mod pairing;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
