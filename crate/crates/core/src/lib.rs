//! Activity image-to-video retrieval.
//!
//! Images and bags of video activity-proposal features are projected into a
//! common space. Proposals are weighted by graph multi-instance attention,
//! and training combines a point-to-subspace triplet loss with a shared
//! classifier and a modality discriminator, optimised by alternating SGD.
//! Retrieval ranks videos by squared l2 distance to the query image.

pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
