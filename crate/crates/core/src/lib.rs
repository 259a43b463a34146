//! Desk-scale open-world object detection engine.
//!
//! The crate houses the full training-and-evaluation loop at toy scale:
//! box geometry, open-world episode bookkeeping, teacher label ingestion,
//! confidence-augmented bipartite matching, down-weight training losses with
//! analytic gradients, a cascade two-stage detector trained by SGD, the
//! open-world metric suite (mAP, U-Recall, WI, A-OSE), and a seeded
//! synthetic benchmark that provides ground truth for unknowns.

pub mod detector;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod synth;
pub mod teacher;

pub use error::{Error, Result};
pub use geometry::BBox;
