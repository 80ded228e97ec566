//! Segment annotation workbench core.
//!
//! Images are partitioned into candidate segments by cutting an
//! attribute-driven watershed hierarchy built on a gradient map. Each
//! segment is described by a feature vector, embedded through a learnable
//! linear head and projected to a 2D canvas where labels are assigned in
//! bulk. Labels feed back into the head through triplet learning, and
//! under-segmented regions are split with a seeded watershed.

pub mod correction;
pub mod error;
pub mod features;
pub mod graph;
pub mod metric;
pub mod projector;
pub mod rle;
pub mod session;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
pub use rle::SegmentKey;
