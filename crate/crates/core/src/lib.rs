//! Weakly supervised feed-load estimation from conveyor images of ore pellets.
//!
//! The pipeline turns production logs (lab quality results, feed-load
//! readings, camera frames) into bags of patch images labelled with the feed
//! load that was running. A patch network is trained on those weak labels and
//! refined by clustering its own features; a bag network then maps a window of
//! patches to a recommended feed-load setpoint.

pub mod bag_net;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evalsuite;
pub mod imaging;
pub mod ingest;
pub mod optimizer;
pub mod patch_net;
pub mod synthgen;
pub mod tensor;
pub mod weak_relabel;

pub use error::{Error, Result};
