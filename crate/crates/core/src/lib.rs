//! KV-cache eviction by attention-output reconstruction.
//!
//! Each cached KV pair is scored by how much a head's output would move if the
//! pair were dropped, the scores are smoothed over the recent query window and
//! neighbouring positions, and the top-B pairs are kept. A harness compares
//! this against attention-weight, streaming and random baselines on synthetic
//! or file-loaded traces.

pub mod attention;
pub mod error;
pub mod harness;
pub mod indicator;
pub mod numerics;
pub mod policies;
pub mod smoothing;

pub use error::{Error, Result};
