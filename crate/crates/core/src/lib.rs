//! Temporally consistent multi-object pose tracking.
//!
//! Per-frame object pose detections and camera poses are fused in a
//! fixed-lag factor graph over SE(3). Measurement noise grows along the
//! viewing ray and shrinks with the visible pixel count; constant-pose or
//! constant-velocity motion factors link consecutive states; detections are
//! associated to tracks by Mahalanobis distance with absolute outlier gates;
//! and predictions are emitted only for confident tracks.

pub mod cli;
pub mod eval;
pub mod factors;
pub mod graph;
pub mod io;
pub mod lie;
pub mod sim;
pub mod tracker;
