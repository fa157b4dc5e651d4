//! Learnable min-cost network-flow data association for multi-object tracking.
//!
//! The crate is organized along the data path of a tracker:
//!
//! * [`detections`] reads and writes MOTChallenge / KITTI files and generates
//!   synthetic annotated sequences.
//! * [`graph`] turns a detection set into a network-flow graph with the
//!   conservation matrix, its null-space basis and a strictly interior point.
//! * [`mcf`] solves the integer min-cost flow exactly and decodes trajectories.
//! * [`smoothed`] solves the log-barrier smoothed LP (forward pass) and
//!   [`backward`] differentiates its optimum with respect to the edge costs.
//! * [`gradcheck`] compares analytic gradients with finite differences.
//! * [`cost`] holds hand-crafted and learnable cost models.
//! * [`training`] builds ground-truth flows and losses and runs ADAM.
//! * [`tracking`] runs sliding-window inference and carries identities.
//! * [`metrics`] scores trajectories with CLEAR MOT and MT/PT/ML.

pub mod backward;
pub mod cost;
pub mod detections;
mod error;
pub mod gradcheck;
pub mod graph;
mod linalg;
pub mod mcf;
pub mod metrics;
pub mod smoothed;
pub mod tracking;
pub mod training;

pub use error::{Error, Result};
