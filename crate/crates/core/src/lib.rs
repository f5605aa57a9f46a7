//! Digital-twin wheeled-robot testbed core.
//!
//! A simulated "physical" robot with hidden disturbance dynamics ([`plant`]),
//! a parametric virtual robot ([`twin`]), an online dynamics-learning server
//! that fits the twin's residual model from telemetry ([`learning`]), the
//! robot-side three-layer control stack with twin-feedback correction
//! ([`control`]), and the FIFO in-memory telemetry bus with hex wire codec
//! and disk persistence ([`bus`]) connecting them.
//!
//! Everything is deterministic under a seed: identical configuration and
//! seed reproduce bit-identical trajectories, logs and reports.

pub mod bus;
pub mod control;
pub mod kinematics;
pub mod learning;
pub mod plant;
pub mod twin;
pub mod types;

pub use types::{Pose2D, Timestamp, Twist2D, Vec2, WheelSpeeds};
