//! Self-supervised synthesis of dynamic-obstacle navigation data from
//! recorded motion plans.
//!
//! For each plan the pipeline infers where and when an obstacle must appear
//! for the plan to be optimal ([`hallucinator`], [`filter`]), samples
//! collision-free constant-velocity obstacle trajectories through those
//! critical points ([`generator`]), renders them into LiDAR training records
//! ([`render`]) and scores the diversity of the result ([`coverage`]). The
//! [`sim`] module evaluates planners in procedurally generated dynamic worlds.

#![allow(clippy::needless_range_loop)]

mod banded;
pub mod coverage;
pub mod decoder;
pub mod error;
pub mod filter;
pub mod generator;
pub mod geometry;
pub mod hallucinator;
pub mod pipeline;
pub mod render;
pub mod seed;
pub mod sim;

pub use error::{Error, GeometryError, Result};
pub use geometry::{Action, Obstacle, Plan, Pose2, Vec2};
