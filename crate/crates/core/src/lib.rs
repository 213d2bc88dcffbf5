//! Simulation and planning library for supervised autonomous tumor resection
//! on procedurally generated trachea phantoms.

pub mod evaluation;
pub mod executor;
pub mod geometry;
pub mod imageio;
pub mod pcd;
pub mod phantom;
pub mod planner;
pub mod segmentation;
pub mod surface;
