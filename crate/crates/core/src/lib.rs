//! Extrinsic camera-to-robot calibration without markers: each joint is
//! turned on its own, the image tracks of points on the moving links are
//! fitted with conics, and the recovered rotation axes are matched against
//! the robot's kinematics in a closed-form solve.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrator;
pub mod config;
pub mod conic;
pub mod estimation;
pub mod geometry;
pub mod harness;
pub mod planner;
pub mod robot;
pub mod scene;
