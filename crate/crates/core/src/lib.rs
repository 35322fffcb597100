//! Global localization of a robot against an architectural floor plan.
//!
//! A plan is compiled into an optimizable architectural graph, the robot
//! estimates a situational graph online, the two are matched at the rooms
//! and wall-surfaces levels, and the matched graphs are merged to estimate
//! the map→plan transform.

pub mod a_graph;
pub mod error;
pub mod eval;
pub mod factor_graph;
pub mod geometry;
pub mod matcher;
pub mod merger;
pub mod plans;
pub mod s_graph;

pub use error::{Error, Result};
