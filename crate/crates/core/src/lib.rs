//! Core numerics for inferring brain reaction maps: branched transport on
//! embedded candidate graphs, anatomical cost fields, measure estimation
//! from regional activity, induced linear network dynamics and Gaussian
//! steering costs, plus the hybrid structure-plus-dynamics optimizer.

pub mod bot_solver;
pub mod cost_field;
pub mod gaussian_bridge;
pub mod geometry;
pub mod graph_core;
pub mod graph_dynamics;
pub mod hybrid_optimizer;
pub mod measures;

#[cfg(any(test, feature = "test-util"))]
pub mod fixtures;
