//! Deterministic 2D continuous navigation environment: circular obstacles,
//! a column-raycast egocentric RGB renderer (student view), a pseudo-depth
//! renderer (oracle view), and the dense progress reward.

mod arena;
mod env;
mod render;

pub use arena::{Arena, ArenaConfig, Obstacle};
pub use env::{
    reward, scripted_goto_action, AgentState, NavEnv, PrivilegedState, StepOutcome,
    TerminalCause, LOW_DIM_ORACLE, LOW_DIM_STUDENT,
};
pub use render::{render_depth, render_rgb, DEPTH_NEAR};
