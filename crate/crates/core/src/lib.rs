//! Bimanual manipulation learning from demonstrations: task construction,
//! a quasi-static two-hand simulator, a two-stage reward, independent PPO
//! teachers, DAgger distillation into a point-cloud student, and r1/r2
//! evaluation.

pub mod demo;
pub mod distill;
pub mod error;
pub mod eval;
pub mod math;
pub mod nn;
pub mod pipeline;
pub mod reward;
pub mod sim;
pub mod task;
pub mod teacher;

pub use error::{Error, Result};
