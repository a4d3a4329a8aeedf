pub mod calibrate;
pub mod diagnose;
pub mod plan;
pub mod solve_clip;
pub mod sweep;
pub mod train;
