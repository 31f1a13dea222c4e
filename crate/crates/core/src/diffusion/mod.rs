//! Noise schedules, probability-flow solvers and the sampling loop.

mod generate;
mod schedule;
mod solver;

pub use generate::{generate, generate_from, initial_noise, run_batch, Run, StepRecord, Trajectory};
pub use schedule::{NoiseLevel, NoiseSchedule, ScheduleKind, COSINE_OFFSET, DEFAULT_TERMINAL_ALPHA_BAR};
pub use solver::{solver_step, LatentState, SolverKind};
