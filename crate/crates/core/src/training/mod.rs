//! Optimization and the teacher-distillation harness.
//!
//! Students are fitted to a frozen random tanh teacher on freshly sampled
//! standard-normal inputs (the infinite-data regime), under a four-phase
//! schedule:
//!
//! 1. pure MLP: `gamma = 0`;
//! 2. `gamma` ramps linearly to its target, then holds;
//! 3. Hessian regularization decays from `lambda_init` to `lambda_target`;
//! 4. plain training with a terminal learning-rate decay.

mod adam;
mod distill;
mod schedule;
mod teacher;

pub use adam::AdamState;
pub use distill::{
    ema, evaluate_mse, run_distill, sample_inputs, sweep_grid_resolution, train_distill, DistillConfig, HistoryRow,
    StudentSpec, SweepRow, TrainConfig, TrainOutcome,
};
pub use schedule::{phase_schedule, LrSchedule, PhaseConfig, ScheduleValues, TERMINAL_LAMBDA};
pub use teacher::{make_teacher, Teacher, TeacherSpec};
