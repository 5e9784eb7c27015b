//! Step-cost measurement and the analytic memory model.

mod memory;
mod report;
mod timing;

pub use memory::{estimate_memory, max_tokens_at_capacity, MemoryEstimate};
pub use report::{report, ProfileReport, ProfileRow, StepProfile};
pub use timing::{profile_step_time, sweep, SweepOptions, MIN_TRIALS};
