//! Multiple-choice grading, reduction and recovery rates, trend statistics and
//! the sweep harness.

pub mod metrics;
pub mod sweep;
pub mod trend;

pub use metrics::{mcq_accuracy, mcq_item_losses, option_scores, recovery_rate, reduction_rate, MetricsRecord};
pub use sweep::{evaluate_tasks, run_sweep, saturates, SweepRow, SweepSpec, SweptParam, Task};
pub use trend::{kendall_tau_b, trend_test, TrendResult};
