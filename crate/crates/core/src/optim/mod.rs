//! NAdam, the warm-restart learning-rate schedule and the two-stage
//! training loop.

mod nadam;
mod schedule;
mod train;

pub use nadam::{NAdam, Slot};
pub use schedule::LrSchedule;
pub use train::{
    active_set, load_checkpoint, log_line, read_log, save_checkpoint, train, write_log, EpochRecord, Precision,
    TrainConfig, Trained,
};
