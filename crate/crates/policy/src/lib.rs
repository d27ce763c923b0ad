//! Encoder-only transformer policy that picks bit-channel indices one at a
//! time, plus the REINFORCE loop that trains it against simulated BLER.
//!
//! Everything runs in `f64` with hand-written reverse-mode gradients.

pub mod checkpoint;
mod error;
pub mod net;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use net::{sample_action, ActionMode, PolicyConfig, PolicyParams, StepOutput};
pub use trainer::{train, BaselineTracker, LogRow, TrainConfig, TrainOutcome, Trajectory};
