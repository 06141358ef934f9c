//! HTTP session service and command-line tools around `obtod-core`.

pub mod api;
pub mod log;
pub mod tools;

pub use api::{router, AppState, TurnRequest};
pub use log::{replay_log, LogEvent, SessionLog};
