//! Human-in-the-loop review service: operators prompt the fine-tuned
//! generator, accept or reject candidates, revise prompts, and export the
//! accepted set as a manifest fragment for the mixer.

pub mod api;
pub mod error;
pub mod generator;
pub mod model;
pub mod store;

pub use api::{router, serve, AppState, JobState, JobStatus};
pub use error::ReviewError;
pub use generator::AdapterSource;
pub use model::{Decision, Event, ReviewSession, SessionStatus};
pub use store::Store;
