//! Experiment sessions: assignment, trial serving, feedback, and the
//! event-sourced record of everything that happened.

pub mod analysis;
pub mod assets;
pub mod config;
pub mod events;
pub mod service;

pub use analysis::{outcome_table, participant_outcome, trial_records, TrialRecord};
pub use assets::{asset_token, AssetSource, EnhancingAssets};
pub use config::{BonusTier, DataConfig, ExperimentConfig};
pub use events::{read_events, Event, EventLog, TrialEvent};
pub use service::{
    restore, results_of, Clock, CompletionSummary, Feedback, ManualClock, NextTrial, ResponseRequest, Service, Session,
    SessionResults, State, Status, SystemClock, TickClock, TrialPayload,
};
