//! Pool-based active learning.

pub mod journal;
pub mod session;
pub mod strategy;

pub use journal::{read_journal, Journal, JournalEvent};
pub use session::{
    initial_labels, now_ms, run_session, score_with_model, Evaluator, Oracle, PendingQuery, QueryRecord, Session, SessionConfig, SessionMode,
    SessionStatus, SessionTrace, SimulatedOracle,
};
pub use strategy::{informativeness_entropy, informativeness_margin, informativeness_random, Strategy};
