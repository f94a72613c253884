//! Pairwise-preference study server: hands triplets to raters, records
//! votes in an append-only log and turns them into majority labels.

pub mod error;
pub mod images;
pub mod log;
pub mod server;
pub mod state;
pub mod vote;

pub use error::{Result, StudyError};
pub use state::{aggregate_votes, Aggregation, StudyState, Tally, TallyStatus};
pub use vote::{Permutation, Side, VoteRecord};
