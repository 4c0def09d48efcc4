//! Examiner review service: a queue of scored pairs with layered visual
//! evidence, and a persistent verdict log.

pub mod error;
pub mod queue;
pub mod service;
pub mod verdicts;

pub use error::{ReviewError, ReviewResult};
pub use queue::{build_cases, build_queue, PairCase, ReviewQueue, Status};
pub use service::{router, PairDetail, PairSummary, Review, StatusFilter};
pub use verdicts::{export_verdicts, replay, ReviewState, Submission, Verdict, VerdictLog, VerdictRecord};
