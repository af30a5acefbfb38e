//! Automatic generation, verification and refinement of in-context
//! demonstrations that carry intermediate steps, plus multi-context
//! majority-vote inference over the refined pool.

pub mod answer;
pub mod corpus;
pub mod digest;
pub mod domain;
pub mod dsl;
pub mod error;
pub mod harvest;
pub mod infer;
pub mod llm;
pub mod promptkit;
pub mod pyexec;
pub mod refine;
pub mod runtime;
pub mod similarity;
pub mod stats;
pub mod stage;
pub mod store;
pub mod synth;
pub mod verify;

pub use answer::{answers_equal, normalize_answer, Answer};
pub use domain::*;
pub use error::DomainError;
