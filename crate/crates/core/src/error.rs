use thiserror::Error;

/// Violations of domain-type invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("table has no headers")]
    EmptyHeaders,
    #[error("header {0} is blank")]
    BlankHeader(usize),
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample id is empty")]
    EmptyId,
    #[error("sample {0}: question is empty")]
    EmptyQuestion(String),
    #[error("sample {0}: gold answer is empty")]
    EmptyAnswer(String),
    #[error("sample {0}: multi_choice question without choices")]
    MissingChoices(String),
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("invalid difficulty k={k} n={n}")]
    BadDifficulty { k: u32, n: u32 },
    #[error("invalid utility uses={uses} solves={solves}")]
    BadUtility { uses: u32, solves: u32 },
    #[error("pool lineage violated: {0}")]
    Lineage(String),
}
