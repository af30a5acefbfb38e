//! Plumbing shared by the harvest, refine and infer stages.

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::domain::{Attempt, Sample, Verdict};
use crate::error::DomainError;
use crate::llm::{Backend, ByteEstimator, GenRequest, LlmError, RequestTag, TokenCounter};
use crate::promptkit::{AssembledContext, PromptError, PromptStyle};
use crate::store::StoreError;
use crate::verify::{verify_completion, ProgramExecutor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run already holds {stage} results for a different configuration ({found}); use a fresh run directory")]
    ConfigMismatch { stage: String, found: String },
    #[error("stage interrupted; rerun to resume")]
    Interrupted,
    #[error("sample {0}: stored steps do not reproduce the gold answer")]
    Unverified(String),
    #[error("sample {id}: {found} attempt records, expected {expected}")]
    MissingAttempts { id: String, found: u32, expected: u32 },
    #[error("pool B is empty")]
    EmptyPoolB,
    #[error("no unsolved samples")]
    EmptyUnsolved,
    #[error("required input missing: {0}")]
    MissingInput(String),
}

/// Everything a stage needs to issue and check attempts.
pub struct Env<'a> {
    pub backend: &'a dyn Backend,
    pub python: Option<&'a dyn ProgramExecutor>,
    pub counter: &'a dyn TokenCounter,
    pub workers: usize,
}

impl<'a> Env<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Self {
            backend,
            python: None,
            counter: &ByteEstimator,
            workers: 1,
        }
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn python(mut self, exec: &'a dyn ProgramExecutor) -> Self {
        self.python = Some(exec);
        self
    }

    /// Issue one attempt for `sample` in context `ctx` and judge it.
    /// Backend failures become `backend_error` attempts; only an abort is
    /// returned as an error.
    pub fn attempt(
        &self,
        sample: &Sample,
        index: u32,
        ctx: &AssembledContext,
        style: &PromptStyle,
        temperature: f64,
        max_new_tokens: u32,
        seed: u64,
    ) -> Result<Attempt, LlmError> {
        let mut req = GenRequest::new(ctx.prompt.clone())
            .temperature(temperature)
            .seed(seed)
            .tag(RequestTag {
                sample_id: sample.id.clone(),
                context_digest: ctx.digest.clone(),
                attempt_index: index,
                shot_ids: ctx.shot_ids.clone(),
            });
        req.max_new_tokens = max_new_tokens;
        let base = Attempt {
            sample_id: sample.id.clone(),
            attempt_index: index,
            context_id: ctx.digest.clone(),
            shot_ids: ctx.shot_ids.clone(),
            completion: String::new(),
            parsed_steps: None,
            predicted: None,
            verdict: Verdict::BackendError,
            error: None,
        };
        match self.backend.generate(&req) {
            Ok(resp) => {
                let completion = resp.text().to_string();
                let v = verify_completion(&completion, sample, style, self.python);
                Ok(Attempt {
                    completion,
                    parsed_steps: v.parsed_steps,
                    predicted: v.predicted,
                    verdict: v.verdict,
                    error: v.error,
                    ..base
                })
            }
            Err(LlmError::Aborted) => Err(LlmError::Aborted),
            Err(e) => Ok(Attempt {
                error: Some(e.to_string()),
                ..base
            }),
        }
    }
}

/// Tallies of issued attempts, used to tell infrastructure failure from
/// ordinary wrong answers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IssueStats {
    pub issued: usize,
    pub backend_errors: usize,
}

impl IssueStats {
    /// True when attempts were issued and every one hit a backend error.
    pub fn all_failed(&self) -> bool {
        self.issued > 0 && self.backend_errors == self.issued
    }
}
