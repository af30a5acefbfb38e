//! Turning completions into verdicts: parse the steps, execute or read off
//! the final answer, compare with gold.

use crate::answer::{answers_equal, Answer};
use crate::domain::{Demonstration, IntermediateSteps, LanguageTag, Sample, Table, Verdict};
use crate::dsl::{eval_program, parse_program};
use crate::promptkit::{steps_from_completion, PromptStyle};

/// Runs programs the DSL evaluator cannot (generated Python).
pub trait ProgramExecutor: Send + Sync {
    /// Final answer text, or a description of the failure.
    fn execute(&self, program: &str, table: &Table) -> Result<String, String>;
}

/// Outcome of checking one completion against a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub parsed_steps: Option<IntermediateSteps>,
    pub predicted: Option<Answer>,
    pub verdict: Verdict,
    pub error: Option<String>,
}

/// Why a set of steps did not produce an answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepsFailure {
    pub verdict: Verdict,
    pub message: String,
}

impl StepsFailure {
    fn parse(message: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::ParseError,
            message: message.into(),
        }
    }

    fn exec(message: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::ExecutionError,
            message: message.into(),
        }
    }
}

/// The final answer stated by a reasoning chain: the text after the last
/// "the answer is", or after a line starting with "Answer:".
pub fn chain_answer(body: &str) -> Option<String> {
    for line in body.lines().rev() {
        let lower = line.to_ascii_lowercase();
        let found = if let Some(i) = lower.rfind("the answer is") {
            Some(&line[i + "the answer is".len()..])
        } else if lower.trim_start().starts_with("answer:") {
            let start = line.len() - line.trim_start().len() + "answer:".len();
            Some(&line[start..])
        } else {
            None
        };
        if let Some(rest) = found {
            let ans = rest.trim().trim_start_matches(':').trim().trim_end_matches('.').trim();
            if !ans.is_empty() {
                return Some(ans.to_string());
            }
        }
    }
    None
}

/// Produce the answer a set of steps leads to.
pub fn run_steps(
    steps: &IntermediateSteps,
    table: Option<&Table>,
    python: Option<&dyn ProgramExecutor>,
) -> Result<Answer, StepsFailure> {
    if steps.body.trim().is_empty() {
        return Err(StepsFailure::parse("empty completion"));
    }
    match steps.language_tag {
        LanguageTag::Dsl => {
            let program = parse_program(&steps.body).map_err(|e| StepsFailure::parse(e.to_string()))?;
            let table = table.ok_or_else(|| StepsFailure::exec("sample has no table"))?;
            eval_program(&program, table).map_err(|e| StepsFailure::exec(e.to_string()))
        }
        LanguageTag::Python => {
            let exec = python.ok_or_else(|| StepsFailure::exec("no python executor configured"))?;
            let table = table.ok_or_else(|| StepsFailure::exec("sample has no table"))?;
            exec.execute(&steps.body, table)
                .map(Answer::new)
                .map_err(StepsFailure::exec)
        }
        LanguageTag::Freeform => chain_answer(&steps.body)
            .map(Answer::new)
            .ok_or_else(|| StepsFailure::parse("reasoning chain states no final answer")),
    }
}

/// Check a raw completion for `sample`.
pub fn verify_completion(
    completion: &str,
    sample: &Sample,
    style: &PromptStyle,
    python: Option<&dyn ProgramExecutor>,
) -> Verification {
    let steps = steps_from_completion(completion, style);
    match run_steps(&steps, sample.table.as_ref(), python) {
        Ok(answer) => {
            let verdict = if answers_equal(&answer, &sample.answer) {
                Verdict::Correct
            } else {
                Verdict::Wrong
            };
            Verification {
                parsed_steps: Some(steps),
                predicted: Some(answer),
                verdict,
                error: None,
            }
        }
        Err(f) => Verification {
            parsed_steps: (f.verdict == Verdict::ExecutionError).then_some(steps),
            predicted: None,
            verdict: f.verdict,
            error: Some(f.message),
        },
    }
}

/// Whether a demonstration's stored steps reproduce its gold answer.
pub fn reverify(d: &Demonstration, python: Option<&dyn ProgramExecutor>) -> bool {
    run_steps(&d.steps, d.sample.table.as_ref(), python)
        .map(|a| answers_equal(&a, &d.sample.answer))
        .unwrap_or(false)
}
