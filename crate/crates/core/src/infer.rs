//! Part III: answer queries with many sampled contexts drawn from a pool and
//! settle each query by majority vote.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{answers_equal, Answer};
use crate::digest::config_digest;
use crate::domain::{check_unique_ids, Attempt, Demonstration, Sample, Verdict};
use crate::harvest::{attempt_seed, load_attempts};
use crate::llm::{LlmError, DEFAULT_TEMPERATURE};
use crate::promptkit::{
    assemble_context, build_context, passes_filter, AssembledContext, ContextSpec, PromptError,
    PromptStyle, SerializationFormat, ShotPool, TypeFilter, DEFAULT_TOKEN_BUDGET,
};
use crate::refine::POOL_MERGED;
use crate::runtime::with_workers;
use crate::similarity::{Embedder, KnnIndex};
use crate::stage::{Env, IssueStats, PipelineError};
use crate::store::{write_records, Appender, AttemptRecord, Record, RunDir};

pub const STAGE: &str = "infer";
pub const SUMMARIES: &str = "infer_summaries.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotSelection {
    /// A fresh random subset of the pool per context.
    #[default]
    Random,
    /// The top shots by embedding similarity, one fixed context per query.
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub n_attempts: u32,
    pub n_shots: usize,
    pub temperature: f64,
    /// Name of the pool file in the run directory.
    pub pool: String,
    pub format: SerializationFormat,
    pub type_filter: TypeFilter,
    pub seed: u64,
    pub token_budget: usize,
    pub max_new_tokens: u32,
    /// Reuse attempt 0's context for every attempt instead of sampling a
    /// fresh one per attempt.
    pub reuse_context: bool,
    pub selection: ShotSelection,
    pub style: PromptStyle,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_attempts: 20,
            n_shots: 20,
            temperature: DEFAULT_TEMPERATURE,
            pool: POOL_MERGED.to_string(),
            format: SerializationFormat::Full,
            type_filter: TypeFilter::None,
            seed: 0,
            token_budget: DEFAULT_TOKEN_BUDGET,
            max_new_tokens: 256,
            reuse_context: false,
            selection: ShotSelection::Random,
            style: PromptStyle::default(),
        }
    }
}

impl InferenceConfig {
    fn validate(&self) -> Result<(), PipelineError> {
        if self.n_attempts == 0 {
            return Err(PipelineError::Config("n_attempts must be at least 1".into()));
        }
        if self.token_budget == 0 {
            return Err(PipelineError::Config("token_budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferError {
    #[error("nothing to vote on")]
    EmptyVote,
    #[error("query {0}: no attempt produced a valid prediction")]
    AllAttemptsFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// Normalized answer to vote count.
    pub tally: BTreeMap<String, u32>,
    /// Raw form of the winning class's first occurrence.
    pub winner: Answer,
    pub tie: bool,
    pub n_valid: u32,
}

/// Plurality over normalized answers. Among classes sharing the top count,
/// the one seen first wins.
pub fn majority_vote(answers: &[Answer]) -> Result<VoteOutcome, InferError> {
    let mut tally: BTreeMap<String, u32> = BTreeMap::new();
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, a) in answers.iter().enumerate() {
        *tally.entry(a.normalized().to_string()).or_default() += 1;
        first.entry(a.normalized()).or_insert(i);
    }
    let top = *tally.values().max().ok_or(InferError::EmptyVote)?;
    let leaders: Vec<usize> = first
        .iter()
        .filter(|(k, _)| tally[**k] == top)
        .map(|(_, &i)| i)
        .collect();
    let winner = answers[*leaders.iter().min().unwrap()].clone();
    Ok(VoteOutcome {
        tally,
        winner,
        tie: leaders.len() > 1,
        n_valid: answers.len() as u32,
    })
}

/// Vote over the valid predictions of attempts, taken in attempt order.
pub fn vote_attempts(query_id: &str, attempts: &[Attempt]) -> Result<VoteOutcome, InferError> {
    let mut sorted: Vec<&Attempt> = attempts.iter().collect();
    sorted.sort_by_key(|a| a.attempt_index);
    let valid: Vec<Answer> = sorted
        .iter()
        .filter(|a| a.verdict.is_valid())
        .filter_map(|a| a.predicted.clone())
        .collect();
    majority_vote(&valid).map_err(|_| InferError::AllAttemptsFailed(query_id.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub attempts: Vec<Attempt>,
    pub vote: Result<VoteOutcome, InferError>,
}

/// How contexts are drawn for one query.
enum Contexts<'p> {
    Random(&'p ShotPool),
    Fixed(Vec<&'p Demonstration>),
}

impl Contexts<'_> {
    fn context(
        &self,
        q: &Sample,
        index: u32,
        cfg: &InferenceConfig,
        env: &Env,
    ) -> Result<AssembledContext, PromptError> {
        match self {
            Contexts::Random(pool) => {
                let i = if cfg.reuse_context { 0 } else { index };
                let spec = ContextSpec {
                    n_shots: cfg.n_shots,
                    format: cfg.format,
                    token_budget: cfg.token_budget,
                    type_filter: cfg.type_filter,
                    rng_seed: attempt_seed(cfg.seed, &q.id, i),
                };
                assemble_context(&spec, pool, q, &cfg.style, env.counter)
            }
            Contexts::Fixed(shots) => {
                build_context(shots, q, cfg.format, cfg.token_budget, &cfg.style, env.counter)
            }
        }
    }
}

fn knn_shots<'p>(
    q: &Sample,
    pool: &'p ShotPool,
    index: &KnnIndex,
    embedder: &dyn Embedder,
    cfg: &InferenceConfig,
) -> Result<Vec<&'p Demonstration>, PipelineError> {
    let ranking = index
        .rank(q, embedder)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let shots: Vec<&Demonstration> = ranking
        .iter()
        .filter_map(|(id, _)| pool.get(id))
        .filter(|d| d.id() != q.id && passes_filter(&d.sample, q, cfg.type_filter))
        .take(cfg.n_shots)
        .collect();
    if shots.is_empty() && cfg.n_shots > 0 {
        return Err(PromptError::EmptyEligiblePool.into());
    }
    Ok(shots)
}

/// Run attempts `0..n_attempts` not in `skip`, handing each to `sink`.
/// Returns false if the backend aborted.
fn run_attempts(
    q: &Sample,
    cfg: &InferenceConfig,
    contexts: &Contexts,
    env: &Env,
    skip: &dyn Fn(u32) -> bool,
    sink: &mut dyn FnMut(Attempt) -> Result<(), PipelineError>,
) -> Result<bool, PipelineError> {
    for index in 0..cfg.n_attempts {
        if skip(index) {
            continue;
        }
        let ctx = contexts.context(q, index, cfg, env)?;
        let seed = attempt_seed(cfg.seed ^ 0x5eed, &q.id, index);
        match env.attempt(q, index, &ctx, &cfg.style, cfg.temperature, cfg.max_new_tokens, seed) {
            Ok(a) => sink(a)?,
            Err(LlmError::Aborted) => return Ok(false),
            Err(e) => unreachable!("non-abort errors are folded into attempts: {e}"),
        }
    }
    Ok(true)
}

/// Answer one query with random contexts from `pool`, without persistence.
pub fn answer_query(
    q: &Sample,
    cfg: &InferenceConfig,
    pool: &ShotPool,
    env: &Env,
) -> Result<QueryOutcome, PipelineError> {
    cfg.validate()?;
    let mut attempts = Vec::new();
    let finished = run_attempts(q, cfg, &Contexts::Random(pool), env, &|_| false, &mut |a| {
        attempts.push(a);
        Ok(())
    })?;
    if !finished {
        return Err(PipelineError::Interrupted);
    }
    let vote = vote_attempts(&q.id, &attempts);
    Ok(QueryOutcome { attempts, vote })
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub winner: Option<String>,
    pub tally: BTreeMap<String, u32>,
    pub tie: bool,
    pub n_valid: u32,
    pub gold: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Record for QueryResult {
    const TYPE: &'static str = "result";
}

impl QueryResult {
    fn new(q: &Sample, vote: &Result<VoteOutcome, InferError>) -> Self {
        match vote {
            Ok(v) => Self {
                id: q.id.clone(),
                winner: Some(v.winner.raw().to_string()),
                tally: v.tally.clone(),
                tie: v.tie,
                n_valid: v.n_valid,
                gold: q.answer.raw().to_string(),
                correct: answers_equal(&v.winner, &q.answer),
                error: None,
            },
            Err(e) => Self {
                id: q.id.clone(),
                winner: None,
                tally: BTreeMap::new(),
                tie: false,
                n_valid: 0,
                gold: q.answer.raw().to_string(),
                correct: false,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Aggregate of one evaluation, appended to the run's summary log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub config_digest: String,
    pub pool: String,
    pub pool_size: usize,
    pub n_shots: usize,
    pub n_attempts: u32,
    pub selection: ShotSelection,
    pub n_queries: usize,
    pub accuracy: f64,
    pub tie_rate: f64,
    pub valid_rate: f64,
    pub all_failed: usize,
}

impl Record for InferSummary {
    const TYPE: &'static str = "infer_summary";
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by query id.
    pub results: Vec<QueryResult>,
    pub summary: InferSummary,
    pub issued: IssueStats,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.summary.accuracy
    }
}

/// Digest covering the config, the pool contents and the embedder, so runs
/// over different pools never share attempt records.
pub fn evaluation_digest(cfg: &InferenceConfig, pool: &ShotPool, embedder: Option<&str>) -> String {
    let ids: Vec<&str> = pool.demos().iter().map(|d| d.id()).collect();
    config_digest(&(cfg, ids, embedder))
}

/// Answer every query and score against gold. With a run directory,
/// attempts are logged under the infer stage and an interrupted evaluation
/// resumes without repeating finished attempts.
pub fn evaluate(
    queries: &[Sample],
    cfg: &InferenceConfig,
    pool: &ShotPool,
    env: &Env,
    embedder: Option<&dyn Embedder>,
    run: Option<&RunDir>,
) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(PipelineError::Config("no queries to evaluate".into()));
    }
    check_unique_ids(queries)?;
    let embedder = match cfg.selection {
        ShotSelection::Random => None,
        ShotSelection::Knn => Some(embedder.ok_or_else(|| {
            PipelineError::Config("K-NN selection needs an embedding backend".into())
        })?),
    };
    let digest = evaluation_digest(cfg, pool, embedder.map(|e| e.id()));
    let index = match embedder {
        Some(e) => Some(KnnIndex::build(pool.demos(), e).map_err(|e| PipelineError::Config(e.to_string()))?),
        None => None,
    };

    let done = match run {
        Some(r) => {
            r.record_config(STAGE, &digest, cfg)?;
            load_attempts(r, STAGE, &digest, false)?
        }
        None => BTreeMap::new(),
    };
    let done_keys: HashSet<(&str, u32)> = done.keys().map(|(id, i)| (id.as_str(), *i)).collect();
    let ledger = run.map(|r| Appender::open(r.attempts())).transpose()?;
    let stop = AtomicBool::new(false);
    let issued = AtomicUsize::new(0);
    let backend_errors = AtomicUsize::new(0);

    let process = |q: &Sample| -> Result<Option<(Vec<Attempt>, QueryResult)>, PipelineError> {
        if stop.load(Ordering::SeqCst) {
            return Ok(None);
        }
        let contexts = match (&index, embedder) {
            (Some(ix), Some(e)) => Contexts::Fixed(knn_shots(q, pool, ix, e, cfg)?),
            _ => Contexts::Random(pool),
        };
        let mut attempts: Vec<Attempt> = (0..cfg.n_attempts)
            .filter_map(|i| done.get(&(q.id.clone(), i)).cloned())
            .collect();
        let skip = |i: u32| done_keys.contains(&(q.id.as_str(), i));
        let finished = run_attempts(q, cfg, &contexts, env, &skip, &mut |a| {
            issued.fetch_add(1, Ordering::SeqCst);
            if a.verdict == Verdict::BackendError {
                backend_errors.fetch_add(1, Ordering::SeqCst);
            }
            if let Some(l) = &ledger {
                l.append(&AttemptRecord {
                    stage: STAGE.to_string(),
                    config_digest: digest.clone(),
                    attempt: a.clone(),
                })?;
            }
            attempts.push(a);
            Ok(())
        })?;
        if !finished {
            stop.store(true, Ordering::SeqCst);
            return Ok(None);
        }
        attempts.sort_by_key(|a| a.attempt_index);
        let result = QueryResult::new(q, &vote_attempts(&q.id, &attempts));
        Ok(Some((attempts, result)))
    };
    let outcomes: Vec<Option<(Vec<Attempt>, QueryResult)>> =
        with_workers(env.workers, || queries.par_iter().map(process).collect::<Result<_, _>>())?;
    if stop.load(Ordering::SeqCst) {
        return Err(PipelineError::Interrupted);
    }

    let mut results: Vec<QueryResult> = outcomes.into_iter().flatten().map(|(_, r)| r).collect();
    results.sort_by(|a, b| a.id.cmp(&b.id));
    let n = results.len() as f64;
    let total_valid: u64 = results.iter().map(|r| r.n_valid as u64).sum();
    let summary = InferSummary {
        config_digest: digest,
        pool: cfg.pool.clone(),
        pool_size: pool.len(),
        n_shots: cfg.n_shots,
        n_attempts: cfg.n_attempts,
        selection: cfg.selection,
        n_queries: results.len(),
        accuracy: results.iter().filter(|r| r.correct).count() as f64 / n,
        tie_rate: results.iter().filter(|r| r.tie).count() as f64 / n,
        valid_rate: total_valid as f64 / (n * cfg.n_attempts as f64),
        all_failed: results.iter().filter(|r| r.winner.is_none()).count(),
    };
    if let Some(r) = run {
        Appender::open(r.join(SUMMARIES))?.append(&summary)?;
    }
    tracing::info!(
        accuracy = summary.accuracy,
        queries = summary.n_queries,
        tie_rate = summary.tie_rate,
        "evaluation finished"
    );
    Ok(EvalReport {
        results,
        summary,
        issued: IssueStats {
            issued: issued.load(Ordering::SeqCst),
            backend_errors: backend_errors.load(Ordering::SeqCst),
        },
    })
}

/// Write results as JSONL, one record per query in id order.
pub fn write_results(path: impl AsRef<Path>, report: &EvalReport) -> Result<(), PipelineError> {
    write_records(path, &report.results)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{IntermediateSteps, Provenance, SampleMeta, Table};
    use crate::llm::ScriptedMock;

    fn answers(xs: &[&str]) -> Vec<Answer> {
        xs.iter().map(|x| Answer::new(*x)).collect()
    }

    #[test]
    fn plain_majority() {
        let v = majority_vote(&answers(&["friday", "friday", "monday"])).unwrap();
        assert_eq!(v.winner.raw(), "friday");
        assert!(!v.tie);
        assert_eq!(v.n_valid, 3);
        assert_eq!(v.tally["friday"], 2);
    }

    #[test]
    fn tie_goes_to_first_seen() {
        let v = majority_vote(&answers(&["a", "b"])).unwrap();
        assert_eq!(v.winner.raw(), "a");
        assert!(v.tie);
        let v = majority_vote(&answers(&["b", "a", "a", "b", "c"])).unwrap();
        assert_eq!(v.winner.raw(), "b");
        assert!(v.tie);
    }

    #[test]
    fn normalized_forms_pool_votes() {
        let v = majority_vote(&answers(&["71", "72", "71.0", "72"])).unwrap();
        assert_eq!(v.winner.raw(), "71");
        assert!(v.tie);
        let v = majority_vote(&answers(&["72", "71", "71.0"])).unwrap();
        assert_eq!(v.winner.raw(), "71");
        assert_eq!(v.tally["71"], 2);
        assert!(!v.tie);
    }

    #[test]
    fn empty_vote_is_an_error() {
        assert_eq!(majority_vote(&[]), Err(InferError::EmptyVote));
    }

    fn table() -> Table {
        Table::new(
            None,
            vec!["Day".into(), "Tickets".into()],
            vec![vec!["Friday".into(), "71".into()], vec!["Monday".into(), "72".into()]],
        )
        .unwrap()
    }

    fn query(id: &str, gold: &str) -> Sample {
        Sample::new(id, "Which day?", Answer::new(gold), Some(table()), SampleMeta::default()).unwrap()
    }

    fn pool() -> ShotPool {
        ShotPool::new((0..4).map(|i| Demonstration {
            sample: Sample::new(
                format!("s{i}"),
                format!("Which day, variant {i}?"),
                Answer::new("friday"),
                Some(table()),
                SampleMeta::default(),
            )
            .unwrap(),
            steps: IntermediateSteps::dsl("argmin(to_number(w['Tickets']) -> w['Day'])").unwrap(),
            provenance: Provenance::Handcrafted,
            difficulty: None,
            utility: None,
        }))
    }

    #[test]
    fn all_correct_and_all_wrong() {
        let qs = vec![query("q1", "Friday"), query("q2", "Friday")];
        let cfg = InferenceConfig {
            n_attempts: 3,
            n_shots: 2,
            ..Default::default()
        };
        let good = ScriptedMock::new().fallback("argmin(to_number(w['Tickets']) -> w['Day'])");
        let rep = evaluate(&qs, &cfg, &pool(), &Env::new(&good), None, None).unwrap();
        assert_eq!(rep.accuracy(), 1.0);
        assert_eq!(rep.summary.valid_rate, 1.0);
        let bad = ScriptedMock::new().fallback("argmax(to_number(w['Tickets']) -> w['Day'])");
        let rep = evaluate(&qs, &cfg, &pool(), &Env::new(&bad), None, None).unwrap();
        assert_eq!(rep.accuracy(), 0.0);
    }

    #[test]
    fn invalid_attempts_do_not_vote() {
        let q = query("q1", "Friday");
        let mock = ScriptedMock::new()
            .attempt("q1", 0, "sum(")
            .attempt("q1", 1, "argmax(to_number(w['Tickets']) -> w['Day'])")
            .attempt_error("q1", 2)
            .attempt("q1", 3, "argmin(to_number(w['Tickets']) -> w['Day'])")
            .attempt("q1", 4, "argmin(to_number(w['Tickets']) -> w['Day'])");
        let cfg = InferenceConfig {
            n_attempts: 5,
            n_shots: 1,
            ..Default::default()
        };
        let out = answer_query(&q, &cfg, &pool(), &Env::new(&mock)).unwrap();
        let vote = out.vote.unwrap();
        assert_eq!(vote.n_valid, 3);
        assert_eq!(vote.winner.raw(), "Friday");

        let dead = ScriptedMock::new().sample_error("q1");
        let out = answer_query(&q, &cfg, &pool(), &Env::new(&dead)).unwrap();
        assert_eq!(out.vote, Err(InferError::AllAttemptsFailed("q1".into())));
    }

    #[test]
    fn fresh_contexts_differ_unless_reused() {
        let q = query("q1", "Friday");
        let mock = ScriptedMock::new().fallback("argmin(to_number(w['Tickets']) -> w['Day'])");
        let mut cfg = InferenceConfig {
            n_attempts: 6,
            n_shots: 2,
            ..Default::default()
        };
        let out = answer_query(&q, &cfg, &pool(), &Env::new(&mock)).unwrap();
        let distinct: HashSet<&str> = out.attempts.iter().map(|a| a.context_id.as_str()).collect();
        assert!(distinct.len() > 1);
        cfg.reuse_context = true;
        let out = answer_query(&q, &cfg, &pool(), &Env::new(&mock)).unwrap();
        let distinct: HashSet<&str> = out.attempts.iter().map(|a| a.context_id.as_str()).collect();
        assert_eq!(distinct.len(), 1);
    }

    #[test]
    fn knn_requires_embedder() {
        let cfg = InferenceConfig {
            selection: ShotSelection::Knn,
            ..Default::default()
        };
        let mock = ScriptedMock::new();
        let err = evaluate(&[query("q", "x")], &cfg, &pool(), &Env::new(&mock), None, None).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
    }
}
