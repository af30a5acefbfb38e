//! Part I: run the seed-pool prompt over the training subset, verify the
//! generated steps against gold answers, and split the subset into Pool A
//! and the unsolved set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{config_digest, derive_seed};
use crate::domain::{check_unique_ids, Attempt, Demonstration, Pool, PoolStage, Provenance, Sample, Verdict};
use crate::llm::{LlmError, DEFAULT_TEMPERATURE};
use crate::promptkit::{
    assemble_context, ContextSpec, PromptStyle, SerializationFormat, ShotPool, TypeFilter,
    DEFAULT_TOKEN_BUDGET, FORMAT_VERSION,
};
use crate::runtime::with_workers;
use crate::stage::{Env, IssueStats, PipelineError};
use crate::store::{scan_filter, write_pool, write_records, Appender, AttemptRecord, Manifest, RunDir};
use crate::verify::reverify;

pub const STAGE: &str = "harvest";
pub const POOL_A: &str = "pool_a";
pub const POOL_HANDCRAFTED: &str = "pool_handcrafted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    pub corpus: String,
    pub train_subset_size: usize,
    pub attempts_per_sample: u32,
    pub seed_pool: String,
    pub n_shots: usize,
    pub format: SerializationFormat,
    pub token_budget: usize,
    pub type_filter: TypeFilter,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub seed: u64,
    pub backend_id: String,
    pub style: PromptStyle,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            corpus: String::new(),
            train_subset_size: 3500,
            attempts_per_sample: 20,
            seed_pool: String::new(),
            n_shots: 8,
            format: SerializationFormat::Full,
            token_budget: DEFAULT_TOKEN_BUDGET,
            type_filter: TypeFilter::None,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: 256,
            seed: 0,
            backend_id: String::new(),
            style: PromptStyle::default(),
        }
    }
}

impl HarvestConfig {
    pub fn digest(&self) -> String {
        config_digest(self)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.attempts_per_sample == 0 {
            return Err(PipelineError::Config("attempts_per_sample must be at least 1".into()));
        }
        if self.token_budget == 0 {
            return Err(PipelineError::Config("token_budget must be positive".into()));
        }
        Ok(())
    }
}

/// Success count of one processed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessCount {
    pub k: u32,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestReport {
    pub pool_a: Pool,
    pub demonstrations: Vec<Demonstration>,
    pub unsolved: Vec<Sample>,
    pub indeterminate: BTreeSet<String>,
    pub success_counts: BTreeMap<String, SuccessCount>,
    /// Attempts issued by this invocation (zero on a pure resume).
    pub issued: IssueStats,
    pub config_digest: String,
}

impl HarvestReport {
    pub fn unsolved_ids(&self) -> BTreeSet<String> {
        self.unsolved.iter().map(|s| s.id.clone()).collect()
    }
}

/// Context seed of attempt `index` on `sample_id`.
pub fn attempt_seed(seed: u64, sample_id: &str, index: u32) -> u64 {
    derive_seed(seed, &[sample_id.as_bytes(), &index.to_le_bytes()])
}

/// Attempts of one stage and config, keyed by (sample, index). The first
/// record wins if a key repeats.
pub(crate) fn load_attempts(
    run: &RunDir,
    stage: &str,
    digest: &str,
    exclusive: bool,
) -> Result<BTreeMap<(String, u32), Attempt>, PipelineError> {
    let mut foreign = None;
    let scan = scan_filter::<AttemptRecord>(run.attempts(), |r| {
        if r.stage != stage {
            return false;
        }
        if r.config_digest != digest {
            foreign.get_or_insert_with(|| r.config_digest.clone());
            return false;
        }
        true
    })?;
    if let (true, Some(found)) = (exclusive, foreign) {
        return Err(PipelineError::ConfigMismatch {
            stage: stage.to_string(),
            found,
        });
    }
    if scan.corrupt > 0 {
        tracing::warn!(corrupt = scan.corrupt, "attempt ledger has corrupt records");
    }
    let mut out = BTreeMap::new();
    for r in scan.records {
        out.entry((r.attempt.sample_id.clone(), r.attempt.attempt_index))
            .or_insert(r.attempt);
    }
    Ok(out)
}

pub fn harvest(
    cfg: &HarvestConfig,
    corpus: &[Sample],
    seed_pool: &ShotPool,
    env: &Env,
    run: &RunDir,
) -> Result<HarvestReport, PipelineError> {
    cfg.validate()?;
    if cfg.train_subset_size > corpus.len() {
        return Err(PipelineError::Config(format!(
            "train subset of {} requested but the corpus has {} samples",
            cfg.train_subset_size,
            corpus.len()
        )));
    }
    check_unique_ids(corpus)?;
    let subset = &corpus[..cfg.train_subset_size];
    let digest = cfg.digest();
    run.record_config(STAGE, &digest, cfg)?;

    let done = load_attempts(run, STAGE, &digest, true)?;
    let done_keys: HashSet<(String, u32)> = done.keys().cloned().collect();
    let ledger = Appender::open(run.attempts())?;
    let stop = AtomicBool::new(false);
    let issued = AtomicUsize::new(0);
    let backend_errors = AtomicUsize::new(0);

    let process = |sample: &Sample| -> Result<(), PipelineError> {
        for index in 0..cfg.attempts_per_sample {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            if done_keys.contains(&(sample.id.clone(), index)) {
                continue;
            }
            let spec = ContextSpec {
                n_shots: cfg.n_shots,
                format: cfg.format,
                token_budget: cfg.token_budget,
                type_filter: cfg.type_filter,
                rng_seed: attempt_seed(cfg.seed, &sample.id, index),
            };
            let ctx = assemble_context(&spec, seed_pool, sample, &cfg.style, env.counter)?;
            let seed = attempt_seed(cfg.seed ^ 0x5eed, &sample.id, index);
            match env.attempt(sample, index, &ctx, &cfg.style, cfg.temperature, cfg.max_new_tokens, seed) {
                Ok(attempt) => {
                    issued.fetch_add(1, Ordering::SeqCst);
                    if attempt.verdict == Verdict::BackendError {
                        backend_errors.fetch_add(1, Ordering::SeqCst);
                    }
                    ledger.append(&AttemptRecord {
                        stage: STAGE.to_string(),
                        config_digest: digest.clone(),
                        attempt,
                    })?;
                }
                Err(LlmError::Aborted) => {
                    stop.store(true, Ordering::SeqCst);
                    return Ok(());
                }
                Err(e) => unreachable!("non-abort errors are folded into attempts: {e}"),
            }
        }
        Ok(())
    };
    with_workers(env.workers, || subset.par_iter().try_for_each(process))?;
    let issued = IssueStats {
        issued: issued.load(Ordering::SeqCst),
        backend_errors: backend_errors.load(Ordering::SeqCst),
    };

    let attempts = load_attempts(run, STAGE, &digest, true)?;
    let mut by_sample: BTreeMap<&str, Vec<&Attempt>> = BTreeMap::new();
    for ((id, _), a) in &attempts {
        by_sample.entry(id.as_str()).or_default().push(a);
    }
    let finished: BTreeSet<String> = subset
        .iter()
        .filter(|s| {
            by_sample
                .get(s.id.as_str())
                .is_some_and(|v| v.len() as u32 >= cfg.attempts_per_sample)
        })
        .map(|s| s.id.clone())
        .collect();

    if stop.load(Ordering::SeqCst) {
        run.checkpoint(&Manifest {
            stage: STAGE.to_string(),
            config_digest: digest,
            format_version: FORMAT_VERSION.to_string(),
            completed: finished,
            complete: false,
        })?;
        return Err(PipelineError::Interrupted);
    }

    let mut demonstrations = Vec::new();
    let mut unsolved = Vec::new();
    let mut indeterminate = BTreeSet::new();
    let mut success_counts = BTreeMap::new();
    for sample in subset {
        let list = by_sample.get(sample.id.as_str()).cloned().unwrap_or_default();
        let n = list.len() as u32;
        if n < cfg.attempts_per_sample {
            return Err(PipelineError::MissingAttempts {
                id: sample.id.clone(),
                found: n,
                expected: cfg.attempts_per_sample,
            });
        }
        // keys are (sample, index), so `list` is in attempt order
        let k = list.iter().filter(|a| a.verdict == Verdict::Correct).count() as u32;
        if list.iter().all(|a| a.verdict == Verdict::BackendError) {
            indeterminate.insert(sample.id.clone());
            continue;
        }
        success_counts.insert(sample.id.clone(), SuccessCount { k, n });
        match list.iter().find(|a| a.verdict == Verdict::Correct) {
            Some(first) => demonstrations.push(Demonstration {
                sample: sample.clone(),
                steps: first.parsed_steps.clone().expect("correct attempts carry steps"),
                provenance: Provenance::Harvested,
                difficulty: None,
                utility: None,
            }),
            None => unsolved.push(sample.clone()),
        }
    }

    for d in &demonstrations {
        if !reverify(d, env.python) {
            return Err(PipelineError::Unverified(d.id().to_string()));
        }
    }

    demonstrations.sort_by(|a, b| a.id().cmp(b.id()));
    unsolved.sort_by(|a, b| a.id.cmp(&b.id));
    let pool_a = Pool::new(
        POOL_A,
        PoolStage::A,
        demonstrations.iter().map(|d| d.id().to_string()),
        None,
        digest.clone(),
    );
    write_pool(run.pool_a(), &pool_a, &demonstrations)?;
    let handcrafted = Pool::new(
        POOL_HANDCRAFTED,
        PoolStage::Handcrafted,
        seed_pool.demos().iter().map(|d| d.id().to_string()),
        None,
        digest.clone(),
    );
    write_pool(run.pool_handcrafted(), &handcrafted, seed_pool.demos())?;
    write_records(run.unsolved(), &unsolved)?;
    run.checkpoint(&Manifest {
        stage: STAGE.to_string(),
        config_digest: digest.clone(),
        format_version: FORMAT_VERSION.to_string(),
        completed: finished,
        complete: true,
    })?;
    tracing::info!(
        pool_a = pool_a.len(),
        unsolved = unsolved.len(),
        indeterminate = indeterminate.len(),
        "harvest finished"
    );
    Ok(HarvestReport {
        pool_a,
        demonstrations,
        unsolved,
        indeterminate,
        success_counts,
        issued,
        config_digest: digest,
    })
}
