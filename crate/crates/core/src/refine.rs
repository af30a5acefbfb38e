//! Part II: difficulty scoring, the hard-but-solvable filter (Pool B), the
//! one-shot utility campaign against unsolved samples, and the utility
//! filter (Pool C).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::digest::{config_digest, derive_seed};
use crate::domain::{
    check_lineage, Attempt, DifficultyScore, Demonstration, Pool, PoolStage, Sample, UtilityRecord,
    Verdict,
};
use crate::harvest::{self, SuccessCount};
use crate::llm::LlmError;
use crate::promptkit::{
    build_context, PromptStyle, SerializationFormat, DEFAULT_TOKEN_BUDGET, FORMAT_VERSION,
};
use crate::runtime::with_workers;
use crate::stage::{Env, IssueStats, PipelineError};
use crate::stats::PoolTable;
use crate::store::{
    read_pool, scan, scan_filter, write_atomic, write_pool, Appender, Manifest, Record, RunDir,
};

pub const STAGE: &str = "refine";
pub const POOL_B: &str = "pool_b";
pub const POOL_C: &str = "pool_c";
pub const POOL_MERGED: &str = "pool_c_merged";
pub const POOL_TABLE: &str = "pool_table.csv";

/// An exact non-negative rational, written as `0.2` or `1/5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("not a non-negative ratio: {s:?}");
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den: u64 = d.trim().parse().map_err(|_| bad())?;
            if den == 0 {
                return Err(bad());
            }
            return Ok(Ratio { num, den });
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        let all_digits = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
        if (int.is_empty() && frac.is_empty()) || !all_digits(int) || !all_digits(frac) || frac.len() > 12 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?;
        Ok(Ratio { num, den })
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Number(f64),
        }
        let text = match Repr::deserialize(d)? {
            Repr::Text(t) => t,
            Repr::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub difficulty_threshold: Ratio,
    /// Use `D < threshold` instead of `D <= threshold`.
    pub strict_threshold: bool,
    pub min_uses: u32,
    pub min_solve_rate: Ratio,
    pub one_shot_temperature: f64,
    pub pairing_seed: u64,
    pub format: SerializationFormat,
    pub token_budget: usize,
    pub max_new_tokens: u32,
    pub style: PromptStyle,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            difficulty_threshold: Ratio::new(1, 5),
            strict_threshold: false,
            min_uses: 100,
            min_solve_rate: Ratio::new(1, 10),
            one_shot_temperature: 0.0,
            pairing_seed: 0,
            format: SerializationFormat::Full,
            token_budget: DEFAULT_TOKEN_BUDGET,
            max_new_tokens: 256,
            style: PromptStyle::default(),
        }
    }
}

impl RefineConfig {
    pub fn digest(&self) -> String {
        config_digest(self)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let t = self.difficulty_threshold;
        if t.num == 0 || t.num > t.den {
            return Err(PipelineError::Config("difficulty_threshold must be in (0, 1]".into()));
        }
        let r = self.min_solve_rate;
        if r.num == 0 || r.num > r.den {
            return Err(PipelineError::Config("min_solve_rate must be in (0, 1]".into()));
        }
        if self.min_uses == 0 {
            return Err(PipelineError::Config("min_uses must be at least 1".into()));
        }
        Ok(())
    }
}

/// Attach `k/N` to every Pool A member from the attempt ledger.
pub fn score_difficulty(
    attempts: &BTreeMap<(String, u32), Attempt>,
    pool_a: &[Demonstration],
    expected_n: u32,
) -> Result<Vec<Demonstration>, PipelineError> {
    let mut counts: BTreeMap<&str, SuccessCount> = BTreeMap::new();
    for ((id, _), a) in attempts {
        let c = counts.entry(id.as_str()).or_insert(SuccessCount { k: 0, n: 0 });
        c.n += 1;
        if a.verdict == Verdict::Correct {
            c.k += 1;
        }
    }
    pool_a
        .iter()
        .map(|d| {
            let c = counts.get(d.id()).copied().unwrap_or(SuccessCount { k: 0, n: 0 });
            if c.n < expected_n || c.n == 0 {
                return Err(PipelineError::MissingAttempts {
                    id: d.id().to_string(),
                    found: c.n,
                    expected: expected_n,
                });
            }
            let mut d = d.clone();
            d.difficulty = Some(DifficultyScore::new(c.k, c.n)?);
            Ok(d)
        })
        .collect()
}

/// Whether a scored member is hard but solvable under `cfg`.
pub fn admits_to_pool_b(score: &DifficultyScore, cfg: &RefineConfig) -> bool {
    let t = cfg.difficulty_threshold;
    let under = if cfg.strict_threshold {
        score.below(t.num, t.den)
    } else {
        score.at_most(t.num, t.den)
    };
    score.k() >= 1 && under
}

pub fn filter_pool_b(
    pool_a: &Pool,
    scored: &[Demonstration],
    cfg: &RefineConfig,
) -> (Pool, Vec<Demonstration>) {
    let members: Vec<Demonstration> = scored
        .iter()
        .filter(|d| d.difficulty.as_ref().is_some_and(|s| admits_to_pool_b(s, cfg)))
        .cloned()
        .collect();
    if members.is_empty() {
        tracing::warn!("pool B is empty");
    }
    let pool = Pool::new(
        POOL_B,
        PoolStage::B,
        members.iter().map(|d| d.id().to_string()),
        Some(pool_a),
        cfg.digest(),
    );
    (pool, members)
}

/// Whether a utility record clears the Pool C bar.
pub fn admits_to_pool_c(u: &UtilityRecord, cfg: &RefineConfig) -> bool {
    u.uses() >= cfg.min_uses && u.rate_at_least(cfg.min_solve_rate.num, cfg.min_solve_rate.den)
}

pub fn filter_pool_c(
    pool_b: &Pool,
    with_utility: &[Demonstration],
    cfg: &RefineConfig,
) -> (Pool, Vec<Demonstration>) {
    let members: Vec<Demonstration> = with_utility
        .iter()
        .filter(|d| d.utility.as_ref().is_some_and(|u| admits_to_pool_c(u, cfg)))
        .cloned()
        .collect();
    if members.is_empty() {
        tracing::warn!("pool C is empty");
    }
    let pool = Pool::new(
        POOL_C,
        PoolStage::C,
        members.iter().map(|d| d.id().to_string()),
        Some(pool_b),
        cfg.digest(),
    );
    (pool, members)
}

/// Pool C plus the handcrafted seed set, with equal weight.
pub fn merge_with_handcrafted(
    pool_c: &Pool,
    c_members: &[Demonstration],
    handcrafted: &[Demonstration],
    created_with: &str,
) -> (Pool, Vec<Demonstration>) {
    let mut by_id: BTreeMap<String, Demonstration> = BTreeMap::new();
    for d in handcrafted.iter().chain(c_members) {
        by_id.insert(d.id().to_string(), d.clone());
    }
    let members: Vec<Demonstration> = by_id.into_values().collect();
    let pool = Pool::new(
        POOL_MERGED,
        PoolStage::Merged,
        members.iter().map(|d| d.id().to_string()),
        Some(pool_c),
        created_with,
    );
    (pool, members)
}

/// Seeded balanced pairing: the unsolved ids are shuffled, and shot `j`
/// takes the `m = min(min_uses, Q)` consecutive positions starting at
/// `j * m` (mod `Q`). Every shot gets `m` distinct queries and query loads
/// differ by at most one when `|B| * m` is spread over `Q`.
pub fn pair_shots(
    shot_ids: &[String],
    query_ids: &[String],
    min_uses: u32,
    seed: u64,
) -> Vec<(String, String)> {
    let mut shots = shot_ids.to_vec();
    shots.sort();
    let mut queries = query_ids.to_vec();
    queries.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    queries.shuffle(&mut rng);
    let q = queries.len();
    if q == 0 {
        return Vec::new();
    }
    let m = (min_uses as usize).min(q);
    let mut pairs = Vec::with_capacity(shots.len() * m);
    for (j, shot) in shots.iter().enumerate() {
        for t in 0..m {
            pairs.push((shot.clone(), queries[(j * m + t) % q].clone()));
        }
    }
    pairs
}

/// One one-shot experiment: a Pool B shot alone in context with an unsolved
/// query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotResult {
    pub shot_id: String,
    pub query_id: String,
    pub verdict: Verdict,
    pub config_digest: String,
    pub attempt: Attempt,
}

impl Record for OneShotResult {
    const TYPE: &'static str = "one_shot";
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    /// Sorted by (shot, query).
    pub results: Vec<OneShotResult>,
    pub utility: BTreeMap<String, UtilityRecord>,
    /// Fraction of unsolved queries solved by at least one shot.
    pub solved_fraction: f64,
    /// `Some(available)` when fewer than `min_uses` queries existed.
    pub shortfall: Option<usize>,
    pub issued: IssueStats,
}

/// Per-shot uses and solves, as a deterministic reduction over results.
pub fn tally_utility(results: &[OneShotResult]) -> BTreeMap<String, UtilityRecord> {
    let mut acc: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    for r in results {
        let e = acc.entry(r.shot_id.clone()).or_insert((0, 0));
        e.0 += 1;
        if r.verdict == Verdict::Correct {
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (u, s))| (k, UtilityRecord::new(u, s).expect("solves never exceed uses")))
        .collect()
}

pub fn run_one_shot_campaign(
    pool_b: &[Demonstration],
    unsolved: &[Sample],
    cfg: &RefineConfig,
    env: &Env,
    run: &RunDir,
) -> Result<CampaignReport, PipelineError> {
    if pool_b.is_empty() {
        return Err(PipelineError::EmptyPoolB);
    }
    if unsolved.is_empty() {
        return Err(PipelineError::EmptyUnsolved);
    }
    let digest = cfg.digest();
    let shots: BTreeMap<&str, &Demonstration> = pool_b.iter().map(|d| (d.id(), d)).collect();
    let queries: BTreeMap<&str, &Sample> = unsolved.iter().map(|s| (s.id.as_str(), s)).collect();
    let shot_ids: Vec<String> = shots.keys().map(|s| s.to_string()).collect();
    let query_ids: Vec<String> = queries.keys().map(|s| s.to_string()).collect();
    let pairs = pair_shots(&shot_ids, &query_ids, cfg.min_uses, cfg.pairing_seed);
    let shortfall = (query_ids.len() < cfg.min_uses as usize).then_some(query_ids.len());
    if let Some(q) = shortfall {
        tracing::warn!(available = q, min_uses = cfg.min_uses, "fewer unsolved queries than min_uses");
    }

    let path = run.one_shot_results();
    let existing = scan_filter::<OneShotResult>(&path, |r| r.config_digest == digest)?.records;
    let done: HashSet<(String, String)> = existing
        .iter()
        .map(|r| (r.shot_id.clone(), r.query_id.clone()))
        .collect();
    let ledger = Appender::open(&path)?;
    let stop = AtomicBool::new(false);
    let issued = AtomicUsize::new(0);
    let backend_errors = AtomicUsize::new(0);

    let process = |(shot_id, query_id): &(String, String)| -> Result<(), PipelineError> {
        if stop.load(Ordering::SeqCst) || done.contains(&(shot_id.clone(), query_id.clone())) {
            return Ok(());
        }
        let shot = shots[shot_id.as_str()];
        let query = queries[query_id.as_str()];
        let ctx = build_context(&[shot], query, cfg.format, cfg.token_budget, &cfg.style, env.counter)?;
        let seed = derive_seed(cfg.pairing_seed, &[shot_id.as_bytes(), query_id.as_bytes()]);
        match env.attempt(query, 0, &ctx, &cfg.style, cfg.one_shot_temperature, cfg.max_new_tokens, seed) {
            Ok(attempt) => {
                issued.fetch_add(1, Ordering::SeqCst);
                if attempt.verdict == Verdict::BackendError {
                    backend_errors.fetch_add(1, Ordering::SeqCst);
                }
                ledger.append(&OneShotResult {
                    shot_id: shot_id.clone(),
                    query_id: query_id.clone(),
                    verdict: attempt.verdict,
                    config_digest: digest.clone(),
                    attempt,
                })?;
                Ok(())
            }
            Err(LlmError::Aborted) => {
                stop.store(true, Ordering::SeqCst);
                Ok(())
            }
            Err(e) => unreachable!("non-abort errors are folded into attempts: {e}"),
        }
    };
    with_workers(env.workers, || pairs.par_iter().try_for_each(process))?;
    if stop.load(Ordering::SeqCst) {
        return Err(PipelineError::Interrupted);
    }

    let wanted: HashSet<&(String, String)> = pairs.iter().collect();
    let mut results: BTreeMap<(String, String), OneShotResult> = BTreeMap::new();
    for r in scan_filter::<OneShotResult>(&path, |r| r.config_digest == digest)?.records {
        let key = (r.shot_id.clone(), r.query_id.clone());
        if wanted.contains(&key) {
            results.entry(key).or_insert(r);
        }
    }
    if results.len() != pairs.len() {
        return Err(PipelineError::Config(format!(
            "campaign ledger holds {} of {} pairs",
            results.len(),
            pairs.len()
        )));
    }
    let results: Vec<OneShotResult> = results.into_values().collect();
    let utility = tally_utility(&results);
    let solved: BTreeSet<&str> = results
        .iter()
        .filter(|r| r.verdict == Verdict::Correct)
        .map(|r| r.query_id.as_str())
        .collect();
    Ok(CampaignReport {
        solved_fraction: solved.len() as f64 / query_ids.len() as f64,
        results,
        utility,
        shortfall,
        issued: IssueStats {
            issued: issued.load(Ordering::SeqCst),
            backend_errors: backend_errors.load(Ordering::SeqCst),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub pool_a: Pool,
    pub scored_a: Vec<Demonstration>,
    pub pool_b: Pool,
    pub b_members: Vec<Demonstration>,
    pub pool_c: Pool,
    pub c_members: Vec<Demonstration>,
    pub merged: Pool,
    pub unsolved: BTreeSet<String>,
    pub campaign: CampaignReport,
    pub config_digest: String,
}

/// Inputs refine reads from a harvested run.
pub struct HarvestOutputs {
    pub pool_a: Pool,
    pub demonstrations: Vec<Demonstration>,
    pub unsolved: Vec<Sample>,
    pub handcrafted: Vec<Demonstration>,
    pub attempts: BTreeMap<(String, u32), Attempt>,
    pub attempts_per_sample: u32,
}

pub fn load_harvest(run: &RunDir) -> Result<HarvestOutputs, PipelineError> {
    let manifest = run
        .read_manifest(harvest::STAGE)?
        .filter(|m| m.complete)
        .ok_or_else(|| PipelineError::MissingInput("a completed harvest".into()))?;
    let (pool_a, demonstrations) = read_pool(run.pool_a())?;
    let unsolved = scan::<Sample>(run.unsolved())?.records;
    let handcrafted = if run.pool_handcrafted().exists() {
        read_pool(run.pool_handcrafted())?.1
    } else {
        Vec::new()
    };
    let configs = run.configs(harvest::STAGE)?;
    let n = configs
        .get(&manifest.config_digest)
        .and_then(|c| c.get("attempts_per_sample"))
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PipelineError::MissingInput("harvest configuration in config.json".into()))?;
    let attempts = harvest::load_attempts(run, harvest::STAGE, &manifest.config_digest, false)?;
    Ok(HarvestOutputs {
        pool_a,
        demonstrations,
        unsolved,
        handcrafted,
        attempts,
        attempts_per_sample: n as u32,
    })
}

/// Run the whole refinement on a harvested run directory and write
/// pool_b/pool_c/pool_c_merged files.
pub fn refine(cfg: &RefineConfig, env: &Env, run: &RunDir) -> Result<RefineReport, PipelineError> {
    cfg.validate()?;
    let digest = cfg.digest();
    run.record_config(STAGE, &digest, cfg)?;
    let h = load_harvest(run)?;
    let scored = score_difficulty(&h.attempts, &h.demonstrations, h.attempts_per_sample)?;
    let (pool_b, b_members) = filter_pool_b(&h.pool_a, &scored, cfg);
    let campaign = run_one_shot_campaign(&b_members, &h.unsolved, cfg, env, run)?;
    let with_utility: Vec<Demonstration> = b_members
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.utility = Some(campaign.utility.get(d.id()).copied().unwrap_or_default());
            d
        })
        .collect();
    let (pool_c, c_members) = filter_pool_c(&pool_b, &with_utility, cfg);
    let (merged, merged_members) = merge_with_handcrafted(&pool_c, &c_members, &h.handcrafted, &digest);
    let unsolved: BTreeSet<String> = h.unsolved.iter().map(|s| s.id.clone()).collect();
    check_lineage(&h.pool_a, &pool_b, &pool_c, &unsolved)?;

    write_pool(run.pool_b(), &pool_b, &with_utility)?;
    write_pool(run.pool_c(), &pool_c, &c_members)?;
    write_pool(run.pool_merged(), &merged, &merged_members)?;
    let table = PoolTable::new(h.pool_a.len(), pool_b.len(), pool_c.len(), unsolved.len())
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    write_atomic(run.join(POOL_TABLE), table.to_csv().as_bytes())?;
    run.checkpoint(&Manifest {
        stage: STAGE.to_string(),
        config_digest: digest.clone(),
        format_version: FORMAT_VERSION.to_string(),
        completed: pool_b.member_ids.clone(),
        complete: true,
    })?;
    tracing::info!(
        pool_b = pool_b.len(),
        pool_c = pool_c.len(),
        solved_fraction = campaign.solved_fraction,
        "refine finished"
    );
    Ok(RefineReport {
        pool_a: h.pool_a,
        scored_a: scored,
        pool_b,
        b_members: with_utility,
        pool_c,
        c_members,
        merged,
        unsolved,
        campaign,
        config_digest: digest,
    })
}
