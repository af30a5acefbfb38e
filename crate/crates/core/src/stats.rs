//! Analysis tables computed from a run directory and written as CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{Demonstration, UtilityRecord};
use crate::infer::{InferSummary, SUMMARIES};
use crate::refine::{self, load_harvest, score_difficulty, OneShotResult, Ratio, RefineConfig};
use crate::similarity::{good_shot_distribution, GoodShotReport, KnnRanking};
use crate::stage::PipelineError;
use crate::store::{read_pool, scan, RunDir, StoreError};

pub const KNN_RANKS: &str = "knn_ranks.jsonl";
pub const POOL_TABLE_HEADER: [&str; 4] = ["Pool A", "Pool B", "Pool C", "Unsolved Samples"];
pub const RANK_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("pool {0} is missing from the run")]
    MissingPool(String),
    #[error("demonstration {0} has no difficulty score")]
    MissingScore(String),
    #[error("pool sizes are not monotone: A={a}, B={b}, C={c}")]
    NotMonotone { a: usize, b: usize, c: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rank(#[from] crate::similarity::RankError),
    #[error("writing {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `(K, members with k <= K)` for K = 1..=n.
pub fn difficulty_cdf(scored: &[Demonstration], n: u32) -> Result<Vec<(u32, usize)>, StatsError> {
    let mut at = vec![0usize; n as usize + 1];
    for d in scored {
        let s = d.difficulty.ok_or_else(|| StatsError::MissingScore(d.id().to_string()))?;
        at[s.k().min(n) as usize] += 1;
    }
    let mut out = Vec::with_capacity(n as usize);
    // k = 0 members are not in Pool A, but count them from K = 1 if present
    let mut acc = at[0];
    for (k, c) in at.iter().enumerate().skip(1) {
        acc += c;
        out.push((k as u32, acc));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RateBin {
    /// Inclusive lower edge, percent.
    pub lo: u32,
    /// Exclusive upper edge, percent; the last bin also holds 100.
    pub hi: u32,
    pub count: usize,
    /// The bin containing the solve-rate cut.
    pub cut: bool,
}

/// Bin success rates (percent) into `bin_width`-wide bins over `[0, 100]`.
/// Binning uses exact integer arithmetic.
pub fn success_rate_histogram(
    records: &[UtilityRecord],
    bin_width: u32,
    cut: Option<Ratio>,
) -> Vec<RateBin> {
    let w = bin_width.clamp(1, 100);
    let n_bins = 100u32.div_ceil(w);
    let mut bins: Vec<RateBin> = (0..n_bins)
        .map(|i| RateBin {
            lo: i * w,
            hi: ((i + 1) * w).min(100),
            count: 0,
            cut: false,
        })
        .collect();
    for r in records {
        let idx = if r.uses() == 0 {
            0
        } else {
            (100 * r.solves() as u64 / (r.uses() as u64 * w as u64)) as usize
        };
        bins[idx.min(n_bins as usize - 1)].count += 1;
    }
    if let Some(c) = cut {
        let idx = (100 * c.num / (c.den * w as u64)) as usize;
        bins[idx.min(n_bins as usize - 1)].cut = true;
    }
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolTable {
    pub pool_a: usize,
    pub pool_b: usize,
    pub pool_c: usize,
    pub unsolved: usize,
}

impl PoolTable {
    pub fn new(pool_a: usize, pool_b: usize, pool_c: usize, unsolved: usize) -> Result<Self, StatsError> {
        if !(pool_a >= pool_b && pool_b >= pool_c) {
            return Err(StatsError::NotMonotone {
                a: pool_a,
                b: pool_b,
                c: pool_c,
            });
        }
        Ok(Self {
            pool_a,
            pool_b,
            pool_c,
            unsolved,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(POOL_TABLE_HEADER).unwrap();
        w.write_record([self.pool_a, self.pool_b, self.pool_c, self.unsolved].map(|n| n.to_string()))
            .unwrap();
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

fn pool_len(path: &Path, name: &str) -> Result<usize, StatsError> {
    if !path.exists() {
        return Err(StatsError::MissingPool(name.to_string()));
    }
    Ok(read_pool(path)?.0.len())
}

/// Counts read from the stored pools.
pub fn pool_table(run: &RunDir) -> Result<PoolTable, StatsError> {
    let a = pool_len(&run.pool_a(), "pool_a")?;
    let b = pool_len(&run.pool_b(), "pool_b")?;
    let c = pool_len(&run.pool_c(), "pool_c")?;
    if !run.unsolved().exists() {
        return Err(StatsError::MissingPool("unsolved".into()));
    }
    let u = scan::<crate::domain::Sample>(run.unsolved())?.records.len();
    PoolTable::new(a, b, c, u)
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), StatsError> {
    let err = |source| StatsError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| StatsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// The analysis artifacts of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub difficulty_cdf: Vec<(u32, usize)>,
    pub shot_hist: Vec<RateBin>,
    pub pool_table: PoolTable,
    pub good_shots: Option<GoodShotReport>,
    pub shots_curve: Vec<InferSummary>,
}

/// Campaign results of the refine config that produced Pool B.
fn campaign_results(run: &RunDir) -> Result<(Vec<OneShotResult>, Option<Ratio>), StatsError> {
    let Some(m) = run.read_manifest(refine::STAGE)?.filter(|m| m.complete) else {
        return Ok((Vec::new(), None));
    };
    let cut = run
        .configs(refine::STAGE)?
        .get(&m.config_digest)
        .and_then(|v| serde_json::from_value::<RefineConfig>(v.clone()).ok())
        .map(|c| c.min_solve_rate);
    let results = scan::<OneShotResult>(run.one_shot_results())?
        .records
        .into_iter()
        .filter(|r| r.config_digest == m.config_digest)
        .collect();
    Ok((results, cut))
}

pub fn compute(run: &RunDir, bin_width: u32) -> Result<RunStats, StatsError> {
    let h = load_harvest(run)?;
    let scored = score_difficulty(&h.attempts, &h.demonstrations, h.attempts_per_sample)?;
    let difficulty_cdf = difficulty_cdf(&scored, h.attempts_per_sample)?;
    let pool_table = pool_table(run)?;

    let (_, b_members) = read_pool(run.pool_b())?;
    let utility: Vec<UtilityRecord> = b_members.iter().map(|d| d.utility.unwrap_or_default()).collect();
    let (results, cut) = campaign_results(run)?;
    let shot_hist = success_rate_histogram(&utility, bin_width, cut);

    let ranks_path = run.join(KNN_RANKS);
    let good_shots = if ranks_path.exists() && !results.is_empty() {
        let rankings: BTreeMap<String, Vec<(String, f64)>> = scan::<KnnRanking>(&ranks_path)?
            .records
            .into_iter()
            .map(|r| (r.query_id, r.ranking))
            .collect();
        // rankings may cover only some of the campaign's queries
        let ranked: Vec<OneShotResult> = results
            .iter()
            .filter(|r| rankings.contains_key(&r.query_id))
            .cloned()
            .collect();
        Some(good_shot_distribution(&ranked, &rankings)?)
    } else {
        None
    };

    let mut shots_curve = scan::<InferSummary>(run.join(SUMMARIES))?.records;
    shots_curve.sort_by(|a, b| {
        (&a.pool, a.selection as u8, a.n_shots, a.n_attempts).cmp(&(&b.pool, b.selection as u8, b.n_shots, b.n_attempts))
    });
    Ok(RunStats {
        difficulty_cdf,
        shot_hist,
        pool_table,
        good_shots,
        shots_curve,
    })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    pool: &'a str,
    selection: &'a str,
    n_shots: usize,
    n_attempts: u32,
    n_queries: usize,
    accuracy: f64,
    tie_rate: f64,
    valid_rate: f64,
}

/// Write difficulty_cdf.csv, shot_hist.csv, pool_table.csv,
/// knn_rank_dist.csv and shots_curve.csv into `out`.
pub fn write_all(stats: &RunStats, out: &Path) -> Result<(), StatsError> {
    fs::create_dir_all(out).map_err(|source| StatsError::Io {
        path: out.display().to_string(),
        source,
    })?;
    write_csv(&out.join("difficulty_cdf.csv"), &["k", "count"], &stats.difficulty_cdf)?;
    write_csv(&out.join("shot_hist.csv"), &["lo", "hi", "count", "cut"], &stats.shot_hist)?;
    fs::write(out.join("pool_table.csv"), stats.pool_table.to_csv()).map_err(|source| StatsError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let rank_rows: Vec<(f64, f64, usize)> = match &stats.good_shots {
        Some(g) => g
            .histogram(RANK_BINS)
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 / RANK_BINS as f64, (i + 1) as f64 / RANK_BINS as f64, c))
            .collect(),
        None => Vec::new(),
    };
    write_csv(&out.join("knn_rank_dist.csv"), &["lo", "hi", "count"], &rank_rows)?;
    let curve: Vec<CurveRow> = stats
        .shots_curve
        .iter()
        .map(|s| CurveRow {
            pool: &s.pool,
            selection: match s.selection {
                crate::infer::ShotSelection::Random => "random",
                crate::infer::ShotSelection::Knn => "knn",
            },
            n_shots: s.n_shots,
            n_attempts: s.n_attempts,
            n_queries: s.n_queries,
            accuracy: s.accuracy,
            tie_rate: s.tie_rate,
            valid_rate: s.valid_rate,
        })
        .collect();
    write_csv(
        &out.join("shots_curve.csv"),
        &["pool", "selection", "n_shots", "n_attempts", "n_queries", "accuracy", "tie_rate", "valid_rate"],
        &curve,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::Answer;
    use crate::domain::{DifficultyScore, IntermediateSteps, Provenance, Sample, SampleMeta};

    fn scored(k: u32, n: u32, i: usize) -> Demonstration {
        Demonstration {
            sample: Sample::new(format!("s{i}"), "q?", Answer::new("1"), None, SampleMeta::default()).unwrap(),
            steps: IntermediateSteps::dsl("1").unwrap(),
            provenance: Provenance::Harvested,
            difficulty: Some(DifficultyScore::new(k, n).unwrap()),
            utility: None,
        }
    }

    #[test]
    fn cdf_all_easy() {
        let pool: Vec<Demonstration> = (0..5).map(|i| scored(20, 20, i)).collect();
        let cdf = difficulty_cdf(&pool, 20).unwrap();
        assert_eq!(cdf.len(), 20);
        assert!(cdf[..19].iter().all(|&(_, c)| c == 0));
        assert_eq!(cdf[19], (20, 5));
    }

    #[test]
    fn cdf_requires_scores() {
        let mut d = scored(1, 20, 0);
        d.difficulty = None;
        assert!(matches!(difficulty_cdf(&[d], 20), Err(StatsError::MissingScore(_))));
    }

    #[test]
    fn histogram_edges() {
        let u = |uses, solves| UtilityRecord::new(uses, solves).unwrap();
        let bins = success_rate_histogram(&[u(100, 10), u(100, 9), u(10, 10), u(0, 0)], 5, Some(Ratio::new(1, 10)));
        assert_eq!(bins.len(), 20);
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[1].count, 1);
        assert_eq!(bins[2].count, 1);
        assert!(bins[2].cut);
        assert_eq!(bins[19].count, 1);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
        let one = success_rate_histogram(&[u(3, 1)], 10, None);
        assert_eq!(one.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn pool_table_layout() {
        let t = PoolTable::new(2057, 429, 135, 1433).unwrap();
        assert_eq!(t.to_csv(), "Pool A,Pool B,Pool C,Unsolved Samples\n2057,429,135,1433\n");
        assert_eq!(
            PoolTable::new(0, 0, 0, 0).unwrap().to_csv(),
            "Pool A,Pool B,Pool C,Unsolved Samples\n0,0,0,0\n"
        );
        assert!(matches!(PoolTable::new(1, 2, 0, 0), Err(StatsError::NotMonotone { .. })));
    }
}
