//! Embedding-based shot ranking and the good-shot rank analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::answer::fold_text;
use crate::digest::sha256_hex;
use crate::domain::{Demonstration, Sample, Verdict};
use crate::refine::OneShotResult;
use crate::store::Record;

pub const MOCK_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbeddingError {
    #[error("embedding request failed: {0}")]
    Request(String),
    #[error("embedding response malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("rankings and campaign results cover different pools: {0}")]
    MismatchedPools(String),
}

/// Maps texts to unit-norm vectors of a fixed dimension.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Scale to unit length; the zero vector becomes `e_0`.
pub fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Feature-hashed unigram counts over the folded text.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: MOCK_DIM }
    }
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in fold_text(text).split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = Sha256::digest(token.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().unwrap()) % self.dim as u64;
            v[idx as usize] += 1.0;
        }
        l2_normalize(v)
    }
}

impl Embedder for MockEmbedder {
    fn id(&self) -> &str {
        "mock-hashed-unigram"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for `POST {input: [texts]} -> {data: [{embedding}]}` endpoints,
/// with an on-disk cache keyed by backend id and text digest.
pub struct HttpEmbedder {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    cache_dir: Option<PathBuf>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        cache_dir: Option<PathBuf>,
        timeout_secs: u64,
    ) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| EmbeddingError::Request(e.to_string()))?;
        Ok(Self {
            id: format!("http-embed:{model}"),
            url: format!("{}/v1/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key: std::env::var(crate::llm::API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            cache_dir,
            client,
        })
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let backend = sha256_hex(&self.id)[..12].to_string();
        Some(dir.join(backend).join(format!("{}.json", sha256_hex(text))))
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({"model": self.model, "input": texts}));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| EmbeddingError::Request(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbeddingError::Request(format!("status {}", resp.status())));
        }
        let body: EmbedResponse = resp.json().map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbeddingError::Malformed(format!(
                "{} embeddings for {} inputs",
                body.data.len(),
                texts.len()
            )));
        }
        Ok(body.data.into_iter().map(|d| l2_normalize(d.embedding)).collect())
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut out: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| {
                let path = self.cache_path(t)?;
                serde_json::from_slice(&fs::read(path).ok()?).ok()
            })
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.fetch(&batch)?;
            for (&i, v) in missing.iter().zip(fresh) {
                if let Some(path) = self.cache_path(&texts[i]) {
                    let _ = fs::create_dir_all(path.parent().unwrap());
                    let _ = fs::write(&path, serde_json::to_vec(&v).unwrap());
                }
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.unwrap()).collect())
    }
}

/// The embedding input for a sample:
/// `[(headers comma-joined):(first row comma-joined):(question)]`.
pub fn sample_key(s: &Sample) -> String {
    let (headers, row) = match &s.table {
        Some(t) => (
            t.headers().join(","),
            t.rows().first().map(|r| r.join(",")).unwrap_or_default(),
        ),
        None => (String::new(), String::new()),
    };
    format!("[({headers}):({row}):({})]", s.question)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sort `(id, vector)` candidates by cosine with `query`, descending, ties
/// broken by id.
pub fn rank_vectors(query: &[f64], candidates: &[(String, Vec<f64>)]) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = candidates
        .iter()
        .map(|(id, v)| (id.clone(), cosine(query, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Rank a pool against a query.
pub fn rank_pool(
    query: &Sample,
    pool: &[Demonstration],
    embedder: &dyn Embedder,
) -> Result<Vec<(String, f64)>, EmbeddingError> {
    KnnIndex::build(pool, embedder)?.rank(query, embedder)
}

/// Pool embeddings computed once and reused across queries.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    candidates: Vec<(String, Vec<f64>)>,
}

impl KnnIndex {
    pub fn build(pool: &[Demonstration], embedder: &dyn Embedder) -> Result<Self, EmbeddingError> {
        let texts: Vec<String> = pool.iter().map(|d| sample_key(&d.sample)).collect();
        let vecs = embedder.embed(&texts)?;
        Ok(Self {
            candidates: pool.iter().map(|d| d.id().to_string()).zip(vecs).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn rank(&self, query: &Sample, embedder: &dyn Embedder) -> Result<Vec<(String, f64)>, EmbeddingError> {
        let q = embedder.embed(&[sample_key(query)])?.remove(0);
        Ok(rank_vectors(&q, &self.candidates))
    }
}

/// Stored ranking of a pool for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnRanking {
    pub query_id: String,
    pub embedder: String,
    pub ranking: Vec<(String, f64)>,
}

impl Record for KnnRanking {
    const TYPE: &'static str = "knn_ranking";
}

/// Where the shots that solved each query sit in its similarity ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodShotReport {
    /// 0-based ranks of solving shots, per query, ascending.
    pub per_query: BTreeMap<String, Vec<usize>>,
    /// All good-shot ranks scaled to `[0, 1]` by `rank / (P - 1)`.
    pub normalized: Vec<f64>,
    /// Mean of `normalized`; 0.5 means no head bias. `None` without good
    /// shots.
    pub mean_normalized_rank: Option<f64>,
}

impl GoodShotReport {
    /// Counts of normalized ranks in `bins` equal-width bins over `[0, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins.max(1)];
        for &r in &self.normalized {
            let i = ((r * bins as f64) as usize).min(h.len() - 1);
            h[i] += 1;
        }
        h
    }
}

pub fn normalized_rank(rank: usize, pool_size: usize) -> f64 {
    if pool_size <= 1 {
        0.5
    } else {
        rank as f64 / (pool_size - 1) as f64
    }
}

pub fn good_shot_distribution(
    results: &[OneShotResult],
    rankings: &BTreeMap<String, Vec<(String, f64)>>,
) -> Result<GoodShotReport, RankError> {
    let pool: BTreeSet<&str> = results.iter().map(|r| r.shot_id.as_str()).collect();
    let mut positions: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for (q, ranking) in rankings {
        let ids: BTreeMap<&str, usize> = ranking
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.as_str(), i))
            .collect();
        if ids.len() != ranking.len() || !pool.iter().all(|s| ids.contains_key(s)) {
            return Err(RankError::MismatchedPools(format!(
                "ranking for {q} is not a permutation of the campaign pool"
            )));
        }
        if ids.len() != pool.len() {
            return Err(RankError::MismatchedPools(format!(
                "ranking for {q} has {} shots, campaign used {}",
                ids.len(),
                pool.len()
            )));
        }
        positions.insert(q.as_str(), ids);
    }
    let mut per_query: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut normalized = Vec::new();
    for r in results.iter().filter(|r| r.verdict == Verdict::Correct) {
        let ranks = positions.get(r.query_id.as_str()).ok_or_else(|| {
            RankError::MismatchedPools(format!("no ranking for query {}", r.query_id))
        })?;
        let rank = ranks[r.shot_id.as_str()];
        per_query.entry(r.query_id.clone()).or_default().push(rank);
        normalized.push(normalized_rank(rank, ranks.len()));
    }
    for v in per_query.values_mut() {
        v.sort_unstable();
    }
    let mean = (!normalized.is_empty()).then(|| normalized.iter().sum::<f64>() / normalized.len() as f64);
    Ok(GoodShotReport {
        per_query,
        normalized,
        mean_normalized_rank: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::Answer;
    use crate::domain::{Attempt, SampleMeta, Table};

    fn sample(id: &str, q: &str) -> Sample {
        let t = Table::new(
            None,
            vec!["Day".into(), "Tickets".into()],
            vec![vec!["Friday".into(), "71".into()], vec!["Monday".into(), "72".into()]],
        )
        .unwrap();
        Sample::new(id, q, Answer::new("x"), Some(t), SampleMeta::default()).unwrap()
    }

    #[test]
    fn key_format() {
        assert_eq!(
            sample_key(&sample("a", "Which day?")),
            "[(Day,Tickets):(Friday,71):(Which day?)]"
        );
        let bare = Sample::new("b", "2+2?", Answer::new("4"), None, SampleMeta::default()).unwrap();
        assert_eq!(sample_key(&bare), "[():():(2+2?)]");
    }

    #[test]
    fn mock_vectors_are_unit_norm() {
        let m = MockEmbedder::default();
        for text in ["", "  ", "alpha beta beta", "Ünïcode tëxt 123"] {
            let v = m.embed_one(text);
            assert_eq!(v.len(), MOCK_DIM);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.embed_one("")[0], 1.0);
        let a = m.embed_one("red green");
        let b = m.embed_one("green blue");
        assert!((cosine(&a, &b) - cosine(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn ranking_ties_and_identity() {
        let ranked = rank_vectors(
            &[1.0, 0.0],
            &[
                ("b".into(), vec![0.0, 1.0]),
                ("a".into(), vec![0.0, 1.0]),
                ("c".into(), vec![1.0, 0.0]),
            ],
        );
        let ids: Vec<&str> = ranked.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(ranked[1].1, 0.0);
    }

    fn result(shot: &str, query: &str, ok: bool) -> OneShotResult {
        let verdict = if ok { Verdict::Correct } else { Verdict::Wrong };
        OneShotResult {
            shot_id: shot.into(),
            query_id: query.into(),
            verdict,
            config_digest: "d".into(),
            attempt: Attempt {
                sample_id: query.into(),
                attempt_index: 0,
                context_id: String::new(),
                shot_ids: vec![shot.into()],
                completion: String::new(),
                parsed_steps: None,
                predicted: Some(Answer::new("x")),
                verdict,
                error: None,
            },
        }
    }

    #[test]
    fn head_bias_detected() {
        let shots = ["s0", "s1", "s2", "s3", "s4"];
        let ranking: Vec<(String, f64)> = shots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), 1.0 - i as f64 / 10.0))
            .collect();
        let rankings: BTreeMap<String, Vec<(String, f64)>> = [("q".to_string(), ranking)].into();
        let results: Vec<OneShotResult> = shots
            .iter()
            .enumerate()
            .map(|(i, s)| result(s, "q", i < 2))
            .collect();
        let rep = good_shot_distribution(&results, &rankings).unwrap();
        assert_eq!(rep.per_query["q"], vec![0, 1]);
        assert!(rep.mean_normalized_rank.unwrap() < 0.5);
        assert_eq!(rep.histogram(4).iter().sum::<usize>(), 2);

        let short: BTreeMap<String, Vec<(String, f64)>> =
            [("q".to_string(), rankings["q"][..3].to_vec())].into();
        assert!(matches!(
            good_shot_distribution(&results, &short),
            Err(RankError::MismatchedPools(_))
        ));
    }

    #[test]
    fn single_member_pool_is_neutral() {
        assert_eq!(normalized_rank(0, 1), 0.5);
        assert_eq!(normalized_rank(4, 5), 1.0);
    }
}
