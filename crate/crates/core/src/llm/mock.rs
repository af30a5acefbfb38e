use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Backend, GenRequest, GenResponse, LlmError, RequestTag};
use crate::digest::{derive_seed, unit_float};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Reply {
    Text(String),
    Error,
}

/// One line of a script file. Which key fields are set decides the rule
/// kind; see [`ScriptedMock`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub sample: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot: Option<String>,
    #[serde(default)]
    pub reply: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub backend_error: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default)]
    pub fallback: String,
}

/// Deterministic table-driven backend.
///
/// Lookup order for a request tagged `(sample, context, index, shots)`:
/// exact `(sample, context, index)`, then `(sample, shot)` when the context
/// holds exactly one shot, then `(sample, index)`, then the sample default,
/// then the global fallback. Untagged requests get the fallback.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMock {
    id: String,
    exact: HashMap<(String, String, u32), Reply>,
    one_shot: HashMap<(String, String), Reply>,
    by_index: HashMap<(String, u32), Reply>,
    per_sample: HashMap<String, Reply>,
    fallback: String,
}

impl ScriptedMock {
    pub fn new() -> Self {
        Self {
            id: "mock-scripted".to_string(),
            ..Self::default()
        }
    }

    pub fn from_script(script: &Script) -> Self {
        let mut m = Self::new().fallback(script.fallback.clone());
        for e in &script.entries {
            let reply = if e.backend_error {
                Reply::Error
            } else {
                Reply::Text(e.reply.clone())
            };
            match (&e.context, e.index, &e.shot) {
                (Some(ctx), Some(i), _) => {
                    m.exact.insert((e.sample.clone(), ctx.clone(), i), reply);
                }
                (_, _, Some(shot)) => {
                    m.one_shot.insert((e.sample.clone(), shot.clone()), reply);
                }
                (_, Some(i), _) => {
                    m.by_index.insert((e.sample.clone(), i), reply);
                }
                _ => {
                    m.per_sample.insert(e.sample.clone(), reply);
                }
            }
        }
        m
    }

    pub fn fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = text.into();
        self
    }

    pub fn exact(mut self, sample: &str, context: &str, index: u32, text: impl Into<String>) -> Self {
        self.exact
            .insert((sample.into(), context.into(), index), Reply::Text(text.into()));
        self
    }

    pub fn attempt(mut self, sample: &str, index: u32, text: impl Into<String>) -> Self {
        self.by_index.insert((sample.into(), index), Reply::Text(text.into()));
        self
    }

    pub fn attempt_error(mut self, sample: &str, index: u32) -> Self {
        self.by_index.insert((sample.into(), index), Reply::Error);
        self
    }

    pub fn one_shot(mut self, query: &str, shot: &str, text: impl Into<String>) -> Self {
        self.one_shot
            .insert((query.into(), shot.into()), Reply::Text(text.into()));
        self
    }

    pub fn sample_default(mut self, sample: &str, text: impl Into<String>) -> Self {
        self.per_sample.insert(sample.into(), Reply::Text(text.into()));
        self
    }

    pub fn sample_error(mut self, sample: &str) -> Self {
        self.per_sample.insert(sample.into(), Reply::Error);
        self
    }

    fn lookup(&self, tag: &RequestTag) -> Option<&Reply> {
        let s = &tag.sample_id;
        if let Some(r) = self
            .exact
            .get(&(s.clone(), tag.context_digest.clone(), tag.attempt_index))
        {
            return Some(r);
        }
        if let [shot] = tag.shot_ids.as_slice() {
            if let Some(r) = self.one_shot.get(&(s.clone(), shot.clone())) {
                return Some(r);
            }
        }
        self.by_index
            .get(&(s.clone(), tag.attempt_index))
            .or_else(|| self.per_sample.get(s))
    }
}

impl Backend for ScriptedMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        let reply = req.tag.as_ref().and_then(|t| self.lookup(t));
        match reply {
            Some(Reply::Text(t)) => Ok(GenResponse::single(t.clone(), &self.id)),
            Some(Reply::Error) => Err(LlmError::Backend {
                retryable: false,
                status: Some(500),
                message: "scripted failure".into(),
            }),
            None => Ok(GenResponse::single(self.fallback.clone(), &self.id)),
        }
    }
}

/// Settings for [`ParametricMock`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricConfig {
    pub seed: u64,
    pub base: f64,
    pub gain: f64,
    /// Demonstrations that raise the success probability when in context.
    #[serde(default)]
    pub useful: BTreeSet<String>,
    /// Per-sample replacement for `base`.
    #[serde(default)]
    pub base_overrides: BTreeMap<String, f64>,
    /// Correct completion per sample id.
    #[serde(default)]
    pub solutions: BTreeMap<String, String>,
    /// Share of failures that produce the common wrong answer.
    #[serde(default = "default_common")]
    pub common_share: f64,
    /// Share of failures that produce a scattered wrong answer. The rest
    /// are unparsable completions.
    #[serde(default = "default_other")]
    pub other_share: f64,
}

fn default_common() -> f64 {
    0.5
}

fn default_other() -> f64 {
    0.3
}

impl Default for ParametricConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base: 0.0,
            gain: 0.0,
            useful: BTreeSet::new(),
            base_overrides: BTreeMap::new(),
            solutions: BTreeMap::new(),
            common_share: default_common(),
            other_share: default_other(),
        }
    }
}

/// A simulated model whose success probability is
/// `clamp(base + gain * u, 0, 1)`, with `u` the number of useful shots in
/// the context.
///
/// Draws come from a counter-based generator keyed by the seed, the sample
/// id, the attempt index and the context digest, so results never depend on
/// call order or thread scheduling.
#[derive(Debug, Clone)]
pub struct ParametricMock {
    cfg: ParametricConfig,
}

pub const COMMON_DISTRACTOR: &str = "'distractor'";
pub const INVALID_COMPLETION: &str = "sum(";

impl ParametricMock {
    pub fn new(cfg: ParametricConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &ParametricConfig {
        &self.cfg
    }

    pub fn success_probability(&self, tag: &RequestTag) -> f64 {
        let base = self
            .cfg
            .base_overrides
            .get(&tag.sample_id)
            .copied()
            .unwrap_or(self.cfg.base);
        let u = tag
            .shot_ids
            .iter()
            .filter(|s| self.cfg.useful.contains(*s))
            .count();
        (base + self.cfg.gain * u as f64).clamp(0.0, 1.0)
    }

    fn draw(&self, tag: &RequestTag, stream: &[u8]) -> f64 {
        let bits = derive_seed(
            self.cfg.seed,
            &[
                tag.sample_id.as_bytes(),
                &tag.attempt_index.to_le_bytes(),
                tag.context_digest.as_bytes(),
                stream,
            ],
        );
        unit_float(bits)
    }

    /// The completion this mock returns for `tag`.
    pub fn completion(&self, tag: &RequestTag) -> String {
        let p = self.success_probability(tag);
        if self.draw(tag, b"success") < p {
            if let Some(sol) = self.cfg.solutions.get(&tag.sample_id) {
                return sol.clone();
            }
        }
        let mode = self.draw(tag, b"failure");
        if mode < self.cfg.common_share {
            COMMON_DISTRACTOR.to_string()
        } else if mode < self.cfg.common_share + self.cfg.other_share {
            let r = (self.draw(tag, b"other") * 5.0) as u32;
            format!("'distractor-{r}'")
        } else {
            INVALID_COMPLETION.to_string()
        }
    }
}

impl Backend for ParametricMock {
    fn id(&self) -> &str {
        "mock-parametric"
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        let tag = req.tag.clone().unwrap_or_default();
        Ok(GenResponse::single(self.completion(&tag), self.id()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(sample: &str, idx: u32, shots: &[&str]) -> GenRequest {
        GenRequest::new("prompt").tag(RequestTag {
            sample_id: sample.into(),
            context_digest: format!("ctx-{idx}"),
            attempt_index: idx,
            shot_ids: shots.iter().map(|s| s.to_string()).collect(),
        })
    }

    #[test]
    fn scripted_lookup_order() {
        let m = ScriptedMock::new()
            .fallback("fb")
            .sample_default("x", "default")
            .attempt("x", 3, "third")
            .one_shot("x", "z", "with z")
            .exact("x", "ctx-3", 3, "exact");
        let text = |r: GenRequest| m.generate(&r).unwrap().text().to_string();
        assert_eq!(text(tagged("x", 3, &[])), "exact");
        assert_eq!(text(tagged("x", 5, &["z"])), "with z");
        assert_eq!(text(tagged("x", 5, &["z", "y"])), "default");
        assert_eq!(text(tagged("y", 0, &[])), "fb");
        assert_eq!(text(GenRequest::new("untagged")), "fb");
        // same request twice, same text
        assert_eq!(text(tagged("x", 3, &[])), text(tagged("x", 3, &[])));
    }

    #[test]
    fn script_file_round_trip() {
        let script = Script {
            entries: vec![
                ScriptEntry {
                    sample: "a".into(),
                    context: None,
                    index: Some(2),
                    shot: None,
                    reply: "'ok'".into(),
                    backend_error: false,
                },
                ScriptEntry {
                    sample: "b".into(),
                    context: None,
                    index: None,
                    shot: None,
                    reply: String::new(),
                    backend_error: true,
                },
            ],
            fallback: "sum(".into(),
        };
        let json = serde_json::to_string(&script).unwrap();
        let m = ScriptedMock::from_script(&serde_json::from_str(&json).unwrap());
        assert_eq!(m.generate(&tagged("a", 2, &[])).unwrap().text(), "'ok'");
        assert!(m.generate(&tagged("b", 0, &[])).is_err());
        assert_eq!(m.generate(&tagged("a", 1, &[])).unwrap().text(), "sum(");
    }

    fn success_rate(m: &ParametricMock, shots: &[&str], n: u32) -> f64 {
        let hits = (0..n)
            .filter(|&i| m.generate(&tagged("s", i, shots)).unwrap().text() == "'gold'")
            .count();
        hits as f64 / f64::from(n)
    }

    fn solved(base: f64, gain: f64) -> ParametricMock {
        ParametricMock::new(ParametricConfig {
            seed: 11,
            base,
            gain,
            useful: ["u1", "u2", "u3", "u4"].iter().map(|s| s.to_string()).collect(),
            solutions: [("s".to_string(), "'gold'".to_string())].into(),
            ..ParametricConfig::default()
        })
    }

    #[test]
    fn parametric_zero_never_succeeds() {
        assert_eq!(success_rate(&solved(0.0, 0.0), &["u1", "u2"], 1000), 0.0);
    }

    #[test]
    fn parametric_rate_tracks_closed_form() {
        let m = solved(0.1, 0.05);
        let shots = ["u1", "u2", "u3", "u4", "n1", "n2"];
        let tag = tagged("s", 0, &shots).tag.unwrap();
        assert!((m.success_probability(&tag) - 0.30).abs() < 1e-12);
        let rate = success_rate(&m, &shots, 2000);
        assert!((rate - 0.30).abs() <= 0.03, "rate {rate}");
    }

    #[test]
    fn parametric_clamps_and_overrides() {
        let mut m = solved(0.9, 0.5);
        let tag = tagged("s", 0, &["u1"]).tag.unwrap();
        assert_eq!(m.success_probability(&tag), 1.0);
        m.cfg.base_overrides.insert("s".into(), -1.0);
        assert_eq!(m.success_probability(&tagged("s", 0, &[]).tag.unwrap()), 0.0);
    }

    #[test]
    fn parametric_failure_mix() {
        let m = solved(0.0, 0.0);
        let mut common = 0;
        let mut invalid = 0;
        for i in 0..4000 {
            match m.completion(&tagged("s", i, &[]).tag.unwrap()).as_str() {
                COMMON_DISTRACTOR => common += 1,
                INVALID_COMPLETION => invalid += 1,
                _ => {}
            }
        }
        assert!((common as f64 / 4000.0 - 0.5).abs() < 0.03);
        assert!((invalid as f64 / 4000.0 - 0.2).abs() < 0.03);
    }
}
