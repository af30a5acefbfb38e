//! Domain types shared by every pipeline stage.
//!
//! Everything here is an immutable value once constructed. Constructors
//! validate invariants; serde deserialization routes through the same
//! checks so a loaded corpus is always well-formed.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::answer::{answers_equal, Answer};
use crate::error::DomainError;

/// A rectangular table of text cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawTable {
    #[serde(default)]
    title: Option<String>,
    headers: Vec<String>,
    #[serde(default)]
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = DomainError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.title, raw.headers, raw.rows)
    }
}

impl Table {
    pub fn new(
        title: Option<String>,
        headers: Vec<String>,
        rows: Vec<Vec<String>>,
    ) -> Result<Self, DomainError> {
        if headers.is_empty() {
            return Err(DomainError::EmptyHeaders);
        }
        if let Some(pos) = headers.iter().position(|h| h.trim().is_empty()) {
            return Err(DomainError::BlankHeader(pos));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != headers.len() {
                return Err(DomainError::RaggedRow {
                    row: i,
                    expected: headers.len(),
                    found: row.len(),
                });
            }
        }
        Ok(Self {
            title,
            headers,
            rows,
        })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    FreeText,
    MultiChoice,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    IntegerNumber,
    ExtractiveText,
    DecimalNumber,
    BooleanText,
    OtherText,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(default)]
    pub question_type: QuestionType,
    #[serde(default)]
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

/// One weakly labeled task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSample")]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub answer: Answer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<Table>,
    #[serde(default)]
    pub meta: SampleMeta,
}

#[derive(Deserialize)]
struct RawSample {
    id: String,
    question: String,
    answer: Answer,
    #[serde(default)]
    table: Option<Table>,
    #[serde(default)]
    meta: SampleMeta,
}

impl TryFrom<RawSample> for Sample {
    type Error = DomainError;

    fn try_from(raw: RawSample) -> Result<Self, Self::Error> {
        Sample::new(raw.id, raw.question, raw.answer, raw.table, raw.meta)
    }
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: Answer,
        table: Option<Table>,
        meta: SampleMeta,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let question = question.into();
        if id.is_empty() {
            return Err(DomainError::EmptyId);
        }
        if question.trim().is_empty() {
            return Err(DomainError::EmptyQuestion(id));
        }
        if answer.is_empty() {
            return Err(DomainError::EmptyAnswer(id));
        }
        if meta.question_type == QuestionType::MultiChoice
            && meta.choices.as_ref().is_none_or(|c| c.is_empty())
        {
            return Err(DomainError::MissingChoices(id));
        }
        Ok(Self {
            id,
            question,
            answer,
            table,
            meta,
        })
    }
}

/// Check corpus-level invariants (unique ids).
pub fn check_unique_ids(samples: &[Sample]) -> Result<(), DomainError> {
    let mut seen = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(DomainError::DuplicateId(s.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsKind {
    Program,
    ReasoningChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageTag {
    Dsl,
    Python,
    Freeform,
}

/// The intermediate steps linking a question to its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntermediateSteps {
    pub kind: StepsKind,
    pub body: String,
    pub language_tag: LanguageTag,
}

impl IntermediateSteps {
    /// A DSL program. Fails if the body does not parse.
    pub fn dsl(body: impl Into<String>) -> Result<Self, crate::dsl::ParseError> {
        let body = body.into();
        crate::dsl::parse_program(&body)?;
        Ok(Self {
            kind: StepsKind::Program,
            body,
            language_tag: LanguageTag::Dsl,
        })
    }

    pub fn python(body: impl Into<String>) -> Self {
        Self {
            kind: StepsKind::Program,
            body: body.into(),
            language_tag: LanguageTag::Python,
        }
    }

    pub fn chain(body: impl Into<String>) -> Self {
        Self {
            kind: StepsKind::ReasoningChain,
            body: body.into(),
            language_tag: LanguageTag::Freeform,
        }
    }
}

/// Difficulty `k / n`: the fraction of stochastic attempts that solved a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDifficulty")]
pub struct DifficultyScore {
    k: u32,
    n: u32,
}

#[derive(Deserialize)]
struct RawDifficulty {
    k: u32,
    n: u32,
}

impl TryFrom<RawDifficulty> for DifficultyScore {
    type Error = DomainError;
    fn try_from(raw: RawDifficulty) -> Result<Self, Self::Error> {
        DifficultyScore::new(raw.k, raw.n)
    }
}

impl DifficultyScore {
    pub fn new(k: u32, n: u32) -> Result<Self, DomainError> {
        if n == 0 || k > n {
            return Err(DomainError::BadDifficulty { k, n });
        }
        Ok(Self { k, n })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn value(&self) -> f64 {
        f64::from(self.k) / f64::from(self.n)
    }

    /// Exact test `k/n <= num/den`.
    pub fn at_most(&self, num: u64, den: u64) -> bool {
        u64::from(self.k) * den <= num * u64::from(self.n)
    }

    /// Exact test `k/n < num/den`.
    pub fn below(&self, num: u64, den: u64) -> bool {
        u64::from(self.k) * den < num * u64::from(self.n)
    }
}

/// One-shot utility: how often a demonstration, used alone, solved a hard query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawUtility")]
pub struct UtilityRecord {
    uses: u32,
    solves: u32,
}

#[derive(Deserialize)]
struct RawUtility {
    uses: u32,
    solves: u32,
}

impl TryFrom<RawUtility> for UtilityRecord {
    type Error = DomainError;
    fn try_from(raw: RawUtility) -> Result<Self, Self::Error> {
        UtilityRecord::new(raw.uses, raw.solves)
    }
}

impl UtilityRecord {
    pub fn new(uses: u32, solves: u32) -> Result<Self, DomainError> {
        if solves > uses {
            return Err(DomainError::BadUtility { uses, solves });
        }
        Ok(Self { uses, solves })
    }

    pub fn uses(&self) -> u32 {
        self.uses
    }

    pub fn solves(&self) -> u32 {
        self.solves
    }

    /// `solves / uses`, or 0 when unused.
    pub fn rate(&self) -> f64 {
        if self.uses == 0 {
            0.0
        } else {
            f64::from(self.solves) / f64::from(self.uses)
        }
    }

    /// Exact test `solves/uses >= num/den`.
    pub fn rate_at_least(&self, num: u64, den: u64) -> bool {
        self.uses > 0 && u64::from(self.solves) * den >= num * u64::from(self.uses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Handcrafted,
    Harvested,
}

/// A sample plus verified intermediate steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sample: Sample,
    pub steps: IntermediateSteps,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilityRecord>,
}

impl Demonstration {
    pub fn id(&self) -> &str {
        &self.sample.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Wrong,
    ExecutionError,
    ParseError,
    BackendError,
}

impl Verdict {
    /// Whether the attempt produced a prediction that may vote.
    pub fn is_valid(self) -> bool {
        matches!(self, Verdict::Correct | Verdict::Wrong)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Correct => "correct",
            Verdict::Wrong => "wrong",
            Verdict::ExecutionError => "execution_error",
            Verdict::ParseError => "parse_error",
            Verdict::BackendError => "backend_error",
        };
        f.write_str(s)
    }
}

/// One generation + execution + verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub sample_id: String,
    pub attempt_index: u32,
    pub context_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shot_ids: Vec<String>,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_steps: Option<IntermediateSteps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Answer>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Attempt {
    /// Check the verdict/prediction consistency rules against a gold answer.
    pub fn is_consistent(&self, gold: &Answer) -> bool {
        match (&self.predicted, self.verdict) {
            (Some(p), Verdict::Correct) => answers_equal(p, gold),
            (Some(p), Verdict::Wrong) => !answers_equal(p, gold),
            (None, v) => !v.is_valid(),
            (Some(_), _) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolStage {
    A,
    B,
    C,
    #[serde(rename = "handcrafted")]
    Handcrafted,
    #[serde(rename = "merged")]
    Merged,
}

/// A named, lineage-tracked set of demonstration ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub name: String,
    pub stage: PoolStage,
    pub member_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<String>,
    pub created_with: String,
}

impl Pool {
    pub fn new(
        name: impl Into<String>,
        stage: PoolStage,
        member_ids: impl IntoIterator<Item = String>,
        lineage: Option<&Pool>,
        created_with: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            stage,
            member_ids: member_ids.into_iter().collect(),
            lineage: lineage.map(|p| p.name.clone()),
            created_with: created_with.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn is_subset_of(&self, parent: &Pool) -> bool {
        self.member_ids.is_subset(&parent.member_ids)
    }
}

/// Verify `C ⊆ B ⊆ A` and `A ∩ unsolved = ∅`.
pub fn check_lineage(
    a: &Pool,
    b: &Pool,
    c: &Pool,
    unsolved: &BTreeSet<String>,
) -> Result<(), DomainError> {
    if !b.is_subset_of(a) {
        return Err(DomainError::Lineage(format!("{} is not a subset of {}", b.name, a.name)));
    }
    if !c.is_subset_of(b) {
        return Err(DomainError::Lineage(format!("{} is not a subset of {}", c.name, b.name)));
    }
    if let Some(id) = a.member_ids.intersection(unsolved).next() {
        return Err(DomainError::Lineage(format!("{id} is both in {} and unsolved", a.name)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        Table::new(
            None,
            vec!["Day".into(), "Tickets".into()],
            vec![vec!["Friday".into(), "71".into()]],
        )
        .unwrap()
    }

    #[test]
    fn table_invariants() {
        assert!(matches!(Table::new(None, vec![], vec![]), Err(DomainError::EmptyHeaders)));
        assert!(matches!(
            Table::new(None, vec!["a".into(), " ".into()], vec![]),
            Err(DomainError::BlankHeader(1))
        ));
        assert!(matches!(
            Table::new(None, vec!["a".into()], vec![vec![]]),
            Err(DomainError::RaggedRow { row: 0, .. })
        ));
        assert_eq!(table().column_index("Tickets"), Some(1));
    }

    #[test]
    fn sample_json_schema() {
        let line = r#"{"id":"s1","question":"Which day?","answer":"Friday",
            "table":{"headers":["Day","Tickets"],"rows":[["Friday","71"]]},
            "meta":{"question_type":"free_text","answer_type":"extractive_text","grade":3}}"#;
        let s: Sample = serde_json::from_str(line).unwrap();
        assert_eq!(s.table.unwrap(), table());
        assert_eq!(s.meta.answer_type, AnswerType::ExtractiveText);
        assert_eq!(s.meta.grade, Some(3));
    }

    #[test]
    fn sample_rejects_bad_rows_and_empties() {
        let ragged = r#"{"id":"s","question":"q","answer":"a","table":{"headers":["x"],"rows":[["1","2"]]}}"#;
        assert!(serde_json::from_str::<Sample>(ragged).is_err());
        let empty_q = r#"{"id":"s","question":"  ","answer":"a"}"#;
        assert!(serde_json::from_str::<Sample>(empty_q).is_err());
        let empty_a = r#"{"id":"s","question":"q","answer":""}"#;
        assert!(serde_json::from_str::<Sample>(empty_a).is_err());
        let mc = r#"{"id":"s","question":"q","answer":"a","meta":{"question_type":"multi_choice"}}"#;
        assert!(serde_json::from_str::<Sample>(mc).is_err());
    }

    #[test]
    fn difficulty_bounds() {
        assert!(DifficultyScore::new(0, 0).is_err());
        assert!(DifficultyScore::new(21, 20).is_err());
        let d = DifficultyScore::new(4, 20).unwrap();
        assert!((d.value() - 0.2).abs() < 1e-12);
        assert!(d.at_most(1, 5));
        assert!(!d.below(1, 5));
        assert_eq!(DifficultyScore::new(20, 20).unwrap().value(), 1.0);
    }

    #[test]
    fn utility_bounds() {
        assert!(UtilityRecord::new(3, 4).is_err());
        let u = UtilityRecord::new(100, 13).unwrap();
        assert!((u.rate() - 0.13).abs() < 1e-12);
        assert!(UtilityRecord::new(100, 10).unwrap().rate_at_least(1, 10));
        assert!(!UtilityRecord::new(200, 19).unwrap().rate_at_least(1, 10));
    }

    #[test]
    fn verdict_partition() {
        let all = [
            Verdict::Correct,
            Verdict::Wrong,
            Verdict::ExecutionError,
            Verdict::ParseError,
            Verdict::BackendError,
        ];
        assert_eq!(all.iter().filter(|v| v.is_valid()).count(), 2);
        let gold = Answer::new("71");
        let mut a = Attempt {
            sample_id: "s".into(),
            attempt_index: 0,
            context_id: "c".into(),
            shot_ids: vec![],
            completion: String::new(),
            parsed_steps: None,
            predicted: Some(Answer::new("71.0")),
            verdict: Verdict::Correct,
            error: None,
        };
        assert!(a.is_consistent(&gold));
        a.verdict = Verdict::ExecutionError;
        assert!(!a.is_consistent(&gold));
        a.predicted = None;
        assert!(a.is_consistent(&gold));
    }

    #[test]
    fn lineage_check() {
        let a = Pool::new("pool_a", PoolStage::A, ["x".into(), "y".into()], None, "d");
        let b = Pool::new("pool_b", PoolStage::B, ["x".into()], Some(&a), "d");
        let c = Pool::new("pool_c", PoolStage::C, ["x".into()], Some(&b), "d");
        let unsolved: BTreeSet<String> = ["z".to_string()].into();
        assert!(check_lineage(&a, &b, &c, &unsolved).is_ok());
        let bad: BTreeSet<String> = ["y".to_string()].into();
        assert!(check_lineage(&a, &b, &c, &bad).is_err());
        let c2 = Pool::new("pool_c", PoolStage::C, ["q".into()], Some(&b), "d");
        assert!(check_lineage(&a, &b, &c2, &unsolved).is_err());
    }
}
