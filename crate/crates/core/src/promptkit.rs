//! Prompt serialization and context assembly.
//!
//! Two serializations exist. The full format declares the table with typed
//! columns, then shows up to three rows inside a `/* ... */` block:
//!
//! ```text
//! CREATE TABLE Ticket sales(
//! 	Day text,
//! 	Tickets int)
//! /*
//! 3 example rows:
//! SELECT * FROM w LIMIT 3;
//! Day	Tickets
//! Friday	71
//! Saturday	74
//! Sunday	75
//! */
//! Q: Which day had the fewest tickets?
//! Program:
//! argmin(to_number(w['Tickets']) -> w['Day'])
//! ```
//!
//! The compact format keeps one data row, the question and the steps:
//!
//! ```text
//! Friday	71
//! Q: Which day had the fewest tickets?
//! Program:
//! argmin(to_number(w['Tickets']) -> w['Day'])
//! ```
//!
//! A context is the instruction header, the shots, and the query, separated
//! by blank lines. The query ends with the steps label so the model
//! continues with a body.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::canonical_decimal;
use crate::digest::sha256_hex;
use crate::domain::{Demonstration, IntermediateSteps, LanguageTag, Sample, StepsKind, Table};
use crate::llm::TokenCounter;

/// Embedded in run logs so stored context digests stay interpretable.
pub const FORMAT_VERSION: &str = "demo-forge-prompt/1";

pub const DEFAULT_TOKEN_BUDGET: usize = 16_000;

pub const DEFAULT_INSTRUCTION: &str = "Answer each question about its table with a program over the table w.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerializationFormat {
    #[default]
    Full,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeFilter {
    #[default]
    None,
    /// Same question type as the query.
    QType,
    /// Same question type and answer type as the query.
    QaType,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("sample {0} has no table")]
    MissingTable(String),
    #[error("no demonstration in the pool passes the type filter")]
    EmptyEligiblePool,
    #[error("query {id} alone needs {tokens} tokens, budget is {budget}")]
    QueryAloneExceedsBudget { id: String, tokens: usize, budget: usize },
}

/// Static prompt settings: the fixed instruction header, the steps
/// language the model is asked for, and whether tables are mandatory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStyle {
    pub instruction: String,
    pub language: LanguageTag,
    pub tabular: bool,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            language: LanguageTag::Dsl,
            tabular: true,
        }
    }
}

impl PromptStyle {
    pub fn steps_label(&self) -> &'static str {
        steps_label(self.language)
    }
}

fn steps_label(lang: LanguageTag) -> &'static str {
    match lang {
        LanguageTag::Dsl => "Program:",
        LanguageTag::Python => "Python:",
        LanguageTag::Freeform => "Reasoning:",
    }
}

/// Tabs and line breaks inside cells would break the row layout.
fn clean(cell: &str) -> String {
    cell.split(['\t', '\n', '\r']).collect::<Vec<_>>().join(" ")
}

fn row_line(cells: &[String]) -> String {
    cells.iter().map(|c| clean(c)).collect::<Vec<_>>().join("\t")
}

/// `int`, `real` or `text`, judged from the non-empty cells of a column.
pub fn column_type(table: &Table, col: usize) -> &'static str {
    let mut saw_value = false;
    let mut all_int = true;
    for row in table.rows() {
        let cell = row[col].trim();
        if cell.is_empty() {
            continue;
        }
        saw_value = true;
        match canonical_decimal(cell) {
            Some(c) if c.contains('.') => all_int = false,
            Some(_) => {}
            None => return "text",
        }
    }
    match (saw_value, all_int) {
        (false, _) => "text",
        (true, true) => "int",
        (true, false) => "real",
    }
}

fn table_full(table: &Table, out: &mut String) {
    let title = table.title.as_deref().map(clean).unwrap_or_else(|| "w".to_string());
    out.push_str(&format!("CREATE TABLE {title}(\n"));
    let cols: Vec<String> = table
        .headers()
        .iter()
        .enumerate()
        .map(|(i, h)| format!("\t{} {}", clean(h), column_type(table, i)))
        .collect();
    out.push_str(&cols.join(",\n"));
    out.push_str(")\n/*\n3 example rows:\nSELECT * FROM w LIMIT 3;\n");
    out.push_str(&row_line(table.headers()));
    out.push('\n');
    for row in table.rows().iter().take(3) {
        out.push_str(&row_line(row));
        out.push('\n');
    }
    out.push_str("*/\n");
}

fn table_compact(table: &Table, out: &mut String) {
    if let Some(row) = table.rows().first() {
        out.push_str(&row_line(row));
        out.push('\n');
    }
}

fn serialize_sample(
    sample: &Sample,
    format: SerializationFormat,
    tabular: bool,
    out: &mut String,
) -> Result<(), PromptError> {
    match (&sample.table, format) {
        (Some(t), SerializationFormat::Full) => table_full(t, out),
        (Some(t), SerializationFormat::Compact) => table_compact(t, out),
        (None, _) if tabular => return Err(PromptError::MissingTable(sample.id.clone())),
        (None, _) => {}
    }
    out.push_str("Q: ");
    out.push_str(&clean(sample.question.trim()));
    out.push('\n');
    Ok(())
}

fn steps_text(steps: &IntermediateSteps) -> String {
    // blank lines separate shots, so a body may not contain one
    let body: Vec<&str> = steps
        .body
        .trim()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .collect();
    format!("{}\n{}", steps_label(steps.language_tag), body.join("\n"))
}

/// Serialize a demonstration in the requested format.
pub fn serialize_demo(
    d: &Demonstration,
    format: SerializationFormat,
    tabular: bool,
) -> Result<String, PromptError> {
    let mut out = String::new();
    serialize_sample(&d.sample, format, tabular, &mut out)?;
    out.push_str(&steps_text(&d.steps));
    Ok(out)
}

pub fn serialize_full(d: &Demonstration) -> Result<String, PromptError> {
    serialize_demo(d, SerializationFormat::Full, true)
}

pub fn serialize_compact(d: &Demonstration) -> Result<String, PromptError> {
    serialize_demo(d, SerializationFormat::Compact, true)
}

/// Serialize a query: the sample followed by the bare steps label.
pub fn serialize_query(
    q: &Sample,
    format: SerializationFormat,
    style: &PromptStyle,
) -> Result<String, PromptError> {
    let mut out = String::new();
    serialize_sample(q, format, style.tabular, &mut out)?;
    out.push_str(style.steps_label());
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub n_shots: usize,
    pub format: SerializationFormat,
    pub token_budget: usize,
    pub type_filter: TypeFilter,
    pub rng_seed: u64,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self {
            n_shots: 20,
            format: SerializationFormat::Full,
            token_budget: DEFAULT_TOKEN_BUDGET,
            type_filter: TypeFilter::None,
            rng_seed: 0,
        }
    }
}

/// A context ready to send: `text` is everything before the query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledContext {
    pub shot_ids: Vec<String>,
    pub text: String,
    pub digest: String,
    pub token_estimate: usize,
    pub prompt: String,
}

/// A pool resolved to demonstrations, in id order.
#[derive(Debug, Clone, Default)]
pub struct ShotPool {
    demos: Vec<Demonstration>,
}

impl ShotPool {
    pub fn new(demos: impl IntoIterator<Item = Demonstration>) -> Self {
        let by_id: BTreeMap<String, Demonstration> =
            demos.into_iter().map(|d| (d.id().to_string(), d)).collect();
        Self {
            demos: by_id.into_values().collect(),
        }
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.demos
            .binary_search_by(|d| d.id().cmp(id))
            .ok()
            .map(|i| &self.demos[i])
    }

    /// Demonstrations a query may see: type-compatible and not the query
    /// itself.
    pub fn eligible(&self, query: &Sample, filter: TypeFilter) -> Vec<&Demonstration> {
        self.demos
            .iter()
            .filter(|d| d.id() != query.id)
            .filter(|d| passes_filter(&d.sample, query, filter))
            .collect()
    }
}

pub fn passes_filter(shot: &Sample, query: &Sample, filter: TypeFilter) -> bool {
    match filter {
        TypeFilter::None => true,
        TypeFilter::QType => shot.meta.question_type == query.meta.question_type,
        TypeFilter::QaType => {
            shot.meta.question_type == query.meta.question_type
                && shot.meta.answer_type == query.meta.answer_type
        }
    }
}

fn header(style: &PromptStyle) -> String {
    let mut text = style.instruction.trim().to_string();
    if !text.is_empty() {
        text.push_str("\n\n");
    }
    text
}

/// Build a context from an explicit, ordered shot list, dropping shots from
/// the tail until the prompt fits the budget.
pub fn build_context(
    shots: &[&Demonstration],
    query: &Sample,
    format: SerializationFormat,
    token_budget: usize,
    style: &PromptStyle,
    counter: &dyn TokenCounter,
) -> Result<AssembledContext, PromptError> {
    let query_text = serialize_query(query, format, style)?;
    let head = header(style);
    let alone = counter.count(&format!("{head}{query_text}"));
    if alone > token_budget {
        return Err(PromptError::QueryAloneExceedsBudget {
            id: query.id.clone(),
            tokens: alone,
            budget: token_budget,
        });
    }
    let mut blocks = Vec::with_capacity(shots.len());
    for s in shots {
        blocks.push(serialize_demo(s, format, style.tabular)?);
    }
    let mut keep = blocks.len();
    loop {
        let mut text = head.clone();
        for b in &blocks[..keep] {
            text.push_str(b);
            text.push_str("\n\n");
        }
        let prompt = format!("{text}{query_text}");
        let tokens = counter.count(&prompt);
        if tokens <= token_budget {
            return Ok(AssembledContext {
                shot_ids: shots[..keep].iter().map(|d| d.id().to_string()).collect(),
                digest: sha256_hex(&text),
                text,
                token_estimate: tokens,
                prompt,
            });
        }
        // the zero-shot prompt fits, so this terminates
        keep -= 1;
    }
}

/// Sample `n_shots` eligible shots uniformly without replacement (in
/// sampling order) and build the context.
///
/// When fewer than `n_shots` shots are eligible, all of them are used in a
/// random order.
pub fn assemble_context(
    spec: &ContextSpec,
    pool: &ShotPool,
    query: &Sample,
    style: &PromptStyle,
    counter: &dyn TokenCounter,
) -> Result<AssembledContext, PromptError> {
    let eligible = pool.eligible(query, spec.type_filter);
    if eligible.is_empty() && spec.n_shots > 0 {
        return Err(PromptError::EmptyEligiblePool);
    }
    let n = spec.n_shots.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let picked: Vec<&Demonstration> = index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    build_context(&picked, query, spec.format, spec.token_budget, style, counter)
}

/// Pull the steps body out of a raw completion: everything up to the first
/// blank line, trimmed.
pub fn completion_body(completion: &str) -> &str {
    let text = completion.trim_start_matches(['\n', '\r']);
    let end = text.find("\n\n").unwrap_or(text.len());
    text[..end].trim()
}

/// Wrap a completion body as intermediate steps of the style's language.
/// DSL bodies are returned unparsed; verification parses them.
pub fn steps_from_completion(completion: &str, style: &PromptStyle) -> IntermediateSteps {
    let body = completion_body(completion).to_string();
    match style.language {
        LanguageTag::Dsl => IntermediateSteps {
            kind: StepsKind::Program,
            body,
            language_tag: LanguageTag::Dsl,
        },
        LanguageTag::Python => IntermediateSteps::python(body),
        LanguageTag::Freeform => IntermediateSteps::chain(body),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::Answer;
    use crate::domain::{AnswerType, Provenance, QuestionType, SampleMeta};
    use crate::llm::ByteEstimator;

    fn tickets() -> Demonstration {
        let table = Table::new(
            Some("Ticket sales".into()),
            vec!["Day".into(), "Tickets".into()],
            [["Friday", "71"], ["Saturday", "74"], ["Sunday", "75"], ["Monday", "72"]]
                .iter()
                .map(|r| r.iter().map(|c| c.to_string()).collect())
                .collect(),
        )
        .unwrap();
        Demonstration {
            sample: Sample::new(
                "t1",
                "Which day had the fewest tickets?",
                Answer::new("Friday"),
                Some(table),
                SampleMeta::default(),
            )
            .unwrap(),
            steps: IntermediateSteps::dsl("argmin(to_number(w['Tickets']) -> w['Day'])").unwrap(),
            provenance: Provenance::Handcrafted,
            difficulty: None,
            utility: None,
        }
    }

    #[test]
    fn full_and_compact_layout() {
        let d = tickets();
        let full = serialize_full(&d).unwrap();
        assert_eq!(
            full,
            "CREATE TABLE Ticket sales(\n\tDay text,\n\tTickets int)\n/*\n3 example rows:\n\
             SELECT * FROM w LIMIT 3;\nDay\tTickets\nFriday\t71\nSaturday\t74\nSunday\t75\n*/\n\
             Q: Which day had the fewest tickets?\nProgram:\nargmin(to_number(w['Tickets']) -> w['Day'])"
        );
        let compact = serialize_compact(&d).unwrap();
        assert_eq!(
            compact,
            "Friday\t71\nQ: Which day had the fewest tickets?\nProgram:\nargmin(to_number(w['Tickets']) -> w['Day'])"
        );
        assert!(compact.len() < full.len());
    }

    #[test]
    fn zero_rows_and_missing_table() {
        let mut d = tickets();
        d.sample.table = Some(Table::new(None, vec!["A".into()], vec![]).unwrap());
        let full = serialize_full(&d).unwrap();
        assert!(full.starts_with("CREATE TABLE w(\n\tA text)\n/*\n3 example rows:\nSELECT * FROM w LIMIT 3;\nA\n*/\nQ: "));
        d.sample.table = None;
        assert_eq!(serialize_full(&d), Err(PromptError::MissingTable("t1".into())));
        assert!(serialize_demo(&d, SerializationFormat::Full, false)
            .unwrap()
            .starts_with("Q: "));
    }

    #[test]
    fn column_types() {
        let t = Table::new(
            None,
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec!["1".into(), "1.5".into(), "x".into()],
                vec!["1,000".into(), "".into(), "2".into()],
            ],
        )
        .unwrap();
        assert_eq!(column_type(&t, 0), "int");
        assert_eq!(column_type(&t, 1), "real");
        assert_eq!(column_type(&t, 2), "text");
    }

    fn demo(id: &str, q: QuestionType, a: AnswerType) -> Demonstration {
        let mut d = tickets();
        d.sample.id = id.into();
        d.sample.meta = SampleMeta {
            question_type: q,
            answer_type: a,
            ..SampleMeta::default()
        };
        d
    }

    #[test]
    fn seeded_sampling_and_filters() {
        let pool = ShotPool::new((0..135).map(|i| {
            let q = if i % 2 == 0 { QuestionType::FreeText } else { QuestionType::MultiChoice };
            let a = if i % 3 == 0 { AnswerType::IntegerNumber } else { AnswerType::ExtractiveText };
            demo(&format!("d{i:03}"), q, a)
        }));
        let query = demo("query", QuestionType::FreeText, AnswerType::IntegerNumber).sample;
        let spec = ContextSpec {
            n_shots: 20,
            rng_seed: 5,
            format: SerializationFormat::Compact,
            ..ContextSpec::default()
        };
        let style = PromptStyle::default();
        let a = assemble_context(&spec, &pool, &query, &style, &ByteEstimator).unwrap();
        let b = assemble_context(&spec, &pool, &query, &style, &ByteEstimator).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shot_ids.len(), 20);
        assert!(a.prompt.ends_with("Q: Which day had the fewest tickets?\nProgram:\n"));

        let qa = ContextSpec {
            type_filter: TypeFilter::QaType,
            ..spec.clone()
        };
        let c = assemble_context(&qa, &pool, &query, &style, &ByteEstimator).unwrap();
        assert!(!c.shot_ids.is_empty());
        for id in &c.shot_ids {
            let s = &pool.get(id).unwrap().sample;
            assert_eq!(s.meta.question_type, QuestionType::FreeText);
            assert_eq!(s.meta.answer_type, AnswerType::IntegerNumber);
        }
    }

    #[test]
    fn budget_drops_from_tail() {
        let pool = ShotPool::new((0..10).map(|i| demo(&format!("d{i}"), QuestionType::None, AnswerType::None)));
        let query = tickets().sample;
        let style = PromptStyle::default();
        let unlimited = ContextSpec {
            n_shots: 10,
            rng_seed: 1,
            token_budget: 1_000_000,
            ..ContextSpec::default()
        };
        let all = assemble_context(&unlimited, &pool, &query, &style, &ByteEstimator).unwrap();
        let tight = ContextSpec {
            token_budget: all.token_estimate / 2,
            ..unlimited
        };
        let cut = assemble_context(&tight, &pool, &query, &style, &ByteEstimator).unwrap();
        assert!(cut.token_estimate <= tight.token_budget);
        assert!(!cut.shot_ids.is_empty() && cut.shot_ids.len() < 10);
        assert_eq!(cut.shot_ids[..], all.shot_ids[..cut.shot_ids.len()]);

        let tiny = ContextSpec {
            token_budget: 5,
            ..tight
        };
        assert!(matches!(
            assemble_context(&tiny, &pool, &query, &style, &ByteEstimator),
            Err(PromptError::QueryAloneExceedsBudget { .. })
        ));
    }

    #[test]
    fn query_is_never_its_own_shot() {
        let pool = ShotPool::new([tickets()]);
        let spec = ContextSpec {
            n_shots: 3,
            ..ContextSpec::default()
        };
        assert_eq!(
            assemble_context(&spec, &pool, &tickets().sample, &PromptStyle::default(), &ByteEstimator),
            Err(PromptError::EmptyEligiblePool)
        );
    }

    #[test]
    fn completion_body_cuts_at_blank_line() {
        assert_eq!(completion_body("\n count(w['a']) \n\nQ: next"), "count(w['a'])");
        assert_eq!(completion_body("x = 1;\nx"), "x = 1;\nx");
        assert_eq!(completion_body(""), "");
    }
}
