//! Answer normalization and the equality predicate used for verification
//! and voting.
//!
//! Canonical form: NFC, trimmed, lowercased. Numeric atoms become exact
//! decimals without thousands separators or trailing fractional zeros.
//! Boolean synonyms collapse to `"1"` / `"0"`. List answers are split on
//! `|` and every part is normalized on its own. Fractions such as `58/141`
//! are kept symbolic.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use unicode_normalization::UnicodeNormalization;

/// Separator for list-valued answers.
pub const LIST_SEPARATOR: char = '|';

/// Result of [`normalize_answer`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Normalized {
    pub normalized: String,
    pub parts: Vec<String>,
}

/// Normalize a raw answer string. Total and idempotent.
pub fn normalize_answer(raw: &str) -> Normalized {
    let text = fold_text(raw);
    let parts: Vec<String> = text.split(LIST_SEPARATOR).map(normalize_atom).collect();
    let normalized = parts.join("|");
    Normalized { normalized, parts }
}

/// NFC + lowercase + trim. This is the text fold used by DSL string
/// predicates as well.
pub fn fold_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let lower = nfc.to_lowercase();
    // lowercasing can emit combining sequences, so recompose.
    let recomposed: String = lower.nfc().collect();
    recomposed.trim().to_string()
}

fn normalize_atom(atom: &str) -> String {
    let atom = atom.trim();
    match atom {
        "yes" | "true" | "entailed" => return "1".to_string(),
        "no" | "false" | "refuted" => return "0".to_string(),
        _ => {}
    }
    canonical_decimal(atom).unwrap_or_else(|| atom.to_string())
}

/// Canonicalize a decimal literal such as `"1,234.50"` or `"+071.0"`.
///
/// Accepts an optional sign, an integer part that is either plain digits or
/// comma-grouped in threes, and an optional fractional part. Returns `None`
/// for anything else.
pub fn canonical_decimal(s: &str) -> Option<String> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = integer_digits(int_part)?;
    if let Some(f) = frac_part {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    let int_trimmed = digits.trim_start_matches('0');
    let int_canon = if int_trimmed.is_empty() { "0" } else { int_trimmed };
    let frac_canon = frac_part.map(|f| f.trim_end_matches('0')).unwrap_or("");

    let mut out = String::with_capacity(s.len());
    let is_zero = int_canon == "0" && frac_canon.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int_canon);
    if !frac_canon.is_empty() {
        out.push('.');
        out.push_str(frac_canon);
    }
    Some(out)
}

fn integer_digits(int_part: &str) -> Option<String> {
    if int_part.is_empty() {
        return None;
    }
    if int_part.bytes().all(|b| b.is_ascii_digit()) {
        return Some(int_part.to_string());
    }
    let groups: Vec<&str> = int_part.split(',').collect();
    let head_ok = (1..=3).contains(&groups[0].len());
    let tail_ok = groups[1..].iter().all(|g| g.len() == 3);
    let all_digits = groups.iter().all(|g| g.bytes().all(|b| b.is_ascii_digit()));
    if groups.len() > 1 && head_ok && tail_ok && all_digits {
        Some(groups.concat())
    } else {
        None
    }
}

/// An answer: the raw text plus its canonical form.
///
/// Serializes as the raw string; the normalized form is recomputed on load.
#[derive(Debug, Clone)]
pub struct Answer {
    raw: String,
    norm: Normalized,
}

impl Answer {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let norm = normalize_answer(&raw);
        Self { raw, norm }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn normalized(&self) -> &str {
        &self.norm.normalized
    }

    pub fn parts(&self) -> &[String] {
        &self.norm.parts
    }

    /// True when the raw text is blank.
    pub fn is_empty(&self) -> bool {
        self.raw.trim().is_empty()
    }
}

/// Ordered part-list equality on canonical forms.
pub fn answers_equal(a: &Answer, b: &Answer) -> bool {
    a.parts() == b.parts()
}

impl PartialEq for Answer {
    fn eq(&self, other: &Self) -> bool {
        answers_equal(self, other)
    }
}

impl Eq for Answer {}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl From<&str> for Answer {
    fn from(s: &str) -> Self {
        Answer::new(s)
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Ok(Answer::new(raw))
    }
}
