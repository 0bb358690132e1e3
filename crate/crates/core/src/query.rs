//! Structured queries and their textual syntax:
//! `base text +(contents:"w") -(title:"w") w ...`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::text::normalize_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Plus,
    Minus,
}

impl Op {
    pub fn symbol(self) -> char {
        match self {
            Op::Plus => '+',
            Op::Minus => '-',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Title,
    Contents,
}

impl Field {
    pub const ALL: [Field; 2] = [Field::Title, Field::Contents];

    pub fn name(self) -> &'static str {
        match self {
            Field::Title => "title",
            Field::Contents => "contents",
        }
    }
}

/// One query refinement: a bare (disjunctive) term, a field-scoped `+`/`-`
/// term, or the terminal STOP action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Refinement {
    Or(String),
    Term { op: Op, field: Field, term: String },
    Stop,
}

impl Refinement {
    pub fn or(term: impl Into<String>) -> Self {
        Refinement::Or(term.into())
    }

    pub fn must(field: Field, term: impl Into<String>) -> Self {
        Refinement::Term {
            op: Op::Plus,
            field,
            term: term.into(),
        }
    }

    pub fn must_not(field: Field, term: impl Into<String>) -> Self {
        Refinement::Term {
            op: Op::Minus,
            field,
            term: term.into(),
        }
    }

    pub fn term(&self) -> Option<&str> {
        match self {
            Refinement::Or(t) | Refinement::Term { term: t, .. } => Some(t),
            Refinement::Stop => None,
        }
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, Refinement::Stop)
    }

    /// `+(field:"term")`, `-(field:"term")`, the bare term, or "" for STOP.
    pub fn render(&self) -> String {
        match self {
            Refinement::Or(t) => t.clone(),
            Refinement::Term { op, field, term } => {
                format!("{}({}:\"{}\")", op.symbol(), field.name(), term)
            }
            Refinement::Stop => String::new(),
        }
    }

    /// Parses a single refinement clause. The literal `STOP` is accepted
    /// here (but never inside a full query string).
    pub fn parse(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        if trimmed == "STOP" {
            return Ok(Refinement::Stop);
        }
        let lead = s.len() - s.trim_start().len();
        if trimmed.is_empty() || trimmed.contains(char::is_whitespace) {
            return Err(Error::parse(0, "a refinement is a single clause"));
        }
        parse_clause(trimmed, s[..lead].chars().count())
    }
}

impl fmt::Display for Refinement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Refinement::Stop => f.write_str("STOP"),
            r => f.write_str(&r.render()),
        }
    }
}

impl Serialize for Refinement {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Refinement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Refinement::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Base question text plus an ordered list of refinements (never STOP).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct StructuredQuery {
    pub base: String,
    pub refinements: Vec<Refinement>,
}

impl StructuredQuery {
    pub fn new(base: impl Into<String>) -> Self {
        StructuredQuery {
            base: base.into(),
            refinements: Vec::new(),
        }
    }

    pub fn with(mut self, r: Refinement) -> Self {
        self.push(r);
        self
    }

    pub fn push(&mut self, r: Refinement) {
        assert!(!r.is_stop(), "STOP is not part of a query");
        self.refinements.push(r);
    }

    pub fn base_tokens(&self) -> Vec<String> {
        normalize_text(&self.base)
    }

    pub fn render(&self) -> String {
        let mut out = self.base.split_whitespace().collect::<Vec<_>>().join(" ");
        for r in &self.refinements {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&r.render());
        }
        out
    }

    /// Parses the external query syntax. Everything before the first
    /// operator clause is base text, so bare terms that precede any operator
    /// clause are folded into the base; use [`StructuredQuery::parse_with_base`]
    /// when the base question is known.
    pub fn parse(s: &str) -> Result<Self> {
        let chunks = chunks(s);
        let first_op = chunks
            .iter()
            .position(|(_, c)| looks_like_operator(c))
            .unwrap_or(chunks.len());
        let base = chunks[..first_op]
            .iter()
            .map(|(_, c)| *c)
            .collect::<Vec<_>>()
            .join(" ");
        let refinements = chunks[first_op..]
            .iter()
            .map(|(off, c)| parse_clause(c, *off))
            .collect::<Result<Vec<_>>>()?;
        Ok(StructuredQuery { base, refinements })
    }

    /// Parses `s` as `base` followed only by refinement clauses.
    pub fn parse_with_base(base: &str, s: &str) -> Result<Self> {
        let want: Vec<&str> = base.split_whitespace().collect();
        let chunks = chunks(s);
        if chunks.len() < want.len() || chunks.iter().zip(&want).any(|((_, c), w)| c != w) {
            return Err(Error::parse(0, "query does not start with the base question"));
        }
        let refinements = chunks[want.len()..]
            .iter()
            .map(|(off, c)| parse_clause(c, *off))
            .collect::<Result<Vec<_>>>()?;
        Ok(StructuredQuery {
            base: want.join(" "),
            refinements,
        })
    }
}

impl fmt::Display for StructuredQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Whitespace-separated chunks with their character offsets.
fn chunks(s: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    let mut char_idx = 0;
    for (byte, ch) in s.char_indices() {
        if ch.is_whitespace() {
            if let Some((b, c)) = start.take() {
                out.push((c, &s[b..byte]));
            }
        } else if start.is_none() {
            start = Some((byte, char_idx));
        }
        char_idx += 1;
    }
    if let Some((b, c)) = start {
        out.push((c, &s[b..]));
    }
    out
}

fn looks_like_operator(chunk: &str) -> bool {
    let b = chunk.as_bytes();
    b.len() >= 2 && (b[0] == b'+' || b[0] == b'-') && b[1] == b'('
}

fn single_token(raw: &str, offset: usize) -> Result<String> {
    let mut toks = normalize_text(raw);
    match toks.len() {
        1 => Ok(toks.pop().unwrap()),
        0 => Err(Error::parse(offset, format!("term {raw:?} has no alphanumeric content"))),
        _ => Err(Error::parse(offset, format!("term {raw:?} is more than one token"))),
    }
}

fn parse_clause(chunk: &str, offset: usize) -> Result<Refinement> {
    if !(chunk.starts_with('+') || chunk.starts_with('-')) {
        return Ok(Refinement::Or(single_token(chunk, offset)?));
    }
    let op = if chunk.starts_with('+') { Op::Plus } else { Op::Minus };
    let rest = &chunk[1..];
    let inner = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| Error::parse(offset, format!("expected {}(field:\"term\") in {chunk:?}", op.symbol())))?;
    let (field_name, quoted) = inner
        .split_once(':')
        .ok_or_else(|| Error::parse(offset + 2, "missing ':' after field name"))?;
    let field = match field_name {
        "title" => Field::Title,
        "contents" => Field::Contents,
        other => return Err(Error::parse(offset + 2, format!("unknown field {other:?}"))),
    };
    let term_offset = offset + 3 + field_name.chars().count();
    let term = quoted
        .strip_prefix('"')
        .and_then(|q| q.strip_suffix('"'))
        .filter(|t| !t.contains('"'))
        .ok_or_else(|| Error::parse(term_offset, "term must be double-quoted"))?;
    Ok(Refinement::Term {
        op,
        field,
        term: single_token(term, term_offset + 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_each_kind() {
        assert_eq!(Refinement::must_not(Field::Title, "korea").render(), r#"-(title:"korea")"#);
        assert_eq!(Refinement::or("1950").render(), "1950");
        assert_eq!(Refinement::must(Field::Contents, "samson").render(), r#"+(contents:"samson")"#);
        assert_eq!(Refinement::Stop.render(), "");
    }

    #[test]
    fn parses_mixed_query() {
        let q = StructuredQuery::parse(r#"q +(contents:"1945") -(title:"korea")"#).unwrap();
        assert_eq!(q.base, "q");
        assert_eq!(
            q.refinements,
            [
                Refinement::must(Field::Contents, "1945"),
                Refinement::must_not(Field::Title, "korea")
            ]
        );
        assert_eq!(StructuredQuery::parse("q").unwrap(), StructuredQuery::new("q"));
    }

    #[test]
    fn unquoted_term_is_an_error_at_the_clause() {
        let err = StructuredQuery::parse("q +(contents:1945)").unwrap_err();
        match err {
            Error::QueryParse { offset, .. } => assert!((2..=14).contains(&offset), "offset {offset}"),
            e => panic!("unexpected {e}"),
        }
        assert!(StructuredQuery::parse(r#"q +(body:"x")"#).is_err());
        assert!(StructuredQuery::parse(r#"q +(title:"two words")"#).is_err());
        assert!(StructuredQuery::parse(r#"q +(title:"x""#).is_err());
        assert!(StructuredQuery::parse(r#"q +(title:"x") ..."#).is_err());
    }

    #[test]
    fn trailing_bare_terms_follow_operators() {
        let q = StructuredQuery::parse(r#"q -(title:"1949") 1950"#).unwrap();
        assert_eq!(q.refinements.last(), Some(&Refinement::or("1950")));
    }

    #[test]
    fn parse_with_base_keeps_leading_bare_terms() {
        let q = StructuredQuery::new("who sang it").with(Refinement::or("pete"));
        let s = q.render();
        assert_eq!(StructuredQuery::parse(&s).unwrap().base, "who sang it pete");
        assert_eq!(StructuredQuery::parse_with_base("who sang it", &s).unwrap(), q);
        assert!(StructuredQuery::parse_with_base("who sang", "who sings").is_err());
    }

    #[test]
    fn refinement_parse_and_serde() {
        for s in [r#"+(title:"x")"#, "dialects", "STOP"] {
            let r = Refinement::parse(s).unwrap();
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<Refinement>(&json).unwrap(), r);
        }
        assert!(Refinement::parse("a b").is_err());
    }
}
