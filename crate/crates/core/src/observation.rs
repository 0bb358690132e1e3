//! Session-level aggregation of retrieved documents and the two observation
//! encodings handed to agents: a flat string and a layered token record.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::index::{SearchIndex, SearchResult};
use crate::query::{Field, Op, Refinement, StructuredQuery};
use crate::reader::ReaderOutput;
use crate::text::join_tokens;

/// Everything a session has seen so far. `retrieved` only ever grows.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub question: String,
    pub question_tokens: Vec<String>,
    pub refinements: Vec<Refinement>,
    /// Keyed by doc ordinal, which orders like doc id.
    pub retrieved: BTreeMap<u32, Arc<ReaderOutput>>,
    /// One entry per search, starting with the bare question.
    pub results: Vec<SearchResult>,
}

impl SessionState {
    pub fn new(question: impl Into<String>) -> Self {
        let question = question.into();
        SessionState {
            question_tokens: crate::text::normalize_text(&question),
            question,
            refinements: Vec::new(),
            retrieved: BTreeMap::new(),
            results: Vec::new(),
        }
    }

    /// Number of refinements applied (the step index t).
    pub fn step(&self) -> usize {
        self.refinements.len()
    }

    pub fn query(&self) -> StructuredQuery {
        StructuredQuery {
            base: self.question.clone(),
            refinements: self.refinements.clone(),
        }
    }

    pub fn query_string(&self) -> String {
        self.query().render()
    }

    /// All retrieved documents by descending PS score, ties by doc id.
    pub fn ranked(&self) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = self
            .retrieved
            .iter()
            .map(|(&d, r)| (d, r.ps_score))
            .collect();
        all.sort_by(|a, b| crate::index::rank_order(*a, *b));
        all
    }

    pub fn aggregate_top(&self, k: usize) -> Vec<(u32, f64)> {
        let mut all = self.ranked();
        all.truncate(k);
        all
    }

    pub fn aggregate_top5(&self) -> Vec<(u32, f64)> {
        self.aggregate_top(5)
    }

    pub fn reader_output(&self, doc: u32) -> Option<&ReaderOutput> {
        self.retrieved.get(&doc).map(Arc::as_ref)
    }

    pub fn has_refinement(&self, r: &Refinement) -> bool {
        self.refinements.contains(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub top_k: usize,
    pub title_max: usize,
    pub window_max: usize,
    pub max_tokens: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            top_k: 5,
            title_max: 10,
            window_max: 70,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedDoc {
    pub doc_id: String,
    pub answer: Vec<String>,
    pub title: Vec<String>,
    pub window: Vec<String>,
    pub ps_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub question: Vec<String>,
    pub refinements: Vec<Refinement>,
    pub top: Vec<ObservedDoc>,
}

impl Observation {
    /// Length of the layered encoding, separators included.
    pub fn token_len(&self) -> usize {
        let tree: usize = self.refinements.iter().map(|r| tree_tokens(r).len()).sum();
        let docs: usize = self
            .top
            .iter()
            .map(|d| d.answer.len() + d.window.len() + d.title.len() + 3)
            .sum();
        3 + self.question.len() + tree + docs
    }

    /// Shortens windows from the last result backwards, then drops results,
    /// then trims refinement descriptors and the question, until the encoding
    /// fits in `max`.
    fn enforce_cap(&mut self, max: usize) {
        let mut over = self.token_len().saturating_sub(max);
        for doc in self.top.iter_mut().rev() {
            if over == 0 {
                return;
            }
            let cut = over.min(doc.window.len());
            doc.window.truncate(doc.window.len() - cut);
            over -= cut;
        }
        while over > 0 {
            if let Some(doc) = self.top.pop() {
                over = over.saturating_sub(doc.answer.len() + doc.title.len() + 3);
            } else if let Some(r) = self.refinements.pop() {
                over = over.saturating_sub(tree_tokens(&r).len());
            } else if !self.question.is_empty() {
                let cut = over.min(self.question.len());
                self.question.truncate(self.question.len() - cut);
                over -= cut;
            } else {
                break;
            }
        }
    }
}

pub fn build_observation(ss: &SessionState, index: &SearchIndex, cfg: &ObservationConfig) -> Observation {
    let top = ss
        .aggregate_top(cfg.top_k)
        .into_iter()
        .map(|(doc, ps)| {
            let r = &ss.retrieved[&doc];
            let d = index.doc(doc);
            ObservedDoc {
                doc_id: d.doc_id.clone(),
                answer: r.answer_span.clone(),
                title: d.title_tokens.iter().take(cfg.title_max).cloned().collect(),
                window: r.window_tokens.iter().take(cfg.window_max).cloned().collect(),
                ps_score: ps,
            }
        })
        .collect();
    let mut obs = Observation {
        question: ss.question_tokens.clone(),
        refinements: ss.refinements.clone(),
        top,
    };
    obs.enforce_cap(cfg.max_tokens);
    obs
}

/// Flat clause for one refinement, without the trailing `". "`.
pub fn refinement_clause(r: &Refinement) -> String {
    match r {
        Refinement::Term { op, field, term } => {
            let f = match field {
                Field::Contents => "Contents",
                Field::Title => "Title",
            };
            let verb = match op {
                Op::Plus => "must contain",
                Op::Minus => "cannot contain",
            };
            format!("{f} {verb}: '{term}'")
        }
        Refinement::Or(term) => format!("Contents or title may contain: '{term}'"),
        Refinement::Stop => "Stop".to_owned(),
    }
}

pub fn serialize_flat(obs: &Observation) -> String {
    let mut out = format!("Query: '{}'. ", join_tokens(&obs.question));
    for r in &obs.refinements {
        out.push_str(&refinement_clause(r));
        out.push_str(". ");
    }
    for d in &obs.top {
        out.push_str(&format!(
            "Answer: '{}'. Title: '{}'. Result: '{}'. ",
            join_tokens(&d.answer),
            join_tokens(&d.title),
            join_tokens(&d.window)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenType {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "SEP")]
    Sep,
    #[serde(rename = "query")]
    Query,
    #[serde(rename = "tree")]
    Tree,
    #[serde(rename = "answer")]
    Answer,
    #[serde(rename = "context")]
    Context,
    #[serde(rename = "title")]
    Title,
}

/// Four aligned layers over one token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredRecord {
    pub tokens: Vec<String>,
    pub types: Vec<TokenType>,
    pub idf: Vec<f64>,
    pub ps: Vec<f64>,
}

impl LayeredRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, token: String, ty: TokenType, idf: f64, ps: f64) {
        self.tokens.push(token);
        self.types.push(ty);
        self.idf.push(idf);
        self.ps.push(ps);
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("layered records always serialize")
    }
}

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Descriptor tokens for a refinement: op marker, field marker, term.
pub fn tree_tokens(r: &Refinement) -> Vec<String> {
    match r {
        Refinement::Or(t) => vec![t.clone()],
        Refinement::Term { op, field, term } => {
            let op = match op {
                Op::Plus => "[pos]",
                Op::Minus => "[neg]",
            };
            let field = match field {
                Field::Contents => "[content]",
                Field::Title => "[title]",
            };
            vec![op.to_owned(), field.to_owned(), term.clone()]
        }
        Refinement::Stop => Vec::new(),
    }
}

fn is_marker(t: &str) -> bool {
    t.starts_with('[') && t.ends_with(']')
}

pub fn serialize_layered(obs: &Observation, index: &SearchIndex) -> LayeredRecord {
    let idf = |t: &str| {
        if is_marker(t) || index.is_stop_word(t) {
            0.0
        } else {
            index.idf(t, Field::Contents)
        }
    };
    let mut rec = LayeredRecord {
        tokens: Vec::new(),
        types: Vec::new(),
        idf: Vec::new(),
        ps: Vec::new(),
    };
    rec.push(CLS.into(), TokenType::Cls, 0.0, 0.0);
    for t in &obs.question {
        rec.push(t.clone(), TokenType::Query, idf(t), 0.0);
    }
    rec.push(SEP.into(), TokenType::Sep, 0.0, 0.0);
    for t in obs.refinements.iter().flat_map(tree_tokens) {
        let w = idf(&t);
        rec.push(t, TokenType::Tree, w, 0.0);
    }
    rec.push(SEP.into(), TokenType::Sep, 0.0, 0.0);
    for d in &obs.top {
        let ps = d.ps_score;
        for (segment, ty) in [
            (&d.answer, TokenType::Answer),
            (&d.window, TokenType::Context),
            (&d.title, TokenType::Title),
        ] {
            for t in segment {
                rec.push(t.clone(), ty, idf(t), ps);
            }
            rec.push(SEP.into(), TokenType::Sep, 0.0, ps);
        }
    }
    rec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn narnia() -> Observation {
        let doc = |ans: &str, title: &str, window: &str, ps: f64| ObservedDoc {
            doc_id: String::new(),
            answer: toks(ans),
            title: toks(title),
            window: toks(window),
            ps_score: ps,
        };
        Observation {
            question: toks("how many parts does chronicles of narnia have"),
            refinements: vec![
                Refinement::must(Field::Contents, "lewis"),
                Refinement::must_not(Field::Contents, "battle"),
            ],
            top: vec![
                doc("seven", "the chronicles of narnia", "is a series of seven fantasy novels", 5.0),
                doc("seven", "the chronicles of narnia film series", "from the seven books", 4.0),
                doc("seven", "religion in the chronicles of narnia", "series of seven fantasy novels", 3.0),
                doc("seven", "the chronicles of narnia", "at the age of seven he moved", 2.0),
                doc("two", "the chronicles of narnia", "two other maps were produced", 1.0),
            ],
        }
    }

    #[test]
    fn flat_string_follows_template() {
        let s = serialize_flat(&narnia());
        assert!(s.starts_with("Query: 'how many parts does chronicles of narnia have'. "));
        assert!(s.contains("Contents must contain: 'lewis'. Contents cannot contain: 'battle'."));
        assert_eq!(s.matches("Answer:").count(), 5);
        assert!(s.ends_with("Answer: 'two'. Title: 'the chronicles of narnia'. Result: 'two other maps were produced'. "));
    }

    #[test]
    fn flat_string_without_refinements() {
        let mut obs = narnia();
        obs.refinements.clear();
        let s = serialize_flat(&obs);
        assert!(s.starts_with("Query: '"));
        assert!(!s.contains("must contain") && !s.contains("cannot contain"));
    }

    #[test]
    fn cap_truncates_last_window_first() {
        let mut obs = narnia();
        let full = obs.token_len();
        obs.enforce_cap(full - 3);
        assert_eq!(obs.token_len(), full - 3);
        assert_eq!(obs.top[4].window, toks("two other"));
        assert_eq!(obs.top[3].window.len(), 7);
    }

    #[test]
    fn cap_can_drop_everything_but_the_skeleton() {
        let mut obs = narnia();
        obs.enforce_cap(3);
        assert_eq!(obs.token_len(), 3);
        assert!(obs.top.is_empty() && obs.refinements.is_empty() && obs.question.is_empty());
    }

    #[test]
    fn tree_tokens_mark_operator_and_field() {
        assert_eq!(
            tree_tokens(&Refinement::must_not(Field::Title, "korea")),
            ["[neg]", "[title]", "korea"]
        );
        assert_eq!(tree_tokens(&Refinement::or("1950")), ["1950"]);
    }
}
