//! Lexical stand-in for a machine reader with passage scorer: picks the best
//! question-matching window, an answer span inside it, and a PS score.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::index::SearchIndex;
use crate::query::Field;

pub const DEFAULT_WINDOW_SIZE: usize = 70;
pub const MAX_SPAN_LEN: usize = 5;

/// PS score given to documents without content. Lower than any real score.
pub const EMPTY_DOC_PS: f64 = f64::MIN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderOutput {
    pub doc: u32,
    pub doc_id: String,
    pub window_start: usize,
    pub window_tokens: Vec<String>,
    /// Offset of the span in the document (not the window).
    pub answer_start: usize,
    pub answer_span: Vec<String>,
    pub ps_score: f64,
}

/// Plug point for readers. Implementations must be deterministic.
pub trait Reader: Send + Sync {
    fn read(&self, index: &SearchIndex, doc: u32, question: &[String]) -> ReaderOutput;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalReader {
    pub window_size: usize,
    pub max_span: usize,
    pub bm25_weight: f64,
}

impl Default for LexicalReader {
    fn default() -> Self {
        LexicalReader {
            window_size: DEFAULT_WINDOW_SIZE,
            max_span: MAX_SPAN_LEN,
            bm25_weight: 0.1,
        }
    }
}

impl LexicalReader {
    pub fn with_window(window_size: usize) -> Self {
        assert!(window_size >= 10, "window_size must be at least 10");
        LexicalReader {
            window_size,
            ..Default::default()
        }
    }
}

impl Reader for LexicalReader {
    fn read(&self, index: &SearchIndex, doc: u32, question: &[String]) -> ReaderOutput {
        let d = index.doc(doc);
        let tokens = &d.content_tokens;
        if tokens.is_empty() {
            return ReaderOutput {
                doc,
                doc_id: d.doc_id.clone(),
                window_start: 0,
                window_tokens: Vec::new(),
                answer_start: 0,
                answer_span: Vec::new(),
                ps_score: EMPTY_DOC_PS,
            };
        }
        let q: HashSet<&str> = question.iter().map(String::as_str).collect();
        let mut cache: HashMap<&str, f64> = HashMap::new();
        let tok_idf: Vec<f64> = tokens
            .iter()
            .map(|t| *cache.entry(t).or_insert_with(|| index.idf(t, Field::Contents)))
            .collect();
        let is_q: Vec<bool> = tokens.iter().map(|t| q.contains(t.as_str())).collect();

        // (position, match score) for question-token occurrences.
        let hits: Vec<(usize, f64)> = (0..tokens.len())
            .filter(|&i| is_q[i])
            .map(|i| (i, tok_idf[i]))
            .collect();

        let width = self.window_size.min(tokens.len());
        let (mut best_start, mut best_sum) = (0, f64::NEG_INFINITY);
        let mut lo = 0;
        for start in 0..=tokens.len() - width {
            while lo < hits.len() && hits[lo].0 < start {
                lo += 1;
            }
            let mut sum = 0.0;
            for &(pos, s) in &hits[lo..] {
                if pos >= start + width {
                    break;
                }
                sum += s;
            }
            if sum > best_sum {
                best_sum = sum;
                best_start = start;
            }
        }
        let window = &tokens[best_start..best_start + width];

        // Best run of non-question tokens by mean idf; leftmost, then shortest.
        let mut span: Option<(usize, usize, f64)> = None;
        for start in 0..window.len() {
            let mut total = 0.0;
            for len in 1..=self.max_span.min(window.len() - start) {
                let pos = best_start + start + len - 1;
                if is_q[pos] {
                    break;
                }
                total += tok_idf[pos];
                let mean = total / len as f64;
                if span.is_none_or(|(_, _, m)| mean > m) {
                    span = Some((start, len, mean));
                }
            }
        }
        let (answer_start, answer_span) = match span {
            Some((s, l, _)) => (best_start + s, window[s..s + l].to_vec()),
            None => (best_start, Vec::new()),
        };

        let bm25 = index.bm25_field(question, Field::Contents, doc);
        ReaderOutput {
            doc,
            doc_id: d.doc_id.clone(),
            window_start: best_start,
            window_tokens: window.to_vec(),
            answer_start,
            answer_span,
            ps_score: best_sum + self.bm25_weight * bm25,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, RawDocument};
    use crate::text::normalize_text;

    fn index(bodies: &[&str]) -> SearchIndex {
        let raw: Vec<_> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| RawDocument {
                article_id: format!("d{i}"),
                title: String::new(),
                body: (*b).into(),
            })
            .collect();
        SearchIndex::build(&Corpus::from_raw(&raw, 288).unwrap()).unwrap()
    }

    fn q(s: &str) -> Vec<String> {
        normalize_text(s)
    }

    #[test]
    fn no_question_tokens_gives_zero_ps_and_leftmost_window() {
        let body = (0..20).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let idx = index(&[&body, "t0 t1 other"]);
        let r = LexicalReader::with_window(10).read(&idx, 0, &q("who is x"));
        assert_eq!(r.window_start, 0);
        assert_eq!(r.window_tokens.len(), 10);
        assert_eq!(r.ps_score, 0.0);
        // t0 and t1 appear twice, so t2 is the first highest-idf token
        assert_eq!(r.answer_span, ["t2"]);
        assert_eq!(r.answer_start, 2);
    }

    #[test]
    fn question_only_document_has_empty_span() {
        let idx = index(&["who sang x", "filler words here"]);
        let r = LexicalReader::default().read(&idx, 0, &q("who sang x"));
        assert!(r.answer_span.is_empty());
        let window_sum: f64 = ["who", "sang", "x"].iter().map(|t| idx.idf(t, Field::Contents)).sum();
        let bm25 = idx.bm25_field(&q("who sang x"), Field::Contents, 0);
        assert!((r.ps_score - (window_sum + 0.1 * bm25)).abs() < 1e-12);
    }

    #[test]
    fn more_hits_scores_higher() {
        // Same length and the same idf for both question tokens.
        let idx = index(&["alpha beta c d e", "alpha f g h i", "beta j k l m"]);
        let question = q("alpha beta");
        let reader = LexicalReader::with_window(10);
        let two = reader.read(&idx, 0, &question);
        let one = reader.read(&idx, 1, &question);
        assert!(two.ps_score > one.ps_score);
    }

    #[test]
    fn window_centers_on_hits() {
        let mut words: Vec<String> = (0..40).map(|i| format!("f{i}")).collect();
        words[30] = "korea".into();
        words[32] = "1945".into();
        let idx = index(&[&words.join(" ")]);
        let r = LexicalReader::with_window(10).read(&idx, 0, &q("korea"));
        assert!(r.window_start <= 30 && 30 < r.window_start + 10);
        // leftmost window that contains position 30
        assert_eq!(r.window_start, 21);
        let at = r.answer_start;
        assert_eq!(&idx.doc(0).content_tokens[at..at + r.answer_span.len()], r.answer_span.as_slice());
    }

    #[test]
    fn empty_document_gets_sentinel() {
        let raw = vec![
            RawDocument { article_id: "a".into(), title: "t".into(), body: "x".into() },
        ];
        let mut idx = SearchIndex::build(&Corpus::from_raw(&raw, 288).unwrap()).unwrap();
        // Build a corpus whose only passage is emptied to exercise the sentinel path.
        idx = {
            let mut docs = idx.documents().to_vec();
            docs[0].content_tokens.clear();
            SearchIndex::build(&Corpus::from_parts(docs, 1, 288)).unwrap()
        };
        let r = LexicalReader::default().read(&idx, 0, &q("x"));
        assert!(r.window_tokens.is_empty());
        assert_eq!(r.ps_score, EMPTY_DOC_PS);
    }
}
