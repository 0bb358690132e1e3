//! Raw documents, passage blocking and the in-memory passage store.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::normalize_text;

pub const DEFAULT_BLOCK_SIZE: usize = 288;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub article_id: String,
    pub title: String,
    pub body: String,
}

/// A fixed-size passage cut from an article body. `doc_id` is
/// `"{article_id}#{ordinal}"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub article_id: String,
    pub title_tokens: Vec<String>,
    pub content_tokens: Vec<String>,
}

impl Document {
    pub fn ordinal(&self) -> usize {
        parse_doc_id(&self.doc_id)
            .map(|(_, ord)| ord)
            .expect("doc ids are always well formed")
    }
}

pub fn make_doc_id(article_id: &str, ordinal: usize) -> String {
    format!("{article_id}#{ordinal}")
}

/// Splits a doc id into article id and block ordinal. Article ids may
/// themselves contain `#`; the ordinal is whatever follows the last one.
pub fn parse_doc_id(doc_id: &str) -> Option<(&str, usize)> {
    let (article, ord) = doc_id.rsplit_once('#')?;
    if ord.is_empty() || !ord.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((article, ord.parse().ok()?))
}

/// Cuts the normalized body into consecutive blocks of exactly `block_size`
/// tokens (the last one may be shorter). Every block carries the title.
pub fn block_passages(doc: &RawDocument, block_size: usize) -> Vec<Document> {
    assert!(block_size >= 1, "block_size must be at least 1");
    let title_tokens = normalize_text(&doc.title);
    normalize_text(&doc.body)
        .chunks(block_size)
        .enumerate()
        .map(|(ordinal, block)| Document {
            doc_id: make_doc_id(&doc.article_id, ordinal),
            article_id: doc.article_id.clone(),
            title_tokens: title_tokens.clone(),
            content_tokens: block.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answers: Vec<String>,
}

impl QaPair {
    pub fn new(question: impl Into<String>, answers: Vec<String>) -> Result<Self> {
        let qa = QaPair {
            question: question.into(),
            answers,
        };
        qa.validate().map_err(|m| Error::Config(m.to_string()))?;
        Ok(qa)
    }

    fn validate(&self) -> std::result::Result<(), &'static str> {
        if normalize_text(&self.question).is_empty() {
            return Err("question is empty");
        }
        if self.answers.is_empty() {
            return Err("at least one answer is required");
        }
        if self.answers.iter().any(|a| normalize_text(a).is_empty()) {
            return Err("answer is empty after normalization");
        }
        Ok(())
    }
}

/// Immutable passage store. Documents keep ingestion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    articles: usize,
    block_size: usize,
}

impl Corpus {
    pub fn from_raw(raw: &[RawDocument], block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block_size must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        let mut documents = Vec::new();
        for doc in raw {
            if doc.article_id.is_empty() {
                return Err(Error::Config("article id must be non-empty".into()));
            }
            if !seen.insert(doc.article_id.as_str()) {
                return Err(Error::DuplicateArticle(doc.article_id.clone()));
            }
            documents.extend(block_passages(doc, block_size));
        }
        Ok(Corpus {
            documents,
            articles: raw.len(),
            block_size,
        })
    }

    /// Reads `{"id","title","contents"}` records, one per line. Blank lines
    /// are skipped but still counted for error line numbers.
    pub fn ingest_jsonl(path: impl AsRef<Path>, block_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            raw.push(parse_corpus_line(&line, i + 1)?);
        }
        Self::from_raw(&raw, block_size)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn article_count(&self) -> usize {
        self.articles
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub(crate) fn from_parts(documents: Vec<Document>, articles: usize, block_size: usize) -> Self {
        Corpus {
            documents,
            articles,
            block_size,
        }
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, key: &str, line: usize) -> Result<String> {
    match obj.get(key) {
        None => Err(Error::Malformed {
            line,
            message: format!("missing field {key}"),
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Malformed {
            line,
            message: format!("field {key} is not a string"),
        }),
    }
}

fn parse_object(text: &str, line: usize) -> Result<serde_json::Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(Error::Malformed {
            line,
            message: "expected a JSON object".into(),
        }),
        Err(e) => Err(Error::Malformed {
            line,
            message: e.to_string(),
        }),
    }
}

fn parse_corpus_line(text: &str, line: usize) -> Result<RawDocument> {
    let obj = parse_object(text, line)?;
    Ok(RawDocument {
        article_id: string_field(&obj, "id", line)?,
        title: string_field(&obj, "title", line)?,
        body: string_field(&obj, "contents", line)?,
    })
}

pub fn write_corpus_jsonl(path: impl AsRef<Path>, raw: &[RawDocument]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for doc in raw {
        let rec = serde_json::json!({"id": doc.article_id, "title": doc.title, "contents": doc.body});
        writeln!(out, "{rec}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads `{"question", "answers": [..]}` records.
pub fn load_qa_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let obj = parse_object(&line, n)?;
        let question = string_field(&obj, "question", n)?;
        let answers = match obj.get("answers") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_owned))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Malformed {
                    line: n,
                    message: "answers must be strings".into(),
                })?,
            Some(_) => {
                return Err(Error::Malformed {
                    line: n,
                    message: "field answers is not an array".into(),
                })
            }
            None => {
                return Err(Error::Malformed {
                    line: n,
                    message: "missing field answers".into(),
                })
            }
        };
        let qa = QaPair { question, answers };
        qa.validate().map_err(|m| Error::Malformed {
            line: n,
            message: m.into(),
        })?;
        out.push(qa);
    }
    Ok(out)
}

pub fn write_qa_jsonl(path: impl AsRef<Path>, pairs: &[QaPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for qa in pairs {
        writeln!(out, "{}", serde_json::to_string(qa)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
