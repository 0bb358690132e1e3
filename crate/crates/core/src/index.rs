//! Two-field inverted index (title, contents) with BM25 ranking and
//! `+`/`-` field filters.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};
use crate::query::{Field, Op, Refinement, StructuredQuery};

pub const STOP_LIST_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Postings for one field. Lists are sorted by doc ordinal.
#[derive(Debug, Clone, Default)]
pub struct FieldPostings {
    postings: HashMap<String, Vec<Posting>>,
    lengths: Vec<u32>,
    avg_len: f64,
}

impl FieldPostings {
    fn build<'a>(docs: impl Iterator<Item = &'a [String]>) -> Self {
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut lengths = Vec::new();
        for (ord, tokens) in docs.enumerate() {
            lengths.push(tokens.len() as u32);
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            let mut tf: Vec<_> = tf.into_iter().collect();
            tf.sort_unstable();
            for (term, n) in tf {
                postings.entry(term.to_owned()).or_default().push(Posting {
                    doc: ord as u32,
                    tf: n,
                });
            }
        }
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64
        };
        FieldPostings {
            postings,
            lengths,
            avg_len,
        }
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn tf(&self, term: &str, doc: u32) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc)
            .map_or(0, |i| list[i].tf)
    }

    pub fn contains(&self, term: &str, doc: u32) -> bool {
        self.postings(term).binary_search_by_key(&doc, |p| p.doc).is_ok()
    }

    pub fn length(&self, doc: u32) -> u32 {
        self.lengths[doc as usize]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc: u32,
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query: String,
    pub k: usize,
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.doc_id.clone()).collect()
    }
}

/// Where a scoring clause is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Bare terms: scored against contents and title, summed.
    Both,
    Only(Field),
}

/// A query flattened into scoring clauses (in query order) and filters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompiledQuery {
    pub scoring: Vec<(String, Scope)>,
    pub must: Vec<(Field, String)>,
    pub must_not: Vec<(Field, String)>,
}

impl CompiledQuery {
    pub fn new(sq: &StructuredQuery) -> Self {
        let mut out = CompiledQuery {
            scoring: sq.base_tokens().into_iter().map(|t| (t, Scope::Both)).collect(),
            ..Default::default()
        };
        for r in &sq.refinements {
            match r {
                Refinement::Or(t) => out.scoring.push((t.clone(), Scope::Both)),
                Refinement::Term {
                    op: Op::Plus,
                    field,
                    term,
                } => {
                    out.scoring.push((term.clone(), Scope::Only(*field)));
                    out.must.push((*field, term.clone()));
                }
                Refinement::Term {
                    op: Op::Minus,
                    field,
                    term,
                } => out.must_not.push((*field, term.clone())),
                Refinement::Stop => {}
            }
        }
        out
    }
}

/// Immutable search index. Documents are held in ascending `doc_id` order,
/// so ordinal order and doc id order coincide.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    docs: Vec<Document>,
    ordinals: HashMap<String, u32>,
    title: FieldPostings,
    contents: FieldPostings,
    params: Bm25Params,
    stop_list: HashSet<String>,
    terms_by_idf: Vec<String>,
    articles: usize,
    block_size: usize,
}

impl SearchIndex {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        Self::build_with(corpus, Bm25Params::default())
    }

    pub fn build_with(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut docs = corpus.documents().to_vec();
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let ordinals = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i as u32))
            .collect();
        let title = FieldPostings::build(docs.iter().map(|d| d.title_tokens.as_slice()));
        let contents = FieldPostings::build(docs.iter().map(|d| d.content_tokens.as_slice()));

        let mut by_cf: Vec<(&str, u64)> = contents
            .postings
            .iter()
            .map(|(t, p)| (t.as_str(), p.iter().map(|x| x.tf as u64).sum()))
            .collect();
        by_cf.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let stop_list = by_cf
            .iter()
            .take(STOP_LIST_SIZE)
            .map(|(t, _)| (*t).to_owned())
            .collect();

        // idf is strictly decreasing in df, so ascending contents-df is
        // descending idf.
        let mut all: Vec<&str> = contents.terms().chain(title.terms()).collect();
        all.sort_unstable();
        all.dedup();
        all.sort_by(|a, b| contents.df(a).cmp(&contents.df(b)).then(a.cmp(b)));
        let terms_by_idf = all.into_iter().map(str::to_owned).collect();

        Ok(SearchIndex {
            docs,
            ordinals,
            title,
            contents,
            params,
            stop_list,
            terms_by_idf,
            articles: corpus.article_count(),
            block_size: corpus.block_size(),
        })
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc(&self, ord: u32) -> &Document {
        &self.docs[ord as usize]
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<u32> {
        self.ordinals.get(doc_id).copied()
    }

    pub fn field(&self, field: Field) -> &FieldPostings {
        match field {
            Field::Title => &self.title,
            Field::Contents => &self.contents,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))` for the field.
    pub fn idf(&self, term: &str, field: Field) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.field(field).df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn is_stop_word(&self, term: &str) -> bool {
        self.stop_list.contains(term)
    }

    pub fn stop_list(&self) -> &HashSet<String> {
        &self.stop_list
    }

    /// Every indexed term (either field), highest contents-idf first, ties
    /// lexicographic.
    pub fn terms_by_idf(&self) -> &[String] {
        &self.terms_by_idf
    }

    fn saturate(&self, tf: u32, len: u32, avg: f64) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if avg > 0.0 { len as f64 / avg } else { 1.0 };
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    /// BM25 contribution of one term in one field of one document.
    pub fn term_score(&self, term: &str, field: Field, doc: u32) -> f64 {
        let fp = self.field(field);
        let tf = fp.tf(term, doc);
        if tf == 0 {
            return 0.0;
        }
        self.idf(term, field) * self.saturate(tf, fp.length(doc), fp.avg_len)
    }

    /// Sum of per-term BM25 over one field.
    pub fn bm25_field(&self, terms: &[String], field: Field, doc: u32) -> f64 {
        terms.iter().map(|t| self.term_score(t, field, doc)).sum()
    }

    pub fn clause_score(&self, term: &str, scope: Scope, doc: u32) -> f64 {
        match scope {
            Scope::Both => {
                let mut s = self.term_score(term, Field::Contents, doc);
                s += self.term_score(term, Field::Title, doc);
                s
            }
            Scope::Only(f) => self.term_score(term, f, doc),
        }
    }

    /// Score of a document under a compiled query, ignoring filters.
    pub fn bm25_score(&self, q: &CompiledQuery, doc: u32) -> f64 {
        let mut score = 0.0;
        for (term, scope) in &q.scoring {
            match scope {
                Scope::Both => {
                    score += self.term_score(term, Field::Contents, doc);
                    score += self.term_score(term, Field::Title, doc);
                }
                Scope::Only(f) => score += self.term_score(term, *f, doc),
            }
        }
        score
    }

    fn passes_filters(&self, q: &CompiledQuery, doc: u32) -> bool {
        q.must.iter().all(|(f, t)| self.field(*f).contains(t, doc))
            && q.must_not.iter().all(|(f, t)| !self.field(*f).contains(t, doc))
    }

    pub fn execute_query(&self, sq: &StructuredQuery, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::ZeroDepth);
        }
        let q = CompiledQuery::new(sq);
        let n = self.docs.len();
        let mut scores = vec![0.0f64; n];
        let mut matched = vec![false; n];

        // Term-at-a-time accumulation in clause order, contents before title,
        // which is the same addition order `bm25_score` uses.
        let mut accumulate = |term: &str, field: Field| {
            let fp = self.field(field);
            let list = fp.postings(term);
            if list.is_empty() {
                return;
            }
            let idf = self.idf(term, field);
            for p in list {
                scores[p.doc as usize] += idf * self.saturate(p.tf, fp.length(p.doc), fp.avg_len);
                matched[p.doc as usize] = true;
            }
        };
        for (term, scope) in &q.scoring {
            match scope {
                Scope::Both => {
                    accumulate(term, Field::Contents);
                    accumulate(term, Field::Title);
                }
                Scope::Only(f) => accumulate(term, *f),
            }
        }

        let mut hits: Vec<(u32, f64)> = (0..n as u32)
            .filter(|&d| matched[d as usize] && self.passes_filters(&q, d))
            .map(|d| (d, scores[d as usize]))
            .collect();
        hits.sort_by(|a, b| rank_order(*a, *b));
        hits.truncate(k);
        Ok(SearchResult {
            query: sq.render(),
            k,
            hits: hits
                .into_iter()
                .map(|(doc, score)| Hit {
                    doc,
                    doc_id: self.docs[doc as usize].doc_id.clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Writes the passage store; postings are rebuilt on load.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            documents: self.docs.len(),
            articles: self.articles,
            block_size: self.block_size,
            k1: self.params.k1,
            b: self.params.b,
        };
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&mpath, e))?;
        let dpath = dir.join("documents.jsonl");
        let mut out = BufWriter::new(File::create(&dpath).map_err(|e| Error::io(&dpath, e))?);
        for d in &self.docs {
            writeln!(out, "{}", serde_json::to_string(d)?).map_err(|e| Error::io(&dpath, e))?;
        }
        out.flush().map_err(|e| Error::io(&dpath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("unsupported index format {:?}", manifest.format)));
        }
        let dpath = dir.join("documents.jsonl");
        let file = File::open(&dpath).map_err(|e| Error::io(&dpath, e))?;
        let mut docs = Vec::with_capacity(manifest.documents);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&dpath, e))?;
            let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            docs.push(doc);
        }
        let corpus = Corpus::from_parts(docs, manifest.articles, manifest.block_size);
        Self::build_with(
            &corpus,
            Bm25Params {
                k1: manifest.k1,
                b: manifest.b,
            },
        )
    }
}

const MANIFEST_FORMAT: &str = "qrefine-index-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    documents: usize,
    articles: usize,
    block_size: usize,
    k1: f64,
    b: f64,
}

/// Descending score, ascending ordinal.
pub fn rank_order(a: (u32, f64), b: (u32, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RawDocument;

    fn corpus(docs: &[(&str, &str, &str)]) -> Corpus {
        let raw: Vec<_> = docs
            .iter()
            .map(|(id, t, b)| RawDocument {
                article_id: (*id).into(),
                title: (*t).into(),
                body: (*b).into(),
            })
            .collect();
        Corpus::from_raw(&raw, 288).unwrap()
    }

    fn three() -> SearchIndex {
        SearchIndex::build(&corpus(&[
            ("a", "North Korea", "korea divided in 1945 north south"),
            ("b", "Korean language", "korea language differences north"),
            ("c", "Army", "eighth army korea 1945"),
        ]))
        .unwrap()
    }

    #[test]
    fn idf_values() {
        let idx = three();
        assert_eq!(idx.num_docs(), 3);
        // df=1, df=3 and unseen, N=3
        assert!((idx.idf("divided", Field::Contents) - (1.0f64 + 2.5 / 1.5).ln()).abs() < 1e-12);
        assert!((idx.idf("divided", Field::Contents) - 0.980829).abs() < 1e-6);
        assert!((idx.idf("korea", Field::Contents) - 0.133531).abs() < 1e-6);
        assert!((idx.idf("zebra", Field::Contents) - 2.079442).abs() < 1e-6);
        assert!(idx.field(Field::Contents).postings("zebra").is_empty());
    }

    #[test]
    fn average_length_doc_with_tf_one_scores_idf() {
        let idx = SearchIndex::build(&corpus(&[
            ("a", "", "x y"),
            ("b", "", "y z"),
        ]))
        .unwrap();
        let d = idx.ordinal("a#0").unwrap();
        let s = idx.term_score("x", Field::Contents, d);
        assert!((s - idx.idf("x", Field::Contents)).abs() < 1e-12);
        assert_eq!(idx.term_score("q", Field::Contents, d), 0.0);
        assert_eq!(idx.bm25_score(&CompiledQuery::default(), d), 0.0);
    }

    #[test]
    fn empty_corpus_and_zero_k_are_errors() {
        assert!(matches!(SearchIndex::build(&Corpus::default()), Err(Error::EmptyCorpus)));
        assert!(matches!(three().execute_query(&StructuredQuery::new("korea"), 0), Err(Error::ZeroDepth)));
    }

    #[test]
    fn must_not_title_filters() {
        let idx = three();
        let q = StructuredQuery::new("korea north").with(Refinement::must_not(Field::Title, "korea"));
        let res = idx.execute_query(&q, 10).unwrap();
        assert!(!res.hits.is_empty());
        for h in &res.hits {
            assert!(!idx.doc(h.doc).title_tokens.iter().any(|t| t == "korea"));
        }
    }

    #[test]
    fn must_term_that_matches_nothing_gives_empty_result() {
        let idx = three();
        let q = StructuredQuery::new("korea").with(Refinement::must(Field::Contents, "zebra"));
        assert!(idx.execute_query(&q, 5).unwrap().is_empty());
    }

    #[test]
    fn must_terms_alone_form_candidates() {
        let idx = three();
        let q = StructuredQuery::new("zebra").with(Refinement::must(Field::Contents, "1945"));
        let res = idx.execute_query(&q, 5).unwrap();
        assert_eq!(res.hits.len(), 2);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = SearchIndex::build(&corpus(&[("b", "", "same words"), ("a", "", "same words")])).unwrap();
        let res = idx.execute_query(&StructuredQuery::new("same"), 5).unwrap();
        assert_eq!(res.doc_ids(), ["a#0", "b#0"]);
        assert_eq!(res.hits[0].score, res.hits[1].score);
    }

    #[test]
    fn save_and_load_preserve_statistics() {
        let idx = three();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = SearchIndex::load(dir.path()).unwrap();
        assert_eq!(back.documents(), idx.documents());
        let q = StructuredQuery::new("korea 1945");
        assert_eq!(back.execute_query(&q, 3).unwrap(), idx.execute_query(&q, 3).unwrap());
        assert_eq!(back.stop_list(), idx.stop_list());
    }
}
