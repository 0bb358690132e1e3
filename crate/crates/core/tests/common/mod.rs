#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use qrefine_core::desk::{self, DeskConfig, DeskCorpus};
use qrefine_core::{Corpus, Field, Refinement, SearchContext, SearchIndex, StructuredQuery};
use qrefine_core::corpus::RawDocument;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn desk_context(cfg: &DeskConfig) -> (DeskCorpus, SearchContext) {
    let desk = desk::generate(cfg);
    let corpus = Corpus::from_raw(&desk.documents, 288).expect("desk corpus");
    let index = SearchIndex::build(&corpus).expect("desk index");
    (desk, SearchContext::new(Arc::new(index)))
}

pub fn context_for(raw: &[RawDocument]) -> SearchContext {
    let corpus = Corpus::from_raw(raw, 288).expect("corpus");
    SearchContext::new(Arc::new(SearchIndex::build(&corpus).expect("index")))
}

/// Zipf-ish vocabulary draws: low ranks are frequent.
pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

fn draw<'a>(rng: &mut ChaCha8Rng, vocab: &'a [String]) -> &'a str {
    let u: f64 = rng.random_range(0.0..1.0);
    let i = ((vocab.len() as f64).powf(u) - 1.0) as usize;
    &vocab[i.min(vocab.len() - 1)]
}

fn words(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> String {
    (0..n).map(|_| draw(rng, vocab)).collect::<Vec<_>>().join(" ")
}

/// `n` single-passage documents with 1-14 token titles and 5-200 token
/// bodies.
pub fn random_corpus(seed: u64, n: usize, vocab_size: usize) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab(vocab_size);
    (0..n)
        .map(|i| {
            let tl = rng.random_range(1..=14);
            let bl = rng.random_range(5..=200);
            RawDocument {
                article_id: format!("doc{i:04}"),
                title: words(&mut rng, &v, tl),
                body: words(&mut rng, &v, bl),
            }
        })
        .collect()
}

/// A base of 1-4 bare terms followed by 0-5 refinements of every kind.
pub fn random_query(rng: &mut ChaCha8Rng, vocab: &[String]) -> StructuredQuery {
    let nb = rng.random_range(1..=4);
    let mut q = StructuredQuery::new(words(rng, vocab, nb));
    for _ in 0..rng.random_range(0..=5) {
        let t = draw(rng, vocab).to_owned();
        let field = *[Field::Title, Field::Contents].choose(rng).unwrap();
        let r = match rng.random_range(0..3) {
            0 => Refinement::or(t),
            1 => Refinement::must(field, t),
            _ => Refinement::must_not(field, t),
        };
        if !q.refinements.contains(&r) {
            q.push(r);
        }
    }
    q
}

/// Straight-line BM25 over the raw token lists of every document.
pub struct LinearScan<'a> {
    index: &'a SearchIndex,
    df: [HashMap<&'a str, usize>; 2],
    avg: [f64; 2],
}

fn slot(f: Field) -> usize {
    match f {
        Field::Title => 0,
        Field::Contents => 1,
    }
}

impl<'a> LinearScan<'a> {
    pub fn new(index: &'a SearchIndex) -> Self {
        let mut df = [HashMap::new(), HashMap::new()];
        let mut total = [0usize; 2];
        for d in index.documents() {
            for (s, toks) in [(0, &d.title_tokens), (1, &d.content_tokens)] {
                total[s] += toks.len();
                let mut seen: Vec<&str> = toks.iter().map(String::as_str).collect();
                seen.sort_unstable();
                seen.dedup();
                for t in seen {
                    *df[s].entry(t).or_insert(0) += 1;
                }
            }
        }
        let n = index.num_docs() as f64;
        LinearScan {
            index,
            df,
            avg: [total[0] as f64 / n, total[1] as f64 / n],
        }
    }

    fn tokens(&self, doc: usize, f: Field) -> &'a [String] {
        let d = &self.index.documents()[doc];
        match f {
            Field::Title => &d.title_tokens,
            Field::Contents => &d.content_tokens,
        }
    }

    fn term(&self, t: &str, f: Field, doc: usize) -> f64 {
        let toks = self.tokens(doc, f);
        let tf = toks.iter().filter(|x| *x == t).count() as f64;
        if tf == 0.0 {
            return 0.0;
        }
        let n = self.index.num_docs() as f64;
        let df = self.df[slot(f)].get(t).copied().unwrap_or(0) as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let (k1, b) = (1.2, 0.75);
        let norm = toks.len() as f64 / self.avg[slot(f)];
        idf * (tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm)))
    }

    /// Every matching document as `(doc_id, score)`, best first, ties by
    /// doc id.
    pub fn search(&self, q: &StructuredQuery) -> Vec<(String, f64)> {
        let mut scoring: Vec<(String, Option<Field>)> = q.base_tokens().into_iter().map(|t| (t, None)).collect();
        let mut must = Vec::new();
        let mut must_not = Vec::new();
        for r in &q.refinements {
            match r {
                Refinement::Or(t) => scoring.push((t.clone(), None)),
                Refinement::Term { op, field, term } => {
                    if op.symbol() == '+' {
                        scoring.push((term.clone(), Some(*field)));
                        must.push((*field, term.clone()));
                    } else {
                        must_not.push((*field, term.clone()));
                    }
                }
                Refinement::Stop => {}
            }
        }
        let has = |doc: usize, f: Field, t: &str| self.tokens(doc, f).iter().any(|x| x == t);
        let mut out = Vec::new();
        for doc in 0..self.index.num_docs() {
            let mut matched = false;
            let mut score = 0.0;
            for (t, f) in &scoring {
                let fields: &[Field] = match f {
                    None => &[Field::Contents, Field::Title],
                    Some(f) => std::slice::from_ref(f),
                };
                for &fl in fields {
                    if has(doc, fl, t) {
                        matched = true;
                        score += self.term(t, fl, doc);
                    }
                }
            }
            let pass = must.iter().all(|(f, t)| has(doc, *f, t)) && must_not.iter().all(|(f, t)| !has(doc, *f, t));
            if matched && pass {
                out.push((self.index.documents()[doc].doc_id.clone(), score));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }
}
