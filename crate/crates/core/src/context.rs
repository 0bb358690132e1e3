//! Shared search context: index, reader and the per-step mechanics of
//! issuing a query and pooling its results.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::index::SearchIndex;
use crate::observation::{build_observation, Observation, ObservationConfig, SessionState};
use crate::query::Refinement;
use crate::reader::{LexicalReader, Reader, ReaderOutput};
use crate::scoring::RewardConfig;

/// Read-only and cheap to clone; safe to share across worker threads.
#[derive(Clone)]
pub struct SearchContext {
    index: Arc<SearchIndex>,
    reader: Arc<dyn Reader>,
    pub k: usize,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
}

impl std::fmt::Debug for SearchContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SearchContext")
            .field("docs", &self.index.num_docs())
            .field("k", &self.k)
            .finish_non_exhaustive()
    }
}

impl SearchContext {
    pub fn new(index: Arc<SearchIndex>) -> Self {
        SearchContext {
            index,
            reader: Arc::new(LexicalReader::default()),
            k: 5,
            observation: ObservationConfig::default(),
            reward: RewardConfig::default(),
        }
    }

    pub fn with_reader(mut self, reader: Arc<dyn Reader>) -> Self {
        self.reader = reader;
        self
    }

    pub fn index(&self) -> &SearchIndex {
        &self.index
    }

    pub fn shared_index(&self) -> Arc<SearchIndex> {
        Arc::clone(&self.index)
    }

    /// Issues q_0 (the bare question) and reads its results.
    pub fn start(&self, question: &str, cache: &ReaderCache) -> Result<SessionState> {
        let mut ss = SessionState::new(question);
        if ss.question_tokens.is_empty() {
            return Err(Error::Episode("question has no searchable tokens".into()));
        }
        cache.bind(&ss.question_tokens);
        self.search_into(&mut ss, cache)?;
        Ok(ss)
    }

    /// The state after appending `r` and searching. STOP and refinements
    /// already in the query are rejected.
    pub fn advance(&self, ss: &SessionState, r: &Refinement, cache: &ReaderCache) -> Result<SessionState> {
        if r.is_stop() {
            return Err(Error::Episode("STOP does not issue a search".into()));
        }
        if ss.has_refinement(r) {
            return Err(Error::Episode(format!("duplicate refinement `{r}`")));
        }
        let mut next = ss.clone();
        next.refinements.push(r.clone());
        self.search_into(&mut next, cache)?;
        Ok(next)
    }

    fn search_into(&self, ss: &mut SessionState, cache: &ReaderCache) -> Result<()> {
        let result = self.index.execute_query(&ss.query(), self.k)?;
        for hit in &result.hits {
            if !ss.retrieved.contains_key(&hit.doc) {
                let out = cache.read(self, hit.doc, &ss.question_tokens);
                ss.retrieved.insert(hit.doc, out);
            }
        }
        ss.results.push(result);
        Ok(())
    }

    pub fn observe(&self, ss: &SessionState) -> Observation {
        build_observation(ss, &self.index, &self.observation)
    }
}

/// Number of documents the last search added to the pool.
pub fn new_documents(before: &SessionState, after: &SessionState) -> usize {
    after.retrieved.len() - before.retrieved.len()
}

/// Reader outputs for one question, plus a count of searches issued through
/// it. Single-episode, single-thread.
#[derive(Debug, Default)]
pub struct ReaderCache {
    question: RefCell<Vec<String>>,
    outputs: RefCell<HashMap<u32, Arc<ReaderOutput>>>,
    reads: Cell<usize>,
}

impl ReaderCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&self, question: &[String]) {
        let mut q = self.question.borrow_mut();
        if q.as_slice() != question {
            *q = question.to_vec();
            self.outputs.borrow_mut().clear();
        }
    }

    fn read(&self, ctx: &SearchContext, doc: u32, question: &[String]) -> Arc<ReaderOutput> {
        debug_assert_eq!(self.question.borrow().as_slice(), question);
        if let Some(out) = self.outputs.borrow().get(&doc) {
            return Arc::clone(out);
        }
        self.reads.set(self.reads.get() + 1);
        let out = Arc::new(ctx.reader.read(&ctx.index, doc, question));
        self.outputs.borrow_mut().insert(doc, Arc::clone(&out));
        out
    }

    /// Distinct documents read so far.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}
