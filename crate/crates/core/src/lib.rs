//! Interactive BM25 search environment for learning query refinement.
//!
//! A session starts from a question, searches a passage index, and then
//! applies one refinement per step (an extra term, or a `+`/`-` operator
//! restricted to a field). Retrieved passages are pooled and re-ranked by a
//! reader score, and the reward is the change in NDCG@5 of that pool.

pub mod context;
pub mod corpus;
pub mod desk;
pub mod error;
pub mod grammar;
pub mod index;
pub mod mcts;
pub mod observation;
pub mod query;
pub mod reader;
pub mod report;
pub mod rocchio;
pub mod scoring;
pub mod session;
pub mod text;

pub use context::{ReaderCache, SearchContext};
pub use corpus::{Corpus, Document, QaPair, RawDocument};
pub use error::{Error, ErrorCode, Result};
pub use grammar::{Grammar, GrammarConfig, GrammarState, Rule, SessionVocabularies, Source, Symbol};
pub use mcts::{Evaluator, GreedyLookaheadAgent, HeuristicEvaluator, MctsAgent, PlannerConfig, PlannerMode};
pub use index::{Bm25Params, SearchIndex, SearchResult};
pub use observation::{build_observation, Observation, ObservationConfig, SessionState};
pub use query::{Field, Op, Refinement, StructuredQuery};
pub use report::{evaluate_dataset, summarize, Report};
pub use rocchio::{generate_session, RocchioAgent, RocchioConfig};
pub use reader::{LexicalReader, Reader, ReaderOutput};
pub use scoring::{ndcg_at_k, Metrics, RelevanceJudger, RewardConfig};
pub use session::{run_episode, Agent, EnvConfig, Environment, EpisodeRecord};
pub use text::normalize_text;
