//! Self-supervised session generation: greedy search over single-term
//! refinements, restricted by pseudo-relevance dictionaries built from the
//! results of the question plus its answer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::context::SearchContext;
use crate::corpus::QaPair;
use crate::error::{Error, Result};
use crate::index::SearchIndex;
use crate::observation::{refinement_clause, Observation};
use crate::query::{Field, Refinement, StructuredQuery};
use crate::scoring::session_ndcg;
use crate::session::{run_episode, Action, Agent, AgentView, EpisodeRecord};
use crate::text::{join_tokens, normalize_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Acceptance {
    FirstImproving,
    BestOfBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RocchioConfig {
    /// Candidate terms kept per step.
    pub n: usize,
    /// Searches allowed per step.
    pub m: usize,
    pub max_steps: usize,
    /// Depth of the ideal query's result set.
    pub k_star: usize,
    pub acceptance: Acceptance,
}

impl Default for RocchioConfig {
    fn default() -> Self {
        RocchioConfig {
            n: 100,
            m: 100,
            max_steps: 4,
            k_star: 5,
            acceptance: Acceptance::BestOfBudget,
        }
    }
}

impl RocchioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.max_steps == 0 || self.k_star == 0 {
            return Err(Error::Config(format!("rocchio parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Title and content tokens of the top `k_star` results for the question
/// followed by its first answer.
pub fn ideal_vocab<S: AsRef<str>>(question: &str, answers: &[S], index: &SearchIndex, k_star: usize) -> Result<BTreeSet<String>> {
    let mut tokens = normalize_text(question);
    if let Some(a) = answers.first() {
        tokens.extend(normalize_text(a.as_ref()));
    }
    let result = index.execute_query(&StructuredQuery::new(join_tokens(&tokens)), k_star)?;
    Ok(result
        .hits
        .iter()
        .flat_map(|h| {
            let d = index.doc(h.doc);
            d.title_tokens.iter().chain(&d.content_tokens).cloned()
        })
        .collect())
}

/// `(sigma_t & sigma_star, sigma_t - sigma_star)`.
pub fn constrained_dicts(sigma_t: &BTreeSet<String>, sigma_star: &BTreeSet<String>) -> (BTreeSet<String>, BTreeSet<String>) {
    let plus = sigma_t.intersection(sigma_star).cloned().collect();
    let minus = sigma_t.difference(sigma_star).cloned().collect();
    (plus, minus)
}

/// Every term visible in an observation: question, titles, answer spans and
/// result windows.
pub fn accessible_terms(obs: &Observation) -> BTreeSet<String> {
    obs.question
        .iter()
        .chain(obs.top.iter().flat_map(|d| d.title.iter().chain(&d.answer).chain(&d.window)))
        .cloned()
        .collect()
}

/// Candidate refinements in evaluation order: for each of the `n` highest
/// contents-idf accessible terms, the bare term, then `+` forms for terms in
/// `plus`, then `-` forms for terms in `minus`. Title forms only for terms
/// seen in a result title; refinements already applied are skipped.
pub fn propose_candidates(
    applied: &[Refinement],
    obs: &Observation,
    index: &SearchIndex,
    plus: &BTreeSet<String>,
    minus: &BTreeSet<String>,
    n: usize,
) -> Vec<Refinement> {
    let mut terms: Vec<(f64, String)> = accessible_terms(obs)
        .into_iter()
        .map(|t| (index.idf(&t, Field::Contents), t))
        .collect();
    terms.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    terms.truncate(n);

    let titles: BTreeSet<&str> = obs
        .top
        .iter()
        .flat_map(|d| d.title.iter().map(String::as_str))
        .collect();
    let mut out = Vec::new();
    for (_, w) in terms {
        let in_title = titles.contains(w.as_str());
        out.push(Refinement::or(w.clone()));
        if plus.contains(&w) {
            out.push(Refinement::must(Field::Contents, w.clone()));
            if in_title {
                out.push(Refinement::must(Field::Title, w.clone()));
            }
        }
        if minus.contains(&w) {
            out.push(Refinement::must_not(Field::Contents, w.clone()));
            if in_title {
                out.push(Refinement::must_not(Field::Title, w.clone()));
            }
        }
    }
    out.retain(|r| !applied.contains(r));
    out
}

/// Greedy Rocchio expansion as an agent. Needs gold answers.
#[derive(Debug, Clone)]
pub struct RocchioAgent {
    cfg: RocchioConfig,
    sigma_star: Option<BTreeSet<String>>,
}

impl RocchioAgent {
    pub fn new(cfg: RocchioConfig) -> Self {
        RocchioAgent { cfg, sigma_star: None }
    }

    pub fn config(&self) -> RocchioConfig {
        self.cfg
    }
}

impl Agent for RocchioAgent {
    fn label(&self) -> String {
        "rocchio".into()
    }

    fn stop_on_no_new_docs(&self) -> bool {
        true
    }

    fn begin(&mut self, _qa: &QaPair) {
        self.sigma_star = None;
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<Action> {
        let judger = view
            .judger
            .ok_or_else(|| Error::Episode("the rocchio agent needs gold answers".into()))?;
        let index = view.ctx.index();
        let sigma_star = match &self.sigma_star {
            Some(s) => s,
            None => {
                let s = ideal_vocab(&view.state.question, view.answers, index, self.cfg.k_star)?;
                self.sigma_star.insert(s)
            }
        };
        let obs = view.ctx.observe(view.state);
        let (plus, minus) = constrained_dicts(&accessible_terms(&obs), sigma_star);
        let candidates = propose_candidates(&view.state.refinements, &obs, index, &plus, &minus, self.cfg.n);

        let k = view.ctx.reward.k;
        let before = session_ndcg(view.state, index, judger, k);
        let mut best: Option<(f64, &Refinement)> = None;
        let mut spent = 0;
        for cand in candidates.iter().take(self.cfg.m) {
            let next = view.ctx.advance(view.state, cand, view.cache)?;
            spent += 1;
            let after = session_ndcg(&next, index, judger, k);
            if after > before && best.is_none_or(|(b, _)| after > b) {
                best = Some((after, cand));
                if self.cfg.acceptance == Acceptance::FirstImproving {
                    break;
                }
            }
        }
        Ok(Action {
            refinement: best.map_or(Refinement::Stop, |(_, r)| r.clone()),
            searches_spent: Some(spent),
        })
    }
}

pub fn generate_session(ctx: &SearchContext, qa: &QaPair, cfg: RocchioConfig) -> Result<EpisodeRecord> {
    cfg.validate()?;
    run_episode(ctx, qa, &mut RocchioAgent::new(cfg), cfg.max_steps)
}

/// One (observation, target clause) training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct T5Pair {
    pub input: String,
    pub target: String,
}

/// A pair per refinement step of each episode.
pub fn export_t5(records: &[EpisodeRecord]) -> Vec<T5Pair> {
    records
        .iter()
        .flat_map(|r| &r.steps)
        .map(|s| T5Pair {
            input: s.observation.clone(),
            target: refinement_clause(&s.refinement),
        })
        .collect()
}
