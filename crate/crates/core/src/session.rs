//! Episode loop: an environment that advances one refinement per step, the
//! agent contract, and the JSONL episode record.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{new_documents, ReaderCache, SearchContext};
use crate::corpus::QaPair;
use crate::error::{Error, Result};
use crate::grammar::{apply_unchecked, Grammar, GrammarConfig, GrammarState};
use crate::observation::{serialize_flat, serialize_layered, LayeredRecord, SessionState};
use crate::query::Refinement;
use crate::scoring::{session_metrics, session_ndcg, Metrics, RelevanceJudger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stop,
    StepCap,
    NoNewDocuments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialRecord {
    pub query_string: String,
    pub result_ids: Vec<String>,
    pub ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub query_string: String,
    pub refinement: Refinement,
    /// Flat observation the refinement was chosen from.
    pub observation: String,
    pub result_ids: Vec<String>,
    pub new_documents: usize,
    pub reward: Option<f64>,
    pub penalty: f64,
    pub ndcg_before: Option<f64>,
    pub ndcg_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub searches_spent: Option<usize>,
}

/// One pooled document, in aggregated (PS) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub doc_id: String,
    pub ps_score: f64,
    pub relevant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub question: String,
    pub answers: Vec<String>,
    pub agent: String,
    pub max_steps: usize,
    pub initial: InitialRecord,
    pub steps: Vec<StepRecord>,
    /// Reward of the STOP action, when the episode ended with one.
    pub terminal_reward: Option<f64>,
    pub termination: Option<Termination>,
    pub final_metrics: Option<Metrics>,
    pub pool: Vec<PoolEntry>,
}

impl EpisodeRecord {
    pub fn final_query_string(&self) -> &str {
        self.steps
            .last()
            .map_or(self.initial.query_string.as_str(), |s| s.query_string.as_str())
    }

    /// Sum of all step rewards, the terminal one included.
    pub fn total_reward(&self) -> Option<f64> {
        let steps: Option<f64> = self.steps.iter().map(|s| s.reward).sum();
        Some(steps? + self.terminal_reward.unwrap_or(0.0))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("episode records always serialize")
    }
}

pub fn write_episodes(path: impl AsRef<Path>, records: &[EpisodeRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Environment

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub max_steps: usize,
    /// End the episode when a search adds no new documents to the pool.
    pub stop_on_no_new_docs: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_steps: 10,
            stop_on_no_new_docs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPayload {
    pub flat: String,
    pub layered: LayeredRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub observation: ObservationPayload,
    pub reward: Option<f64>,
    pub done: bool,
}

struct Episode {
    state: SessionState,
    cache: ReaderCache,
    judger: Option<RelevanceJudger>,
    record: EpisodeRecord,
    done: bool,
}

/// One active episode at a time over a shared context. Speaks refinement
/// strings and serialized observations, so it can sit behind a foreign
/// function boundary.
pub struct Environment {
    ctx: SearchContext,
    cfg: EnvConfig,
    label: String,
    episode: Option<Episode>,
}

impl Environment {
    pub fn new(ctx: SearchContext, cfg: EnvConfig) -> Self {
        Environment {
            ctx,
            cfg,
            label: "external".into(),
            episode: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn context(&self) -> &SearchContext {
        &self.ctx
    }

    pub fn config(&self) -> EnvConfig {
        self.cfg
    }

    /// Starts a new episode, discarding any current one. Without answers no
    /// rewards or relevance-based metrics are produced.
    pub fn reset(&mut self, question: &str, answers: Option<&[String]>) -> Result<ObservationPayload> {
        self.episode = None;
        let cache = ReaderCache::new();
        let state = self.ctx.start(question, &cache)?;
        let judger = answers.map(RelevanceJudger::new);
        let ndcg = judger
            .as_ref()
            .map(|j| session_ndcg(&state, self.ctx.index(), j, self.ctx.reward.k));
        let first = &state.results[0];
        let record = EpisodeRecord {
            question: question.to_owned(),
            answers: answers.map(<[String]>::to_vec).unwrap_or_default(),
            agent: self.label.clone(),
            max_steps: self.cfg.max_steps,
            initial: InitialRecord {
                query_string: first.query.clone(),
                result_ids: first.doc_ids(),
                ndcg,
            },
            steps: Vec::new(),
            terminal_reward: None,
            termination: None,
            final_metrics: None,
            pool: Vec::new(),
        };
        let mut ep = Episode {
            state,
            cache,
            judger,
            record,
            done: false,
        };
        if self.cfg.max_steps == 0 {
            ep.done = true;
            ep.record.termination = Some(Termination::StepCap);
        }
        self.episode = Some(ep);
        self.observe()
    }

    fn active(&self) -> Result<&Episode> {
        self.episode.as_ref().ok_or(Error::NoEpisode)
    }

    pub fn observe(&self) -> Result<ObservationPayload> {
        let ep = self.active()?;
        let obs = self.ctx.observe(&ep.state);
        Ok(ObservationPayload {
            flat: serialize_flat(&obs),
            layered: serialize_layered(&obs, self.ctx.index()),
        })
    }

    pub fn state(&self) -> Result<&SessionState> {
        Ok(&self.active()?.state)
    }

    pub fn cache(&self) -> Result<&ReaderCache> {
        Ok(&self.active()?.cache)
    }

    pub fn judger(&self) -> Result<Option<&RelevanceJudger>> {
        Ok(self.active()?.judger.as_ref())
    }

    pub fn is_done(&self) -> Result<bool> {
        Ok(self.active()?.done)
    }

    /// Parses and applies one refinement (or `STOP`). A parse error leaves
    /// the episode untouched.
    pub fn step(&mut self, refinement: &str) -> Result<StepPayload> {
        let r = Refinement::parse(refinement)?;
        self.apply(r, None)
    }

    pub fn apply(&mut self, r: Refinement, searches_spent: Option<usize>) -> Result<StepPayload> {
        let ctx = &self.ctx;
        let cfg = self.cfg;
        let ep = self.episode.as_mut().ok_or(Error::NoEpisode)?;
        if ep.done {
            return Err(Error::Done);
        }
        let index = ctx.index();
        let reward;
        if r.is_stop() {
            let penalty = if ep.state.step() == 0 {
                ctx.reward.immediate_stop_penalty
            } else {
                0.0
            };
            reward = ep.judger.as_ref().map(|_| penalty);
            ep.record.terminal_reward = Some(penalty);
            ep.record.termination = Some(Termination::Stop);
            ep.done = true;
        } else {
            let observation = serialize_flat(&ctx.observe(&ep.state));
            let next = ctx.advance(&ep.state, &r, &ep.cache)?;
            let result = next.results.last().expect("advance records a search");
            let penalty = if result.is_empty() {
                ctx.reward.empty_result_penalty
            } else {
                0.0
            };
            let before = ep.judger.as_ref().map(|j| session_ndcg(&ep.state, index, j, ctx.reward.k));
            let after = ep.judger.as_ref().map(|j| session_ndcg(&next, index, j, ctx.reward.k));
            reward = before.zip(after).map(|(b, a)| a - b + penalty);
            let fresh = new_documents(&ep.state, &next);
            ep.record.steps.push(StepRecord {
                query_string: result.query.clone(),
                refinement: r,
                observation,
                result_ids: result.doc_ids(),
                new_documents: fresh,
                reward,
                penalty,
                ndcg_before: before,
                ndcg_after: after,
                searches_spent,
            });
            ep.state = next;
            if ep.state.step() >= cfg.max_steps {
                ep.done = true;
                ep.record.termination = Some(Termination::StepCap);
            } else if cfg.stop_on_no_new_docs && fresh == 0 {
                ep.done = true;
                ep.record.termination = Some(Termination::NoNewDocuments);
            }
        }
        let done = ep.done;
        Ok(StepPayload {
            observation: self.observe()?,
            reward,
            done,
        })
    }

    /// Snapshot of the episode so far, with metrics of the current pool.
    pub fn record(&self) -> Result<EpisodeRecord> {
        let ep = self.active()?;
        let index = self.ctx.index();
        let mut rec = ep.record.clone();
        rec.final_metrics = ep.judger.as_ref().map(|j| session_metrics(&ep.state, index, j));
        rec.pool = ep
            .state
            .ranked()
            .into_iter()
            .map(|(d, ps)| PoolEntry {
                doc_id: index.doc(d).doc_id.clone(),
                ps_score: ps,
                relevant: ep.judger.as_ref().map(|j| j.is_relevant(index.doc(d))),
            })
            .collect();
        Ok(rec)
    }

    pub fn close(&mut self) {
        self.episode = None;
    }
}

// ---------------------------------------------------------------------------
// Agents

/// What an agent sees when choosing a refinement.
pub struct AgentView<'a> {
    pub ctx: &'a SearchContext,
    pub state: &'a SessionState,
    pub cache: &'a ReaderCache,
    /// Present only for agents run with gold answers.
    pub judger: Option<&'a RelevanceJudger>,
    pub answers: &'a [String],
    pub steps_left: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub refinement: Refinement,
    pub searches_spent: Option<usize>,
}

impl From<Refinement> for Action {
    fn from(refinement: Refinement) -> Self {
        Action {
            refinement,
            searches_spent: None,
        }
    }
}

pub trait Agent {
    fn label(&self) -> String;

    fn stop_on_no_new_docs(&self) -> bool {
        false
    }

    /// Called once before each episode.
    fn begin(&mut self, _qa: &QaPair) {}

    fn act(&mut self, view: &AgentView<'_>) -> Result<Action>;
}

/// Runs one episode to termination. Duplicate or invalid refinements abort
/// it with an error.
pub fn run_episode(ctx: &SearchContext, qa: &QaPair, agent: &mut dyn Agent, max_steps: usize) -> Result<EpisodeRecord> {
    let cfg = EnvConfig {
        max_steps,
        stop_on_no_new_docs: agent.stop_on_no_new_docs(),
    };
    let mut env = Environment::new(ctx.clone(), cfg).with_label(agent.label());
    env.reset(&qa.question, Some(&qa.answers))?;
    agent.begin(qa);
    while !env.is_done()? {
        let action = {
            let ep = env.active()?;
            let view = AgentView {
                ctx,
                state: &ep.state,
                cache: &ep.cache,
                judger: ep.judger.as_ref(),
                answers: &qa.answers,
                steps_left: max_steps - ep.state.step(),
            };
            agent.act(&view)?
        };
        env.apply(action.refinement, action.searches_spent)?;
    }
    env.record()
}

/// Issues no refinements: the BM25 results re-ranked by PS.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineAgent;

impl Agent for BaselineAgent {
    fn label(&self) -> String {
        "baseline".into()
    }

    fn act(&mut self, _view: &AgentView<'_>) -> Result<Action> {
        Ok(Refinement::Stop.into())
    }
}

/// Plays a fixed list of refinements, then STOP.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    script: Vec<Refinement>,
    pos: usize,
}

impl ScriptedAgent {
    pub fn new(script: Vec<Refinement>) -> Self {
        ScriptedAgent { script, pos: 0 }
    }
}

impl Agent for ScriptedAgent {
    fn label(&self) -> String {
        "scripted".into()
    }

    fn begin(&mut self, _qa: &QaPair) {
        self.pos = 0;
    }

    fn act(&mut self, _view: &AgentView<'_>) -> Result<Action> {
        let r = self.script.get(self.pos).cloned().unwrap_or(Refinement::Stop);
        self.pos += 1;
        Ok(r.into())
    }
}

/// Samples uniformly among applicable grammar rules until a refinement
/// completes. Derivations that repeat an applied refinement are redrawn.
pub struct RandomGrammarAgent {
    grammar: Grammar,
    rng: ChaCha8Rng,
    attempts: usize,
}

impl RandomGrammarAgent {
    pub fn new(grammar: Grammar, seed: u64) -> Self {
        RandomGrammarAgent {
            grammar,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attempts: 20,
        }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }
}

impl Agent for RandomGrammarAgent {
    fn label(&self) -> String {
        "random-grammar".into()
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<Action> {
        let obs = view.ctx.observe(view.state);
        let vocabs = self.grammar.session_vocabs(&obs, view.ctx.index());
        for _ in 0..self.attempts {
            let mut gs = GrammarState::new();
            loop {
                let rules = self.grammar.applicable_rules(&gs, &vocabs)?;
                let Some(rule) = rules.choose(&mut self.rng) else {
                    break;
                };
                let (next, done) = apply_unchecked(&gs, rule);
                if let Some(c) = done {
                    if !view.state.has_refinement(&c.refinement) {
                        return Ok(c.refinement.into());
                    }
                    break;
                }
                gs = next;
            }
        }
        Ok(Refinement::Stop.into())
    }
}

impl RandomGrammarAgent {
    pub fn whole_term(ctx: &SearchContext, seed: u64) -> Self {
        Self::new(Grammar::new(ctx.index(), GrammarConfig::default()), seed)
    }
}
