//! Grammar-guided Monte Carlo tree search with pUCT selection.
//!
//! Tree edges are grammar rules. A simulation descends by pUCT and keeps
//! expanding depth-first until one new refinement completes; that refinement
//! is executed against the real index (memoized by query string for the
//! whole episode) and its reward is credited on the completing edge.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::context::{ReaderCache, SearchContext};
use crate::corpus::QaPair;
use crate::error::{Error, Result};
use crate::grammar::{apply_unchecked, Grammar, GrammarState, Rule, SessionVocabularies, Symbol};
use crate::index::SearchIndex;
use crate::observation::{Observation, SessionState};
use crate::query::Refinement;
use crate::scoring::{session_ndcg, RelevanceJudger};
use crate::session::{Action, Agent, AgentView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlannerMode {
    /// Rewards are NDCG differences against gold answers; leaf value 0.
    OracleReward,
    /// Rewards are penalties only; leaf values come from the evaluator.
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub simulations: usize,
    pub max_episode_steps: usize,
    pub c1: f64,
    pub c2: f64,
    pub mode: PlannerMode,
    /// Refinement completions allowed along one simulation path.
    pub max_completions: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            simulations: 100,
            max_episode_steps: 10,
            c1: 1.25,
            c2: 19652.0,
            mode: PlannerMode::OracleReward,
            max_completions: 5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.simulations == 0 || self.max_completions == 0 {
            return Err(Error::Config("simulations and max_completions must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs handed to an evaluator at a tree node.
pub struct EvalInput<'a> {
    pub grammar_state: &'a GrammarState,
    pub rules: &'a [Rule],
    /// Contents idf for term rules, `None` for structural rules.
    pub weights: &'a [Option<f64>],
    pub state: &'a SessionState,
    pub observation: &'a Observation,
    pub index: &'a SearchIndex,
}

/// Policy and value plug point. Priors must be non-negative and sum to 1.
pub trait Evaluator {
    /// Called once before each episode.
    fn begin(&mut self, _qa: &QaPair) {}

    fn policy(&self, input: &EvalInput<'_>) -> Vec<f64>;
    fn value(&self, input: &EvalInput<'_>) -> f64;
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Priors proportional to term idf (uniform over structural rules); value is
/// the mean PS score of the current top 5 squashed by `x / (1 + |x|)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicEvaluator;

impl Evaluator for HeuristicEvaluator {
    fn policy(&self, input: &EvalInput<'_>) -> Vec<f64> {
        let n = input.rules.len();
        let weights: Option<Vec<f64>> = input.weights.iter().map(|w| w.map(|x| x.max(0.0))).collect();
        match weights {
            Some(w) if n > 0 => {
                let total: f64 = w.iter().sum();
                if total > 0.0 {
                    w.iter().map(|x| x / total).collect()
                } else {
                    uniform(n)
                }
            }
            _ => uniform(n),
        }
    }

    fn value(&self, input: &EvalInput<'_>) -> f64 {
        let top = input.state.aggregate_top5();
        if top.is_empty() {
            return 0.0;
        }
        let n = top.len() as f64;
        let mean: f64 = top.iter().map(|(_, ps)| ps / n).sum();
        mean / (1.0 + mean.abs())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UniformEvaluator;

impl Evaluator for UniformEvaluator {
    fn policy(&self, input: &EvalInput<'_>) -> Vec<f64> {
        uniform(input.rules.len())
    }

    fn value(&self, _input: &EvalInput<'_>) -> f64 {
        0.0
    }
}

/// pUCT score of a child.
pub fn puct_score(parent_n: u32, prior: f64, child_n: u32, child_q: f64, c1: f64, c2: f64) -> f64 {
    let parent = f64::from(parent_n.max(1));
    let explore = prior * parent.sqrt() / (1.0 + f64::from(child_n)) * (c1 + ((parent + c2 + 1.0) / c2).ln());
    child_q + explore
}

/// Index of the child maximizing pUCT; the first one on ties. `children`
/// holds `(prior, visits, q)`, with `q = 0` for unvisited children. A parent
/// that has not been visited yet is treated as visited once, so fresh nodes
/// pick by prior.
pub fn select_child(parent_n: u32, children: &[(f64, u32, f64)], c1: f64, c2: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(p, n, q)) in children.iter().enumerate() {
        let s = puct_score(parent_n, p, n, q, c1, c2);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Session state reached by a sequence of completed refinements.
#[derive(Debug)]
pub struct Snapshot {
    pub state: SessionState,
    pub observation: Observation,
    pub vocabs: SessionVocabularies,
    pub ndcg: Option<f64>,
}

#[derive(Debug)]
pub struct Node {
    pub gs: GrammarState,
    snap: Rc<Snapshot>,
    /// Completions along the path from the root, this node included.
    depth: usize,
    pub rules: Vec<Rule>,
    pub priors: Vec<f64>,
    pub children: Vec<Option<usize>>,
    expanded: bool,
    pub terminal: bool,
    terminal_value: f64,
    /// Refinement completed on the edge into this node.
    pub completion: Option<Refinement>,
    /// Duplicate refinement or dead end; never returned by `plan_step`.
    pub invalid: bool,
    pub edge_reward: f64,
    pub visits: u32,
    pub value_sum: f64,
    pub leaf_evals: u32,
}

impl Node {
    pub fn mean_value(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / f64::from(self.visits)
        }
    }

    pub fn session(&self) -> &Snapshot {
        &self.snap
    }
}

#[derive(Debug, Default)]
pub struct SearchTree {
    pub nodes: Vec<Node>,
}

impl SearchTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Value of a child as seen from its parent.
    pub fn q(&self, child: usize) -> f64 {
        let c = &self.nodes[child];
        if c.visits == 0 {
            0.0
        } else {
            c.edge_reward + c.mean_value()
        }
    }

    /// `visits = leaf evaluations + sum of child visits` at every node.
    pub fn visits_conserved(&self) -> bool {
        self.nodes.iter().all(|n| {
            let kids: u32 = n.children.iter().flatten().map(|&c| self.nodes[c].visits).sum();
            n.visits == n.leaf_evals + kids
        })
    }
}

/// Engine results shared by all plan steps of one episode.
#[derive(Debug, Default)]
pub struct EngineMemo {
    states: HashMap<String, Rc<Snapshot>>,
    calls: usize,
}

impl EngineMemo {
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub refinement: Refinement,
    pub tree: SearchTree,
    pub engine_calls: usize,
}

pub struct Planner<'a> {
    pub ctx: &'a SearchContext,
    pub grammar: &'a Grammar,
    pub cfg: PlannerConfig,
    pub evaluator: &'a dyn Evaluator,
    pub judger: Option<&'a RelevanceJudger>,
    pub cache: &'a ReaderCache,
}

impl Planner<'_> {
    fn snapshot(&self, state: SessionState) -> Snapshot {
        let observation = self.ctx.observe(&state);
        let vocabs = self.grammar.session_vocabs(&observation, self.ctx.index());
        let ndcg = self
            .judger
            .map(|j| session_ndcg(&state, self.ctx.index(), j, self.ctx.reward.k));
        Snapshot {
            state,
            observation,
            vocabs,
            ndcg,
        }
    }

    fn eval_input<'b>(
        &'b self,
        gs: &'b GrammarState,
        snap: &'b Snapshot,
        rules: &'b [Rule],
        weights: &'b [Option<f64>],
    ) -> EvalInput<'b> {
        EvalInput {
            grammar_state: gs,
            rules,
            weights,
            state: &snap.state,
            observation: &snap.observation,
            index: self.ctx.index(),
        }
    }

    fn leaf_value(&self, snap: &Snapshot) -> f64 {
        match self.cfg.mode {
            PlannerMode::OracleReward => 0.0,
            PlannerMode::Heuristic => self.evaluator.value(&self.eval_input(&GrammarState::new(), snap, &[], &[])),
        }
    }

    /// Plans one refinement from `state`. `horizon` caps completions per
    /// simulation path (normally the steps left in the episode).
    pub fn plan(&self, state: &SessionState, horizon: usize, memo: &mut EngineMemo) -> Result<PlanOutcome> {
        self.cfg.validate()?;
        if self.cfg.mode == PlannerMode::OracleReward && self.judger.is_none() {
            return Err(Error::Episode("oracle-reward planning needs gold answers".into()));
        }
        let horizon = horizon.min(self.cfg.max_completions);
        let calls_before = memo.calls;
        let root_snap = match memo.states.get(&state.query_string()) {
            Some(s) => Rc::clone(s),
            None => {
                let s = Rc::new(self.snapshot(state.clone()));
                memo.states.insert(state.query_string(), Rc::clone(&s));
                s
            }
        };
        let mut tree = SearchTree::default();
        tree.nodes.push(self.new_node(GrammarState::new(), root_snap, 0));
        if horizon == 0 {
            return Ok(PlanOutcome {
                refinement: Refinement::Stop,
                tree,
                engine_calls: 0,
            });
        }
        for _ in 0..self.cfg.simulations {
            self.simulate(&mut tree, horizon, memo)?;
        }
        let refinement = best_refinement(&tree);
        Ok(PlanOutcome {
            refinement,
            tree,
            engine_calls: memo.calls - calls_before,
        })
    }

    fn new_node(&self, gs: GrammarState, snap: Rc<Snapshot>, depth: usize) -> Node {
        Node {
            gs,
            snap,
            depth,
            rules: Vec::new(),
            priors: Vec::new(),
            children: Vec::new(),
            expanded: false,
            terminal: false,
            terminal_value: 0.0,
            completion: None,
            invalid: false,
            edge_reward: 0.0,
            visits: 0,
            value_sum: 0.0,
            leaf_evals: 0,
        }
    }

    fn expand(&self, tree: &mut SearchTree, id: usize) -> Result<()> {
        let node = &tree.nodes[id];
        let snap = Rc::clone(&node.snap);
        let mut rules = self.grammar.applicable_rules(&node.gs, &snap.vocabs)?;
        if matches!(node.gs.top(), Some(Symbol::Prefix(_) | Symbol::Suffix(_))) {
            rules.retain(|r| match apply_unchecked(&node.gs, r).1 {
                Some(c) => !snap.state.has_refinement(&c.refinement),
                None => true,
            });
        }
        let weights: Vec<Option<f64>> = rules
            .iter()
            .map(|r| self.grammar.rule_weight(&node.gs, r, &snap.vocabs, self.ctx.index()))
            .collect();
        let priors = if rules.is_empty() {
            Vec::new()
        } else {
            self.evaluator.policy(&self.eval_input(&node.gs, &snap, &rules, &weights))
        };
        let node = &mut tree.nodes[id];
        node.children = vec![None; rules.len()];
        node.rules = rules;
        node.priors = priors;
        node.expanded = true;
        if node.rules.is_empty() {
            node.terminal = true;
            node.invalid = true;
            node.terminal_value = -1.0;
        }
        Ok(())
    }

    fn select(&self, tree: &SearchTree, id: usize) -> usize {
        let node = &tree.nodes[id];
        let stats: Vec<(f64, u32, f64)> = node
            .children
            .iter()
            .zip(&node.priors)
            .map(|(c, &p)| match c {
                Some(c) => (p, tree.nodes[*c].visits, tree.q(*c)),
                None => (p, 0, 0.0),
            })
            .collect();
        select_child(node.visits, &stats, self.cfg.c1, self.cfg.c2).expect("expanded node has rules")
    }

    /// Creates the child for `rule_idx`; returns it and, for completing
    /// edges, the leaf value to back up.
    fn create_child(
        &self,
        tree: &mut SearchTree,
        parent: usize,
        rule_idx: usize,
        horizon: usize,
        memo: &mut EngineMemo,
    ) -> Result<(usize, Option<f64>)> {
        let p = &tree.nodes[parent];
        let rule = p.rules[rule_idx].clone();
        let (gs, done) = apply_unchecked(&p.gs, &rule);
        let snap = Rc::clone(&p.snap);
        let depth = p.depth;
        let mut child;
        let mut leaf = None;
        match done {
            None => child = self.new_node(gs, snap, depth),
            Some(c) if c.refinement.is_stop() => {
                child = self.new_node(gs, Rc::clone(&snap), depth + 1);
                let step = snap.state.step();
                child.edge_reward = if step == 0 {
                    self.ctx.reward.immediate_stop_penalty
                } else {
                    0.0
                };
                child.terminal = true;
                child.completion = Some(c.refinement);
                leaf = Some(0.0);
            }
            Some(c) if snap.state.has_refinement(&c.refinement) => {
                child = self.new_node(gs, Rc::clone(&snap), depth + 1);
                child.edge_reward = -1.0;
                child.terminal = true;
                child.invalid = true;
                child.completion = Some(c.refinement);
                leaf = Some(0.0);
            }
            Some(c) => {
                let key = format!("{} {}", snap.state.query_string(), c.refinement.render());
                let next = match memo.states.get(&key) {
                    Some(s) => Rc::clone(s),
                    None => {
                        let state = self.ctx.advance(&snap.state, &c.refinement, self.cache)?;
                        memo.calls += 1;
                        let s = Rc::new(self.snapshot(state));
                        memo.states.insert(key, Rc::clone(&s));
                        s
                    }
                };
                let empty = next.state.results.last().is_none_or(|r| r.is_empty());
                let penalty = if empty { self.ctx.reward.empty_result_penalty } else { 0.0 };
                let delta = match self.cfg.mode {
                    PlannerMode::OracleReward => next.ndcg.unwrap_or(0.0) - snap.ndcg.unwrap_or(0.0),
                    PlannerMode::Heuristic => 0.0,
                };
                let value = self.leaf_value(&next);
                child = self.new_node(GrammarState::new(), next, depth + 1);
                child.edge_reward = delta + penalty;
                child.completion = Some(c.refinement);
                if depth + 1 >= horizon {
                    child.terminal = true;
                    child.terminal_value = value;
                }
                leaf = Some(value);
            }
        }
        let id = tree.nodes.len();
        tree.nodes.push(child);
        tree.nodes[parent].children[rule_idx] = Some(id);
        Ok((id, leaf))
    }

    fn simulate(&self, tree: &mut SearchTree, horizon: usize, memo: &mut EngineMemo) -> Result<()> {
        let mut path = vec![0usize];
        let mut id = 0;
        let value = loop {
            if !tree.nodes[id].terminal && !tree.nodes[id].expanded {
                self.expand(tree, id)?;
            }
            let node = &tree.nodes[id];
            if node.terminal {
                let v = node.terminal_value;
                tree.nodes[id].leaf_evals += 1;
                break v;
            }
            let i = self.select(tree, id);
            match tree.nodes[id].children[i] {
                Some(c) => {
                    id = c;
                    path.push(id);
                }
                None => {
                    let (c, leaf) = self.create_child(tree, id, i, horizon, memo)?;
                    id = c;
                    path.push(id);
                    if let Some(v) = leaf {
                        tree.nodes[id].leaf_evals += 1;
                        break v;
                    }
                }
            }
        };
        let mut g = value;
        for &n in path.iter().rev() {
            let node = &mut tree.nodes[n];
            node.visits += 1;
            node.value_sum += g;
            g += node.edge_reward;
        }
        Ok(())
    }
}

/// Follows the most visited valid child from the root (first on ties)
/// until a refinement completes. Falls back to STOP.
fn best_refinement(tree: &SearchTree) -> Refinement {
    let mut id = 0;
    loop {
        let node = &tree.nodes[id];
        let mut best: Option<(usize, u32)> = None;
        for &c in node.children.iter().flatten() {
            let child = &tree.nodes[c];
            if child.invalid || child.visits == 0 {
                continue;
            }
            if best.is_none_or(|(_, v)| child.visits > v) {
                best = Some((c, child.visits));
            }
        }
        let Some((c, _)) = best else {
            return Refinement::Stop;
        };
        if let Some(r) = &tree.nodes[c].completion {
            return r.clone();
        }
        id = c;
    }
}

/// Plans every step with a fresh tree; engine results are memoized across
/// the steps of an episode.
pub struct MctsAgent {
    grammar: Grammar,
    cfg: PlannerConfig,
    evaluator: Box<dyn Evaluator>,
    memo: EngineMemo,
    plan_log: Vec<PlanStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStats {
    pub engine_calls: usize,
    pub tree_nodes: usize,
    pub visits_conserved: bool,
}

impl MctsAgent {
    pub fn new(grammar: Grammar, cfg: PlannerConfig, evaluator: Box<dyn Evaluator>) -> Self {
        MctsAgent {
            grammar,
            cfg,
            evaluator,
            memo: EngineMemo::default(),
            plan_log: Vec::new(),
        }
    }

    /// Planner with [`HeuristicEvaluator`] priors. Its leaf values are only
    /// consulted in heuristic mode.
    pub fn with_default_evaluator(grammar: Grammar, cfg: PlannerConfig) -> Self {
        Self::new(grammar, cfg, Box::new(HeuristicEvaluator))
    }

    pub fn plan_log(&self) -> &[PlanStats] {
        &self.plan_log
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }
}

impl Agent for MctsAgent {
    fn label(&self) -> String {
        match self.cfg.mode {
            PlannerMode::OracleReward => "mcts-oracle".into(),
            PlannerMode::Heuristic => "mcts-heuristic".into(),
        }
    }

    fn begin(&mut self, qa: &QaPair) {
        self.evaluator.begin(qa);
        self.memo = EngineMemo::default();
        self.plan_log.clear();
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<Action> {
        let planner = Planner {
            ctx: view.ctx,
            grammar: &self.grammar,
            cfg: self.cfg,
            evaluator: self.evaluator.as_ref(),
            judger: view.judger,
            cache: view.cache,
        };
        let steps_left = view.steps_left.min(self.cfg.max_episode_steps.saturating_sub(view.state.step()));
        let out = planner.plan(view.state, steps_left, &mut self.memo)?;
        self.plan_log.push(PlanStats {
            engine_calls: out.engine_calls,
            tree_nodes: out.tree.nodes.len(),
            visits_conserved: out.tree.visits_conserved(),
        });
        Ok(Action {
            refinement: out.refinement,
            searches_spent: Some(out.engine_calls),
        })
    }
}

/// One-step lookahead over every derivable refinement with gold rewards:
/// takes the best one if it improves the reward, otherwise stops.
pub struct GreedyLookaheadAgent {
    grammar: Grammar,
}

impl GreedyLookaheadAgent {
    pub fn new(grammar: Grammar) -> Self {
        GreedyLookaheadAgent { grammar }
    }
}

impl Agent for GreedyLookaheadAgent {
    fn label(&self) -> String {
        "greedy-lookahead".into()
    }

    fn act(&mut self, view: &AgentView<'_>) -> Result<Action> {
        let judger = view
            .judger
            .ok_or_else(|| Error::Episode("greedy lookahead needs gold answers".into()))?;
        let index = view.ctx.index();
        let cfg = &view.ctx.reward;
        let obs = view.ctx.observe(view.state);
        let vocabs = self.grammar.session_vocabs(&obs, index);
        let before = session_ndcg(view.state, index, judger, cfg.k);
        let mut best: Option<(f64, Refinement)> = None;
        let mut spent = 0;
        for c in self.grammar.enumerate(&vocabs)? {
            if view.state.has_refinement(&c.refinement) {
                continue;
            }
            let next = view.ctx.advance(view.state, &c.refinement, view.cache)?;
            spent += 1;
            let empty = next.results.last().is_none_or(|r| r.is_empty());
            let penalty = if empty { cfg.empty_result_penalty } else { 0.0 };
            let reward = session_ndcg(&next, index, judger, cfg.k) - before + penalty;
            if best.as_ref().is_none_or(|(b, _)| reward > *b) {
                best = Some((reward, c.refinement));
            }
        }
        let refinement = match best {
            Some((r, refinement)) if r > 0.0 => refinement,
            _ => Refinement::Stop,
        };
        Ok(Action {
            refinement,
            searches_spent: Some(spent),
        })
    }
}
