//! Context-free action space for query refinement.
//!
//! ```text
//! Q     => W Q | U Q | STOP
//! U     => Op Field W
//! Op    => + | -
//! Field => title | contents
//! W     => W^q | W^tau | W^beta | W^alpha | W^idx
//! W^x   => V^x | V^x Wbar^x          (wordpiece mode)
//! Wbar^x => Vbar^x | Vbar^x Wbar^x
//! W^x   => V^x                        (whole-term mode, V^x => term)
//! ```
//!
//! Derivation keeps a stack of pending nonterminals and an output buffer.
//! Right-hand sides are pushed right-to-left; whenever the stack is back to
//! `[Q]` with a non-empty buffer, the buffer is turned into a [`Refinement`]
//! and cleared.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::SearchIndex;
use crate::observation::Observation;
use crate::query::{Field, Op, Refinement};

pub const DEFAULT_MAX_ACTIONS: usize = 100;

/// Where a refinement term comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Question,
    Title,
    Body,
    Answer,
    Index,
}

impl Source {
    pub const ALL: [Source; 5] = [Source::Question, Source::Title, Source::Body, Source::Answer, Source::Index];

    pub fn tag(self) -> &'static str {
        match self {
            Source::Question => "q",
            Source::Title => "tau",
            Source::Body => "beta",
            Source::Answer => "alpha",
            Source::Index => "idx",
        }
    }
}

// ---------------------------------------------------------------------------
// Tries

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(char, u32)>,
    terminal: bool,
    /// Largest member weight in this subtree.
    best: f64,
    /// Some sequence of suffix pieces leads from here to a member.
    can_finish: bool,
}

/// Character trie over a term set. Node ids grow with depth along every
/// path: a node is always created after its parent.
#[derive(Debug, Clone)]
pub struct VocabTrie {
    nodes: Vec<TrieNode>,
}

pub const ROOT: u32 = 0;

impl VocabTrie {
    pub fn new<S: AsRef<str>>(terms: impl IntoIterator<Item = (S, f64)>) -> Self {
        let mut trie = VocabTrie {
            nodes: vec![TrieNode {
                best: f64::NEG_INFINITY,
                ..Default::default()
            }],
        };
        for (term, w) in terms {
            trie.insert(term.as_ref(), w);
        }
        trie
    }

    fn insert(&mut self, term: &str, weight: f64) {
        let mut cur = ROOT;
        self.nodes[0].best = self.nodes[0].best.max(weight);
        for ch in term.chars() {
            let next = match self.child(cur, ch) {
                Some(n) => n,
                None => {
                    let id = self.nodes.len() as u32;
                    self.nodes.push(TrieNode {
                        best: f64::NEG_INFINITY,
                        ..Default::default()
                    });
                    let kids = &mut self.nodes[cur as usize].children;
                    let pos = kids.partition_point(|(c, _)| *c < ch);
                    kids.insert(pos, (ch, id));
                    id
                }
            };
            cur = next;
            let node = &mut self.nodes[cur as usize];
            node.best = node.best.max(weight);
        }
        self.nodes[cur as usize].terminal = true;
    }

    fn child(&self, node: u32, ch: char) -> Option<u32> {
        let kids = &self.nodes[node as usize].children;
        kids.binary_search_by_key(&ch, |(c, _)| *c).ok().map(|i| kids[i].1)
    }

    pub fn walk(&self, from: u32, s: &str) -> Option<u32> {
        s.chars().try_fold(from, |n, ch| self.child(n, ch))
    }

    pub fn is_complete(&self, w: &str) -> bool {
        self.walk(ROOT, w).is_some_and(|n| self.nodes[n as usize].terminal)
    }

    /// Next characters after `p`; non-empty iff `p` is a proper prefix of
    /// some member.
    pub fn continuations(&self, p: &str) -> Vec<char> {
        self.walk(ROOT, p)
            .map(|n| self.nodes[n as usize].children.iter().map(|(c, _)| *c).collect())
            .unwrap_or_default()
    }

    pub fn is_terminal(&self, node: u32) -> bool {
        self.nodes[node as usize].terminal
    }

    pub fn best_weight(&self, node: u32) -> f64 {
        self.nodes[node as usize].best
    }

    pub fn can_finish(&self, node: u32) -> bool {
        self.nodes[node as usize].can_finish
    }

    /// Members of `pieces` that can be read starting at `from`, with the node
    /// each one ends at. Sorted by piece.
    pub fn piece_matches(&self, from: u32, pieces: &VocabTrie) -> Vec<(String, u32)> {
        let mut out = Vec::new();
        let mut buf = String::new();
        self.intersect(from, pieces, ROOT, &mut buf, &mut out);
        out
    }

    fn intersect(&self, here: u32, pieces: &VocabTrie, pnode: u32, buf: &mut String, out: &mut Vec<(String, u32)>) {
        for &(ch, pchild) in &pieces.nodes[pnode as usize].children {
            if let Some(next) = self.child(here, ch) {
                buf.push(ch);
                if pieces.nodes[pchild as usize].terminal {
                    out.push((buf.clone(), next));
                }
                self.intersect(next, pieces, pchild, buf, out);
                buf.pop();
            }
        }
    }

    fn compute_can_finish(&mut self, suffixes: &VocabTrie) {
        for id in (0..self.nodes.len()).rev() {
            let ok = self
                .piece_matches(id as u32, suffixes)
                .into_iter()
                .any(|(_, n)| self.nodes[n as usize].terminal || self.nodes[n as usize].can_finish);
            self.nodes[id].can_finish = ok;
        }
    }
}

/// Subword vocabulary: word-initial pieces and `##`-marked continuation
/// pieces.
#[derive(Debug, Clone)]
pub struct Wordpieces {
    prefixes: VocabTrie,
    suffixes: VocabTrie,
}

impl Wordpieces {
    pub fn new<S: AsRef<str>>(pieces: impl IntoIterator<Item = S>) -> Self {
        let mut pre = Vec::new();
        let mut suf = Vec::new();
        for p in pieces {
            let p = p.as_ref().trim();
            if let Some(s) = p.strip_prefix("##") {
                if !s.is_empty() {
                    suf.push((s.to_owned(), 0.0));
                }
            } else if !p.is_empty() {
                pre.push((p.to_owned(), 0.0));
            }
        }
        Wordpieces {
            prefixes: VocabTrie::new(pre),
            suffixes: VocabTrie::new(suf),
        }
    }

    /// One piece per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(text.lines()))
    }

    fn trie_for(&self, terms: &[String], weights: &[f64]) -> VocabTrie {
        let mut trie = VocabTrie::new(terms.iter().zip(weights.iter().copied()));
        trie.compute_can_finish(&self.suffixes);
        trie
    }
}

// ---------------------------------------------------------------------------
// Vocabularies

/// Terms of one source, highest idf first (ties lexicographic).
#[derive(Debug, Clone, Default)]
pub struct SourceVocab {
    terms: Vec<String>,
    idf: Vec<f64>,
    members: HashSet<String>,
    trie: Option<Arc<VocabTrie>>,
}

impl SourceVocab {
    fn ranked(set: BTreeSet<String>, index: &SearchIndex) -> Self {
        let mut scored: Vec<(String, f64)> = set
            .into_iter()
            .map(|t| {
                let w = index.idf(&t, Field::Contents);
                (t, w)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let members = scored.iter().map(|(t, _)| t.clone()).collect();
        let (terms, idf) = scored.into_iter().unzip();
        SourceVocab {
            terms,
            idf,
            members,
            trie: None,
        }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn idf_of(&self, i: usize) -> f64 {
        self.idf[i]
    }

    pub fn contains(&self, term: &str) -> bool {
        self.members.contains(term)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn trie(&self) -> Option<&VocabTrie> {
        self.trie.as_deref()
    }
}

/// Per-step vocabularies: question, top-5 titles, top-5 windows, predicted
/// answers, and the (capped) index vocabulary.
#[derive(Debug, Clone)]
pub struct SessionVocabularies {
    question: SourceVocab,
    title: SourceVocab,
    body: SourceVocab,
    answer: SourceVocab,
    index: Arc<SourceVocab>,
}

impl SessionVocabularies {
    pub fn get(&self, s: Source) -> &SourceVocab {
        match s {
            Source::Question => &self.question,
            Source::Title => &self.title,
            Source::Body => &self.body,
            Source::Answer => &self.answer,
            Source::Index => &self.index,
        }
    }

    /// The accessible terms: union of question, title, answer and body terms.
    pub fn accessible(&self) -> BTreeSet<String> {
        [Source::Question, Source::Title, Source::Answer, Source::Body]
            .iter()
            .flat_map(|&s| self.get(s).terms.iter().cloned())
            .collect()
    }

    pub fn sources_of(&self, term: &str) -> Vec<Source> {
        Source::ALL.into_iter().filter(|&s| self.get(s).contains(term)).collect()
    }
}

// ---------------------------------------------------------------------------
// Symbols, rules and state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Q,
    U,
    Op,
    Field,
    W,
    /// `W^x`
    Word(Source),
    /// `Wbar^x`
    Tail(Source),
    /// `V^x`
    Prefix(Source),
    /// `Vbar^x`
    Suffix(Source),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Q => f.write_str("Q"),
            Symbol::U => f.write_str("U"),
            Symbol::Op => f.write_str("Op"),
            Symbol::Field => f.write_str("Field"),
            Symbol::W => f.write_str("W"),
            Symbol::Word(s) => write!(f, "W^{}", s.tag()),
            Symbol::Tail(s) => write!(f, "Wbar^{}", s.tag()),
            Symbol::Prefix(s) => write!(f, "V^{}", s.tag()),
            Symbol::Suffix(s) => write!(f, "Vbar^{}", s.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Rule {
    /// `Q => W Q`
    AddTerm,
    /// `Q => U Q`
    AddOperator,
    /// `Q => STOP`
    Stop,
    /// `U => Op Field W`
    Structured,
    Op(Op),
    Field(Field),
    /// `W => W^x`
    Source(Source),
    /// `W^x => V^x` or `W^x => V^x Wbar^x`
    Word { source: Source, continues: bool },
    /// `Wbar^x => Vbar^x` or `Wbar^x => Vbar^x Wbar^x`
    Tail { source: Source, continues: bool },
    /// `V^x => text` (a whole term, or a word-initial piece) or
    /// `Vbar^x => text` (a continuation piece).
    Piece { source: Source, text: String, suffix: bool },
}

impl Rule {
    pub fn lhs(&self) -> Symbol {
        match self {
            Rule::AddTerm | Rule::AddOperator | Rule::Stop => Symbol::Q,
            Rule::Structured => Symbol::U,
            Rule::Op(_) => Symbol::Op,
            Rule::Field(_) => Symbol::Field,
            Rule::Source(_) => Symbol::W,
            Rule::Word { source, .. } => Symbol::Word(*source),
            Rule::Tail { source, .. } => Symbol::Tail(*source),
            Rule::Piece { source, suffix: false, .. } => Symbol::Prefix(*source),
            Rule::Piece { source, suffix: true, .. } => Symbol::Suffix(*source),
        }
    }

    fn rhs(&self) -> Vec<Symbol> {
        match self {
            Rule::AddTerm => vec![Symbol::W, Symbol::Q],
            Rule::AddOperator => vec![Symbol::U, Symbol::Q],
            Rule::Structured => vec![Symbol::Op, Symbol::Field, Symbol::W],
            Rule::Source(s) => vec![Symbol::Word(*s)],
            Rule::Word { source, continues } => {
                let mut v = vec![Symbol::Prefix(*source)];
                if *continues {
                    v.push(Symbol::Tail(*source));
                }
                v
            }
            Rule::Tail { source, continues } => {
                let mut v = vec![Symbol::Suffix(*source)];
                if *continues {
                    v.push(Symbol::Tail(*source));
                }
                v
            }
            Rule::Stop | Rule::Op(_) | Rule::Field(_) | Rule::Piece { .. } => Vec::new(),
        }
    }

    /// Rules that pick a term or piece (as opposed to structure).
    pub fn is_term_rule(&self) -> bool {
        matches!(self, Rule::Piece { .. })
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} =>", self.lhs())?;
        match self {
            Rule::Stop => f.write_str(" STOP"),
            Rule::Op(op) => write!(f, " {}", op.symbol()),
            Rule::Field(field) => write!(f, " {}", field.name()),
            Rule::Piece { text, suffix, .. } => write!(f, " {}{}", if *suffix { "##" } else { "" }, text),
            r => r.rhs().iter().try_for_each(|s| write!(f, " {s}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Emitted {
    Op(Op),
    Field(Field),
    Piece(String),
}

/// Pending nonterminals (top is the last element) plus the output buffer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrammarState {
    stack: Vec<Symbol>,
    buffer: Vec<Emitted>,
    source: Option<Source>,
}

impl Default for GrammarState {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarState {
    pub fn new() -> Self {
        GrammarState {
            stack: vec![Symbol::Q],
            buffer: Vec::new(),
            source: None,
        }
    }

    pub fn top(&self) -> Option<Symbol> {
        self.stack.last().copied()
    }

    /// Stack listed from the top down, e.g. `[Op, Field, W, Q]`.
    pub fn stack_top_first(&self) -> Vec<Symbol> {
        self.stack.iter().rev().copied().collect()
    }

    pub fn is_terminal(&self) -> bool {
        self.stack.is_empty()
    }

    /// At a refinement boundary: stack `[Q]`, empty buffer.
    pub fn at_boundary(&self) -> bool {
        self.stack == [Symbol::Q] && self.buffer.is_empty()
    }

    /// The word assembled so far from emitted pieces.
    pub fn partial_word(&self) -> String {
        self.buffer
            .iter()
            .filter_map(|e| match e {
                Emitted::Piece(p) => Some(p.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Operator and field chosen so far for the refinement under way.
    pub fn pending_structure(&self) -> (Option<Op>, Option<Field>) {
        let mut op = None;
        let mut field = None;
        for e in &self.buffer {
            match e {
                Emitted::Op(o) => op = Some(*o),
                Emitted::Field(f) => field = Some(*f),
                Emitted::Piece(_) => {}
            }
        }
        (op, field)
    }

    pub fn current_source(&self) -> Option<Source> {
        self.source
    }

    fn next_below_top(&self) -> Option<Symbol> {
        self.stack.len().checked_sub(2).map(|i| self.stack[i])
    }
}

/// A refinement completed by a rule application, with the source its term
/// was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub refinement: Refinement,
    pub source: Option<Source>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub max_actions: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            max_actions: DEFAULT_MAX_ACTIONS,
        }
    }
}

/// The grammar bound to one index: whole-term mode by default, wordpiece
/// mode when a subword vocabulary is supplied.
#[derive(Debug, Clone)]
pub struct Grammar {
    cfg: GrammarConfig,
    wordpieces: Option<Arc<Wordpieces>>,
    index_vocab: Arc<SourceVocab>,
}

impl Grammar {
    pub fn new(index: &SearchIndex, cfg: GrammarConfig) -> Self {
        Self::build(index, cfg, None)
    }

    pub fn with_wordpieces(index: &SearchIndex, cfg: GrammarConfig, pieces: Wordpieces) -> Self {
        Self::build(index, cfg, Some(Arc::new(pieces)))
    }

    fn build(index: &SearchIndex, cfg: GrammarConfig, wordpieces: Option<Arc<Wordpieces>>) -> Self {
        assert!(cfg.max_actions >= 1, "max_actions must be at least 1");
        let ranked = index.terms_by_idf();
        let mut index_vocab = match &wordpieces {
            // Whole-term mode samples the highest-idf terms.
            None => SourceVocab::ranked(ranked.iter().take(cfg.max_actions).cloned().collect(), index),
            Some(_) => SourceVocab::ranked(ranked.iter().cloned().collect(), index),
        };
        if let Some(wp) = &wordpieces {
            index_vocab.trie = Some(Arc::new(wp.trie_for(&index_vocab.terms, &index_vocab.idf)));
        }
        Grammar {
            cfg,
            wordpieces,
            index_vocab: Arc::new(index_vocab),
        }
    }

    pub fn config(&self) -> GrammarConfig {
        self.cfg
    }

    pub fn wordpiece_mode(&self) -> bool {
        self.wordpieces.is_some()
    }

    /// Vocabularies of the current observation.
    pub fn session_vocabs(&self, obs: &Observation, index: &SearchIndex) -> SessionVocabularies {
        let collect = |f: &dyn Fn(&crate::observation::ObservedDoc) -> &Vec<String>| -> BTreeSet<String> {
            obs.top.iter().flat_map(|d| f(d).iter().cloned()).collect()
        };
        let mut vocabs = [
            SourceVocab::ranked(obs.question.iter().cloned().collect(), index),
            SourceVocab::ranked(collect(&|d| &d.title), index),
            SourceVocab::ranked(collect(&|d| &d.window), index),
            SourceVocab::ranked(collect(&|d| &d.answer), index),
        ];
        if let Some(wp) = &self.wordpieces {
            for v in &mut vocabs {
                v.trie = Some(Arc::new(wp.trie_for(&v.terms, &v.idf)));
            }
        }
        let [question, title, body, answer] = vocabs;
        SessionVocabularies {
            question,
            title,
            body,
            answer,
            index: Arc::clone(&self.index_vocab),
        }
    }

    /// Candidate (piece, end node, weight) list for a `V^x` or `Vbar^x`
    /// expansion in wordpiece mode.
    fn piece_options(&self, trie: &VocabTrie, from: u32, suffix: bool, continues: bool) -> Vec<(String, f64)> {
        let wp = self.wordpieces.as_ref().expect("wordpiece mode");
        let pieces = if suffix { &wp.suffixes } else { &wp.prefixes };
        let mut out: Vec<(String, f64)> = trie
            .piece_matches(from, pieces)
            .into_iter()
            .filter(|&(_, n)| if continues { trie.can_finish(n) } else { trie.is_terminal(n) })
            .map(|(p, n)| (p, trie.best_weight(n)))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    fn word_feasible(&self, vocab: &SourceVocab, from: u32, suffix: bool, continues: bool) -> bool {
        match vocab.trie() {
            Some(trie) => !self.piece_options(trie, from, suffix, continues).is_empty(),
            None => false,
        }
    }

    fn source_has_words(&self, vocab: &SourceVocab) -> bool {
        if vocab.is_empty() {
            return false;
        }
        if self.wordpiece_mode() {
            self.word_feasible(vocab, ROOT, false, false) || self.word_feasible(vocab, ROOT, false, true)
        } else {
            true
        }
    }

    /// Rules whose left-hand side is the top of the stack, capped at
    /// `max_actions`.
    pub fn applicable_rules(&self, gs: &GrammarState, vocabs: &SessionVocabularies) -> Result<Vec<Rule>> {
        let top = gs
            .top()
            .ok_or_else(|| Error::Grammar("stack is empty: terminal state".into()))?;
        let mut rules = match top {
            Symbol::Q => vec![Rule::AddTerm, Rule::AddOperator, Rule::Stop],
            Symbol::U => vec![Rule::Structured],
            Symbol::Op => vec![Rule::Op(Op::Plus), Rule::Op(Op::Minus)],
            Symbol::Field => vec![Rule::Field(Field::Title), Rule::Field(Field::Contents)],
            Symbol::W => Source::ALL
                .into_iter()
                .filter(|&s| self.source_has_words(vocabs.get(s)))
                .map(Rule::Source)
                .collect(),
            Symbol::Word(source) => {
                if self.wordpiece_mode() {
                    let v = vocabs.get(source);
                    [false, true]
                        .into_iter()
                        .filter(|&c| self.word_feasible(v, ROOT, false, c))
                        .map(|continues| Rule::Word { source, continues })
                        .collect()
                } else {
                    vec![Rule::Word {
                        source,
                        continues: false,
                    }]
                }
            }
            Symbol::Tail(source) => {
                let v = vocabs.get(source);
                let node = self.partial_node(gs, v)?;
                [false, true]
                    .into_iter()
                    .filter(|&c| self.word_feasible(v, node, true, c))
                    .map(|continues| Rule::Tail { source, continues })
                    .collect()
            }
            Symbol::Prefix(source) | Symbol::Suffix(source) => {
                let suffix = matches!(top, Symbol::Suffix(_));
                let v = vocabs.get(source);
                if self.wordpiece_mode() {
                    let continues = gs.next_below_top() == Some(Symbol::Tail(source));
                    let trie = v.trie().expect("wordpiece vocabularies carry tries");
                    let from = if suffix { self.partial_node(gs, v)? } else { ROOT };
                    self.piece_options(trie, from, suffix, continues)
                        .into_iter()
                        .map(|(text, _)| Rule::Piece { source, text, suffix })
                        .collect()
                } else {
                    v.terms
                        .iter()
                        .map(|t| Rule::Piece {
                            source,
                            text: t.clone(),
                            suffix: false,
                        })
                        .collect()
                }
            }
        };
        rules.truncate(self.cfg.max_actions);
        Ok(rules)
    }

    fn partial_node(&self, gs: &GrammarState, v: &SourceVocab) -> Result<u32> {
        let trie = v
            .trie()
            .ok_or_else(|| Error::Grammar("continuation pieces need wordpiece mode".into()))?;
        trie.walk(ROOT, &gs.partial_word())
            .ok_or_else(|| Error::Grammar("partial word left the vocabulary".into()))
    }

    /// Contents idf behind a term rule: the term's own idf in whole-term
    /// mode, the best idf reachable through the piece in wordpiece mode.
    pub fn rule_weight(&self, gs: &GrammarState, rule: &Rule, vocabs: &SessionVocabularies, index: &SearchIndex) -> Option<f64> {
        let Rule::Piece { source, text, .. } = rule else {
            return None;
        };
        match vocabs.get(*source).trie() {
            Some(trie) if self.wordpiece_mode() => {
                let word = gs.partial_word() + text;
                trie.walk(ROOT, &word).map(|n| trie.best_weight(n))
            }
            _ => Some(index.idf(text, Field::Contents)),
        }
    }

    /// Every distinct refinement derivable from `[Q]` (STOP excluded), in
    /// depth-first rule order, with the source of its first derivation.
    pub fn enumerate(&self, vocabs: &SessionVocabularies) -> Result<Vec<Completion>> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        self.enumerate_from(&GrammarState::new(), vocabs, &mut seen, &mut out)?;
        Ok(out)
    }

    fn enumerate_from(
        &self,
        gs: &GrammarState,
        vocabs: &SessionVocabularies,
        seen: &mut HashSet<Refinement>,
        out: &mut Vec<Completion>,
    ) -> Result<()> {
        for rule in self.applicable_rules(gs, vocabs)? {
            if rule == Rule::Stop {
                continue;
            }
            match apply_unchecked(gs, &rule) {
                (_, Some(c)) => {
                    if seen.insert(c.refinement.clone()) {
                        out.push(c);
                    }
                }
                (next, None) => self.enumerate_from(&next, vocabs, seen, out)?,
            }
        }
        Ok(())
    }

    /// Applies a rule after checking it is applicable.
    pub fn apply_rule(
        &self,
        gs: &GrammarState,
        rule: &Rule,
        vocabs: &SessionVocabularies,
    ) -> Result<(GrammarState, Option<Completion>)> {
        if !self.applicable_rules(gs, vocabs)?.contains(rule) {
            return Err(Error::Grammar(format!("rule `{rule}` is not applicable here")));
        }
        Ok(apply_unchecked(gs, rule))
    }

    /// Finds a rule sequence from `[Q]` that emits `target`, replaying it
    /// through [`Grammar::apply_rule`].
    pub fn derive(&self, target: &Refinement, vocabs: &SessionVocabularies) -> Result<(Vec<Rule>, Completion)> {
        let mut path = Vec::new();
        match self.derive_from(&GrammarState::new(), target, vocabs, &mut path)? {
            Some(c) => Ok((path, c)),
            None => Err(Error::Grammar(format!("`{target}` is not derivable from [Q]"))),
        }
    }

    fn derive_from(
        &self,
        gs: &GrammarState,
        target: &Refinement,
        vocabs: &SessionVocabularies,
        path: &mut Vec<Rule>,
    ) -> Result<Option<Completion>> {
        let (want_op, want_field, word) = match target {
            Refinement::Stop => (None, None, ""),
            Refinement::Or(t) => (None, None, t.as_str()),
            Refinement::Term { op, field, term } => (Some(*op), Some(*field), term.as_str()),
        };
        for rule in self.applicable_rules(gs, vocabs)? {
            let consistent = match &rule {
                Rule::Stop => target.is_stop(),
                Rule::AddTerm => matches!(target, Refinement::Or(_)),
                Rule::AddOperator => matches!(target, Refinement::Term { .. }),
                Rule::Op(o) => Some(*o) == want_op,
                Rule::Field(f) => Some(*f) == want_field,
                Rule::Piece { text, .. } => {
                    let so_far = gs.partial_word();
                    word.strip_prefix(so_far.as_str()).is_some_and(|rest| rest.starts_with(text.as_str()))
                }
                _ => true,
            };
            if !consistent {
                continue;
            }
            let (next, done) = self.apply_rule(gs, &rule, vocabs)?;
            path.push(rule);
            if let Some(c) = done {
                if &c.refinement == target {
                    return Ok(Some(c));
                }
            } else if let Some(c) = self.derive_from(&next, target, vocabs, path)? {
                return Ok(Some(c));
            }
            path.pop();
        }
        Ok(None)
    }
}

/// Pops the top, pushes the right-hand side right-to-left, emits terminals
/// and closes a refinement when the stack is back to `[Q]`.
pub fn apply_unchecked(gs: &GrammarState, rule: &Rule) -> (GrammarState, Option<Completion>) {
    let mut next = gs.clone();
    next.stack.pop();
    for sym in rule.rhs().into_iter().rev() {
        next.stack.push(sym);
    }
    match rule {
        Rule::Stop => {
            next.buffer.clear();
            return (
                next,
                Some(Completion {
                    refinement: Refinement::Stop,
                    source: None,
                }),
            );
        }
        Rule::Op(o) => next.buffer.push(Emitted::Op(*o)),
        Rule::Field(f) => next.buffer.push(Emitted::Field(*f)),
        Rule::Source(s) => next.source = Some(*s),
        Rule::Piece { text, .. } => next.buffer.push(Emitted::Piece(text.clone())),
        _ => {}
    }
    if next.stack == [Symbol::Q] && !next.buffer.is_empty() {
        let word = next.partial_word();
        let refinement = match next.pending_structure() {
            (Some(op), Some(field)) => Refinement::Term { op, field, term: word },
            _ => Refinement::Or(word),
        };
        let source = next.source.take();
        next.buffer.clear();
        return (next, Some(Completion { refinement, source }));
    }
    (next, None)
}
