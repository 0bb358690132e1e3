//! Dataset evaluation: per-question rows, aggregate metrics, known/unknown
//! answer split, wh-word groups, and PS-merged ensembles.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::SearchContext;
use crate::corpus::QaPair;
use crate::error::Result;
use crate::scoring::ndcg_at_k;
use crate::session::{run_episode, Agent, EpisodeRecord, PoolEntry};
use crate::text::normalize_text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ndcg5: f64,
    pub top5: f64,
    pub em: f64,
    pub headroom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub count: usize,
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRow {
    pub question: String,
    pub wh: String,
    pub steps: usize,
    pub ndcg5: Option<f64>,
    pub top5: Option<u8>,
    pub em: Option<u8>,
    pub headroom: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_answer: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub agents: Vec<String>,
    pub questions: usize,
    pub aggregate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known: Option<Group>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknown: Option<Group>,
    pub by_wh: BTreeMap<String, Group>,
    pub rows: Vec<QuestionRow>,
}

const WH_WORDS: [&str; 5] = ["who", "what", "when", "where", "how"];

/// First wh-word among the question tokens, or `"other"`.
pub fn wh_word(question: &str) -> &'static str {
    normalize_text(question)
        .iter()
        .find_map(|t| WH_WORDS.iter().find(|w| **w == t.as_str()).copied())
        .unwrap_or("other")
}

/// Normalized answers of a training file.
pub fn known_answer_set(pairs: &[QaPair]) -> HashSet<Vec<String>> {
    pairs
        .iter()
        .flat_map(|p| p.answers.iter().map(|a| normalize_text(a)))
        .filter(|a| !a.is_empty())
        .collect()
}

fn aggregate<'a>(rows: impl Iterator<Item = &'a QuestionRow>) -> Option<Aggregate> {
    let scored: Vec<&QuestionRow> = rows.filter(|r| r.ndcg5.is_some()).collect();
    if scored.is_empty() {
        return None;
    }
    let n = scored.len() as f64;
    let mean = |f: &dyn Fn(&QuestionRow) -> f64| scored.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(Aggregate {
        ndcg5: mean(&|r| r.ndcg5.unwrap_or(0.0)),
        top5: mean(&|r| f64::from(r.top5.unwrap_or(0))),
        em: mean(&|r| f64::from(r.em.unwrap_or(0))),
        headroom: mean(&|r| r.headroom.unwrap_or(0.0)),
    })
}

fn group<'a>(rows: impl Iterator<Item = &'a QuestionRow> + Clone) -> Group {
    Group {
        count: rows.clone().count(),
        aggregate: aggregate(rows),
    }
}

pub fn summarize(records: &[EpisodeRecord], known: Option<&HashSet<Vec<String>>>) -> Report {
    let rows: Vec<QuestionRow> = records
        .iter()
        .map(|r| QuestionRow {
            question: r.question.clone(),
            wh: wh_word(&r.question).to_owned(),
            steps: r.steps.len(),
            ndcg5: r.final_metrics.map(|m| m.ndcg5),
            top5: r.final_metrics.map(|m| m.top5),
            em: r.final_metrics.map(|m| m.em),
            headroom: r.final_metrics.map(|m| m.headroom),
            known_answer: known.map(|k| r.answers.iter().any(|a| k.contains(&normalize_text(a)))),
        })
        .collect();
    let mut agents: Vec<String> = records.iter().map(|r| r.agent.clone()).collect();
    agents.sort();
    agents.dedup();
    let mut by_wh = BTreeMap::new();
    for wh in WH_WORDS.iter().copied().chain(["other"]) {
        let g = group(rows.iter().filter(|r| r.wh == wh));
        if g.count > 0 {
            by_wh.insert(wh.to_owned(), g);
        }
    }
    let (known_g, unknown_g) = match known {
        Some(_) => (
            Some(group(rows.iter().filter(|r| r.known_answer == Some(true)))),
            Some(group(rows.iter().filter(|r| r.known_answer == Some(false)))),
        ),
        None => (None, None),
    };
    Report {
        agents,
        questions: rows.len(),
        aggregate: aggregate(rows.iter()),
        known: known_g,
        unknown: unknown_g,
        by_wh,
        rows,
    }
}

/// Runs every question in parallel; records come back in input order.
pub fn run_dataset<F>(ctx: &SearchContext, qa: &[QaPair], make_agent: F, max_steps: usize) -> Result<Vec<EpisodeRecord>>
where
    F: Fn() -> Box<dyn Agent> + Sync,
{
    qa.par_iter()
        .map_init(&make_agent, |agent, pair| run_episode(ctx, pair, agent.as_mut(), max_steps))
        .collect()
}

pub fn evaluate_dataset<F>(
    ctx: &SearchContext,
    qa: &[QaPair],
    make_agent: F,
    max_steps: usize,
    known: Option<&HashSet<Vec<String>>>,
) -> Result<(Vec<EpisodeRecord>, Report)>
where
    F: Fn() -> Box<dyn Agent> + Sync,
{
    let records = run_dataset(ctx, qa, make_agent, max_steps)?;
    let report = summarize(&records, known);
    Ok((records, report))
}

/// NDCG@k and headroom of a pool given its relevance flags. Missing flags
/// count as irrelevant.
pub fn pool_metrics(pool: &[PoolEntry], k: usize) -> (f64, f64) {
    let rel: Vec<bool> = pool.iter().map(|p| p.relevant == Some(true)).collect();
    let ndcg = ndcg_at_k(&rel, k);
    let n_rel = rel.iter().filter(|&&r| r).count();
    (ndcg, ndcg_at_k(&vec![true; n_rel.min(k)], k))
}

/// Union of two pools re-ranked by PS (ties by doc id).
pub fn merge_pools(a: &[PoolEntry], b: &[PoolEntry]) -> Vec<PoolEntry> {
    let mut by_id: BTreeMap<&str, &PoolEntry> = BTreeMap::new();
    for p in a.iter().chain(b) {
        by_id.entry(p.doc_id.as_str()).or_insert(p);
    }
    let mut merged: Vec<PoolEntry> = by_id.into_values().cloned().collect();
    merged.sort_by(|x, y| y.ps_score.total_cmp(&x.ps_score).then_with(|| x.doc_id.cmp(&y.doc_id)));
    merged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadroomRow {
    pub question: String,
    pub final_ndcg: Option<f64>,
    pub headroom: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadroomReport {
    pub questions: usize,
    pub mean_final_ndcg: Option<f64>,
    pub mean_headroom: Option<f64>,
    pub rows: Vec<HeadroomRow>,
}

pub fn headroom_report(records: &[EpisodeRecord]) -> HeadroomReport {
    let rows: Vec<HeadroomRow> = records
        .iter()
        .map(|r| HeadroomRow {
            question: r.question.clone(),
            final_ndcg: r.final_metrics.map(|m| m.ndcg5),
            headroom: pool_metrics(&r.pool, 5).1,
            pool_size: r.pool.len(),
        })
        .collect();
    let n = rows.len() as f64;
    let mean = |v: Option<f64>| if rows.is_empty() { None } else { v.map(|s| s / n) };
    HeadroomReport {
        questions: rows.len(),
        mean_final_ndcg: mean(rows.iter().map(|r| r.final_ndcg).sum()),
        mean_headroom: mean(Some(rows.iter().map(|r| r.headroom).sum())),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, ps: f64, rel: bool) -> PoolEntry {
        PoolEntry {
            doc_id: id.into(),
            ps_score: ps,
            relevant: Some(rel),
        }
    }

    #[test]
    fn wh_grouping() {
        assert_eq!(wh_word("When was Korea separated?"), "when");
        assert_eq!(wh_word("Name the who and what"), "who");
        assert_eq!(wh_word("Capital of France"), "other");
    }

    #[test]
    fn empty_summary_has_null_aggregates() {
        let r = summarize(&[], None);
        assert_eq!(r.questions, 0);
        assert!(r.aggregate.is_none());
        assert!(r.by_wh.is_empty());
    }

    #[test]
    fn merged_headroom_dominates() {
        let a = vec![entry("x#0", 3.0, false), entry("y#0", 1.0, true)];
        let b = vec![entry("z#0", 2.0, true), entry("x#0", 3.0, false)];
        let m = merge_pools(&a, &b);
        assert_eq!(m.iter().map(|p| p.doc_id.as_str()).collect::<Vec<_>>(), ["x#0", "z#0", "y#0"]);
        let hm = pool_metrics(&m, 5).1;
        assert!(hm >= pool_metrics(&a, 5).1 && hm >= pool_metrics(&b, 5).1);
    }
}
