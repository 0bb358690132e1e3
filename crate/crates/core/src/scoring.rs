//! Relevance, NDCG@k with a fixed weight-sum denominator, step rewards and
//! the accuracy metrics reported per question.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::index::SearchIndex;
use crate::observation::SessionState;
use crate::query::Refinement;
use crate::text::normalize_text;

/// Binary answer-containment judge for one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudger {
    answers: Vec<Vec<String>>,
}

impl RelevanceJudger {
    /// Answers that normalize to nothing are ignored.
    pub fn new<S: AsRef<str>>(answers: &[S]) -> Self {
        RelevanceJudger {
            answers: answers
                .iter()
                .map(|a| normalize_text(a.as_ref()))
                .filter(|a| !a.is_empty())
                .collect(),
        }
    }

    pub fn answers(&self) -> &[Vec<String>] {
        &self.answers
    }

    /// 1 iff some answer occurs as a contiguous token run in the passage
    /// body. Titles do not count.
    pub fn relevance(&self, doc: &Document) -> u8 {
        let body = &doc.content_tokens;
        let hit = self
            .answers
            .iter()
            .any(|a| a.len() <= body.len() && body.windows(a.len()).any(|w| w == a.as_slice()));
        hit as u8
    }

    pub fn is_relevant(&self, doc: &Document) -> bool {
        self.relevance(doc) == 1
    }

    pub fn matches_answer(&self, span: &[String]) -> bool {
        !span.is_empty() && self.answers.iter().any(|a| a.as_slice() == span)
    }
}

/// Rank weight `1 / log2(i + 1)` for 1-based rank `i`.
pub fn rank_weight(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// `sum_{i<=k} w_i rel_i / sum_{i<=k} w_i`. Missing positions count as
/// irrelevant; the denominator always covers all k ranks.
pub fn ndcg_at_k(relevance: &[bool], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    let denom: f64 = (1..=k).map(rank_weight).sum();
    let num = relevance
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &r)| r)
        .fold(0.0, |acc, (i, _)| acc + rank_weight(i + 1));
    num / denom
}

/// NDCG x 100 truncated (not rounded) to one decimal.
pub fn display_value(ndcg: f64) -> f64 {
    (ndcg * 1000.0 + 1e-9).floor() / 10.0
}

/// `"33.9"`, `"0.0"`, and `"100"` for a perfect score.
pub fn display_ndcg(ndcg: f64) -> String {
    let v = display_value(ndcg);
    if v >= 100.0 {
        "100".to_owned()
    } else {
        format!("{v:.1}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub k: usize,
    pub empty_result_penalty: f64,
    pub immediate_stop_penalty: f64,
    pub discount: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            k: 5,
            empty_result_penalty: -1.0,
            immediate_stop_penalty: -1.0,
            discount: 0.9,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.k == 0
            || self.empty_result_penalty > 0.0
            || self.immediate_stop_penalty > 0.0
            || !(self.discount > 0.0 && self.discount <= 1.0)
        {
            return Err(crate::Error::Config(format!("invalid reward config {self:?}")));
        }
        Ok(())
    }
}

pub fn relevance_of(ranked: &[(u32, f64)], index: &SearchIndex, judger: &RelevanceJudger) -> Vec<bool> {
    ranked
        .iter()
        .map(|&(d, _)| judger.is_relevant(index.doc(d)))
        .collect()
}

/// NDCG@k of the session's aggregated top-k.
pub fn session_ndcg(ss: &SessionState, index: &SearchIndex, judger: &RelevanceJudger, k: usize) -> f64 {
    ndcg_at_k(&relevance_of(&ss.aggregate_top(k), index, judger), k)
}

/// Penalty part of a step reward.
pub fn step_penalty(ss_before: &SessionState, ss_after: &SessionState, action: &Refinement, cfg: &RewardConfig) -> f64 {
    if action.is_stop() {
        if ss_before.step() == 0 {
            cfg.immediate_stop_penalty
        } else {
            0.0
        }
    } else if ss_after.results.last().is_none_or(|r| r.is_empty()) {
        cfg.empty_result_penalty
    } else {
        0.0
    }
}

/// NDCG difference of the aggregated top-k plus penalties. For STOP pass the
/// unchanged state as `ss_after`.
pub fn step_reward(
    ss_before: &SessionState,
    ss_after: &SessionState,
    action: &Refinement,
    index: &SearchIndex,
    judger: &RelevanceJudger,
    cfg: &RewardConfig,
) -> f64 {
    let delta = session_ndcg(ss_after, index, judger, cfg.k) - session_ndcg(ss_before, index, judger, cfg.k);
    delta + step_penalty(ss_before, ss_after, action, cfg)
}

pub fn top_k_accuracy(relevance: &[bool], k: usize) -> u8 {
    relevance.iter().take(k).any(|&r| r) as u8
}

/// 1 iff the rank-1 document's answer span equals a gold answer.
pub fn em_surrogate(ss: &SessionState, judger: &RelevanceJudger) -> u8 {
    ss.aggregate_top(1)
        .first()
        .and_then(|&(d, _)| ss.reader_output(d))
        .is_some_and(|r| judger.matches_answer(&r.answer_span)) as u8
}

/// NDCG of the best re-ranking of everything the session retrieved.
pub fn headroom_oracle(ss: &SessionState, index: &SearchIndex, judger: &RelevanceJudger, k: usize) -> f64 {
    let relevant = ss
        .retrieved
        .keys()
        .filter(|&&d| judger.is_relevant(index.doc(d)))
        .count();
    let pattern = vec![true; relevant.min(k)];
    ndcg_at_k(&pattern, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ndcg5: f64,
    pub top5: u8,
    pub em: u8,
    pub headroom: f64,
}

pub fn session_metrics(ss: &SessionState, index: &SearchIndex, judger: &RelevanceJudger) -> Metrics {
    let rel = relevance_of(&ss.aggregate_top5(), index, judger);
    Metrics {
        ndcg5: ndcg_at_k(&rel, 5),
        top5: top_k_accuracy(&rel, 5),
        em: em_surrogate(ss, judger),
        headroom: headroom_oracle(ss, index, judger, 5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(ranks: &[usize]) -> Vec<bool> {
        (1..=5).map(|r| ranks.contains(&r)).collect()
    }

    fn doc(body: &str, title: &str) -> Document {
        Document {
            doc_id: "a#0".into(),
            article_id: "a".into(),
            title_tokens: normalize_text(title),
            content_tokens: normalize_text(body),
        }
    }

    #[test]
    fn ndcg_reference_values() {
        // Denominator: 1 + 1/log2(3) + 1/2 + 1/log2(5) + 1/log2(6).
        assert!((ndcg_at_k(&pattern(&[1]), 5) - 0.339_160_205_273_616).abs() < 1e-12);
        assert!((ndcg_at_k(&pattern(&[1, 2]), 5) - 0.553_146_470_008_144).abs() < 1e-12);
        assert!((ndcg_at_k(&pattern(&[1, 2, 5]), 5) - 0.684_351_547_520_486).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&pattern(&[]), 5), 0.0);
        assert_eq!(ndcg_at_k(&pattern(&[1, 2, 3, 4, 5]), 5), 1.0);
        // short lists still divide by all five weights
        assert_eq!(ndcg_at_k(&[true], 5), ndcg_at_k(&pattern(&[1]), 5));
    }

    #[test]
    fn display_truncates() {
        assert_eq!(display_ndcg(ndcg_at_k(&pattern(&[1, 2, 3]), 5)), "72.2");
        assert_eq!(display_ndcg(0.0), "0.0");
        assert_eq!(display_ndcg(1.0), "100");
        assert_eq!(display_ndcg(0.72299999), "72.2");
    }

    #[test]
    fn relevance_requires_contiguous_body_match() {
        let j = RelevanceJudger::new(&["October 1, 2012"]);
        assert_eq!(j.relevance(&doc("released on october 1 2012 worldwide", "")), 1);
        assert_eq!(j.relevance(&doc("october was cold 1 day in 2012", "")), 0);
        assert_eq!(j.relevance(&doc("", "october 1 2012")), 0);
        let j = RelevanceJudger::new(&["1945"]);
        assert_eq!(j.relevance(&doc("at the end of world war ii in 1945 korea", "")), 1);
        assert_eq!(j.relevance(&doc("", "")), 0);
    }

    #[test]
    fn answer_match_is_normalized() {
        let j = RelevanceJudger::new(&["Samson"]);
        assert!(j.matches_answer(&["samson".to_owned()]));
        assert!(!j.matches_answer(&[]));
    }

    #[test]
    fn top5_accuracy_definition() {
        assert_eq!(top_k_accuracy(&pattern(&[4]), 5), 1);
        assert_eq!(top_k_accuracy(&[], 5), 0);
    }

    #[test]
    fn reward_config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            empty_result_penalty: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
