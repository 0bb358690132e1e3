//! Seeded synthetic corpus with question/answer pairs.
//!
//! Every question is about two invented entity words and a relation. Its
//! answer appears in 1-3 "relevant" passages, each in its own article whose
//! title is built from a clue word. The remaining passages for the question
//! are short distractors titled after the entities: BM25 favours them for
//! the bare question, while the reader prefers the relevant passages. Some
//! distractors mention a clue word, which is what makes the answer-bearing
//! passages reachable by refinement.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QaPair, RawDocument};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub questions: usize,
    pub passages_per_question: usize,
    /// Chance that a distractor mentions one of the question's clue words.
    pub clue_leak: f64,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            questions: 200,
            passages_per_question: 10,
            clue_leak: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskCorpus {
    pub documents: Vec<RawDocument>,
    pub qa: Vec<QaPair>,
    /// Relevant article ids per question, parallel to `qa`.
    pub relevant_articles: Vec<Vec<String>>,
}

const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "in", "a", "to", "was", "is", "by", "for", "on", "with", "as", "at", "from", "that", "it",
    "its", "were", "after", "during", "which", "also", "their", "this",
];

const RELATIONS: &[&str] = &[
    "founded", "built", "discovered", "written", "crowned", "signed", "opened", "painted", "mapped", "named",
];

const TITLE_NOUNS: &[&str] = &[
    "chronicle", "records", "archive", "annals", "register", "survey", "history", "ledger", "notes", "account",
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr", "st", "th", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ei"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "s", "th", "k", "m"];

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).unwrap());
                w.push_str(VOWELS.choose(&mut self.rng).unwrap());
                w.push_str(CODAS.choose(&mut self.rng).unwrap());
            }
            let clash = FUNCTION_WORDS.contains(&w.as_str())
                || RELATIONS.contains(&w.as_str())
                || TITLE_NOUNS.contains(&w.as_str());
            if !clash && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn generate(cfg: &DeskConfig) -> DeskCorpus {
    assert!(cfg.passages_per_question >= 4, "need room for relevant passages and distractors");
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        used: HashSet::new(),
    };
    let fillers: Vec<String> = (0..400).map(|_| words.fresh(2)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut years: Vec<u32> = (1100..2000).collect();
    years.shuffle(&mut rng);
    let mut counts: Vec<u32> = (100..1000).collect();
    counts.shuffle(&mut rng);

    let filler = |rng: &mut ChaCha8Rng, len: std::ops::Range<usize>| -> Vec<String> {
        let n = rng.random_range(len);
        (0..n)
            .map(|_| {
                if rng.random_bool(0.35) {
                    (*FUNCTION_WORDS.choose(rng).unwrap()).to_owned()
                } else {
                    fillers.choose(rng).unwrap().clone()
                }
            })
            .collect()
    };

    let mut documents = Vec::new();
    let mut qa = Vec::new();
    let mut relevant_articles = Vec::new();
    for qi in 0..cfg.questions {
        let e1 = words.fresh(2);
        let e2 = words.fresh(2);
        let rel = *RELATIONS.choose(&mut rng).unwrap();
        let clues: Vec<String> = (0..3).map(|_| words.fresh(3)).collect();
        let (question, answer) = match qi % 5 {
            0 => (format!("who {rel} the {e1} {e2}"), capitalize(&words.fresh(2))),
            1 => (format!("when was the {e1} {e2} {rel}"), years.pop().unwrap().to_string()),
            2 => (format!("where was the {e1} {e2} {rel}"), capitalize(&words.fresh(3))),
            3 => (format!("what {rel} the {e1} {e2}"), words.fresh(3)),
            _ => (format!("how many {e1} {e2} were {rel}"), counts.pop().unwrap().to_string()),
        };
        let answer_tok = answer.to_lowercase();

        let n_rel = rng.random_range(1..=3usize);
        let mut rel_ids = Vec::new();
        for j in 0..n_rel {
            let id = format!("q{qi:03}r{j}");
            let title = format!(
                "{} {}",
                capitalize(&clues[j]),
                TITLE_NOUNS.choose(&mut rng).unwrap()
            );
            let mut body = filler(&mut rng, 25..50);
            let mut core = vec![
                "the".to_owned(),
                e1.clone(),
                e2.clone(),
                "was".to_owned(),
                rel.to_owned(),
                "by".to_owned(),
                answer_tok.clone(),
                clues[0].clone(),
                e1.clone(),
                e2.clone(),
                clues[j].clone(),
                rel.to_owned(),
            ];
            core.extend(filler(&mut rng, 4..5));
            let at = rng.random_range(0..=body.len());
            body.splice(at..at, core);
            body.extend(filler(&mut rng, 30..70));
            documents.push(RawDocument {
                article_id: id.clone(),
                title,
                body: body.join(" "),
            });
            rel_ids.push(id);
        }

        for j in 0..cfg.passages_per_question - n_rel {
            let id = format!("q{qi:03}d{j}");
            let title = match j % 4 {
                0 => format!("{} {}", capitalize(&e1), e2),
                1 => format!("{} {} {}", capitalize(&e1), e2, TITLE_NOUNS.choose(&mut rng).unwrap()),
                2 => format!("{} {}", capitalize(&e2), TITLE_NOUNS.choose(&mut rng).unwrap()),
                _ => format!("{} {}", capitalize(&e1), fillers.choose(&mut rng).unwrap()),
            };
            let mut body = filler(&mut rng, 12..30);
            let mut mention = vec![e1.clone(), e2.clone()];
            if rng.random_bool(0.5) {
                mention.push(rel.to_owned());
            }
            if rng.random_bool(cfg.clue_leak) {
                mention.push(clues.choose(&mut rng).unwrap().clone());
            }
            for m in mention {
                let at = rng.random_range(0..=body.len());
                body.insert(at, m);
            }
            documents.push(RawDocument {
                article_id: id,
                title,
                body: body.join(" "),
            });
        }

        qa.push(QaPair {
            question,
            answers: vec![answer],
        });
        relevant_articles.push(rel_ids);
    }
    DeskCorpus {
        documents,
        qa,
        relevant_articles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize_text;

    #[test]
    fn deterministic_and_sized() {
        let cfg = DeskConfig {
            questions: 20,
            ..Default::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert_eq!(a.documents.len(), 200);
        assert_eq!(a.qa.len(), 20);
    }

    #[test]
    fn answers_only_in_relevant_passages() {
        let desk = generate(&DeskConfig {
            questions: 40,
            ..Default::default()
        });
        for (q, rel) in desk.qa.iter().zip(&desk.relevant_articles) {
            assert!((1..=3).contains(&rel.len()));
            let ans = normalize_text(&q.answers[0]);
            let holders: Vec<&str> = desk
                .documents
                .iter()
                .filter(|d| normalize_text(&d.body).windows(ans.len()).any(|w| w == ans.as_slice()))
                .map(|d| d.article_id.as_str())
                .collect();
            assert_eq!(holders, rel.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}
