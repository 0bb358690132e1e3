mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use qrefine_core::desk::{DeskConfig, DeskCorpus};
use qrefine_core::mcts::{select_child, EngineMemo, Planner, UniformEvaluator};
use qrefine_core::scoring::{display_value, step_penalty};
use qrefine_core::session::RandomGrammarAgent;
use qrefine_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_desk() -> &'static (DeskCorpus, SearchContext) {
    static DESK: OnceLock<(DeskCorpus, SearchContext)> = OnceLock::new();
    DESK.get_or_init(|| {
        common::desk_context(&DeskConfig {
            questions: 30,
            ..Default::default()
        })
    })
}

fn random_ctx() -> &'static SearchContext {
    static CTX: OnceLock<SearchContext> = OnceLock::new();
    CTX.get_or_init(|| common::context_for(&common::random_corpus(5, 120, 150)))
}

fn term() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,12}"
}

fn field() -> impl Strategy<Value = Field> {
    prop_oneof![Just(Field::Title), Just(Field::Contents)]
}

fn refinement() -> impl Strategy<Value = Refinement> {
    prop_oneof![
        term().prop_map(Refinement::or),
        (field(), term()).prop_map(|(f, t)| Refinement::must(f, t)),
        (field(), term()).prop_map(|(f, t)| Refinement::must_not(f, t)),
    ]
}

proptest! {
    #[test]
    fn ndcg_is_bounded_and_rewards_more_relevance(rel in proptest::collection::vec(any::<bool>(), 0..8), flip in 0usize..5) {
        let v = ndcg_at_k(&rel, 5);
        prop_assert!((0.0..=1.0).contains(&v));
        let mut more = rel.clone();
        more.resize(more.len().max(5), false);
        if !more[flip] {
            more[flip] = true;
            prop_assert!(ndcg_at_k(&more, 5) > v);
        }
    }

    #[test]
    fn earlier_relevance_is_worth_more(i in 0usize..4, gap in 1usize..4) {
        let j = (i + gap).min(4);
        let mut a = vec![false; 5];
        let mut b = vec![false; 5];
        a[i] = true;
        b[j] = true;
        prop_assert!(ndcg_at_k(&a, 5) > ndcg_at_k(&b, 5));
    }

    #[test]
    fn display_truncates_toward_zero(x in 0.0f64..=1.0) {
        let d = display_value(x);
        prop_assert!(d <= x * 100.0 + 1e-6);
        prop_assert!(x * 100.0 < d + 0.1 + 1e-6);
    }

    #[test]
    fn refinement_round_trips(r in refinement()) {
        prop_assert_eq!(Refinement::parse(&r.render()).unwrap(), r.clone());
        prop_assert_eq!(Refinement::parse(&r.to_string()).unwrap(), r);
    }

    #[test]
    fn query_round_trips_with_known_base(base in proptest::collection::vec(term(), 1..6), refs in proptest::collection::vec(refinement(), 0..6)) {
        let base = base.join(" ");
        let mut q = StructuredQuery::new(base.clone());
        for r in refs {
            q.push(r);
        }
        let s = q.render();
        let back = StructuredQuery::parse_with_base(&base, &s).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(back.render(), s.clone());
        let loose = StructuredQuery::parse(&s).unwrap();
        prop_assert_eq!(loose.render(), s);
    }

    #[test]
    fn select_child_maximizes_puct(children in proptest::collection::vec((0.01f64..1.0, 0u32..20, -1.0f64..1.0), 1..8), parent in 0u32..50) {
        let i = select_child(parent, &children, 1.25, 19652.0).unwrap();
        let score = |&(p, n, q): &(f64, u32, f64)| mcts::puct_score(parent, p, n, q, 1.25, 19652.0);
        let best = score(&children[i]);
        for (j, c) in children.iter().enumerate() {
            prop_assert!(score(c) <= best);
            if j < i {
                prop_assert!(score(c) < best);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn execute_query_matches_linear_scan(seed in any::<u64>()) {
        let ctx = random_ctx();
        let index = ctx.index();
        let oracle = common::LinearScan::new(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = common::random_query(&mut rng, &common::vocab(150));
        let want = oracle.search(&q);
        let got = index.execute_query(&q, 7).unwrap();
        prop_assert_eq!(got.hits.len(), want.len().min(7));
        for (h, (id, s)) in got.hits.iter().zip(&want) {
            prop_assert_eq!(&h.doc_id, id);
            prop_assert!((h.score - s).abs() <= 1e-9);
        }
    }

    #[test]
    fn filters_hold_for_every_hit(seed in any::<u64>()) {
        let ctx = random_ctx();
        let index = ctx.index();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = common::random_query(&mut rng, &common::vocab(150));
        for h in index.execute_query(&q, 50).unwrap().hits {
            let d = index.doc(h.doc);
            for r in &q.refinements {
                if let Refinement::Term { op, field, term } = r {
                    let toks = match field {
                        Field::Title => &d.title_tokens,
                        Field::Contents => &d.content_tokens,
                    };
                    prop_assert_eq!(toks.contains(term), *op == Op::Plus);
                }
            }
        }
    }

    #[test]
    fn random_sessions_keep_observation_and_pool_invariants(seed in any::<u64>(), qi in 0usize..30, steps in 1usize..6) {
        let (desk, ctx) = small_desk();
        let qa = &desk.qa[qi];
        let mut agent = RandomGrammarAgent::whole_term(ctx, seed);
        let rec = run_episode(ctx, qa, &mut agent, steps).unwrap();

        // replay: pool grows monotonically and observations honour their caps
        let cache = ReaderCache::new();
        let mut ss = ctx.start(&qa.question, &cache).unwrap();
        let mut shaped = 0.0;
        for s in &rec.steps {
            let next = ctx.advance(&ss, &s.refinement, &cache).unwrap();
            let before: BTreeSet<u32> = ss.retrieved.keys().copied().collect();
            let after: BTreeSet<u32> = next.retrieved.keys().copied().collect();
            prop_assert!(before.is_subset(&after));
            prop_assert_eq!(step_penalty(&ss, &next, &s.refinement, &ctx.reward), s.penalty);
            shaped += s.reward.unwrap() - s.penalty;
            ss = next;
            let obs = ctx.observe(&ss);
            prop_assert!(obs.token_len() <= ctx.observation.max_tokens);
            prop_assert!(obs.top.len() <= 5);
            prop_assert!(obs.top.windows(2).all(|w| w[0].ps_score >= w[1].ps_score));
        }
        let end = rec.final_metrics.unwrap().ndcg5;
        prop_assert!((shaped - (end - rec.initial.ndcg.unwrap())).abs() < 1e-9);
        prop_assert!(rec.final_metrics.unwrap().headroom >= end);

        let line = rec.to_json_line();
        let back: EpisodeRecord = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn enumerated_refinements_rederive(qi in 0usize..30) {
        let (desk, ctx) = small_desk();
        let g = Grammar::new(ctx.index(), GrammarConfig { max_actions: 12 });
        let cache = ReaderCache::new();
        let ss = ctx.start(&desk.qa[qi].question, &cache).unwrap();
        let vocabs = g.session_vocabs(&ctx.observe(&ss), ctx.index());
        let all = g.enumerate(&vocabs).unwrap();
        prop_assert!(!all.is_empty());
        for c in &all {
            let (_, again) = g.derive(&c.refinement, &vocabs).unwrap();
            prop_assert_eq!(&again.refinement, &c.refinement);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn planner_trees_conserve_visits(qi in 0usize..30, sims in 1usize..40, oracle in any::<bool>()) {
        let (desk, ctx) = small_desk();
        let qa = &desk.qa[qi];
        let grammar = Grammar::new(ctx.index(), GrammarConfig::default());
        let cfg = PlannerConfig {
            simulations: sims,
            mode: if oracle { PlannerMode::OracleReward } else { PlannerMode::Heuristic },
            ..Default::default()
        };
        let judger = RelevanceJudger::new(&qa.answers);
        let cache = ReaderCache::new();
        let ss = ctx.start(&qa.question, &cache).unwrap();
        let planner = Planner {
            ctx,
            grammar: &grammar,
            cfg,
            evaluator: &UniformEvaluator,
            judger: Some(&judger),
            cache: &cache,
        };
        let mut memo = EngineMemo::default();
        let out = planner.plan(&ss, 3, &mut memo).unwrap();
        prop_assert!(out.tree.visits_conserved());
        prop_assert_eq!(out.tree.root().visits as usize, sims);
        prop_assert!(out.engine_calls <= sims);
        if !out.refinement.is_stop() {
            let vocabs = grammar.session_vocabs(&ctx.observe(&ss), ctx.index());
            prop_assert!(grammar.derive(&out.refinement, &vocabs).is_ok());
            prop_assert!(!ss.has_refinement(&out.refinement));
        }
    }
}
