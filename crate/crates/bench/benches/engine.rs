use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use qrefine_core::desk::{self, DeskConfig};
use qrefine_core::mcts::{EngineMemo, Planner};
use qrefine_core::*;

fn desk_context() -> (desk::DeskCorpus, SearchContext) {
    let d = desk::generate(&DeskConfig {
        questions: 50,
        ..Default::default()
    });
    let corpus = Corpus::from_raw(&d.documents, 288).unwrap();
    let index = SearchIndex::build(&corpus).unwrap();
    (d, SearchContext::new(Arc::new(index)))
}

fn engine(c: &mut Criterion) {
    let (d, ctx) = desk_context();
    let qa = &d.qa[0];
    let base = StructuredQuery::new(qa.question.clone());
    let mut refined = base.clone();
    refined.push(Refinement::must(Field::Contents, qa.answers[0].as_str()));
    refined.push(Refinement::must_not(Field::Title, "the"));

    c.bench_function("execute_query/base", |b| {
        b.iter(|| ctx.index().execute_query(black_box(&base), 5).unwrap())
    });
    c.bench_function("execute_query/refined", |b| {
        b.iter(|| ctx.index().execute_query(black_box(&refined), 5).unwrap())
    });

    let cache = ReaderCache::new();
    let ss = ctx.start(&qa.question, &cache).unwrap();
    c.bench_function("observe", |b| b.iter(|| ctx.observe(black_box(&ss))));
    c.bench_function("observe/flat", |b| b.iter(|| qrefine_core::observation::serialize_flat(&ctx.observe(&ss))));

    let grammar = Grammar::new(ctx.index(), GrammarConfig::default());
    let judger = RelevanceJudger::new(&qa.answers);
    let mut group = c.benchmark_group("mcts");
    group.sample_size(10);
    group.bench_function("plan/100", |b| {
        b.iter_batched(
            EngineMemo::default,
            |mut memo| {
                let planner = Planner {
                    ctx: &ctx,
                    grammar: &grammar,
                    cfg: PlannerConfig::default(),
                    evaluator: &HeuristicEvaluator,
                    judger: Some(&judger),
                    cache: &cache,
                };
                planner.plan(&ss, 10, &mut memo).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, engine);
criterion_main!(benches);
