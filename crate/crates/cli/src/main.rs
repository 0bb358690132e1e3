use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use qrefine_core::corpus::{load_qa_jsonl, write_corpus_jsonl, write_qa_jsonl, DEFAULT_BLOCK_SIZE};
use qrefine_core::desk::{self, DeskConfig};
use qrefine_core::report::{headroom_report, known_answer_set, run_dataset};
use qrefine_core::rocchio::{export_t5, Acceptance};
use qrefine_core::session::{read_episodes, write_episodes, BaselineAgent};
use qrefine_core::{
    summarize, Agent, Corpus, EpisodeRecord, Grammar, GrammarConfig, MctsAgent, PlannerConfig, PlannerMode,
    RocchioAgent, RocchioConfig, SearchContext, SearchIndex, StructuredQuery,
};

/// Interactive BM25 query-refinement environment.
#[derive(Debug, Parser)]
#[command(name = "qrefine", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or inspect a search index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run one structured query.
    Search(SearchArgs),
    /// Synthesize refinement sessions with Rocchio expansions.
    #[command(subcommand)]
    Rocchio(RocchioCommand),
    /// Run agents over a question file.
    #[command(subcommand)]
    Session(SessionCommand),
    /// Aggregate metrics of an episode file.
    Eval(EvalArgs),
    /// Emit (flat observation, next refinement) training pairs.
    #[command(name = "export-t5")]
    ExportT5(ExportArgs),
    /// Headroom of the document pools of an episode file.
    Headroom(HeadroomArgs),
    /// Write the synthetic desk corpus and its questions.
    Desk(DeskArgs),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    Build {
        /// JSONL with `id`, `title` and `contents` per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
        block_size: usize,
    },
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(short, default_value_t = 5)]
    k: usize,
}

#[derive(Debug, Subcommand)]
enum RocchioCommand {
    Generate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        max_steps: usize,
        /// Accept the first improving candidate instead of the best one.
        #[arg(long)]
        first_improving: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AgentKind {
    Baseline,
    Rocchio,
    MctsOracle,
    MctsHeuristic,
}

#[derive(Debug, Subcommand)]
enum SessionCommand {
    Run {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, value_enum)]
        agent: AgentKind,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// MCTS simulations per step.
        #[arg(long, default_value_t = 100)]
        simulations: usize,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    episodes: PathBuf,
    /// Question file whose answers count as "known" (e.g. the training set).
    #[arg(long)]
    known_answers: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HeadroomArgs {
    #[arg(long)]
    episodes: PathBuf,
}

#[derive(Debug, Args)]
struct DeskArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    qa: PathBuf,
    #[arg(long, default_value_t = 200)]
    questions: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn load_context(dir: &Path) -> Result<SearchContext> {
    let index = SearchIndex::load(dir).with_context(|| format!("loading index {}", dir.display()))?;
    Ok(SearchContext::new(Arc::new(index)))
}

fn mean_ndcg(records: &[EpisodeRecord]) -> Option<f64> {
    let scored: Vec<f64> = records.iter().filter_map(|r| r.final_metrics.map(|m| m.ndcg5)).collect();
    (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
}

fn episode_summary(records: &[EpisodeRecord], out: &Path) -> Value {
    json!({
        "episodes": records.len(),
        "steps": records.iter().map(|r| r.steps.len()).sum::<usize>(),
        "mean_ndcg5": mean_ndcg(records),
        "out": out,
    })
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Index(IndexCommand::Build { corpus, out, block_size }) => {
            let c = Corpus::ingest_jsonl(&corpus, block_size)?;
            let index = SearchIndex::build(&c)?;
            index.save(&out)?;
            Ok(json!({
                "articles": c.article_count(),
                "passages": index.num_docs(),
                "block_size": block_size,
                "out": out,
            }))
        }
        Command::Search(args) => {
            if args.k == 0 {
                bail!("-k must be at least 1");
            }
            let ctx = load_context(&args.index)?;
            let q = StructuredQuery::parse(&args.query)?;
            let result = ctx.index().execute_query(&q, args.k)?;
            let hits: Vec<Value> = result
                .hits
                .iter()
                .map(|h| {
                    let d = ctx.index().doc(h.doc);
                    json!({"doc_id": h.doc_id, "score": h.score, "title": d.title_tokens.join(" ")})
                })
                .collect();
            Ok(json!({"query": result.query, "k": result.k, "hits": hits}))
        }
        Command::Rocchio(RocchioCommand::Generate {
            index,
            qa,
            out,
            n,
            m,
            max_steps,
            first_improving,
        }) => {
            let ctx = load_context(&index)?;
            let pairs = load_qa_jsonl(&qa)?;
            let cfg = RocchioConfig {
                n,
                m,
                max_steps,
                acceptance: if first_improving {
                    Acceptance::FirstImproving
                } else {
                    Acceptance::BestOfBudget
                },
                ..Default::default()
            };
            cfg.validate()?;
            let records = run_dataset(&ctx, &pairs, || Box::new(RocchioAgent::new(cfg)), max_steps)?;
            write_episodes(&out, &records)?;
            Ok(episode_summary(&records, &out))
        }
        Command::Session(SessionCommand::Run {
            index,
            qa,
            agent,
            steps,
            out,
            simulations,
        }) => {
            let ctx = load_context(&index)?;
            let pairs = load_qa_jsonl(&qa)?;
            let grammar = Grammar::new(ctx.index(), GrammarConfig::default());
            let planner = |mode| PlannerConfig {
                simulations,
                max_episode_steps: steps,
                mode,
                ..Default::default()
            };
            planner(PlannerMode::OracleReward).validate()?;
            let make = || -> Box<dyn Agent> {
                match agent {
                    AgentKind::Baseline => Box::new(BaselineAgent),
                    AgentKind::Rocchio => Box::new(RocchioAgent::new(RocchioConfig::default())),
                    AgentKind::MctsOracle => {
                        Box::new(MctsAgent::with_default_evaluator(grammar.clone(), planner(PlannerMode::OracleReward)))
                    }
                    AgentKind::MctsHeuristic => {
                        Box::new(MctsAgent::with_default_evaluator(grammar.clone(), planner(PlannerMode::Heuristic)))
                    }
                }
            };
            let records = run_dataset(&ctx, &pairs, make, steps)?;
            write_episodes(&out, &records)?;
            Ok(episode_summary(&records, &out))
        }
        Command::Eval(args) => {
            let records = read_episodes(&args.episodes)?;
            let known = match &args.known_answers {
                Some(p) => Some(known_answer_set(&load_qa_jsonl(p)?)),
                None => None,
            };
            Ok(serde_json::to_value(summarize(&records, known.as_ref()))?)
        }
        Command::ExportT5(args) => {
            let records = read_episodes(&args.episodes)?;
            let pairs = export_t5(&records);
            let file = std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            let mut w = std::io::BufWriter::new(file);
            for p in &pairs {
                writeln!(w, "{}", serde_json::to_string(p)?)?;
            }
            w.flush()?;
            Ok(json!({"pairs": pairs.len(), "out": args.out}))
        }
        Command::Headroom(args) => {
            let records = read_episodes(&args.episodes)?;
            Ok(serde_json::to_value(headroom_report(&records))?)
        }
        Command::Desk(args) => {
            let d = desk::generate(&DeskConfig {
                questions: args.questions,
                seed: args.seed,
                ..Default::default()
            });
            write_corpus_jsonl(&args.corpus, &d.documents)?;
            write_qa_jsonl(&args.qa, &d.qa)?;
            Ok(json!({"documents": d.documents.len(), "questions": d.qa.len(), "corpus": args.corpus, "qa": args.qa}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.to_string().trim_end(), "code": "USAGE"}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e
                .downcast_ref::<qrefine_core::Error>()
                .map(|c| serde_json::to_value(c.code()).unwrap_or(Value::Null))
                .unwrap_or_else(|| json!("OTHER"));
            eprintln!("{}", json!({"error": format!("{e:#}"), "code": code}));
            ExitCode::FAILURE
        }
    }
}
