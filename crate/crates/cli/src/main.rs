//! `kgpath`: build graphs, train the path ranker, retrieve, evaluate and
//! render prompts from a JSON run configuration.

mod config;
mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use kgpath_core::corpus::{read_jsonl, read_notes, Note};
use kgpath_core::encoder::{CachedProvider, EmbeddingProvider, HashingProvider};
use kgpath_core::evaluate::{
    evaluate_generation, evaluate_system, EvaluationReport, NotePrediction, BASELINE_SYSTEM,
    MODEL_SYSTEM,
};
use kgpath_core::extract::{build_vocab_index, extract_concepts, ExtractedMention};
use kgpath_core::kg::{load_allowlist, load_graph, GraphSnapshot, KnowledgeGraph};
use kgpath_core::pipeline::Pipeline;
use kgpath_core::prompt::{
    complete_all, load_templates, parse_llm_output, prompt_paths, rank_templates_by_perplexity,
    FewShot, HttpLlmClient, ParsedOutput, PromptInput, PromptRecord, Template, TrigramScorer,
};
use kgpath_core::ranker::{PathModel, RetrievalRecord};
use kgpath_core::seed::derive_seed;
use kgpath_core::trainer::{retrieve, train, TrainingExample};

use config::AppConfig;
use output::OutputGuard;

#[derive(Parser)]
#[command(
    name = "kgpath",
    version,
    about = "Knowledge-graph path retrieval for clinical notes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph and corpus into --out.
    Synth(Common),
    /// Load, filter and snapshot the concept graph.
    BuildGraph(Common),
    /// Extract concept mentions from every note.
    Extract(Common),
    /// Compute per-concept weights over the training notes.
    Weights(Common),
    /// Train the path ranker and write a checkpoint.
    Train(Common),
    /// Rank paths for a split with a trained checkpoint.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Compare extractor and model retrieval on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// JSONL of {"generated", "reference"} rows scored with ROUGE.
        #[arg(long)]
        generations: Option<PathBuf>,
    },
    /// Render prompts from retrieved paths, optionally calling the LLM.
    Prompt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Send prompts to the configured endpoint.
        #[arg(long)]
        complete: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> Result<AppConfig> {
    let cfg = AppConfig::load(&c.config, c.seed)?;
    log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(c) => synth(&load_config(&c)?, &c.out),
        Command::BuildGraph(c) => build_graph(&load_config(&c)?, &c.out),
        Command::Extract(c) => extract(&load_config(&c)?, &c.out),
        Command::Weights(c) => weights(&load_config(&c)?, &c.out),
        Command::Train(c) => train_cmd(&load_config(&c)?, &c.out),
        Command::Retrieve { common, split } => {
            retrieve_cmd(&load_config(&common)?, &common.out, split)
        }
        Command::Evaluate {
            common,
            generations,
        } => evaluate_cmd(&load_config(&common)?, &common.out, generations.as_deref()),
        Command::Prompt {
            common,
            split,
            complete,
        } => prompt_cmd(&load_config(&common)?, &common.out, split, complete),
    }
}

fn synth(cfg: &AppConfig, out: &Path) -> Result<()> {
    let data = cfg.synth.generate()?;
    let mut g = OutputGuard::new(out)?;
    g.write("concepts.tsv", &data.concepts_tsv())?;
    g.write("triples.tsv", &data.triples_tsv())?;
    g.write("relations.txt", &(data.allowlist.join("\n") + "\n"))?;
    g.write_jsonl("notes.jsonl", &data.notes)?;
    g.write_jsonl("train.jsonl", &data.train)?;
    g.write_jsonl("test.jsonl", &data.test)?;
    log::info!(
        "synthetic data: {} concepts, {} triples, {} train / {} test notes",
        data.concepts.len(),
        data.triples.len(),
        data.train.len(),
        data.test.len()
    );
    g.commit();
    Ok(())
}

fn build_graph(cfg: &AppConfig, out: &Path) -> Result<()> {
    let allow = load_allowlist(&cfg.data.relations)?;
    let (graph, report) = load_graph(&cfg.data.concepts, &cfg.data.triples, &allow)?;
    log::info!(
        "graph: {} concepts, {} edges kept, {} dropped, {} deduplicated",
        report.concepts,
        report.kept,
        report.dropped,
        report.deduped
    );
    let mut g = OutputGuard::new(out)?;
    g.write_json("graph.json", &graph.snapshot())?;
    g.write_json("load_report.json", &report)?;
    g.commit();
    Ok(())
}

fn read_graph(out: &Path) -> Result<KnowledgeGraph> {
    let path = out.join("graph.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run build-graph first)", path.display()))?;
    let snap: GraphSnapshot =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(KnowledgeGraph::from_snapshot(snap)?)
}

fn provider(cfg: &AppConfig) -> Result<Box<dyn EmbeddingProvider>> {
    let dim = cfg.model.embed_dim;
    let hashing = HashingProvider::new(dim, derive_seed(cfg.seed, "embeddings"));
    Ok(match &cfg.data.embeddings {
        Some(p) => Box::new(CachedProvider::load(p, dim)?.with_fallback(Box::new(hashing))?),
        None => Box::new(hashing),
    })
}

fn pipeline(cfg: &AppConfig, out: &Path) -> Result<Pipeline> {
    let train_notes = read_notes(&cfg.data.train_notes)?;
    Ok(Pipeline::new(
        read_graph(out)?,
        &train_notes,
        provider(cfg)?,
    )?)
}

fn split_notes(cfg: &AppConfig, split: Split) -> Result<Vec<Note>> {
    Ok(read_notes(match split {
        Split::Train => &cfg.data.train_notes,
        Split::Test => &cfg.data.test_notes,
    })?)
}

#[derive(Serialize)]
struct MentionRow<'a> {
    note_id: &'a str,
    mentions: Vec<ExtractedMention>,
}

fn extract(cfg: &AppConfig, out: &Path) -> Result<()> {
    let graph = read_graph(out)?;
    let index = build_vocab_index(graph.concepts())?;
    let mut notes = read_notes(&cfg.data.train_notes)?;
    notes.extend(read_notes(&cfg.data.test_notes)?);
    let rows: Vec<MentionRow> = notes
        .iter()
        .map(|n| MentionRow {
            note_id: &n.note_id,
            mentions: extract_concepts(&n.text, &index),
        })
        .collect();
    let total: usize = rows.iter().map(|r| r.mentions.len()).sum();
    log::info!("extracted {total} mentions from {} notes", rows.len());
    let mut g = OutputGuard::new(out)?;
    g.write_jsonl("mentions.jsonl", &rows)?;
    g.commit();
    Ok(())
}

fn weights(cfg: &AppConfig, out: &Path) -> Result<()> {
    let p = pipeline(cfg, out)?;
    log::info!(
        "weights over {} notes, {} concepts",
        p.weighting.corpus_size,
        p.weighting.concept_df.len()
    );
    let mut g = OutputGuard::new(out)?;
    g.write_json("weights.json", &p.weighting)?;
    g.commit();
    Ok(())
}

fn train_cmd(cfg: &AppConfig, out: &Path) -> Result<()> {
    let p = pipeline(cfg, out)?;
    let notes = read_notes(&cfg.data.train_notes)?;
    let (examples, prep) = p.examples(&notes, cfg.ranker.max_hops, true)?;
    log::info!(
        "training on {} of {} notes ({} without sources, {} without reachable gold)",
        prep.kept,
        prep.notes,
        prep.no_sources.len(),
        prep.no_reachable_gold.len()
    );
    let mut model = PathModel::new(
        cfg.model.clone(),
        p.graph.relation_vocab().to_vec(),
        derive_seed(cfg.seed, "model.init"),
    )?;
    let history = train(
        &mut model,
        &p.graph,
        &p.base,
        &examples,
        &cfg.ranker,
        &cfg.train,
        cfg.seed,
        |_| {},
    )?;
    let mut g = OutputGuard::new(out)?;
    g.write_jsonl("metrics.jsonl", &history)?;
    g.write_json("train_report.json", &prep)?;
    let ckpt = g.track("checkpoint");
    model.save(&ckpt)?;
    g.commit();
    Ok(())
}

fn load_model(out: &Path, graph: &KnowledgeGraph) -> Result<PathModel> {
    let dir = out.join("checkpoint");
    let model = PathModel::load(&dir)
        .with_context(|| format!("loading {} (run train first)", dir.display()))?;
    model.check_graph(graph)?;
    Ok(model)
}

fn explorations(
    cfg: &AppConfig,
    p: &Pipeline,
    model: &PathModel,
    examples: &[TrainingExample],
) -> Result<Vec<RetrievalRecord>> {
    examples
        .iter()
        .map(|ex| {
            let e = retrieve(model, &p.graph, &p.base, ex, &cfg.ranker)?;
            Ok(RetrievalRecord::from_exploration(&ex.note_id, &e))
        })
        .collect()
}

fn retrieve_cmd(cfg: &AppConfig, out: &Path, split: Split) -> Result<()> {
    let p = pipeline(cfg, out)?;
    let model = load_model(out, &p.graph)?;
    let notes = split_notes(cfg, split)?;
    let (examples, prep) = p.examples(&notes, cfg.ranker.max_hops, false)?;
    if !prep.no_sources.is_empty() {
        log::warn!(
            "{} notes have no graph concepts and are skipped",
            prep.no_sources.len()
        );
    }
    let records = explorations(cfg, &p, &model, &examples)?;
    let mut g = OutputGuard::new(out)?;
    g.write_jsonl("retrieval.jsonl", &records)?;
    g.commit();
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerationRow {
    generated: String,
    reference: String,
}

fn evaluate_cmd(cfg: &AppConfig, out: &Path, generations: Option<&Path>) -> Result<()> {
    let p = pipeline(cfg, out)?;
    let model = load_model(out, &p.graph)?;
    let notes = read_notes(&cfg.data.test_notes)?;
    let (examples, _) = p.examples(&notes, cfg.ranker.max_hops, false)?;
    let mut predicted: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for ex in &examples {
        predicted.insert(
            ex.note_id.clone(),
            retrieve(&model, &p.graph, &p.base, ex, &cfg.ranker)?.final_nodes,
        );
    }
    let mut baseline_rows = Vec::new();
    let mut model_rows = Vec::new();
    for n in &notes {
        let gold = n.gold()?.to_vec();
        if gold.is_empty() {
            continue;
        }
        let mentions: BTreeSet<_> = extract_concepts(&n.text, &p.index)
            .into_iter()
            .map(|m| m.cui)
            .collect();
        baseline_rows.push(NotePrediction {
            note_id: n.note_id.clone(),
            predicted: mentions.into_iter().collect(),
            gold: gold.clone(),
        });
        model_rows.push(NotePrediction {
            note_id: n.note_id.clone(),
            predicted: predicted.get(&n.note_id).cloned().unwrap_or_default(),
            gold,
        });
    }
    let seed = derive_seed(cfg.seed, "evaluate.bootstrap");
    let generation = match generations {
        Some(path) => {
            let rows: Vec<GenerationRow> = read_jsonl(path)?;
            let pairs: Vec<(String, String)> = rows
                .into_iter()
                .map(|r| (r.generated, r.reference))
                .collect();
            Some(evaluate_generation(&pairs, &cfg.eval, seed)?)
        }
        None => None,
    };
    let report = EvaluationReport {
        seed: cfg.seed,
        bootstrap: cfg.eval,
        systems: vec![
            evaluate_system(BASELINE_SYSTEM, &baseline_rows, &cfg.eval, seed)?,
            evaluate_system(MODEL_SYSTEM, &model_rows, &cfg.eval, seed)?,
        ],
        generation,
    };
    for s in &report.systems {
        log::info!(
            "{}: recall {:.4} precision {:.4} f1 {:.4} [{:.4}, {:.4}]",
            s.system,
            s.recall,
            s.precision,
            s.f1,
            s.f1_ci.lower,
            s.f1_ci.upper
        );
    }
    let mut g = OutputGuard::new(out)?;
    g.write_json("report.json", &report)?;
    g.write("report.tsv", &report.to_tsv())?;
    g.commit();
    Ok(())
}

fn select_template(
    cfg: &AppConfig,
    train_notes: &[Note],
    samples: &[PromptInput],
) -> Result<Template> {
    let pc = &cfg.prompt;
    let Some(dir) = &pc.templates_dir else {
        if pc.template != "zero_shot" {
            bail!("template {} needs prompt.templates_dir", pc.template);
        }
        return Ok(Template::zero_shot());
    };
    let templates = load_templates(dir)?;
    let id = if pc.template == "auto" {
        let texts: Vec<&str> = train_notes.iter().map(|n| n.text.as_str()).collect();
        let lm = TrigramScorer::fit(&texts, pc.lm_smoothing)?;
        let ranked = rank_templates_by_perplexity(&templates, samples, pc.style, &lm)?;
        for r in &ranked {
            log::info!(
                "template {}: mean perplexity {:.4}",
                r.template,
                r.mean_perplexity
            );
        }
        ranked[0].template.clone()
    } else {
        pc.template.clone()
    };
    templates
        .into_iter()
        .find(|t| t.id == id)
        .with_context(|| format!("template {id} not found in {}", dir.display()))
}

#[derive(Serialize)]
struct CompletionRow<'a> {
    note_id: &'a str,
    raw: Option<String>,
    error: Option<String>,
    parsed: Option<ParsedOutput>,
}

fn prompt_cmd(cfg: &AppConfig, out: &Path, split: Split, complete: bool) -> Result<()> {
    let graph = read_graph(out)?;
    let records: Vec<RetrievalRecord> =
        read_jsonl(&out.join("retrieval.jsonl")).context("run retrieve first")?;
    let by_id: BTreeMap<&str, &RetrievalRecord> =
        records.iter().map(|r| (r.note_id.as_str(), r)).collect();
    let train_notes = read_notes(&cfg.data.train_notes)?;
    let shots: Vec<FewShot> = train_notes
        .iter()
        .filter_map(|n| {
            let names: Vec<String> = n
                .gold_cuis
                .iter()
                .flatten()
                .filter_map(|c| graph.concept(c).ok().map(|c| c.preferred_name.clone()))
                .collect();
            (!names.is_empty()).then(|| FewShot {
                note: n.text.clone(),
                diagnoses: names,
            })
        })
        .take(cfg.prompt.shots)
        .collect();
    let notes = split_notes(cfg, split)?;
    let mut inputs = Vec::with_capacity(notes.len());
    for n in &notes {
        let paths = match by_id.get(n.note_id.as_str()) {
            Some(r) => prompt_paths(&graph, r, cfg.prompt.max_paths)?,
            None => Vec::new(),
        };
        inputs.push(PromptInput {
            note: n.text.clone(),
            paths,
            shots: shots.clone(),
        });
    }
    let template = select_template(cfg, &train_notes, &inputs)?;
    log::info!(
        "rendering {} prompts with template {}",
        inputs.len(),
        template.id
    );
    let rows: Vec<PromptRecord> = notes
        .iter()
        .zip(&inputs)
        .map(|(n, i)| PromptRecord {
            note_id: n.note_id.clone(),
            template: template.id.clone(),
            prompt: template.render(i, cfg.prompt.style),
        })
        .collect();
    let mut g = OutputGuard::new(out)?;
    g.write_jsonl("prompts.jsonl", &rows)?;
    if complete {
        let llm = cfg
            .llm
            .clone()
            .context("--complete needs an llm section in the config")?;
        let concurrency = llm.concurrency;
        let audit = g.track("llm_audit.jsonl");
        let client = HttpLlmClient::new(llm)?.with_audit(&audit)?;
        let prompts: Vec<String> = rows.iter().map(|r| r.prompt.clone()).collect();
        let results = complete_all(&client, &prompts, concurrency);
        let completions: Vec<CompletionRow> = rows
            .iter()
            .zip(results)
            .map(|(r, res)| match res {
                Ok(text) => CompletionRow {
                    note_id: &r.note_id,
                    parsed: Some(parse_llm_output(&text)),
                    raw: Some(text),
                    error: None,
                },
                Err(e) => CompletionRow {
                    note_id: &r.note_id,
                    raw: None,
                    error: Some(e.to_string()),
                    parsed: None,
                },
            })
            .collect();
        let failed = completions.iter().filter(|c| c.error.is_some()).count();
        if failed > 0 {
            log::warn!("{failed} of {} completions failed", completions.len());
        }
        g.write_jsonl("completions.jsonl", &completions)?;
    }
    g.commit();
    Ok(())
}
