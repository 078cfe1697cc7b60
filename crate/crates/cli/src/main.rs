use std::fs::File;
use std::io::{BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nrep_core::catalog::FilterLevel;
use nrep_core::harness::{
    aggregate, bounds_analysis, build_fewshot_store, default_db_root, ex_by_vote, link_eval, link_eval_text,
    load_dataset, read_records, record_line, run_benchmark, subset, sweep, Dataset, Engine, PipelineConfig,
    ResolvedConfig, SweepOptions,
};
use nrep_core::harness::pipeline::load_catalog;
use nrep_core::llm::{
    ChatBackend, Embedder, HashEmbedder, HttpChatBackend, HttpEmbedder, RecordingBackend, ReplayBackend,
};
use nrep_core::representation::{render, RepresentationFormat};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "nrep", version, about = "Multi-representation text-to-SQL with confidence-aware selection")]
struct Cli {
    /// Pipeline config (TOML). Defaults to the built-in five-candidate setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Backend {
    /// Serve model calls from a recorded fixture file.
    #[arg(long, value_name = "FIXTURES")]
    replay: Option<PathBuf>,
    /// Call the configured HTTP endpoint (NREP_API_KEY, NREP_API_BASE).
    #[arg(long)]
    live: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Benchmark question file (BIRD/Spider JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding `<db_id>/<db_id>.sqlite`; guessed from the dataset
    /// location when omitted.
    #[arg(long)]
    db_root: Option<PathBuf>,
    /// Only the first N items.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark and write records and reports.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: Backend,
        /// Output directory for records.jsonl, report.txt and report.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// With --live, also save every exchange as a replay fixture.
        #[arg(long, requires = "live")]
        record: Option<PathBuf>,
    },
    /// Answer one question against one database.
    Ask {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        evidence: Option<String>,
        #[command(flatten)]
        backend: Backend,
    },
    /// Print a database schema in one representation format.
    Render {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value = "mschema")]
        format: RepresentationFormat,
        /// Example values per column.
        #[arg(long, default_value_t = 3)]
        sample_values: usize,
    },
    /// Schema-linking precision/recall/F1 per linker.
    LinkEval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: Backend,
    },
    /// Build the few-shot store from a training split.
    BuildFewshotStore {
        #[command(flatten)]
        data: DataArgs,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
        /// Embed with the configured HTTP embedding model instead of the
        /// offline hashing embedder.
        #[arg(long)]
        live: bool,
    },
    /// Score every multiset of candidate specs by regular voting.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: Backend,
        /// Fraction of the dataset to sample.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Candidates per configuration.
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Refuse to run more combinations than this.
        #[arg(long, default_value_t = nrep_core::harness::sweep::DEFAULT_CAP)]
        cap: usize,
        /// Comma-separated formats; all six when omitted.
        #[arg(long, value_delimiter = ',')]
        formats: Vec<RepresentationFormat>,
        /// Comma-separated filter levels; all three when omitted.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<FilterLevel>,
        #[arg(long, default_value = "gpt-4o")]
        linker_model: String,
        /// Defaults to the config's generator model.
        #[arg(long)]
        generator_model: Option<String>,
        /// Number of ranked rows to print.
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Re-aggregate a records file.
    Report {
        records: PathBuf,
        /// Print the structured report instead of the table.
        #[arg(long)]
        json: bool,
        /// Also print selector bounds and accuracy by vote count.
        #[arg(long)]
        analysis: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<ResolvedConfig> {
    let raw = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(raw.resolve()?)
}

fn load_data(data: &DataArgs) -> Result<Dataset> {
    let root = data.db_root.clone().unwrap_or_else(|| default_db_root(&data.dataset));
    let mut ds = load_dataset(&data.dataset, &root)?;
    if ds.skipped > 0 {
        eprintln!("skipped {} malformed records", ds.skipped);
    }
    if let Some(n) = data.limit {
        ds.items.truncate(n);
    }
    Ok(ds)
}

struct Backends {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn Embedder>,
    recorder: Option<Arc<RecordingBackend>>,
}

fn backends(backend: &Backend, config: &ResolvedConfig, record: bool) -> Result<Backends> {
    if let Some(path) = &backend.replay {
        let replay = ReplayBackend::load(path)?;
        return Ok(Backends {
            chat: Arc::new(replay),
            embedder: Arc::new(HashEmbedder::default()),
            recorder: None,
        });
    }
    let http: Arc<dyn ChatBackend> = Arc::new(HttpChatBackend::from_env()?);
    let embedder = Arc::new(HttpEmbedder::from_env(config.raw.embedding_model.clone())?);
    let recorder = record.then(|| Arc::new(RecordingBackend::new(http.clone())));
    Ok(Backends {
        chat: match &recorder {
            Some(r) => r.clone(),
            None => http,
        },
        embedder,
        recorder,
    })
}

fn engine<'c>(config: &'c ResolvedConfig, b: &Backends, live: bool) -> Result<Engine<'c>> {
    let mut e = Engine::new(config, b.chat.clone(), b.embedder.clone())?;
    e.record_wall_time = live;
    Ok(e)
}

fn cmd_run(config: &ResolvedConfig, data: &DataArgs, backend: &Backend, out: &Path, record: Option<&Path>) -> Result<()> {
    let ds = load_data(data)?;
    let b = backends(backend, config, record.is_some())?;
    let engine = engine(config, &b, backend.live)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let records_path = out.join("records.jsonl");
    let mut sink = BufWriter::new(File::create(&records_path)?);
    let mut write_err = None;
    let records = run_benchmark(&engine, &ds, &ds.items, |r| {
        if write_err.is_none() {
            if let Err(e) = sink.write_all(record_line(r).as_bytes()).and_then(|_| sink.flush()) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        bail!("writing {}: {e}", records_path.display());
    }
    let report = aggregate(&records, &config.prices);
    std::fs::write(out.join("report.txt"), report.to_text())?;
    std::fs::write(out.join("report.json"), report.to_json())?;
    if let (Some(rec), Some(path)) = (&b.recorder, record) {
        rec.write_jsonl(path)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_ask(config: &ResolvedConfig, db: &Path, question: &str, evidence: Option<&str>, backend: &Backend) -> Result<()> {
    if !db.is_file() {
        bail!("database {} not found", db.display());
    }
    let b = backends(backend, config, false)?;
    let engine = engine(config, &b, backend.live)?;
    let answer = engine.answer(db, question, evidence).map_err(anyhow::Error::msg)?;
    let selection = answer.selection.map_err(anyhow::Error::msg)?;
    println!("{}", selection.chosen_sql);
    let cost = config.prices.price(&answer.usage);
    eprintln!(
        "candidate {} of {}; votes {:?}; {:?}, {} judge calls; {} LLM calls; cost {}",
        selection.chosen_index,
        answer.candidates.len(),
        selection.distribution,
        selection.method,
        selection.pairwise_calls,
        answer.usage.calls(),
        cost.total
    );
    Ok(())
}

fn cmd_render(db: &Path, format: RepresentationFormat, sample_values: usize) -> Result<()> {
    let cat = load_catalog(db, sample_values)?;
    print!("{}", render(&cat, format));
    Ok(())
}

fn cmd_link_eval(config: &ResolvedConfig, data: &DataArgs, backend: &Backend) -> Result<()> {
    if config.linkers.is_empty() {
        bail!("the config has no linker runs to evaluate");
    }
    let ds = load_data(data)?;
    let b = backends(backend, config, false)?;
    let engine = engine(config, &b, backend.live)?;
    let rows = link_eval(&engine, &ds, &ds.items, &config.linkers);
    print!("{}", link_eval_text(&rows));
    if let Some(r) = rows.first() {
        println!("Items scored: {}, excluded: {}", r.items, r.excluded);
    }
    Ok(())
}

fn cmd_build_store(config: &ResolvedConfig, data: &DataArgs, out: &Path, live: bool) -> Result<()> {
    let ds = load_data(data)?;
    let embedder: Box<dyn Embedder> = if live {
        Box::new(HttpEmbedder::from_env(config.raw.embedding_model.clone())?)
    } else {
        Box::new(HashEmbedder::default())
    };
    let build = build_fewshot_store(&ds, embedder.as_ref(), config.raw.sample_values)?;
    build.store.write_jsonl(out)?;
    println!("{} records written to {} ({} skipped)", build.store.len(), out.display(), build.skipped);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &ResolvedConfig,
    data: &DataArgs,
    backend: &Backend,
    fraction: f64,
    seed: u64,
    n: usize,
    cap: usize,
    formats: &[RepresentationFormat],
    levels: &[FilterLevel],
    linker_model: &str,
    generator_model: Option<&str>,
    top: usize,
) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!("--fraction must be in (0, 1]");
    }
    let ds = load_data(data)?;
    let items = subset(&ds.items, fraction, seed);
    let b = backends(backend, config, false)?;
    let engine = engine(config, &b, backend.live)?;
    let opts = SweepOptions {
        formats: if formats.is_empty() { RepresentationFormat::ALL.to_vec() } else { formats.to_vec() },
        levels: if levels.is_empty() { FilterLevel::ALL.to_vec() } else { levels.to_vec() },
        linker_model: linker_model.to_string(),
        generator_model: generator_model.unwrap_or(&config.raw.generator_model).to_string(),
        n,
        cap,
    };
    let rows = sweep(&engine, &ds, &items, &opts)?;
    println!("| Rank | EX | Candidates |");
    println!("|---|---|---|");
    for (i, r) in rows.iter().take(top).enumerate() {
        println!("| {} | {:.2} | {} |", i + 1, r.ex * 100.0, r.specs.join(", "));
    }
    println!("{} configurations over {} items", rows.len(), rows.first().map_or(0, |r| r.items));
    Ok(())
}

fn cmd_report(config: &ResolvedConfig, path: &Path, json: bool, analysis: bool) -> Result<()> {
    let records = read_records(path)?;
    let report = aggregate(&records, &config.prices);
    if json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    if analysis {
        println!("\n| Candidates | Items | EX | Upper | Lower |");
        println!("|---|---|---|---|---|");
        for r in bounds_analysis(&records) {
            println!(
                "| {} | {} | {:.2} | {:.2} | {:.2} |",
                r.candidates,
                r.items,
                r.ex * 100.0,
                r.upper * 100.0,
                r.lower * 100.0
            );
        }
        println!("\n| Votes | Items | EX | Upper |");
        println!("|---|---|---|---|");
        for r in ex_by_vote(&records) {
            println!("| {} | {} | {:.2} | {:.2} |", r.votes, r.items, r.ex * 100.0, r.upper * 100.0);
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Run {
            data,
            backend,
            out,
            record,
        } => cmd_run(&config, data, backend, out, record.as_deref()),
        Command::Ask {
            db,
            question,
            evidence,
            backend,
        } => cmd_ask(&config, db, question, evidence.as_deref(), backend),
        Command::Render {
            db,
            format,
            sample_values,
        } => cmd_render(db, *format, *sample_values),
        Command::LinkEval { data, backend } => cmd_link_eval(&config, data, backend),
        Command::BuildFewshotStore { data, out, live } => cmd_build_store(&config, data, out, *live),
        Command::Sweep {
            data,
            backend,
            fraction,
            seed,
            n,
            cap,
            formats,
            levels,
            linker_model,
            generator_model,
            top,
        } => cmd_sweep(
            &config,
            data,
            backend,
            *fraction,
            *seed,
            *n,
            *cap,
            formats,
            levels,
            linker_model,
            generator_model.as_deref(),
            *top,
        ),
        Command::Report {
            records,
            json,
            analysis,
        } => cmd_report(&config, records, *json, *analysis),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
