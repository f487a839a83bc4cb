use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use gw_core::ingest::{load_bodies, load_manifest};
use gw_core::service::http::serve;
use gw_core::service::{Engine, EngineError, ServiceConfig};
use gw_core::session::AskResponse;

#[derive(Parser)]
#[command(name = "gw", version, about = "Ask questions of a document collection and get cited answers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Data directory for collections and sessions.
    #[arg(long, global = true, env = "GW_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long, global = true, env = "GW_CONFIG")]
    config: Option<PathBuf>,
    /// Use only local providers (hashing embedder, n-gram terms, KG fixture,
    /// extractive answers).
    #[arg(long, global = true)]
    offline: bool,
    #[arg(long, global = true)]
    token_budget: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    session_decay: Option<f64>,
    #[arg(long, global = true)]
    score_floor: Option<f64>,
    #[arg(long, global = true)]
    max_probes: Option<usize>,
    #[arg(long, global = true)]
    expansion_depth: Option<u8>,
    /// SKOS JSON fixture used as the knowledge graph.
    #[arg(long, global = true)]
    kg_fixture: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a collection into fragments and store it.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `{doc_id}.txt`; defaults to `{collection_id}/` next
        /// to the manifest if present, else the manifest's directory.
        #[arg(long)]
        bodies: Option<PathBuf>,
    },
    /// Extract terms, enrich them and build the vector index.
    Index { collection_id: String },
    /// Ask one question.
    Ask {
        collection_id: String,
        query: String,
        /// Continue an existing session instead of starting one.
        #[arg(long)]
        session: Option<String>,
        /// Print the raw response JSON.
        #[arg(long)]
        json: bool,
    },
    /// Interactive session; an empty line or `:q` quits.
    Chat {
        collection_id: String,
        #[arg(long)]
        session: Option<String>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Print a stored collection manifest.
    ExportManifest {
        collection_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_config(g: &GlobalArgs) -> Result<ServiceConfig> {
    let mut config = match &g.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    config.apply_env();
    if let Some(d) = &g.data_dir {
        config.data_dir = d.clone();
    }
    config.offline |= g.offline;
    if let Some(v) = g.token_budget {
        config.token_budget = v;
    }
    if let Some(v) = g.k {
        config.retrieval.k = v;
    }
    if let Some(v) = g.alpha {
        config.retrieval.alpha = v;
    }
    if let Some(v) = g.session_decay {
        config.retrieval.session_decay = v;
    }
    if let Some(v) = g.score_floor {
        config.retrieval.score_floor = v;
    }
    if let Some(v) = g.max_probes {
        config.retrieval.max_probes = v;
    }
    if let Some(v) = g.expansion_depth {
        config.retrieval.expansion_depth = v;
    }
    if let Some(v) = &g.kg_fixture {
        config.kg.fixture = Some(v.clone());
    }
    config.validate()?;
    Ok(config)
}

fn print_answer(r: &AskResponse, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", r.answer_text)?;
    if !r.citations.is_empty() {
        writeln!(out, "\nSources:")?;
    }
    for (i, c) in r.citations.iter().enumerate() {
        let date = c.date.map(|d| d.to_string()).unwrap_or_else(|| "n.d.".into());
        writeln!(
            out,
            "  [{}] {} ({}, {}) confidence {:.2}",
            i + 1,
            c.title,
            c.authors.join(", "),
            date,
            c.confidence
        )?;
        if let Some(uri) = &c.uri {
            writeln!(out, "      {uri}")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = build_config(&cli.global)?;
    let engine = Engine::open(config)?;
    let stdout = std::io::stdout();
    match cli.command {
        Command::Ingest { manifest, bodies } => {
            let m = load_manifest(&manifest)?;
            let dir = bodies.unwrap_or_else(|| {
                let base = manifest.parent().map(PathBuf::from).unwrap_or_default();
                let nested = base.join(&m.collection_id);
                if nested.is_dir() {
                    nested
                } else {
                    base
                }
            });
            let texts = load_bodies(&dir, &m)?;
            let report = engine.ingest(&m, &texts)?;
            writeln!(stdout.lock(), "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Index { collection_id } => {
            let report = engine.index(&collection_id)?;
            writeln!(stdout.lock(), "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Ask {
            collection_id,
            query,
            session,
            json,
        } => {
            let session_id = match session {
                Some(s) => s,
                None => engine.create_session(&collection_id)?.session_id,
            };
            let response = engine.ask(&session_id, &query)?;
            if json {
                writeln!(stdout.lock(), "{}", serde_json::to_string_pretty(&response)?)?;
            } else {
                print_answer(&response, &mut stdout.lock())?;
                eprintln!("session: {session_id}");
            }
        }
        Command::Chat { collection_id, session } => {
            let session_id = match session {
                Some(s) => s,
                None => engine.create_session(&collection_id)?.session_id,
            };
            eprintln!("session {session_id}; empty line or :q to quit");
            let stdin = std::io::stdin();
            loop {
                eprint!("> ");
                let mut line = String::new();
                if stdin.lock().read_line(&mut line)? == 0 {
                    break;
                }
                let q = line.trim();
                if q.is_empty() || q == ":q" {
                    break;
                }
                match engine.ask(&session_id, q) {
                    Ok(r) => print_answer(&r, &mut stdout.lock())?,
                    Err(e) => eprintln!("error: {e}"),
                }
            }
        }
        Command::Serve { addr } => {
            let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
            runtime.block_on(serve(Arc::new(engine), addr))?;
        }
        Command::ExportManifest { collection_id, out } => {
            let json = engine.manifest(&collection_id)?.to_json_pretty();
            match out {
                Some(path) => std::fs::write(&path, json + "\n").with_context(|| path.display().to_string())?,
                None => writeln!(stdout.lock(), "{json}")?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<EngineError>() {
                Some(EngineError::NotFound { .. }) => 3,
                Some(EngineError::NotIndexed(_)) => 4,
                Some(EngineError::Provider { .. }) => 5,
                Some(EngineError::Busy(_)) => 6,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
