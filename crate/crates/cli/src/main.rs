use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use feedlab_core::agents::PopulationSpec;
use feedlab_core::analytics::{analyze, AnalysisOptions};
use feedlab_core::{ActionLog, Catalog};
use feedlab_server::client::Client;
use feedlab_server::{run_agents, serve, AgentRunOptions, Registry, SessionConfig};

/// Size and seed of the built-in catalog used when no file is given.
const SYNTHETIC_SIZE: usize = 727;
const SYNTHETIC_SEED: u64 = 1;

#[derive(Parser)]
#[command(name = "feedlab", version, about = "Classroom social-media simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the session server.
    Serve {
        /// Catalog JSON; a built-in synthetic catalog when omitted.
        #[arg(long, env = "FEEDLAB_CATALOG")]
        catalog: Option<PathBuf>,
        #[arg(long, env = "FEEDLAB_PORT", default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
        /// TOML session defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Don't open a session at startup.
        #[arg(long)]
        no_session: bool,
    },
    /// Download a session log from a running server.
    Export {
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        server: String,
        /// Teacher key printed by `serve`.
        #[arg(long, env = "FEEDLAB_TEACHER_KEY")]
        key: String,
    },
    /// Latent-profile analysis of an exported log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 10)]
        kmax: usize,
        #[arg(long, default_value_t = 60)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// z-score the count columns before fitting.
        #[arg(long)]
        standardize: bool,
        /// Warn when the log was recorded against a different catalog.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run scripted agents against a server and save the teacher export.
    Agents {
        #[arg(long, default_value = "127.0.0.1:7878")]
        server: String,
        #[arg(long, default_value = "browsers=4,enthusiasts=4,selective=4")]
        spec: PopulationSpec,
        /// Simulated minutes per agent.
        #[arg(long, default_value_t = 5.0)]
        minutes: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        export: PathBuf,
        /// Leave the session open after the run.
        #[arg(long)]
        keep: bool,
    },
    /// Write the synthetic catalog as JSON.
    Catalog {
        #[arg(long, default_value_t = SYNTHETIC_SIZE)]
        size: usize,
        #[arg(long, default_value_t = SYNTHETIC_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_catalog(path: Option<&Path>) -> Result<Catalog> {
    match path {
        Some(p) => Catalog::load(p).with_context(|| format!("loading catalog {}", p.display())),
        None => Ok(Catalog::synthetic(SYNTHETIC_SIZE, SYNTHETIC_SEED)),
    }
}

fn load_config(path: Option<&Path>) -> Result<SessionConfig> {
    let Some(p) = path else {
        return Ok(SessionConfig::default());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let config: SessionConfig = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    config.validate()?;
    Ok(config)
}

fn write(path: &Path, data: &str) -> Result<()> {
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve {
            catalog,
            port,
            bind,
            config,
            no_session,
        } => {
            let catalog = load_catalog(catalog.as_deref())?;
            let config = load_config(config.as_deref())?;
            let listener = tokio::net::TcpListener::bind((bind.as_str(), port))
                .await
                .with_context(|| format!("binding {bind}:{port}"))?;
            let addr = listener.local_addr()?;
            let registry = Registry::new(catalog, config);
            println!("listening on ws://{addr}/ws ({} images)", registry.catalog().len());
            if !no_session {
                let c = registry.create(None)?;
                println!("session {}", c.session_id);
                println!("join code {}", c.join_code);
                println!("teacher key {}", c.teacher_key);
            }
            tokio::select! {
                r = serve(listener, registry) => r?,
                _ = tokio::signal::ctrl_c() => println!("shutting down; session data discarded"),
            }
        }
        Command::Export {
            session,
            out,
            server,
            key,
        } => {
            let mut client = Client::connect(&server).await?;
            client.sid = Some(session);
            let data = client.export(Some(&key)).await?;
            write(&out, &data)?;
            println!("wrote {} events to {}", data.lines().count().saturating_sub(1), out.display());
        }
        Command::Analyze {
            log,
            kmax,
            bins,
            seed,
            standardize,
            catalog,
            out,
        } => {
            let file = fs::File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let actions = ActionLog::from_jsonl(std::io::BufReader::new(file))?;
            let expected_catalog_hash = match catalog {
                Some(p) => Some(load_catalog(Some(&p))?.hash().to_string()),
                None => None,
            };
            let opts = AnalysisOptions {
                k_max: kmax,
                bins,
                seed,
                standardize,
                expected_catalog_hash,
                ..AnalysisOptions::default()
            };
            let report = analyze(&actions, &opts)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let m = &report.selected;
            println!(
                "{} users, selected k={} ({:?}), entropy {:.3}, avg posterior {:.3}, min share {:.3}",
                report.features.users.len(),
                m.k,
                m.family,
                m.entropy_normalized,
                m.avg_posterior,
                m.min_cluster_share
            );
            write(&out, &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Agents {
            server,
            spec,
            minutes,
            seed,
            export,
            keep,
        } => {
            if !(minutes > 0.0) {
                bail!("--minutes must be positive");
            }
            let started = Instant::now();
            let run = run_agents(
                &server,
                &AgentRunOptions {
                    spec,
                    duration_ms: (minutes * 60_000.0).round() as u64,
                    seed,
                    config: None,
                    end_session: !keep,
                },
            )
            .await?;
            for w in &run.warnings {
                eprintln!("warning: {w}");
            }
            write(&export, &run.export)?;
            println!(
                "{} agents, {} events in {:.1?}; export written to {}",
                run.archetypes.len(),
                run.log.len(),
                started.elapsed(),
                export.display()
            );
            if keep {
                println!("session {} join code {} teacher key {}", run.session_id, run.join_code, run.teacher_key);
            }
        }
        Command::Catalog { size, seed, out } => {
            let catalog = Catalog::synthetic(size, seed);
            write(&out, &catalog.to_json())?;
            println!("{} images, hash {}", catalog.len(), catalog.hash());
        }
    }
    Ok(())
}
