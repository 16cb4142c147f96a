use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use gatecascade_cli::sweep::compare_gates;
use gatecascade_cli::{eval, pct1, sweep, GateKind, HarnessError, Which};
use gatecascade_core::cascade::Cascade;
use gatecascade_core::dataset::{load_examples, save_examples};
use gatecascade_core::metrics::DEFAULT_TARGETS;
use gatecascade_core::synth::{generate, SynthSpec};
use gatecascade_core::types::Stage;
use gatecascade_core::vmp::{
    build_feature_client, run_pipeline, MemoryIndex, MemoryStream, Pipeline, PipelineConfig, PipelineReport,
    Sink,
};
use gatecascade_service::{bind, build_classifier, ServiceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Parser)]
#[command(name = "gatecascade", version, about = "Gated two-stage classification cascade")]
struct Cli {
    /// Seed for synthetic data.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Write the command's output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset of paired stage scores (JSONL).
    Synth {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0.3)]
        prevalence: f64,
        #[arg(long, default_value_t = 2.0)]
        stage1_sep: f64,
        #[arg(long, default_value_t = 8.0)]
        stage2_sep: f64,
    },
    /// F1, recall at precision targets and max Beta variance.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::Cascade)]
        which: Which,
        #[arg(long, value_enum, default_value_t = GateKind::Entropy)]
        gate: GateKind,
        #[arg(long, default_value_t = 0.6)]
        tau: f64,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TARGETS)]
        targets: Vec<f64>,
    },
    /// Cascade metrics across gate thresholds, with stage baselines.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = default_taus())]
        taus: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TARGETS)]
        targets: Vec<f64>,
        #[arg(long, value_enum, default_value_t = GateKind::Entropy)]
        gate: GateKind,
        /// Also compare entropy at this threshold with a confidence gate
        /// forwarding the same number of items.
        #[arg(long)]
        compare_at: Option<f64>,
    },
    /// Run the ingestion pipeline over a JSONL message stream.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Persistent index log; replayed on start.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Append sink audit entries here.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Start the scoring gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn default_taus() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn pipeline_csv(report: &PipelineReport) -> String {
    let mut s = String::from("field,value\n");
    for (k, v) in [
        ("processed", report.processed as u64),
        ("remained", report.remained as u64),
        ("removed", report.removed as u64),
        ("ignored", report.ignored as u64),
        ("dead_lettered", report.dead_lettered as u64),
        ("batches", report.batches as u64),
        ("committed_offset", report.committed_offset),
    ] {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Synth {
            n,
            prevalence,
            stage1_sep,
            stage2_sep,
        } => {
            let spec = SynthSpec {
                n,
                prevalence,
                stage1_sep,
                stage2_sep,
                seed: cli.seed,
            };
            let examples = generate(&spec)?;
            match out {
                Some(path) => save_examples(path, &examples)?,
                None => save_examples_to_stdout(&examples)?,
            }
            let positives = examples.iter().filter(|e| e.is_positive()).count();
            eprintln!(
                "{n} examples, {positives} positive ({}%)",
                pct1(100.0 * positives as f64 / n.max(1) as f64)
            );
        }
        Command::Eval {
            dataset,
            which,
            gate,
            tau,
            targets,
        } => {
            let examples = load_examples(&dataset)?;
            let report = eval(&examples, which, gate, tau, &targets)?;
            let text = match cli.format {
                Format::Json => to_json(&report),
                Format::Csv => report.metrics.to_csv(),
            };
            emit(out, &text)?;
            let mut summary = format!("F1 {}%", pct1(100.0 * report.metrics.f1));
            for t in &targets {
                if let Some(r) = report.metrics.recall_at(*t) {
                    summary.push_str(&format!("  R@P{t} {}%", pct1(100.0 * r)));
                }
            }
            eprintln!("{summary}");
        }
        Command::Sweep {
            dataset,
            taus,
            targets,
            gate,
            compare_at,
        } => {
            if taus.is_empty() {
                return Err(HarnessError::Usage("at least one threshold is required".into()));
            }
            let examples = load_examples(&dataset)?;
            let mut report = sweep(&examples, &taus, &targets, gate)?;
            if let Some(tau) = compare_at {
                report.comparison = Some(compare_gates(&examples, tau, &targets)?);
            }
            let text = match cli.format {
                Format::Json => to_json(&report),
                Format::Csv => report.to_csv()?,
            };
            emit(out, &text)?;
            eprint!("{}", report.to_table());
        }
        Command::Pipeline {
            config,
            stream,
            index,
            audit,
        } => {
            let config = PipelineConfig::load(&config)?;
            let stage1 = build_classifier(&config.clients.stage1, Stage::Stage1)?;
            let stage2 = build_classifier(&config.clients.stage2, Stage::Stage2)?;
            let features = build_feature_client(&config.clients.features)?;
            let mut stream = MemoryStream::from_jsonl(&stream)?;
            let store = match &index {
                Some(path) => MemoryIndex::open(path).map_err(|e| HarnessError::Config(e.to_string()))?,
                None => MemoryIndex::new(),
            };
            let mut sink = Sink::new(Box::new(store));
            if let Some(path) = &audit {
                sink = sink.with_audit_log(path)?;
            }
            let report = run_pipeline(
                &mut stream,
                Pipeline {
                    batch_size: config.batch_size,
                    max_batches: config.max_batches,
                    cascade: Cascade::new(stage1, config.gate_policy.clone(), stage2),
                    features,
                    filter: config.filter_rules.clone(),
                    sink: &mut sink,
                },
            )?;
            let text = match cli.format {
                Format::Json => to_json(&report),
                Format::Csv => pipeline_csv(&report),
            };
            emit(out, &text)?;
            eprintln!(
                "processed {} remained {} removed {} ignored {} dead-lettered {} index size {}",
                report.processed,
                report.remained,
                report.removed,
                report.ignored,
                report.dead_lettered,
                sink.index().len()
            );
        }
        Command::Serve { config, port, host } => {
            let gateway = ServiceConfig::load(&config)
                .and_then(|c| c.build())
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| HarnessError::Usage(format!("bad address {host}:{port}: {e}")))?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let (local, server) = bind(addr, Arc::new(gateway)).await?;
                println!("listening on {local}");
                std::io::stdout().flush()?;
                server.await
            })?;
        }
    }
    Ok(())
}

fn save_examples_to_stdout(examples: &[gatecascade_core::LabeledExample]) -> Result<(), HarnessError> {
    let stdout = std::io::stdout().lock();
    gatecascade_core::dataset::write_jsonl(stdout, examples)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
