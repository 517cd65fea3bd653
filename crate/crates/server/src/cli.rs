//! Command-line front end. Every command calls the same internal API the
//! HTTP server exposes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use feedlens_core::store::Format;
use feedlens_core::topics::Decision;
use serde::Serialize;

use crate::app::{App, AppError};
use crate::config::Config;
use crate::jobs::JobState;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "feedlens",
    version,
    about = "Feedback analytics: classification, topic modeling and question answering"
)]
pub struct Cli {
    /// Configuration file. Defaults to ./feedlens.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load feedback records from a CSV or JSONL file.
    Ingest {
        file: PathBuf,
        /// csv or jsonl; taken from the file extension when omitted.
        #[arg(long)]
        format: Option<String>,
    },
    /// Label unlabeled records in a dimension.
    Classify {
        #[arg(long)]
        dimension: String,
        /// Demonstrations per prompt.
        #[arg(long)]
        k: Option<usize>,
    },
    #[command(subcommand)]
    Topics(TopicsCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP server.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Ask questions about the data. Reads questions from stdin, one per
    /// line, unless --one-shot is given.
    Ask {
        /// Answer a single question and exit.
        #[arg(long)]
        one_shot: bool,
        question: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TopicsCommand {
    /// First topic round over every record.
    Round1,
    /// Print the candidate topics waiting for review.
    Candidates,
    /// Apply reviewer decisions from a JSON file mapping each candidate to
    /// "accept", "reject" or "rename:<phrase>".
    Review { decisions: PathBuf },
    /// Refine the reviewed topics and run the second round.
    Round2,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Classification accuracy on the labeled records of a dimension.
    Classify {
        #[arg(long)]
        dimension: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// OthersRate and coherence of the stored topics.
    Topics,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(String),
}

impl From<AppError> for Failure {
    fn from(e: AppError) -> Self {
        Failure::Domain(e.to_string())
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // help and version requests are not errors
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Domain(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_DOMAIN
        }
    }
}

fn load_config(path: Option<PathBuf>) -> Result<Config, Failure> {
    match path {
        Some(p) => Config::load(&p).map_err(|e| Failure::Domain(e.to_string())),
        None => {
            let default = PathBuf::from("feedlens.toml");
            if default.is_file() {
                Config::load(&default).map_err(|e| Failure::Domain(e.to_string()))
            } else {
                Ok(Config::default())
            }
        }
    }
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Domain(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Failure::Domain(e.to_string()))
}

/// Waits for a job and prints its report; a failed or canceled job is a
/// domain error.
fn finish_job(app: &App, id: &str, out: &mut dyn Write) -> Result<(), Failure> {
    let status = app.wait_job(id)?;
    match status.state {
        JobState::Succeeded => print_json(out, &status.report),
        state => Err(Failure::Domain(format!(
            "{} job {state:?}: {}",
            status.kind,
            status.error.unwrap_or_default()
        ))),
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let mut config = load_config(cli.config)?;
    if let Command::Serve { port: Some(p) } = &cli.command {
        config.server.port = *p;
    }
    let app = App::open(config)?;
    match cli.command {
        Command::Ingest { file, format } => {
            let format = format
                .or_else(|| file.extension().map(|e| e.to_string_lossy().into_owned()))
                .ok_or_else(|| Failure::Usage("cannot tell the format; pass --format".into()))?;
            let format: Format = format.parse().map_err(Failure::Usage)?;
            let bytes = std::fs::read(&file)
                .map_err(|e| Failure::Domain(format!("{}: {e}", file.display())))?;
            print_json(out, &app.ingest(&bytes, format)?)
        }
        Command::Classify { dimension, k } => {
            let id = app.start_classify(&dimension, k)?;
            finish_job(&app, &id, out)
        }
        Command::Topics(TopicsCommand::Round1) => {
            let id = app.start_round_one()?;
            finish_job(&app, &id, out)
        }
        Command::Topics(TopicsCommand::Candidates) => print_json(out, &app.candidates()?),
        Command::Topics(TopicsCommand::Review { decisions }) => {
            let text = std::fs::read_to_string(&decisions)
                .map_err(|e| Failure::Domain(format!("{}: {e}", decisions.display())))?;
            let parsed = parse_decisions(&text)
                .map_err(|e| Failure::Domain(format!("{}: {e}", decisions.display())))?;
            print_json(out, &app.review(&parsed)?)
        }
        Command::Topics(TopicsCommand::Round2) => {
            let id = app.start_round_two()?;
            finish_job(&app, &id, out)
        }
        Command::Eval(EvalCommand::Classify { dimension, k, seed }) => {
            let id = app.start_eval_classify(&dimension, k, seed)?;
            finish_job(&app, &id, out)
        }
        Command::Eval(EvalCommand::Topics) => print_json(out, &app.eval_topics()),
        Command::Serve { .. } => {
            let app = Arc::new(app);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Domain(e.to_string()))?;
            rt.block_on(crate::http::serve(app.clone()))
                .map_err(|e| Failure::Domain(e.to_string()))?;
            app.shutdown();
            Ok(())
        }
        Command::Ask { one_shot, question } => {
            let question = question.join(" ");
            if one_shot && question.trim().is_empty() {
                return Err(Failure::Usage("--one-shot needs a question".into()));
            }
            let handle = app.create_session()?;
            let result = if one_shot {
                answer(&app, &handle.id, &question, out)
            } else {
                let mut pending: Vec<String> = Vec::new();
                if !question.trim().is_empty() {
                    pending.push(question);
                }
                let stdin = std::io::stdin();
                let mut lines = stdin.lock().lines();
                let mut outcome = Ok(());
                loop {
                    let q = match pending.pop() {
                        Some(q) => q,
                        None => match lines.next() {
                            Some(Ok(l)) => l,
                            _ => break,
                        },
                    };
                    if q.trim().is_empty() {
                        continue;
                    }
                    // a failed turn is reported but the conversation goes on
                    if let Err(Failure::Domain(msg)) = answer(&app, &handle.id, &q, out) {
                        let _ = writeln!(out, "error: {msg}");
                        outcome = Err(Failure::Domain(msg));
                    }
                }
                outcome
            };
            app.close_session(&handle.id)?;
            result
        }
    }
}

/// Prints the answer, the files it produced and, for a failed turn,
/// returns a domain error.
fn answer(app: &App, session: &str, question: &str, out: &mut dyn Write) -> Result<(), Failure> {
    let resp = app.ask(session, question)?;
    let workspace = app
        .config()
        .server
        .data_dir
        .join("sessions")
        .join(session)
        .join("workspace");
    let mut text = format!("{}\n", resp.text);
    for a in &resp.artifacts {
        text.push_str(&format!(
            "artifact: {} ({})\n",
            workspace.join(&a.path).display(),
            a.url.as_deref().unwrap_or("-")
        ));
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Domain(e.to_string()))?;
    match resp.status {
        feedlens_agent::TurnStatus::Failed => {
            Err(Failure::Domain("the question could not be answered".into()))
        }
        _ => Ok(()),
    }
}

/// Accepts either a bare object of decisions or `{"decisions": {...}}`.
pub fn parse_decisions(text: &str) -> Result<BTreeMap<String, Decision>, serde_json::Error> {
    #[derive(serde::Deserialize)]
    struct Wrapped {
        decisions: BTreeMap<String, Decision>,
    }
    serde_json::from_str::<Wrapped>(text)
        .map(|w| w.decisions)
        .or_else(|_| serde_json::from_str(text))
}
