//! Command-line surface. Exit codes: 0 success, 1 usage or config error,
//! 2 data validation error, 3 transport failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::evaluation::ScoreReport;
use crate::hrkg::ExportFormat;
use crate::pipeline::{write_file, Overrides, Part, PipelineError, Selection, Session};

#[derive(Debug, Parser)]
#[command(name = "llhkg", version, about = "Hyper-relational knowledge graph construction with small LLMs")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Answer LLM calls from the configured mock fixtures.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Skip the correction stage.
    #[arg(long, global = true)]
    pub no_correct: bool,
    /// Only the first N documents.
    #[arg(long, global = true, value_name = "N")]
    pub limit: Option<usize>,
    /// Overrides the split and mutation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    All,
    Train,
    Dev,
    Test,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::All => Part::All,
            PartArg::Train => Part::Train,
            PartArg::Dev => Part::Dev,
            PartArg::Test => Part::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert the HyperRED file into the interchange corpus.
    Ingest {
        /// Skip records with invalid spans instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the seeded train/dev/test split.
    Split {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Search prompts on the dev split; writes the best prompt and the trace.
    Optimize,
    /// Extract facts for documents without an extraction record.
    Extract {
        #[arg(long, value_enum, default_value_t = PartArg::All)]
        part: PartArg,
    },
    /// Correct extracted documents.
    Correct {
        #[arg(long, value_enum, default_value_t = PartArg::All)]
        part: PartArg,
    },
    /// Score recorded output against gold.
    Evaluate {
        #[arg(long, value_enum, default_value_t = PartArg::All)]
        part: PartArg,
    },
    /// Write the constructed graph.
    Export {
        #[arg(long, default_value = "canonical-json")]
        graph_format: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PartArg::All)]
        part: PartArg,
    },
    /// Extract, correct and evaluate, resuming from earlier records.
    Run {
        #[arg(long, value_enum, default_value_t = PartArg::All)]
        part: PartArg,
    },
    /// Re-render a saved score report.
    Report { path: PathBuf },
}

/// Output of a successful command: stdout payload plus a stderr summary.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: Vec<u8>,
    pub summary: Option<String>,
}

fn render(report: &ScoreReport, format: OutputFormat) -> Vec<u8> {
    match format {
        OutputFormat::Json => report.to_json(),
        OutputFormat::Table => report.render_table().into_bytes(),
    }
}

pub fn execute(cli: &Cli) -> Result<Output, PipelineError> {
    if let Command::Report { path } = &cli.command {
        let bytes = std::fs::read(path)
            .map_err(|e| PipelineError::Config(format!("cannot read report {}: {e}", path.display())))?;
        let report =
            ScoreReport::from_json(&bytes).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        return Ok(Output {
            stdout: render(&report, cli.format),
            summary: None,
        });
    }
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::Config("missing --config <PATH>".into()))?;
    let overrides = Overrides {
        mock: cli.mock,
        no_correct: cli.no_correct,
        seed: cli.seed,
    };
    let session = Session::load(config, &overrides)?;
    let select = |part: PartArg| {
        session.select(&Selection {
            part: part.into(),
            limit: cli.limit,
        })
    };
    let summary = |s: String| Output {
        stdout: Vec::new(),
        summary: Some(s),
    };

    Ok(match &cli.command {
        Command::Report { .. } => unreachable!(),
        Command::Ingest { lenient, output } => {
            let (n, skipped) = session.ingest(*lenient, output.as_deref())?;
            summary(format!("ingest: {n} document(s), {skipped} skipped"))
        }
        Command::Split { output } => {
            let docs = session.read_corpus()?;
            let split = session.split(&docs)?;
            let path = session.write_split(&split, output.as_deref())?;
            summary(format!(
                "split: train {}, dev {}, test {} -> {}",
                split.train.len(),
                split.dev.len(),
                split.test.len(),
                path.display()
            ))
        }
        Command::Optimize => {
            let (_, trace) = session.optimize()?;
            Output {
                stdout: trace.to_json(),
                summary: Some(format!(
                    "optimize: best {} (dev soft F1 {:.4}), {} of {} calls used",
                    trace.best_id, trace.best_score, trace.calls_used, trace.call_budget
                )),
            }
        }
        Command::Extract { part } => {
            let n = session.extract(&select(*part)?)?;
            summary(format!("extract: {n} document(s) processed"))
        }
        Command::Correct { part } => {
            let n = session.correct(&select(*part)?)?;
            summary(format!("correct: {n} document(s) processed"))
        }
        Command::Evaluate { part } => {
            let report = session.evaluate(&select(*part)?)?;
            Output {
                stdout: render(&report, cli.format),
                summary: Some(format!("evaluate: {} document(s) scored", report.documents.len())),
            }
        }
        Command::Export {
            graph_format,
            output,
            part,
        } => {
            let format: ExportFormat = graph_format.parse().map_err(|e| PipelineError::Config(format!("{e}")))?;
            let bytes = session.export(&select(*part)?, format)?;
            match output {
                Some(path) => {
                    write_file(path, &bytes)?;
                    summary(format!("export: {}", path.display()))
                }
                None => Output {
                    stdout: bytes,
                    summary: None,
                },
            }
        }
        Command::Run { part } => {
            let run = session.run(&select(*part)?)?;
            Output {
                stdout: render(&run.report, cli.format),
                summary: Some(format!(
                    "run: {} document(s), {} processed, {} resumed",
                    run.selected, run.processed, run.resumed
                )),
            }
        }
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(out) => {
            if let Some(s) = out.summary {
                eprintln!("{s}");
            }
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(&out.stdout).and_then(|_| stdout.flush()) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: cannot write output: {e}");
                    1
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 1 {
                eprintln!("usage: llhkg --config <PATH> <COMMAND> (see --help)");
            }
            e.exit_code()
        }
    }
}
