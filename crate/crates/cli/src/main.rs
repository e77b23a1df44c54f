use anyhow::Context;
use clap::{Parser, Subcommand};
use evop_core::broker::journal::{replay, FileStore};
use evop_core::library::{ImageDescriptor, LibraryError, ModelLibrary, REGISTRY_HEADER};
use evop_core::scenario::{diff_traces, run_scenario_with_store, MainConfig, ScenarioSpec, TraceDiff};
use evop_core::textfmt::{parse_document, parse_line, FieldError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const DEFAULT_LIBRARY: &str = "evop-library.txt";

#[derive(Parser)]
#[command(
    name = "evop",
    version,
    about = "Infrastructure manager simulator for a federated private/public cloud"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run and compare scenarios.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Inspect or update the model library.
    #[command(subcommand)]
    Library(LibraryCommand),
    /// Offline tools for the sessions journal.
    #[command(subcommand)]
    Broker(BrokerCommand),
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario and print its metrics report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Report the first line at which two traces differ.
    Diff { a: PathBuf, b: PathBuf },
}

#[derive(Subcommand)]
enum LibraryCommand {
    /// List the current images.
    Ls {
        /// Library file; defaults to the main config's, then ./evop-library.txt.
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Register (or update) every image in a descriptor file.
    Register {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BrokerCommand {
    /// Replay a sessions journal without modifying it.
    Recover {
        #[arg(long)]
        cache: PathBuf,
    },
}

/// Failures, split by exit code.
enum Failure {
    /// Bad input from the user: exit 1.
    Invalid(String),
    /// Everything else: exit 2.
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

fn invalid_errors(what: &str, errs: &[FieldError]) -> Failure {
    let lines: Vec<String> = errs.iter().map(|e| format!("  {e}")).collect();
    Failure::Invalid(format!("{what}:\n{}", lines.join("\n")))
}

fn main_config() -> Result<MainConfig, Failure> {
    MainConfig::from_env().map_err(|e| Failure::Invalid(format!("EVOP_CONFIG: {e}")))
}

fn sim_run(scenario: &Path, seed: Option<u64>, trace: Option<&Path>, report: Option<&Path>) -> Result<(), Failure> {
    let cfg = main_config()?;
    let mut spec = ScenarioSpec::load(scenario, &cfg).map_err(|e| Failure::Invalid(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let store: Box<dyn evop_core::broker::journal::JournalStore> = match &cfg.journal {
        Some(p) => Box::new(FileStore::open(p, false).with_context(|| format!("opening journal {}", p.display()))?),
        None => Box::new(evop_core::broker::journal::MemoryStore::default()),
    };
    let outcome = run_scenario_with_store(&spec, store).context("running scenario")?;
    if let Some(p) = trace {
        outcome
            .trace
            .write_to(p)
            .with_context(|| format!("writing trace {}", p.display()))?;
    }
    let text = outcome.report.to_text();
    match report {
        Some(p) => std::fs::write(p, &text).with_context(|| format!("writing report {}", p.display()))?,
        None => print!("{text}"),
    }
    for v in &outcome.violations {
        eprintln!("warning: {v}");
    }
    let recon = outcome.report.reconciliation_errors();
    if !recon.is_empty() {
        return Err(Failure::Internal(anyhow::anyhow!(
            "report does not reconcile: {}",
            recon.join("; ")
        )));
    }
    Ok(())
}

fn sim_diff(a: &Path, b: &Path) -> Result<(), Failure> {
    match diff_traces(a, b).map_err(|e| Failure::Internal(e.into()))? {
        TraceDiff::Equal => {
            println!("traces are identical");
            Ok(())
        }
        TraceDiff::Diverges { line, left, right } => {
            let show = |l: Option<String>| l.unwrap_or_else(|| "<end of file>".to_owned());
            println!("first difference at line {line}");
            println!("< {}", show(left));
            println!("> {}", show(right));
            Err(Failure::Invalid(format!("traces differ at line {line}")))
        }
    }
}

fn library_path(flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    Ok(match flag {
        Some(p) => p,
        None => main_config()?.library.unwrap_or_else(|| PathBuf::from(DEFAULT_LIBRARY)),
    })
}

fn load_library(path: &Path) -> Result<ModelLibrary, Failure> {
    match ModelLibrary::load(path) {
        Ok(l) => Ok(l),
        Err(LibraryError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Ok(ModelLibrary::new()),
        Err(LibraryError::Io(e)) => Err(Failure::Internal(
            anyhow::Error::new(e).context(format!("reading {}", path.display())),
        )),
        Err(e) => Err(Failure::Invalid(format!("{}: {e}", path.display()))),
    }
}

fn library_ls(path: &Path) -> Result<(), Failure> {
    let lib = load_library(path)?;
    for img in lib.list_images() {
        let models: Vec<&str> = img.model_ids.iter().map(|m| m.as_str()).collect();
        println!(
            "{}\tv{}\t{}\tmax_sessions={}\tclass={}",
            img.image_id,
            img.version,
            models.join(","),
            img.max_sessions,
            img.model_class
        );
    }
    Ok(())
}

/// Image records from a descriptor file, with or without the library header.
fn read_descriptors(file: &Path) -> Result<Vec<ImageDescriptor>, Failure> {
    let text =
        std::fs::read_to_string(file).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", file.display())))?;
    let with_header = text.lines().find(|l| !l.trim().is_empty()).map(str::trim) == Some(REGISTRY_HEADER);
    let records = if with_header {
        parse_document(&text, REGISTRY_HEADER).map_err(|e| invalid_errors("descriptor file", &e))?
    } else {
        let mut out = Vec::new();
        let mut errs = Vec::new();
        for (i, l) in text.lines().enumerate() {
            match parse_line(i + 1, l) {
                Ok(Some(r)) => out.push(r),
                Ok(None) => {}
                Err(e) => errs.push(e),
            }
        }
        if !errs.is_empty() {
            return Err(invalid_errors("descriptor file", &errs));
        }
        out
    };
    let mut descs = Vec::new();
    let mut errs = Vec::new();
    for rec in &records {
        if rec.keyword != "image" {
            errs.push(rec.error(format!("unexpected `{}` record", rec.keyword)));
            continue;
        }
        match ImageDescriptor::from_record(rec) {
            Ok(d) => descs.push(d),
            Err(e) => errs.extend(e),
        }
    }
    if !errs.is_empty() {
        return Err(invalid_errors("descriptor file", &errs));
    }
    if descs.is_empty() {
        return Err(Failure::Invalid(format!("{} holds no image records", file.display())));
    }
    Ok(descs)
}

fn library_register(file: &Path, path: &Path) -> Result<(), Failure> {
    let descs = read_descriptors(file)?;
    let mut lib = load_library(path)?;
    let mut assigned = Vec::new();
    for d in descs {
        let (id, version) = lib.register_image(d).map_err(|e| Failure::Invalid(e.to_string()))?;
        assigned.push((id, version));
    }
    lib.save(path)
        .map_err(|e| Failure::Internal(anyhow::Error::new(e).context(format!("saving {}", path.display()))))?;
    for (id, v) in assigned {
        println!("registered {id} v{v}");
    }
    Ok(())
}

fn broker_recover(cache: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(cache)
        .with_context(|| format!("reading sessions journal {}", cache.display()))
        .map_err(Failure::Internal)?;
    let rep = replay(&bytes);
    println!("records {}", rep.records);
    println!("next_session {}", rep.next_session);
    match &rep.truncation {
        Some(t) => println!("truncation {t}"),
        None => println!("truncation none"),
    }
    let open: Vec<_> = rep
        .sessions
        .values()
        .filter(|s| s.state != evop_core::broker::SessionState::Closed)
        .collect();
    println!("open_sessions {}", open.len());
    for s in open {
        println!(
            "{}\t{}\t{}\tepoch={}\tclient={}",
            s.session_id, s.model_id, s.instance_id, s.epoch, s.client
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sim(SimCommand::Run {
            scenario,
            seed,
            trace,
            report,
        }) => sim_run(&scenario, seed, trace.as_deref(), report.as_deref()),
        Command::Sim(SimCommand::Diff { a, b }) => sim_diff(&a, &b),
        Command::Library(LibraryCommand::Ls { library }) => library_ls(&library_path(library)?),
        Command::Library(LibraryCommand::Register { file, library }) => {
            library_register(&file, &library_path(library)?)
        }
        Command::Broker(BrokerCommand::Recover { cache }) => broker_recover(&cache),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}
