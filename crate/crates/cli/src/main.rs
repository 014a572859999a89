use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use uqdiag_core::clock::Clock;
use uqdiag_core::gateway::{
    Backend, CachedBackend, LiveBackend, LiveConfig, LiveSearch, NoSearch, ReplayBackend,
    ScriptedBackend, SearchBackend,
};
use uqdiag_core::intervention::KnowledgeSource;
use uqdiag_core::model::InterventionKind;
use uqdiag_core::pipeline::{self, Services};
use uqdiag_core::report::{self, Table};
use uqdiag_core::store::{self, RunStore};
use uqdiag_core::{calibration, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "uqdiag",
    version,
    about = "Quantify and diagnose LLM answer uncertainty"
)]
struct Cli {
    /// TOML config file ([provider] plus run settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    run: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = BackendMode::Live)]
    backend: BackendMode,
    /// Scripted fixture (scripted mode) or recorded cache file (replay mode).
    #[arg(long, global = true)]
    fixture: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    #[arg(long, global = true)]
    bins: Option<usize>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true, value_enum)]
    knowledge_source: Option<SourceArg>,
    #[arg(long, global = true)]
    target_model: Option<String>,
    #[arg(long, global = true)]
    auxiliary_model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendMode {
    Live,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Search,
    Synthesis,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Study {
    Clarify,
    Inject,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample answers and measure their entropy.
    Quantify {
        /// Corpus in canonical JSONL (required when creating a run).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Attribute the uncertainty of flagged questions.
    Diagnose,
    /// Run the clarification or knowledge-injection study.
    Validate {
        #[arg(long, value_enum)]
        study: Study,
    },
    /// Compare confidence methods by ECE, AUROC and Brier score.
    Calibrate {
        /// CSV with question_id,method,confidence,correct (instead of a run).
        #[arg(long)]
        records: Option<PathBuf>,
        /// Also ask the target model for verbalized confidence.
        #[arg(long)]
        verbalize: bool,
    },
    /// Write report.md and refresh the study CSVs.
    Report,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct ProviderSection {
    base_url: String,
    timeout_secs: u64,
    max_retries: u32,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            timeout_secs: 120,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    #[serde(default)]
    provider: ProviderSection,
    #[serde(flatten)]
    run: RunConfig,
}

fn load_config_file(path: &Path) -> Result<ConfigFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl Cli {
    fn run_dir(&self) -> Result<&Path> {
        self.run.as_deref().context("--run <dir> is required")
    }

    /// Config file, else the run's snapshot, else defaults; flags on top.
    fn resolve(&self) -> Result<(RunConfig, ProviderSection)> {
        let (mut run, provider) = match &self.config {
            Some(p) => {
                let f = load_config_file(p)?;
                (f.run, f.provider)
            }
            None => {
                let snapshot = self
                    .run
                    .as_ref()
                    .map(|d| d.join(store::MANIFEST))
                    .filter(|m| m.exists());
                let run = match snapshot {
                    Some(m) => {
                        let manifest: store::RunManifest =
                            serde_json::from_slice(&std::fs::read(&m)?)
                                .with_context(|| format!("reading {}", m.display()))?;
                        manifest.config
                    }
                    None => RunConfig::default(),
                };
                (run, ProviderSection::default())
            }
        };
        if let Some(t) = self.tau {
            run.diagnosis.tau = t;
        }
        if let Some(n) = self.n_samples {
            run.sampling.n_samples = n;
        }
        if let Some(b) = self.bins {
            run.bins = b;
        }
        if let Some(c) = self.concurrency {
            run.concurrency = c;
        }
        if let Some(s) = self.knowledge_source {
            run.intervention.knowledge_source = match s {
                SourceArg::Search => KnowledgeSource::WebSearch,
                SourceArg::Synthesis => KnowledgeSource::PromptSynthesis,
            };
        }
        if let Some(m) = &self.target_model {
            run.sampling.target_model = m.clone();
        }
        if let Some(m) = &self.auxiliary_model {
            run.diagnosis.auxiliary_model = m.clone();
        }
        run.validate()?;
        Ok((run, provider))
    }

    fn clock(&self) -> Clock {
        match self.backend {
            BackendMode::Live => Clock::System,
            BackendMode::Replay | BackendMode::Scripted => Clock::fixed_epoch(),
        }
    }

    fn fixture(&self) -> Result<&Path> {
        self.fixture
            .as_deref()
            .context("--fixture <path> is required with --backend replay|scripted")
    }

    fn backends(
        &self,
        config: &RunConfig,
        provider: &ProviderSection,
    ) -> Result<(Box<dyn Backend>, Box<dyn SearchBackend>)> {
        Ok(match self.backend {
            BackendMode::Scripted => {
                let path = self.fixture()?;
                let b = ScriptedBackend::from_file(path)
                    .with_context(|| format!("loading fixture {}", path.display()))?;
                let search = b.search_backend();
                (Box::new(b), Box::new(search))
            }
            BackendMode::Replay => {
                let b = ReplayBackend::from_file(self.fixture()?)?;
                (Box::new(b), Box::new(NoSearch))
            }
            BackendMode::Live => {
                let mut live = LiveConfig::from_env(provider.base_url.clone())?;
                live.timeout = std::time::Duration::from_secs(provider.timeout_secs);
                live.retry.max_retries = provider.max_retries;
                let search =
                    LiveSearch::new(live.clone(), config.diagnosis.auxiliary_model.clone())?;
                (Box::new(LiveBackend::new(live)?), Box::new(search))
            }
        })
    }
}

struct Session {
    store: RunStore,
    backend: CachedBackend<Box<dyn Backend>>,
    search: Box<dyn SearchBackend>,
}

impl Session {
    /// The stores and the services needed to drive a stage, borrowed apart.
    fn split(&mut self) -> (&mut RunStore, Services<'_, Box<dyn Backend>>) {
        (
            &mut self.store,
            Services {
                backend: &self.backend,
                search: self.search.as_ref(),
            },
        )
    }

    fn provider_line(&self) -> String {
        format!(
            "provider calls: {}, cache hits: {}",
            self.backend.provider_calls(),
            self.backend.hits()
        )
    }
}

fn open_session(cli: &Cli, corpus: Option<&Path>) -> Result<Session> {
    let dir = cli.run_dir()?;
    let (config, provider) = cli.resolve()?;
    let store = match corpus {
        Some(path) => {
            let questions = store::ingest_corpus(path)?;
            RunStore::create(dir, &questions, &config, &cli.clock())?
        }
        None => {
            let store = RunStore::open(dir)?;
            store.check_config(&config)?;
            store
        }
    };
    let (inner, search) = cli.backends(store.config(), &provider)?;
    let backend = CachedBackend::open(inner, store.path(store::CACHE), cli.clock())?;
    Ok(Session {
        store,
        backend,
        search,
    })
}

fn cmd_quantify(cli: &Cli, corpus: Option<&Path>) -> Result<()> {
    let dir = cli.run_dir()?;
    if corpus.is_none() && !dir.join(store::MANIFEST).exists() {
        bail!(
            "{} is not a run yet; pass --corpus to create it",
            dir.display()
        );
    }
    let mut s = open_session(cli, corpus)?;
    let (store, services) = s.split();
    let summary = pipeline::quantify(store, &services)?;
    println!(
        "flagged {}/{} (U > {}), mean U {}",
        summary.flagged.len(),
        summary.n_questions,
        s.store.config().diagnosis.tau,
        report::fmt_unc(summary.mean_entropy)
    );
    println!(
        "sampled {} question(s); {}",
        summary.newly_sampled,
        s.provider_line()
    );
    Ok(())
}

fn cmd_diagnose(cli: &Cli) -> Result<()> {
    let mut s = open_session(cli, None)?;
    let (store, services) = s.split();
    let summary = pipeline::diagnose(store, &services)?;
    for (label, n) in &summary.histogram {
        println!("{label:<20} {n}");
    }
    println!("{} diagnosed", summary.n_diagnosed());
    for (qid, err) in &summary.failures {
        eprintln!("warning: {qid}: {err}");
    }
    println!("{}", s.provider_line());
    Ok(())
}

fn cmd_validate(cli: &Cli, study: Study) -> Result<()> {
    let kind = match study {
        Study::Clarify => InterventionKind::Clarification,
        Study::Inject => InterventionKind::KnowledgeInjection,
    };
    let mut s = open_session(cli, None)?;
    let (store, services) = s.split();
    let summary = pipeline::validate(store, &services, kind)?;
    if summary.n_eligible == 0 {
        println!("no eligible questions for this study");
    } else {
        print!("{}", summary.table.to_console());
    }
    for (qid, err) in &summary.failures {
        eprintln!("warning: {qid}: {err}");
    }
    if summary.excluded > 0 {
        println!("excluded after failed diagnosis: {}", summary.excluded);
    }
    println!("wrote {}", s.store.path(pipeline::csv_name(kind)).display());
    println!("{}", s.provider_line());
    Ok(())
}

fn print_calibration(records: &[uqdiag_core::ConfidenceRecord], bins: usize) -> Table {
    let (reports, errors) = pipeline::calibrate(records, bins);
    for (method, err) in &errors {
        eprintln!("warning: {}: {err}", method.short_name());
    }
    let table = report::calibration_table(&reports);
    print!("{}", table.to_console());
    table
}

fn cmd_calibrate(cli: &Cli, records: Option<&Path>, verbalize: bool) -> Result<()> {
    if let Some(path) = records {
        let (config, _) = cli.resolve()?;
        let recs = report::read_confidences(path)?;
        if recs.is_empty() {
            return Err(calibration::CalibrationError::EmptyRecords.into());
        }
        print_calibration(&recs, config.bins);
        return Ok(());
    }
    let mut s = open_session(cli, None)?;
    let (store, services) = s.split();
    let recs = pipeline::collect_confidences(store, &services, verbalize)?;
    if recs.is_empty() {
        bail!("no questions with a gold answer; nothing to calibrate");
    }
    s.store
        .write_artifact(store::CONFIDENCES, &report::confidences_csv(&recs))?;
    let table = print_calibration(&recs, s.store.config().bins);
    s.store
        .write_artifact(report::CALIBRATION_CSV, &table.to_csv())?;
    println!("wrote {}", s.store.path(report::CALIBRATION_CSV).display());
    Ok(())
}

fn cmd_report(cli: &Cli) -> Result<()> {
    let mut s = open_session(cli, None)?;
    let md = pipeline::report(&mut s.store)?;
    print!("{md}");
    eprintln!("wrote {}", s.store.path(report::REPORT_MD).display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Quantify { corpus } => cmd_quantify(cli, corpus.as_deref()),
        Command::Diagnose => cmd_diagnose(cli),
        Command::Validate { study } => cmd_validate(cli, *study),
        Command::Calibrate { records, verbalize } => {
            cmd_calibrate(cli, records.as_deref(), *verbalize)
        }
        Command::Report => cmd_report(cli),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
