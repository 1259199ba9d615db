use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vlm_uq::client::ClientError;
use vlm_uq::corpus::{
    build_cifar_vs_not, build_corruption_grid, build_ecg_corpus, build_galaxy_corpus, ClassMap, CorpusError,
    CorruptionKind, DistFamily, EcgAnomalySpec, SeverityTable,
};
use vlm_uq::mockserver::{serve, MockError, MockScript};
use vlm_uq::prompts::{ImageRef, MessageLayout, PromptError};
use vlm_uq::report::EvalReport;
use vlm_uq::runner::{run_experiment, score_dir, RunConfig, RunOptions, RunnerError, REPORT_DIR};
use vlm_uq::{CatalogId, Manifest, PromptCatalog, Strategy};

#[derive(Parser)]
#[command(name = "vlm-uq", version, about = "Measure how vision-language models abstain on anomalous and ambiguous images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an evaluation corpus (images plus manifest).
    #[command(subcommand)]
    BuildCorpus(Corpus),
    /// Run an experiment described by a TOML config.
    Run(RunArgs),
    /// Score a run directory and write tables and plots.
    #[command(visible_alias = "score")]
    Report(ReportArgs),
    /// Serve the scripted OpenAI-compatible mock endpoint.
    MockServer(MockArgs),
    /// List or render prompt templates.
    #[command(subcommand)]
    Prompts(PromptsCmd),
}

#[derive(Args)]
struct CommonCorpus {
    /// Output directory for images and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Corpus {
    /// In-label-space images versus unmapped ImageNet classes.
    CifarVsNot {
        /// ImageNet tree laid out as `<class index>/<image>`.
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = 1800)]
        n_in: usize,
        #[arg(long, default_value_t = 1200)]
        n_anom: usize,
        /// JSON object mapping category names to ImageNet indices.
        #[arg(long)]
        class_map: Option<PathBuf>,
        #[command(flatten)]
        common: CommonCorpus,
    },
    /// Rendered ECG images plus synthetic random polylines.
    Ecg {
        #[arg(long)]
        normal: PathBuf,
        #[arg(long)]
        abnormal: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_each: usize,
        /// Fix the random-series family for both axes.
        #[arg(long)]
        family: Option<DistFamily>,
        #[arg(long)]
        line_width: Option<f64>,
        #[command(flatten)]
        common: CommonCorpus,
    },
    /// Clean images and their corrupted copies at each severity.
    ImagenetC {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Corruption kinds (defaults to all).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<CorruptionKind>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3, 4, 5])]
        severities: Vec<u8>,
        #[arg(long)]
        class_map: Option<PathBuf>,
        /// JSON severity table overriding the built-in parameters.
        #[arg(long)]
        severity_table: Option<PathBuf>,
        #[command(flatten)]
        common: CommonCorpus,
    },
    /// Galaxy images binned by annotator agreement.
    Galaxy {
        /// CSV with columns id, leaf_prob, label.
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[command(flatten)]
        common: CommonCorpus,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Serve answers from an in-process mock instead of the configured endpoint.
    #[arg(long)]
    mock: bool,
    /// Mock script used with `--mock` (defaults to an oracle).
    #[arg(long, requires = "mock")]
    mock_script: Option<PathBuf>,
    /// Continue an interrupted run in the same output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing run.json and records.jsonl.
    #[arg(long, required_unless_present = "config")]
    run_dir: Option<PathBuf>,
    /// Manifest used by the run (required with `--run-dir`).
    #[arg(long, requires = "run_dir")]
    manifest: Option<PathBuf>,
    /// Take run directory and manifest from a run config instead.
    #[arg(long, conflicts_with = "run_dir")]
    config: Option<PathBuf>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct MockArgs {
    /// JSON script; an oracle is used when omitted.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Manifests whose images the mock should recognise.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8089")]
    bind: String,
}

#[derive(Subcommand)]
enum PromptsCmd {
    /// List catalog entries.
    List {
        /// Template directory replacing the builtin catalog.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Print the instruction text sent for one catalog entry.
    Show {
        catalog: CatalogId,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        no_rejection: bool,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// Process exit codes.
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_BUDGET: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<RunnerError>() {
            return match e {
                RunnerError::BudgetRefused(_) | RunnerError::Client(ClientError::BudgetExceeded(_)) => EXIT_BUDGET,
                RunnerError::Config(_)
                | RunnerError::DigestMismatch { .. }
                | RunnerError::RunExists(_)
                | RunnerError::Prompt(_)
                | RunnerError::Corpus(_) => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            };
        }
        if let Some(e) = cause.downcast_ref::<ClientError>() {
            return if matches!(e, ClientError::BudgetExceeded(_)) { EXIT_BUDGET } else { EXIT_RUNTIME };
        }
        if cause.downcast_ref::<CorpusError>().is_some() || cause.downcast_ref::<PromptError>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<MockError>() {
            return if matches!(e, MockError::Io { .. }) { EXIT_RUNTIME } else { EXIT_VALIDATION };
        }
        if cause.downcast_ref::<Invalid>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

/// Marks an argument problem detected after parsing.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn read_severity_table(path: &Path) -> Result<SeverityTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
}

fn class_map(path: Option<&Path>) -> Result<ClassMap> {
    Ok(match path {
        Some(p) => ClassMap::load(p)?,
        None => ClassMap::imagenet_default(),
    })
}

fn summarize(m: &Manifest) {
    println!("wrote {} entries to {}", m.entries.len(), m.manifest_path().display());
    for (role, n) in &m.meta.counts {
        println!("  {role:<16} {n}");
    }
    for w in &m.meta.warnings {
        println!("  warning: {w}");
    }
}

fn build_corpus(cmd: Corpus) -> Result<()> {
    let m = match cmd {
        Corpus::CifarVsNot { source, n_in, n_anom, class_map: map, common } => {
            build_cifar_vs_not(&source, &common.out, &class_map(map.as_deref())?, n_in, n_anom, common.seed)?
        }
        Corpus::Ecg { normal, abnormal, n_each, family, line_width, common } => {
            let mut spec = EcgAnomalySpec { dist_family: family, ..EcgAnomalySpec::default() };
            if let Some(w) = line_width {
                spec.line_width_px = w;
            }
            build_ecg_corpus(&normal, &abnormal, &common.out, n_each, common.seed, &spec)?
        }
        Corpus::ImagenetC { source, n, kinds, severities, class_map: map, severity_table, common } => {
            let kinds = if kinds.is_empty() { CorruptionKind::ALL.to_vec() } else { kinds };
            let table = match severity_table {
                Some(p) => read_severity_table(&p)?,
                None => SeverityTable::default(),
            };
            build_corruption_grid(&source, &common.out, &class_map(map.as_deref())?, n, &kinds, &severities, common.seed, &table)?
        }
        Corpus::Galaxy { metadata, images, n, common } => {
            build_galaxy_corpus(&metadata, &images, &common.out, n, common.seed)?
        }
    };
    summarize(&m);
    Ok(())
}

fn load_script(path: Option<&Path>) -> Result<MockScript> {
    Ok(match path {
        Some(p) => MockScript::load(p)?,
        None => MockScript::oracle(),
    })
}

async fn run(args: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.validate()?;
    let opts = RunOptions { resume: args.resume, plots: !args.no_plots, ..RunOptions::default() };
    let mock = if args.mock {
        let manifest = Manifest::load_unverified(&cfg.manifest)?;
        let handle = serve(load_script(args.mock_script.as_deref())?, &[manifest], "127.0.0.1:0").await?;
        cfg.client.endpoint.base_url = handle.base_url();
        cfg.client.endpoint.is_mock = true;
        eprintln!("mock endpoint at {}", handle.base_url());
        Some(handle)
    } else {
        None
    };
    let result = run_experiment(&cfg, &opts).await;
    if let Some(h) = mock {
        h.shutdown().await;
    }
    let out = result?;
    println!(
        "planned {} queries: {} resumed, {} written, {} failed",
        out.planned, out.skipped, out.written, out.failures
    );
    println!(
        "network calls {}, cache hits {}, retries {}, tokens {} in / {} out",
        out.client.network_calls,
        out.client.cache_hits,
        out.client.retries,
        out.client.prompt_tokens,
        out.client.completion_tokens
    );
    if let Some(report) = &out.report {
        print_report(report);
        println!("reports in {}", cfg.output_dir.join(REPORT_DIR).display());
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn print_report(r: &EvalReport) {
    println!("task {} ({} records)", r.task, r.n_records);
    if !r.anomaly.is_empty() {
        println!("{:<24} {:<16} {:<9} {:>7} {:>7} {:>7} {:>9}", "model", "catalog", "strategy", "P", "R", "F1", "malformed");
        for row in &r.anomaly {
            let v = &row.variant;
            println!(
                "{:<24} {:<16} {:<9} {:>7} {:>7} {:>7} {:>9}",
                v.model_id,
                v.catalog_id.as_str(),
                v.strategy.map_or("-", |s| s.as_str()),
                fmt_opt(row.report.precision),
                fmt_opt(row.report.recall),
                fmt_opt(row.report.f1),
                row.report.malformed_count
            );
        }
    }
    for row in &r.selective {
        let v = &row.variant;
        println!(
            "{} {} rejection={} kind={}",
            v.model_id,
            v.catalog_id,
            if v.rejection_enabled { "on" } else { "off" },
            row.kind.map_or("all", |k| k.as_str())
        );
        println!("  {:>5} {:>6} {:>9} {:>9}", row.report.group_key.as_str(), "n", "accuracy", "rejected");
        for g in &row.report.groups {
            println!("  {:>5} {:>6} {:>9} {:>9}", g.key, g.n_total, fmt_opt(g.accuracy_on_classified), fmt_opt(g.rejection_rate));
        }
    }
    for d in &r.diversity {
        println!("diversity {} ({}), {} samples", d.model_id, d.embedding_model_id, d.n_samples);
        for g in &d.by_group {
            println!("  {:>5} {:>8.4}", g.key, g.mean);
        }
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let (run_dir, manifest) = match (args.config, args.run_dir) {
        (Some(c), _) => {
            let cfg = RunConfig::load(&c)?;
            (cfg.output_dir, cfg.manifest)
        }
        (None, Some(dir)) => {
            let m = args.manifest.ok_or_else(|| Invalid("--manifest is required with --run-dir".into()))?;
            (dir, m)
        }
        (None, None) => bail!(Invalid("pass --config or --run-dir".into())),
    };
    let r = score_dir(&run_dir, &manifest, !args.no_plots)?;
    print_report(&r);
    println!("reports in {}", run_dir.join(REPORT_DIR).display());
    Ok(())
}

async fn mock_server(args: MockArgs) -> Result<()> {
    let script = load_script(args.script.as_deref())?;
    let manifests = args.manifests.iter().map(|p| Manifest::load_unverified(p)).collect::<Result<Vec<_>, _>>()?;
    let handle = serve(script, &manifests, &args.bind).await?;
    println!("mock endpoint listening on {}", handle.base_url());
    tokio::signal::ctrl_c().await.context("waiting for ctrl-c")?;
    handle.shutdown().await;
    Ok(())
}

fn catalog(dir: Option<&Path>) -> Result<PromptCatalog> {
    Ok(match dir {
        Some(d) => PromptCatalog::load_dir(d)?,
        None => PromptCatalog::builtin(),
    })
}

fn prompts(cmd: PromptsCmd) -> Result<()> {
    match cmd {
        PromptsCmd::List { dir } => {
            let c = catalog(dir.as_deref())?;
            println!("fingerprint {}", c.fingerprint());
            for t in c.templates() {
                println!(
                    "{:<20} {:<14} {:<6} {}",
                    t.catalog_id.as_str(),
                    t.strategy.map_or("-", |s| s.as_str()),
                    if t.rejection_clause().is_some() { "reject" } else { "-" },
                    t.file
                );
            }
        }
        PromptsCmd::Show { catalog: id, strategy, no_rejection, dir } => {
            let c = catalog(dir.as_deref())?;
            let image = ImageRef { sample_id: "example".into(), path: PathBuf::from("example.png") };
            let p = c.render(id, strategy, !no_rejection, image, MessageLayout::default())?;
            println!("{}", p.instruction());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::BuildCorpus(c) => build_corpus(c),
        Command::Prompts(c) => prompts(c),
        Command::Report(a) => report(a),
        Command::Run(a) => runtime().and_then(|rt| rt.block_on(run(a))),
        Command::MockServer(a) => runtime().and_then(|rt| rt.block_on(mock_server(a))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting async runtime")
}
