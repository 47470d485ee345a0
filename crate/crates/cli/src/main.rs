//! `sceneaug`: generate augmentation data, build the training set, verify it
//! and score model responses.
//!
//! Exit codes: 0 success, 1 validation failure, 2 backend failure, 3 usage
//! error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sceneaug::backends::{AuditLog, BackendError, Backends, BackendsConfig, MOCK_CONFIG};
use sceneaug::catalog::{load_action_catalog, load_location_catalog, CatalogError};
use sceneaug::dataset::{
    assemble, merge_datasets, plan_requests, run_action_route, run_place_route, verify_dataset,
    write_dataset, write_run_logs, Assembled, BuildMeta, DatasetError, RouteOptions, RouteOutput,
    RunContext,
};
use sceneaug::eval::{
    evaluate_all, read_predictions, read_samples, render_buckets, render_table, write_reports,
    BootstrapConfig, EvalError, EvalOptions,
};
use sceneaug::exec::Execution;
use sceneaug::prompt::{PromptError, PromptTemplates};
use sceneaug::{ActionCatalog, LocationCatalog, PromptVariant, Route};

#[derive(Parser, Debug)]
#[command(name = "sceneaug", version, about = "Scenario dialogue and image augmentation for robot action prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate dialogues and images and build train.json.
    Augment(AugmentArgs),
    /// Match model responses to actions and report accuracy.
    Evaluate(EvaluateArgs),
    /// Check a built dataset against its manifest.
    Verify(VerifyArgs),
    /// Inspect or export the bundled catalogs, templates and mock config.
    Catalogs {
        #[command(subcommand)]
        command: CatalogsCommand,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum RouteArg {
    Place,
    Action,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantsArg {
    Default,
    All,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Backend configuration (TOML). Defaults to the bundled mock backends.
    #[arg(long)]
    backends: Option<PathBuf>,
    /// Action catalog, one action per line.
    #[arg(long)]
    actions: Option<PathBuf>,
    /// Print the planned request counts and exit without calling any backend.
    #[arg(long)]
    dry_run: bool,
    /// Run data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(value_enum)]
    route: RouteArg,
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
    /// Location catalog, one location per line.
    #[arg(long)]
    locations: Option<PathBuf>,
    /// Directory holding prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Place-route prompt variants.
    #[arg(long, value_enum, default_value_t = VariantsArg::Default)]
    variants: VariantsArg,
    #[arg(long, default_value_t = 10)]
    n_per_seed: usize,
    /// Re-prompt when a response yields too few dialogues.
    #[arg(long)]
    refill: bool,
    #[arg(long, default_value_t = 3)]
    max_refill_rounds: u32,
    /// Drop dialogues whose request is phrased as a question.
    #[arg(long)]
    strict: bool,
    /// Render action-route images with the text-to-image backend.
    #[arg(long)]
    ablate_subject_conditioning: bool,
    /// Locations or actions processed at once. Defaults to the backend
    /// config's cap.
    #[arg(long)]
    max_concurrent: Option<usize>,
    /// Reference image for subject-conditioned generation (action route).
    #[arg(long)]
    reference_image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Samples file: {id, utterance, description?, gold_action_index} per line.
    #[arg(long)]
    samples: PathBuf,
    /// Predictions file: {sample_id, setting, response_text, system?, group?} per line.
    #[arg(long)]
    predictions: PathBuf,
    /// Directory for reports.json and table.txt.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
    /// System name for predictions that do not carry one.
    #[arg(long)]
    system: Option<String>,
    /// System that others in its group are tested against. Repeatable.
    #[arg(long)]
    baseline: Vec<String>,
    /// Append per-report bucket analysis.
    #[arg(long)]
    buckets: bool,
    /// Encoder backend id. Repeatable; defaults to every configured encoder.
    #[arg(long)]
    encoder: Vec<String>,
    /// Where catalog embeddings are cached.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    bootstrap_seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Dataset root containing manifest.json.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Subcommand, Debug)]
enum CatalogsCommand {
    /// Print the action and location catalogs.
    Show {
        #[arg(long)]
        actions: Option<PathBuf>,
        #[arg(long)]
        locations: Option<PathBuf>,
    },
    /// Write the bundled catalogs, templates and mock backend config.
    WriteDefaults {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Backend(String),
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Backend(_) => 2,
            Failure::Usage(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Backend(m) | Failure::Usage(m) => f.write_str(m),
        }
    }
}

impl From<CatalogError> for Failure {
    fn from(e: CatalogError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<PromptError> for Failure {
    fn from(e: PromptError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) | BackendError::Io { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Backend(e.to_string()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Backend(b) => b.into(),
            DatasetError::Options(m) => Failure::Usage(m),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => b.into(),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Augment(args) => augment(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Verify(args) => verify(&args.dataset),
        Command::Catalogs { command } => catalogs(command),
    }
}

fn backends_config(path: Option<&Path>) -> Result<BackendsConfig, Failure> {
    Ok(match path {
        Some(p) => BackendsConfig::load(p)?,
        None => {
            log::info!("no --backends given, using the bundled mock backends");
            BackendsConfig::mock()
        }
    })
}

fn action_catalog(path: Option<&Path>) -> Result<ActionCatalog, Failure> {
    Ok(match path {
        Some(p) => load_action_catalog(p)?,
        None => ActionCatalog::bundled(),
    })
}

fn location_catalog(path: Option<&Path>) -> Result<LocationCatalog, Failure> {
    Ok(match path {
        Some(p) => load_location_catalog(p)?,
        None => LocationCatalog::bundled(),
    })
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn augment(args: AugmentArgs) -> Result<(), Failure> {
    let config = backends_config(args.common.backends.as_deref())?;
    let actions = action_catalog(args.common.actions.as_deref())?;
    let locations = location_catalog(args.locations.as_deref())?;
    let templates = match &args.templates {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::bundled(),
    };
    let wants_place = args.route != RouteArg::Action;
    let wants_action = args.route != RouteArg::Place;
    if wants_action && args.reference_image.is_none() {
        return Err(Failure::Usage("the action route needs --reference-image".into()));
    }
    if args.n_per_seed == 0 {
        return Err(Failure::Usage("--n-per-seed must be at least 1".into()));
    }
    let opts = RouteOptions {
        n_per_seed: args.n_per_seed,
        variants: match args.variants {
            VariantsArg::Default => vec![PromptVariant::default()],
            VariantsArg::All => PromptVariant::ALL.to_vec(),
        },
        seed: args.seed,
        refill: args.refill,
        max_refill_rounds: args.max_refill_rounds,
        strict: args.strict,
        ablate_subject_conditioning: args.ablate_subject_conditioning,
        max_concurrent: args.max_concurrent.unwrap_or(config.retry.max_concurrent).max(1),
        execution: execution(args.common.sequential),
    };

    if args.common.dry_run {
        let mut plans = Vec::new();
        if wants_place {
            plans.push(("place", plan_requests(Route::Place, locations.len(), &opts)));
        }
        if wants_action {
            plans.push(("action", plan_requests(Route::Action, actions.len(), &opts)));
        }
        let mut total = 0;
        for (name, p) in &plans {
            println!(
                "{name}: {} chat, {} text-to-image, {} subject-conditioned requests",
                p.chat, p.text_image, p.subject_image
            );
            if opts.refill {
                println!("{name}: up to {} chat requests with refill", p.max_chat);
            }
            total += p.total();
        }
        println!("planned requests: {total}");
        return Ok(());
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Validation(format!("{}: {e}", args.out.display())))?;
    let audit_path = args.out.join("audit.jsonl");
    if audit_path.exists() {
        std::fs::remove_file(&audit_path)
            .map_err(|e| Failure::Validation(format!("{}: {e}", audit_path.display())))?;
    }
    let backends: Backends = config
        .builder()?
        .audit(Arc::new(AuditLog::to_file(&audit_path)?))
        .build();
    let ctx = RunContext {
        backends: &backends,
        templates: &templates,
        out_dir: &args.out,
    };
    let meta = BuildMeta {
        seed: Some(args.seed),
        backend_config_digest: backends.config_digest().to_string(),
    };

    let mut outputs: Vec<RouteOutput> = Vec::new();
    if wants_place {
        outputs.push(run_place_route(&ctx, &locations, &opts)?);
    }
    if wants_action {
        let reference = args.reference_image.as_deref().expect("checked above");
        outputs.push(run_action_route(&ctx, &actions, reference, &opts)?);
    }
    write_run_logs(&args.out, &outputs.iter().collect::<Vec<_>>())?;
    for o in &outputs {
        for w in &o.warnings {
            log::warn!("{}: {}", w.batch, w.message);
        }
        for f in &o.failures {
            log::error!("{} [{}]: {}", f.batch, f.stage, f.message);
        }
    }
    let backend_failed = outputs.iter().any(RouteOutput::has_backend_failures);

    let mut parts: Vec<Assembled> = Vec::new();
    for o in &outputs {
        match assemble(&o.pairs, &args.out, &meta) {
            Ok(a) => parts.push(a),
            Err(DatasetError::Empty) if backend_failed => {}
            Err(e) => return Err(e.into()),
        }
    }
    if parts.is_empty() {
        return Err(Failure::Backend("every generation request failed; see failures.jsonl".into()));
    }
    let manifests: Vec<_> = parts.iter().map(|a| a.manifest.clone()).collect();
    let assembled = Assembled {
        manifest: merge_datasets(&manifests)?,
        dedup: parts.into_iter().flat_map(|a| a.dedup).collect(),
    };
    write_dataset(&assembled, &args.out)?;

    let m = &assembled.manifest;
    println!(
        "place {}  action {}  total {}",
        m.counts.place, m.counts.action, m.counts.total
    );
    for (k, v) in &m.counts.by_variant {
        println!("  {k}: {v}");
    }
    if !assembled.dedup.is_empty() {
        println!("deduplicated {} record(s)", assembled.dedup.len());
    }
    println!("manifest digest {}", m.digest);
    let failures: usize = outputs.iter().map(|o| o.failures.len()).sum();
    if failures > 0 {
        println!("{failures} item(s) dropped; see failures.jsonl");
    }
    if backend_failed {
        return Err(Failure::Backend(
            "some backend requests failed; partial dataset written, see failures.jsonl".into(),
        ));
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let config = backends_config(args.common.backends.as_deref())?;
    let catalog = action_catalog(args.common.actions.as_deref())?;
    let samples = read_samples(&args.samples)?;
    let predictions = read_predictions(&args.predictions, args.system.as_deref())?;
    let encoders: Vec<String> = if args.encoder.is_empty() {
        config
            .ids_of(sceneaug::backends::BackendKind::Embed)
            .into_iter()
            .map(str::to_string)
            .collect()
    } else {
        args.encoder.clone()
    };
    if encoders.is_empty() {
        return Err(Failure::Usage("no encoder configured; add an embed backend or pass --encoder".into()));
    }
    if args.batch_size == 0 || args.resamples == 0 || !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure::Usage("--batch-size and --resamples must be positive, --alpha in (0, 1)".into()));
    }
    if args.common.dry_run {
        let batches = predictions.len().div_ceil(args.batch_size);
        let per_encoder = batches + 1;
        println!(
            "planned embedding requests: {} ({} encoder(s) x ({batches} response batches + 1 catalog))",
            per_encoder * encoders.len(),
            encoders.len()
        );
        return Ok(());
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Validation(format!("{}: {e}", args.out.display())))?;
    let audit_path = args.out.join("audit.jsonl");
    if audit_path.exists() {
        let _ = std::fs::remove_file(&audit_path);
    }
    let backends = config
        .builder()?
        .audit(Arc::new(AuditLog::to_file(&audit_path)?))
        .build();
    let exec = execution(args.common.sequential);
    let opts = EvalOptions {
        baselines: args.baseline.clone(),
        bootstrap: BootstrapConfig {
            resamples: args.resamples,
            seed: args.bootstrap_seed,
            alpha: args.alpha,
            execution: exec,
        },
        buckets: args.buckets,
        batch_size: args.batch_size,
        execution: exec,
    };
    let reports = evaluate_all(
        &samples,
        &predictions,
        &catalog,
        &backends,
        &encoders,
        args.cache_dir.as_deref(),
        &opts,
    )?;
    let mut text = render_table(&reports);
    if args.buckets {
        for r in &reports {
            text.push('\n');
            text.push_str(&render_buckets(r));
        }
    }
    print!("{text}");
    write_reports(args.out.join("reports.json"), &reports)?;
    let table_path = args.out.join("table.txt");
    std::fs::write(&table_path, &text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", table_path.display())))?;
    Ok(())
}

fn verify(dir: &Path) -> Result<(), Failure> {
    let report = verify_dataset(dir)?;
    if report.is_clean() {
        println!("ok: {} record(s)", report.records);
        return Ok(());
    }
    for p in &report.problems {
        println!("{p}");
    }
    Err(Failure::Validation(format!(
        "{} problem(s) in {}",
        report.problems.len(),
        dir.display()
    )))
}

fn catalogs(cmd: CatalogsCommand) -> Result<(), Failure> {
    match cmd {
        CatalogsCommand::Show { actions, locations } => {
            let actions = action_catalog(actions.as_deref())?;
            let locations = location_catalog(locations.as_deref())?;
            println!("actions ({}), digest {}", actions.len(), actions.digest());
            for a in actions.actions() {
                println!("  {:>2}  {}", a.index, a.text);
            }
            println!("locations ({})", locations.len());
            for l in locations.locations() {
                println!("  {l}");
            }
            Ok(())
        }
        CatalogsCommand::WriteDefaults { out } => {
            let io = |p: &Path, e: std::io::Error| Failure::Validation(format!("{}: {e}", p.display()));
            std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
            let p = out.join("actions.txt");
            ActionCatalog::bundled().write_to(&p).map_err(|e| io(&p, e))?;
            let p = out.join("locations.txt");
            LocationCatalog::bundled().write_to(&p).map_err(|e| io(&p, e))?;
            let p = out.join("templates");
            PromptTemplates::bundled().write_dir(&p).map_err(|e| io(&p, e))?;
            let p = out.join("backends.toml");
            std::fs::write(&p, MOCK_CONFIG).map_err(|e| io(&p, e))?;
            println!("wrote defaults to {}", out.display());
            Ok(())
        }
    }
}
