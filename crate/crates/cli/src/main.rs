use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use layercraft_core::backend::BackendError;
use layercraft_core::coordinator::CoordinatorConfig;
use layercraft_core::layout::serialize_plan;
use layercraft_core::planner::{CompletionRequest, PlannerBackend};
use layercraft_core::session::{
    BlobStore, EditRequest, SessionSettings, SessionState, SessionStatus, UserPrompt,
};
use layercraft_service::config::{ConfigError, ImageSpec, Layer, PlannerSpec, Settings};
use layercraft_service::{FileStore, Service, ServiceError, SessionStore, StoreError};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "layercraft",
    version,
    about = "Plan and render layered scenes one object at a time"
)]
struct Cli {
    /// Session store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// TOML config file (also LAYERCRAFT_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a session and run it through planning.
    Plan(PlanArgs),
    /// Advance a session.
    Run {
        #[arg(long)]
        session: String,
        /// Keep going until the session rests or completes; one step otherwise.
        #[arg(long, value_enum)]
        until: Option<Until>,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Submit an edit request document. String values of the form
    /// `file:PATH` are uploaded and replaced by their blob reference.
    Edit {
        #[arg(long)]
        session: String,
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Write stage images, plans, reasoning and a manifest.
    Export {
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the session document.
    Show {
        #[arg(long)]
        session: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[command(flatten)]
        backends: BackendArgs,
    },
}

#[derive(Args, Default, Clone)]
struct BackendArgs {
    /// `replay:FILE` or `remote:URL`.
    #[arg(long)]
    planner: Option<String>,
    /// `mock` or `remote:URL`.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    prompt: String,
    /// Reference photo; repeatable.
    #[arg(long)]
    image: Vec<PathBuf>,
    /// Canvas as WxH.
    #[arg(long)]
    canvas: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pause for edits after each pipeline run.
    #[arg(long)]
    interactive: bool,
    #[command(flatten)]
    backends: BackendArgs,
    /// Directory for the plan and session documents.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Until {
    /// Stop when the session waits for the user, completes or fails.
    Rest,
    /// Like `rest`, then close an interactive session.
    Complete,
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Service(ServiceError),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Input(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => write!(f, "config: {e}"),
            Self::Service(e) => write!(f, "[{}] {e}", e.code()),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Input(msg) => f.write_str(msg),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        Self::Service(e)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::Service(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Stands in when no planner is configured; fails only if it is called.
struct NoPlanner;

impl PlannerBackend for NoPlanner {
    fn complete(&self, _: &CompletionRequest) -> Result<String, BackendError> {
        Err(BackendError::InvalidRequest(
            "no planner configured; pass --planner or set LAYERCRAFT_PLANNER".into(),
        ))
    }
}

const BACKENDS_META: &str = "backends";

struct Context {
    settings: Settings,
    store: Arc<dyn SessionStore>,
}

impl Context {
    fn load(cli: &Cli, flags: Layer) -> Result<Self> {
        let env: HashMap<String, String> = std::env::vars().collect();
        let config_path = cli
            .config
            .clone()
            .or_else(|| env.get("LAYERCRAFT_CONFIG").map(PathBuf::from));
        let file = match &config_path {
            Some(path) => Layer::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)?,
            None => Layer::default(),
        };
        let settings = Settings::resolve(flags, Layer::from_env(env)?, file)?;
        let store: Arc<dyn SessionStore> = Arc::new(FileStore::open(&settings.store)?);
        Ok(Self { settings, store })
    }

    /// Backends for a session: flags, then the choice recorded when the
    /// session was planned, then settings.
    fn service(&self, session: Option<&str>, flags: &BackendArgs) -> Result<Service> {
        let recorded = match session {
            Some(id) => self
                .store
                .get_meta(id, BACKENDS_META)?
                .unwrap_or(Value::Null),
            None => Value::Null,
        };
        let pick = |flag: &Option<String>, key: &str| {
            flag.clone()
                .or_else(|| recorded[key].as_str().map(String::from))
        };
        let planner = match pick(&flags.planner, "planner") {
            Some(spec) => Some(spec.parse::<PlannerSpec>().map_err(CliError::Input)?),
            None => self.settings.planner.clone(),
        };
        let images = match pick(&flags.backend, "backend") {
            Some(spec) => spec.parse::<ImageSpec>().map_err(CliError::Input)?,
            None => self.settings.backend.clone(),
        };
        let planner: Arc<dyn PlannerBackend> = match &planner {
            Some(spec) => spec.build().map_err(|e| {
                CliError::Input(format!("planner {}: {e}", String::from(spec.clone())))
            })?,
            None => Arc::new(NoPlanner),
        };
        Ok(Service::new(
            self.store.clone(),
            planner,
            images.build(),
            CoordinatorConfig::default(),
        ))
    }
}

fn write_json(path: &Path, value: &SessionState) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn describe(state: &SessionState) -> String {
    format!(
        "{} {} stages={}",
        state.id,
        state.status,
        state.stages.len()
    )
}

fn plan(ctx: &Context, args: &PlanArgs) -> Result<()> {
    let service = ctx.service(None, &args.backends)?;
    let mut prompt = UserPrompt::new(args.prompt.clone());
    for path in &args.image {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        prompt = prompt.with_attachment(ctx.store.put(&bytes).map_err(ServiceError::from)?);
    }
    let settings = SessionSettings {
        canvas: ctx.settings.canvas,
        interactive: ctx.settings.interactive,
        base_seed: ctx.settings.seed,
    };
    let state = service.create_session(prompt, settings)?;
    let id = state.id.clone();
    let planner = match args
        .backends
        .planner
        .clone()
        .map(|p| p.parse::<PlannerSpec>())
    {
        Some(spec) => Some(spec.map_err(CliError::Input)?),
        None => ctx.settings.planner.clone(),
    };
    // Later commands may run from another directory.
    let planner = planner.map(|spec| match spec {
        PlannerSpec::Replay(path) => {
            PlannerSpec::Replay(std::path::absolute(&path).unwrap_or(path))
        }
        remote => remote,
    });
    let planner = planner.map(String::from);
    let backend = args
        .backends
        .backend
        .clone()
        .unwrap_or_else(|| ctx.settings.backend.clone().into());
    ctx.store.put_meta(
        &id,
        BACKENDS_META,
        &json!({"planner": planner, "backend": backend}),
    )?;
    println!("{id}");

    let mut outcome = Ok(state);
    while matches!(&outcome, Ok(s) if s.status == SessionStatus::Planning) {
        outcome = service.advance(&id);
    }
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let state = service.get(&id)?;
    write_json(&args.out.join("session.json"), &state)?;
    if let Some(plan) = &state.plan {
        let path = args.out.join("plan.json");
        std::fs::write(&path, serialize_plan(plan)).map_err(io_err(&path))?;
    }
    let state = outcome?;
    eprintln!("{}", describe(&state));
    Ok(())
}

fn run(ctx: &Context, id: &str, until: Option<Until>, backends: &BackendArgs) -> Result<()> {
    let service = ctx.service(Some(id), backends)?;
    let mut state = match until {
        None => service.advance(id)?,
        Some(_) => service.run_until_rest(id)?,
    };
    if matches!(until, Some(Until::Complete)) && state.status == SessionStatus::AwaitingUser {
        state = service.finish(id)?;
    }
    println!("{}", describe(&state));
    Ok(())
}

/// Uploads `file:PATH` strings (relative to `base`) and swaps in blob refs.
fn upload_files(value: &mut Value, base: &Path, blobs: &dyn BlobStore) -> Result<()> {
    match value {
        Value::String(s) if s.starts_with("file:") => {
            let path = base.join(&s["file:".len()..]);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            *s = blobs.put(&bytes).map_err(ServiceError::from)?;
        }
        Value::Array(items) => {
            for v in items {
                upload_files(v, base, blobs)?;
            }
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                upload_files(v, base, blobs)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn edit(ctx: &Context, id: &str, spec: &Path, backends: &BackendArgs) -> Result<()> {
    let service = ctx.service(Some(id), backends)?;
    let text = std::fs::read_to_string(spec).map_err(io_err(spec))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", spec.display())))?;
    upload_files(
        &mut value,
        spec.parent().unwrap_or(Path::new(".")),
        &*ctx.store,
    )?;
    let request: EditRequest = serde_json::from_value(value)
        .map_err(|e| CliError::Input(format!("{}: {e}", spec.display())))?;
    let state = service.submit_edit(id, request)?;
    println!("{}", describe(&state));
    Ok(())
}

fn export(ctx: &Context, id: &str, out: &Path) -> Result<()> {
    let manifest = ctx
        .service(Some(id), &BackendArgs::default())?
        .export_artifacts(id, out)?;
    for file in &manifest.files {
        println!("{}  {}", file.sha256, file.path);
    }
    Ok(())
}

fn serve(ctx: &Context, backends: &BackendArgs) -> Result<()> {
    let service = Arc::new(ctx.service(None, backends)?);
    let listen = ctx.settings.listen.clone();
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .map_err(|e| CliError::Input(format!("cannot listen on {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(io_err(Path::new(&listen)))?;
        println!("listening on http://{addr}");
        axum::serve(listener, layercraft_service::router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(io_err(Path::new(&listen)))
    })
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let mut flags = Layer {
        store: cli.store.clone(),
        ..Layer::default()
    };
    match &cli.command {
        Command::Plan(args) => {
            flags.canvas = args.canvas.clone();
            flags.seed = args.seed;
            flags.interactive = args.interactive.then_some(true);
        }
        Command::Serve { listen, .. } => flags.listen = listen.clone(),
        _ => {}
    }
    let result = Context::load(&cli, flags).and_then(|ctx| match &cli.command {
        Command::Plan(args) => plan(&ctx, args),
        Command::Run {
            session,
            until,
            backends,
        } => run(&ctx, session, *until, backends),
        Command::Edit {
            session,
            spec,
            backends,
        } => edit(&ctx, session, spec, backends),
        Command::Export { session, out } => export(&ctx, session, out),
        Command::Show { session } => {
            let state = ctx.store.get_session(session)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&state).expect("sessions serialize")
            );
            Ok(())
        }
        Command::Serve { backends, .. } => serve(&ctx, backends),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
