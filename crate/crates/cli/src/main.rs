use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use casbatch_cli::{app_state, output, Client, ClientError};
use casbatch_core::config::{parse_pairs, ServerConfig};
use casbatch_core::deploy;
use casbatch_core::model::{TableFormat, WsId};
use casbatch_core::mydb::NeighborRequest;
use casbatch_core::scheduler::Scheduler;

#[derive(Parser)]
#[command(name = "casbatch", version, about = "Batch SQL jobs against large catalogs")]
struct Cli {
    #[command(flatten)]
    conn: ConnArgs,
    /// Print JSON instead of tab-separated text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConnArgs {
    /// Server base URL.
    #[arg(long, global = true, env = "CASBATCH_URL")]
    url: Option<String>,
    /// Your workspace id.
    #[arg(long = "ws-id", global = true, env = "CASBATCH_WSID")]
    ws_id: Option<i64>,
    /// Client settings file with url, ws_id and password keys.
    #[arg(long, global = true, env = "CASBATCH_CLIENT_CONFIG")]
    profile: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP service and the scheduler.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        /// Serve the API only; another process runs the scheduler.
        #[arg(long)]
        no_scheduler: bool,
    },
    /// Installation management (works on the data directory directly).
    #[command(subcommand)]
    Admin(AdminCmd),
    /// Submit a batch job.
    Submit {
        #[arg(short, long, required_unless_present = "file")]
        query: Option<String>,
        /// Read the query from a file.
        #[arg(short, long, conflicts_with = "query")]
        file: Option<PathBuf>,
        #[arg(long)]
        queue: Option<String>,
        #[arg(long)]
        context: Option<String>,
        /// Block until the job finishes.
        #[arg(long)]
        wait: bool,
    },
    /// Show one job.
    Status { id: i64 },
    /// List your jobs.
    Jobs {
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        kind: Option<String>,
    },
    Cancel { id: i64 },
    Resubmit { id: i64 },
    /// Run a query in the quick queue and print the answer.
    Quick {
        #[arg(short, long)]
        query: String,
        #[arg(long)]
        context: Option<String>,
    },
    /// Import a CSV or VOTable file into MyDB.
    Upload {
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "csv")]
        format: String,
        file: PathBuf,
    },
    /// Export a MyDB table and download it once ready.
    Export {
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Queue the export and return without waiting.
        #[arg(long)]
        no_wait: bool,
    },
    /// Wait for an export job and save its file.
    Download {
        id: i64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Give up after this many seconds.
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// List MyDB tables, or describe one.
    Tables { name: Option<String> },
    /// Drop a MyDB table.
    Drop { table: String },
    /// Cross-match a MyDB table against a catalog table.
    Neighbors {
        #[arg(long)]
        my_table: String,
        #[arg(long)]
        context: String,
        #[arg(long)]
        target_table: String,
        #[arg(long)]
        radius_arcmin: f64,
        #[arg(long, default_value = "ra")]
        ra_column: String,
        #[arg(long, default_value = "dec")]
        dec_column: String,
        #[arg(long)]
        my_id_column: Option<String>,
        #[arg(long)]
        match_id_column: Option<String>,
    },
    /// Share a MyDB table with a group.
    Publish {
        #[arg(long)]
        group: String,
        #[arg(long)]
        table: String,
        #[arg(long)]
        alias: Option<String>,
    },
    /// Shared-scan counters.
    Metrics,
}

#[derive(Subcommand)]
enum AdminCmd {
    /// Create the data directory and admin database.
    Init {
        #[arg(long)]
        data: PathBuf,
    },
    /// Register a server target at runtime.
    AddTarget {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long = "context")]
        contexts: Vec<String>,
        #[arg(long, default_value_t = 2)]
        max_concurrent: u32,
        #[arg(long)]
        hosts_mydb: bool,
    },
    /// Create a user. The password is read from CASBATCH_PASSWORD or the
    /// first line of stdin.
    AddUser {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        email: Option<String>,
        #[arg(long)]
        notify: bool,
    },
    AddGroup {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        owner: i64,
    },
    AddMember {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long = "ws-id")]
        member: i64,
    },
    /// List server targets.
    Targets {
        #[arg(long)]
        data: PathBuf,
    },
}

enum Failure {
    Api(ClientError),
    Usage(String),
    Local(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Api(e)
    }
}

impl From<casbatch_core::Error> for Failure {
    fn from(e: casbatch_core::Error) -> Self {
        Failure::Local(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Local(e.to_string())
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Api(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Local(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let json = cli.json;
    let out = &mut std::io::stdout().lock();
    match cli.cmd {
        Cmd::Serve { data, config, listen, no_scheduler } => serve(&data, config.as_deref(), listen, no_scheduler),
        Cmd::Admin(cmd) => admin(cmd, json, out),
        cmd => {
            let client = connect(&cli.conn)?;
            client_cmd(&client, cmd, json, out)
        }
    }
}

fn connect(args: &ConnArgs) -> Result<Client, Failure> {
    let profile = match &args.profile {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Default::default(),
    };
    let url = args
        .url
        .clone()
        .or_else(|| profile.get("url").cloned())
        .unwrap_or_else(|| format!("http://{}", casbatch_core::config::DEFAULT_LISTEN));
    let ws_id = match args.ws_id {
        Some(w) => w,
        None => profile
            .get("ws_id")
            .ok_or_else(|| Failure::Usage("no workspace id: set CASBATCH_WSID or --ws-id".into()))?
            .parse()
            .map_err(|_| Failure::Usage("ws_id must be an integer".into()))?,
    };
    let password = std::env::var("CASBATCH_PASSWORD")
        .ok()
        .or_else(|| profile.get("password").cloned())
        .ok_or_else(|| Failure::Usage("no password: set CASBATCH_PASSWORD".into()))?;
    Ok(Client::new(&url, ws_id, &password)?)
}

fn format_arg(s: &str) -> Result<TableFormat, Failure> {
    TableFormat::parse(s).map_err(|e| Failure::Usage(e.to_string()))
}

fn client_cmd(c: &Client, cmd: Cmd, json: bool, out: &mut impl Write) -> Result<(), Failure> {
    match cmd {
        Cmd::Submit { query, file, queue, context, wait } => {
            let query = match (query, file) {
                (Some(q), _) => q,
                (None, Some(f)) => std::fs::read_to_string(f)?,
                (None, None) => return Err(Failure::Usage("need --query or --file".into())),
            };
            let mut job = c.submit(&query, queue.as_deref(), context.as_deref())?;
            if wait {
                job = c.wait(job.job_id.0, None)?;
            }
            if json {
                output::json(out, &job)?;
            } else if wait {
                output::job(out, &job)?;
            } else {
                writeln!(out, "{}", job.job_id.0)?;
            }
        }
        Cmd::Status { id } => {
            let job = c.job(id)?;
            if json { output::json(out, &job)? } else { output::job(out, &job)? }
        }
        Cmd::Jobs { state, kind } => {
            let jobs = c.jobs(state.as_deref(), kind.as_deref())?;
            if json { output::json(out, &jobs)? } else { output::jobs(out, &jobs)? }
        }
        Cmd::Cancel { id } => {
            let job = c.cancel(id)?;
            if json { output::json(out, &job)? } else { writeln!(out, "{}\t{}", job.job_id.0, job.state.as_str())? }
        }
        Cmd::Resubmit { id } => {
            let job = c.resubmit(id)?;
            if json { output::json(out, &job)? } else { writeln!(out, "{}", job.job_id.0)? }
        }
        Cmd::Quick { query, context } => {
            let res = c.quick(&query, context.as_deref())?;
            if json {
                output::json(out, &res)?;
            } else {
                output::rowset(out, &res.rows)?;
                if res.truncated {
                    eprintln!("note: answer truncated at {} rows", res.rows.rows.len());
                }
            }
        }
        Cmd::Upload { table, format, file } => {
            let info = c.upload(&table, format_arg(&format)?, &file)?;
            if json { output::json(out, &info)? } else { output::tables(out, &[info])? }
        }
        Cmd::Export { table, format, output: path, no_wait } => {
            let job = c.export(&table, format_arg(&format)?)?;
            if no_wait {
                if json { output::json(out, &job)? } else { writeln!(out, "{}", job.job_id.0)? }
            } else {
                download(c, job.job_id.0, path.as_deref(), None, out)?;
            }
        }
        Cmd::Download { id, output: path, timeout } => {
            download(c, id, path.as_deref(), timeout.map(Duration::from_secs_f64), out)?;
        }
        Cmd::Tables { name: Some(name) } => {
            let info = c.table(&name)?;
            if json {
                output::json(out, &info)?;
            } else {
                output::tsv(
                    out,
                    &["column", "type"],
                    info.columns.iter().map(|col| vec![col.name.clone(), col.ty.sql_name().to_string()]),
                )?;
            }
        }
        Cmd::Tables { name: None } => {
            let t = c.tables()?;
            if json { output::json(out, &t)? } else { output::tables(out, &t)? }
        }
        Cmd::Drop { table } => c.drop_table(&table)?,
        Cmd::Neighbors {
            my_table,
            context,
            target_table,
            radius_arcmin,
            ra_column,
            dec_column,
            my_id_column,
            match_id_column,
        } => {
            let req = NeighborRequest {
                my_table,
                context,
                target_table,
                radius_arcmin,
                ra_column,
                dec_column,
                my_id_column,
                match_id_column,
            };
            let info = c.neighbors(&req)?;
            if json { output::json(out, &info)? } else { output::tables(out, &[info])? }
        }
        Cmd::Publish { group, table, alias } => {
            let p = c.publish(&group, &table, alias.as_deref())?;
            output::json(out, &p)?;
        }
        Cmd::Metrics => output::json(out, &c.metrics()?)?,
        Cmd::Serve { .. } | Cmd::Admin(_) => unreachable!("handled in run"),
    }
    Ok(())
}

fn download(c: &Client, id: i64, path: Option<&Path>, timeout: Option<Duration>, out: &mut impl Write) -> Result<(), Failure> {
    let job = c.wait(id, timeout)?;
    let url = match (job.state.as_str(), &job.output_url) {
        ("Finished", Some(u)) => u.clone(),
        ("Finished", None) => return Err(Failure::Local(format!("job {id} has no output file"))),
        (state, _) => {
            return Err(Failure::Local(format!(
                "job {id} is {state}{}",
                job.error_msg.map(|m| format!(": {m}")).unwrap_or_default()
            )))
        }
    };
    match path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            let n = c.fetch(&url, &mut f)?;
            eprintln!("wrote {n} bytes to {}", p.display());
        }
        None => {
            c.fetch(&url, out)?;
        }
    }
    Ok(())
}

fn read_password() -> Result<String, Failure> {
    if let Ok(p) = std::env::var("CASBATCH_PASSWORD") {
        return Ok(p);
    }
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    let pw = line.trim_end_matches(['\r', '\n']).to_string();
    if pw.is_empty() {
        return Err(Failure::Usage("empty password (set CASBATCH_PASSWORD or pipe it on stdin)".into()));
    }
    Ok(pw)
}

fn admin(cmd: AdminCmd, json: bool, out: &mut impl Write) -> Result<(), Failure> {
    match cmd {
        AdminCmd::Init { data } => {
            deploy::init(&data)?;
            writeln!(out, "initialized {}", data.display())?;
        }
        AdminCmd::AddTarget { data, name, contexts, max_concurrent, hosts_mydb } => {
            let mut db = deploy::init(&data)?;
            let ctx: Vec<&str> = contexts.iter().map(String::as_str).collect();
            let id = deploy::add_target(&mut db, &data, &name, &ctx, max_concurrent, hosts_mydb)?;
            writeln!(out, "{}", id.0)?;
        }
        AdminCmd::AddUser { data, email, notify } => {
            let pw = read_password()?;
            let db = deploy::init(&data)?;
            let ws = db.create_user(&pw, email.as_deref(), notify)?;
            writeln!(out, "{}", ws.0)?;
        }
        AdminCmd::AddGroup { data, id, name, owner } => {
            let db = deploy::init(&data)?;
            db.create_group(&id, name.as_deref().unwrap_or(&id), WsId(owner))?;
        }
        AdminCmd::AddMember { data, group, member } => {
            let db = deploy::init(&data)?;
            db.add_member(&group, WsId(member))?;
        }
        AdminCmd::Targets { data } => {
            let db = deploy::init(&data)?;
            let targets = db.targets()?;
            if json {
                output::json(out, &targets)?;
            } else {
                output::tsv(
                    out,
                    &["target_id", "name", "max_concurrent", "hosts_mydb", "contexts", "locator"],
                    targets.iter().map(|t| {
                        vec![
                            t.target_id.0.to_string(),
                            t.name.clone(),
                            t.max_concurrent.to_string(),
                            t.hosts_mydb.to_string(),
                            t.context_names.join(","),
                            t.locator.clone(),
                        ]
                    }),
                )?;
            }
        }
    }
    Ok(())
}

fn serve(data: &Path, config: Option<&Path>, listen: Option<String>, no_scheduler: bool) -> Result<(), Failure> {
    deploy::init(data)?;
    let mut cfg = match config {
        Some(p) => ServerConfig::load(p, data)?,
        None => ServerConfig::for_data_dir(data),
    };
    if let Some(l) = listen {
        cfg.listen = l;
    }

    let shutdown = Arc::new(AtomicBool::new(false));
    let (wheels, sched_thread) = if no_scheduler {
        (None, None)
    } else {
        let (tx, rx) = std::sync::mpsc::channel();
        let sched_cfg = cfg.scheduler.clone();
        let stop = shutdown.clone();
        let handle = std::thread::Builder::new().name("scheduler".into()).spawn(move || {
            let mut sched = match Scheduler::new(sched_cfg) {
                Ok(s) => s,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            let _ = tx.send(Ok(sched.wheels()));
            sched.run(&stop);
        })?;
        let wheels = rx.recv().map_err(|e| Failure::Local(e.to_string()))??;
        (wheels, Some(handle))
    };

    let state = app_state(&cfg, wheels);
    let rt = tokio::runtime::Runtime::new()?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.listen).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, casbatch_cli::server::router(state)).with_graceful_shutdown(shutdown_signal()).await
    });
    shutdown.store(true, Ordering::SeqCst);
    if let Some(h) = sched_thread {
        let _ = h.join();
    }
    tracing::info!("stopped");
    served.map_err(Failure::from)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
