use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use enoki_bench::report::write_report;
use enoki_bench::{run_scenario, Scenario, ScenarioConfig, ScenarioReport};
use enoki_core::naming::NamingServer;
use enoki_core::noded::{Node, NodeConfig};
use enoki_core::{EnokiError, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "enoki", version, about = "Edge FaaS nodes with a replicated keygroup store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the naming service.
    Naming {
        #[arg(long)]
        listen: String,
    },
    /// Run a node daemon.
    Node {
        #[arg(long)]
        config: PathBuf,
    },
    /// Deploy a function on a node.
    Deploy(DeployArgs),
    /// Invoke a function on a node.
    Invoke(InvokeArgs),
    /// Run benchmark scenarios against an in-process cluster.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DeployArgs {
    /// HTTP address of the node.
    #[arg(long)]
    node: String,
    #[arg(long)]
    name: String,
    /// Builtin name, or `cmd:<command line>` for a subprocess handler.
    #[arg(long)]
    handler: String,
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long)]
    keygroup: Option<String>,
    /// Use the keygroup remotely instead of becoming a replica.
    #[arg(long)]
    no_replicate: bool,
    /// Environment entries, `key=value`.
    #[arg(long = "env", value_parser = parse_env)]
    env: Vec<(String, String)>,
}

#[derive(Args)]
struct InvokeArgs {
    #[arg(long)]
    node: String,
    #[arg(long)]
    name: String,
    #[arg(long = "async")]
    asynchronous: bool,
    #[arg(long, default_value = "")]
    input: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, required_unless_present = "all")]
    scenario: Option<String>,
    /// One variant of the scenario; all of them when omitted.
    #[arg(long)]
    variant: Option<String>,
    /// Topology file whose links override the defaults.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    paper_scale: bool,
    /// Run duration in seconds, overriding the scenario default.
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long)]
    repetitions: Option<u32>,
    /// Item size for the throughput scenarios; all sizes when omitted.
    #[arg(long)]
    size: Option<u64>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Every scenario and variant.
    #[arg(long, conflicts_with_all = ["scenario", "variant"])]
    all: bool,
}

fn parse_env(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn init_logging() {
    let level = std::env::var("ENOKI_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format(|buf, record| {
            writeln!(
                buf,
                "{} {} {} {}",
                buf.timestamp_micros(),
                record.level(),
                record.module_path().unwrap_or("-"),
                record.args()
            )
        })
        .init();
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("cannot listen for ctrl-c: {e}");
        std::future::pending::<()>().await;
    }
}

fn http_error(e: reqwest::Error) -> EnokiError {
    EnokiError::unavailable(format!("request failed: {e}"))
}

fn base_url(node: &str) -> String {
    if node.starts_with("http://") {
        node.trim_end_matches('/').to_owned()
    } else {
        format!("http://{}", node.trim_end_matches('/'))
    }
}

/// Prints a node's reply; non-success statuses become errors.
async fn finish(resp: reqwest::Response) -> Result<()> {
    let status = resp.status();
    let body = resp.text().await.map_err(http_error)?;
    if status.is_success() {
        println!("{body}");
        Ok(())
    } else {
        Err(reply_error(status, &body))
    }
}

/// Rebuilds the node's error from an HTTP reply of the form `Kind: detail`.
fn reply_error(status: reqwest::StatusCode, body: &str) -> EnokiError {
    let kind = match status.as_u16() {
        400 => ErrorKind::BadRequest,
        404 => ErrorKind::NotFound,
        409 => ErrorKind::Conflict,
        503 => ErrorKind::Unavailable,
        504 => ErrorKind::Timeout,
        _ => ErrorKind::Internal,
    };
    let body = body.trim();
    let detail = body
        .split_once(": ")
        .filter(|(k, _)| !k.contains(' '))
        .map_or(body, |(_, d)| d);
    EnokiError::new(kind, detail)
}

async fn deploy(args: DeployArgs) -> Result<()> {
    let mut body = serde_json::json!({ "handler": args.handler });
    if let Some(t) = args.threads {
        body["threads"] = t.into();
    }
    if let Some(kg) = args.keygroup {
        body["keygroup"] = kg.into();
    }
    if args.no_replicate {
        body["replicate_from_existing"] = false.into();
    }
    if !args.env.is_empty() {
        body["env"] = args.env.into_iter().map(|(k, v)| (k, v.into())).collect::<serde_json::Map<_, _>>().into();
    }
    let resp = reqwest::Client::new()
        .put(format!("{}/functions/{}", base_url(&args.node), args.name))
        .body(body.to_string())
        .send()
        .await
        .map_err(http_error)?;
    finish(resp).await
}

async fn invoke(args: InvokeArgs) -> Result<()> {
    let suffix = if args.asynchronous { "/async" } else { "" };
    let resp = reqwest::Client::new()
        .post(format!("{}/functions/{}{suffix}", base_url(&args.node), args.name))
        .body(args.input)
        .send()
        .await
        .map_err(http_error)?;
    finish(resp).await
}

fn bench_configs(args: &BenchArgs) -> Result<Vec<ScenarioConfig>> {
    let scenarios = if args.all {
        Scenario::ALL.to_vec()
    } else {
        vec![args.scenario.as_deref().unwrap_or_default().parse::<Scenario>()?]
    };
    let mut configs = Vec::new();
    for sc in scenarios {
        let variants: Vec<String> = match &args.variant {
            Some(v) => vec![v.clone()],
            None => sc.variants().iter().map(|v| v.to_string()).collect(),
        };
        for variant in variants {
            let mut cfg = ScenarioConfig::new(sc, variant).seed(args.seed);
            if args.paper_scale {
                cfg = cfg.paper_scale();
            }
            if let Some(d) = args.duration {
                cfg = cfg.duration(Duration::from_secs(d));
            }
            if let Some(n) = args.repetitions {
                cfg = cfg.repetitions(n);
            }
            if let Some(size) = args.size {
                cfg = cfg.sizes(vec![size]);
            }
            cfg.topology_path = args.topology.clone();
            cfg.validate()?;
            configs.push(cfg);
        }
    }
    Ok(configs)
}

async fn bench(args: BenchArgs) -> Result<()> {
    let configs = bench_configs(&args)?;
    let mut reports = Vec::new();
    for cfg in configs {
        log::info!("running {} {} for {:?} x {}", cfg.scenario, cfg.variant, cfg.duration, cfg.repetitions);
        reports.push(run_scenario(cfg).await?);
    }
    let report = ScenarioReport::merge(reports);
    write_report(&args.out, &report)?;
    for s in &report.summaries {
        println!(
            "{} {} {}: n={} errors={} p50={}us p99={}us {:.1} ops/s {:.2} MB/s stale={}",
            s.scenario,
            s.variant,
            s.op,
            s.count,
            s.error_count,
            s.p50_us.unwrap_or(0),
            s.p99_us.unwrap_or(0),
            s.ops_per_s,
            s.mb_per_s,
            s.stale_reads
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Naming { listen } => {
            let server = NamingServer::start(&listen).await?;
            println!("naming listening on {}", server.addr);
            shutdown_signal().await;
            server.shutdown();
            Ok(())
        }
        Command::Node { config } => {
            let node = Node::start(NodeConfig::load(&config)?).await?;
            shutdown_signal().await;
            node.shutdown().await;
            Ok(())
        }
        Command::Deploy(args) => deploy(args).await,
        Command::Invoke(args) => invoke(args).await,
        Command::Bench(args) => bench(args).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
