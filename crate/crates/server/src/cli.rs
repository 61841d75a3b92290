//! Command-line interface.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use simdesk_bench::{
    proportional_delays, replay_endpoint, sweep, Endpoint, EventTrace, LatencyReport, LifecycleFactory, MatchRule,
    ReplayError, ReplayOptions, DEFAULT_PERCENTILES,
};
use simdesk_core::placement::{self, HostDescriptor};
use simdesk_core::ResourceLimits;
use simdesk_rfb::{parse_delays, serve_fixture, serve_fixture_ws, ResponseDelay, ServerFixtureConfig};
use tokio::net::TcpListener;

use crate::api::{workload, CreateSessionRequest, ErrorBody, SessionView};
use crate::config::{ServerConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "simdesk", version, about = "Browser-reachable simulation desktops on shared container hosts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the API server, lifecycle writer and gateway.
    Serve {
        #[arg(long, env = CONFIG_ENV, default_value = "/etc/simdesk/simdesk.toml")]
        config: PathBuf,
    },
    /// Manage sessions through a running server.
    Session(SessionArgs),
    /// Dry-run placement of a renderer plus N vehicles over a hosts file.
    Plan(PlanArgs),
    /// Latency measurements.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Serve a synthetic RFB desktop with controlled response delays.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    #[arg(long, env = "SIMDESK_API", default_value = "http://127.0.0.1:8080")]
    pub api: String,
    #[arg(long, env = "SIMDESK_TOKEN", hide_env_values = true)]
    pub token: String,
    #[command(subcommand)]
    pub action: SessionCmd,
}

#[derive(Debug, Subcommand)]
pub enum SessionCmd {
    Create {
        #[arg(long)]
        image: String,
        /// CPU cores; with --memory-gib, defaults to the tenant quota.
        #[arg(long, requires = "memory_gib")]
        cpus: Option<f64>,
        #[arg(long, requires = "cpus")]
        memory_gib: Option<f64>,
        #[arg(long)]
        gpu: bool,
        #[arg(long, default_value_t = 0)]
        vehicles: u32,
        /// Expose the container's SSH server on a stream port.
        #[arg(long)]
        ssh: bool,
        /// Publish the game-engine bridge port.
        #[arg(long)]
        aux: bool,
    },
    List,
    Show { id: u32 },
    Suspend { id: u32 },
    Resume { id: u32 },
    Stop { id: u32 },
    Start { id: u32 },
    Rm { id: u32 },
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// TOML file with `[[hosts]]` entries.
    #[arg(long)]
    pub hosts: PathBuf,
    #[arg(long)]
    pub vehicles: u32,
    #[arg(long, default_value_t = 2.0)]
    pub renderer_cpus: f64,
    #[arg(long, default_value_t = 4.0)]
    pub renderer_mem_gib: f64,
    #[arg(long, default_value_t = 1.0)]
    pub vehicle_cpus: f64,
    #[arg(long, default_value_t = 1.0)]
    pub vehicle_mem_gib: f64,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Replay a trace against one endpoint and write a report.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Plain RFB endpoint.
        #[arg(long, required_unless_present = "ws", conflicts_with = "ws")]
        endpoint: Option<SocketAddr>,
        /// RFB over WebSocket, e.g. ws://gateway:80/websockify.
        #[arg(long)]
        ws: Option<String>,
        /// Host header for --ws when the URL names the gateway by address.
        #[arg(long, requires = "ws")]
        host: Option<String>,
        #[arg(long, default_value = "first")]
        rule: MatchRule,
        /// Milliseconds before an unanswered event is skipped.
        #[arg(long, default_value_t = 1000)]
        timeout: u64,
        #[arg(long, default_value = "report.toml")]
        out: PathBuf,
    },
    /// Replay at several load levels against stub sessions.
    Sweep {
        /// Comma-separated session counts.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        /// Trace to replay; defaults to evenly spaced key presses.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        events: usize,
        #[arg(long, default_value_t = 320)]
        gap_ms: u64,
        /// Fixture delay per session per event step, in ms.
        #[arg(long, default_value_t = 1)]
        unit_ms: u64,
        #[arg(long, default_value_t = 270)]
        timeout: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print percentiles from a report file.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_values_t = DEFAULT_PERCENTILES.to_vec())]
        percentile: Vec<f64>,
    },
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value = "127.0.0.1:5900")]
    pub listen: SocketAddr,
    /// Fixed response delay in ms.
    #[arg(long, conflicts_with = "delays_file")]
    pub delay: Option<u64>,
    /// One delay in ms per line, used in turn.
    #[arg(long)]
    pub delays_file: Option<PathBuf>,
    #[arg(long, default_value = "640x480", value_parser = parse_size)]
    pub size: (u16, u16),
    /// Speak RFB inside WebSocket binary frames.
    #[arg(long)]
    pub ws: bool,
}

pub fn parse_size(s: &str) -> Result<(u16, u16), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: u16 = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: u16 = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

pub async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Serve { config } => {
            let cfg = ServerConfig::load(&config)?;
            crate::serve::run(cfg).await
        }
        Cmd::Session(args) => session(args).await,
        Cmd::Plan(args) => plan(args),
        Cmd::Bench(cmd) => bench(cmd).await,
        Cmd::Fixture(args) => fixture(args).await,
    }
}

fn gib(x: f64) -> u64 {
    (x * ResourceLimits::GIB as f64) as u64
}

async fn session(args: SessionArgs) -> anyhow::Result<()> {
    let client = reqwest::Client::new();
    let base = args.api.trim_end_matches('/');
    let (method, path, body) = match args.action {
        SessionCmd::Create { image, cpus, memory_gib, gpu, vehicles, ssh, aux } => {
            let limits = cpus.zip(memory_gib).map(|(c, m)| ResourceLimits::new(c, gib(m), gpu));
            let req = CreateSessionRequest { image, limits, stream_ssh: ssh, aux_bridge: aux, vehicles };
            (reqwest::Method::POST, "/api/sessions".to_owned(), Some(serde_json::to_value(req)?))
        }
        SessionCmd::List => (reqwest::Method::GET, "/api/sessions".to_owned(), None),
        SessionCmd::Show { id } => (reqwest::Method::GET, format!("/api/sessions/{id}"), None),
        SessionCmd::Suspend { id } => (reqwest::Method::POST, format!("/api/sessions/{id}/suspend"), None),
        SessionCmd::Resume { id } => (reqwest::Method::POST, format!("/api/sessions/{id}/resume"), None),
        SessionCmd::Stop { id } => (reqwest::Method::POST, format!("/api/sessions/{id}/stop"), None),
        SessionCmd::Start { id } => (reqwest::Method::POST, format!("/api/sessions/{id}/start"), None),
        SessionCmd::Rm { id } => (reqwest::Method::DELETE, format!("/api/sessions/{id}"), None),
    };
    let mut req = client.request(method, format!("{base}{path}")).bearer_auth(&args.token);
    if let Some(b) = body {
        req = req.json(&b);
    }
    let resp = req.send().await.with_context(|| format!("contacting {base}"))?;
    let status = resp.status();
    let text = resp.text().await?;
    if !status.is_success() {
        let msg = serde_json::from_str::<ErrorBody>(&text).map(|e| e.message).unwrap_or(text);
        bail!("{status}: {msg}");
    }
    if let Ok(list) = serde_json::from_str::<Vec<SessionView>>(&text) {
        for v in list {
            print_session(&v);
        }
    } else {
        print_session(&serde_json::from_str::<SessionView>(&text)?);
    }
    Ok(())
}

fn print_session(v: &SessionView) {
    let s = &v.session;
    println!(
        "{:>4}  {:<10} {:<12} {:<28} {}",
        s.id,
        format!("{:?}", s.state).to_lowercase(),
        s.spec.owner.0,
        s.spec.image,
        v.url.as_deref().unwrap_or("-")
    );
}

#[derive(Deserialize)]
struct HostsFile {
    hosts: Vec<HostDescriptor>,
}

pub fn load_hosts(path: &Path) -> anyhow::Result<Vec<HostDescriptor>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str::<HostsFile>(&text)?.hosts)
}

fn plan(args: PlanArgs) -> anyhow::Result<()> {
    let hosts = load_hosts(&args.hosts)?;
    let renderer = ResourceLimits::new(args.renderer_cpus, gib(args.renderer_mem_gib), true);
    let vehicle = ResourceLimits::new(args.vehicle_cpus, gib(args.vehicle_mem_gib), false);
    let plan = placement::plan(&hosts, &workload(args.vehicles, &renderer, &vehicle))?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    if !plan.feasible {
        bail!("no placement fits the host capacities");
    }
    Ok(())
}

fn read_trace(path: &Path) -> anyhow::Result<EventTrace> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.parse()?)
}

async fn bench(cmd: BenchCmd) -> anyhow::Result<()> {
    match cmd {
        BenchCmd::Replay { trace, endpoint, ws, host, rule, timeout, out } => {
            let trace = read_trace(&trace)?;
            let endpoint = match (endpoint, ws) {
                (Some(addr), None) => Endpoint::Tcp(addr),
                (None, Some(url)) => Endpoint::WebSocket { url, host },
                _ => bail!("give exactly one of --endpoint and --ws"),
            };
            let opts = ReplayOptions { rule, timeout: Duration::from_millis(timeout) };
            let (samples, lost) = match replay_endpoint(&endpoint, &trace, opts).await {
                Ok(s) => (s, false),
                Err(ReplayError::ConnectionLost { samples, source }) => {
                    tracing::warn!(error = %source, "connection lost; writing partial report");
                    (samples, true)
                }
                Err(e) => return Err(e.into()),
            };
            let mut report = LatencyReport::from_samples(samples, &DEFAULT_PERCENTILES)?.with_label(endpoint.to_string());
            report.connection_lost = lost;
            report.write(&out)?;
            print_report(&report, &DEFAULT_PERCENTILES);
            println!("wrote {}", out.display());
            Ok(())
        }
        BenchCmd::Sweep { levels, trace, events, gap_ms, unit_ms, timeout, out_dir } => {
            let trace = match trace {
                Some(p) => read_trace(&p)?,
                None => EventTrace::evenly_spaced(events, gap_ms),
            };
            let mut factory = LifecycleFactory::new(proportional_delays(unit_ms)).await?;
            let opts = ReplayOptions { rule: MatchRule::FirstUpdate, timeout: Duration::from_millis(timeout) };
            std::fs::create_dir_all(&out_dir)?;
            for level in sweep(&levels, &mut factory, &trace, opts).await? {
                let path = out_dir.join(format!("sweep-{}.toml", level.level));
                level.report.write(&path)?;
                println!("== {} sessions ({})", level.level, path.display());
                print_report(&level.report, &DEFAULT_PERCENTILES);
            }
            Ok(())
        }
        BenchCmd::Report { input, percentile } => {
            let report = LatencyReport::read(&input)?;
            print_report(&report, &percentile);
            Ok(())
        }
    }
}

fn print_report(report: &LatencyReport, percentiles: &[f64]) {
    println!("samples {} measured, {} skipped", report.cdf.len(), report.skipped_count);
    if report.connection_lost {
        println!("connection lost before the trace finished");
    }
    for &p in percentiles {
        match report.percentile(p) {
            Some(t) => println!("P{p} {t:.1} ms"),
            None => println!("P{p} -"),
        }
    }
}

async fn fixture(args: FixtureArgs) -> anyhow::Result<()> {
    let delay = match (args.delay, &args.delays_file) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ResponseDelay::PerSample(parse_delays(&text).map_err(anyhow::Error::msg)?)
        }
        (Some(ms), None) => ResponseDelay::Fixed(Duration::from_millis(ms)),
        (None, None) => ResponseDelay::Fixed(Duration::ZERO),
    };
    let (width, height) = args.size;
    let cfg = ServerFixtureConfig { width, height, delay, ..ServerFixtureConfig::default() };
    cfg.validate()?;
    let listener = TcpListener::bind(args.listen).await?;
    let fx = if args.ws { serve_fixture_ws(cfg, listener)? } else { serve_fixture(cfg, listener)? };
    println!("fixture listening on {}{}", fx.local_addr(), if args.ws { " (websocket)" } else { "" });
    tokio::select! {
        _ = fx.wait() => Ok(()),
        r = tokio::signal::ctrl_c() => Ok(r?),
    }
}
