use std::fs::File;
use std::io::BufReader;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::{error, info};

use contentnet::cache::replay::ReplayReader;
use contentnet::cache::{advertised_ip, Cache, CacheConfig, CacheServer, IngestOutcome};
use contentnet::clock::SystemClock;
use contentnet::controller::{
    Controller, ControllerConfig, ControllerServer, HttpControllerClient,
};
use contentnet::fabric::{load_topology, Fabric};
use contentnet::harness::{emit_report, run_scenario_with, Report, RunOptions, Scenario};
use contentnet::proxy::{ProxyConfig, ProxyServer};

#[derive(Parser)]
#[command(
    name = "contentnet",
    version,
    about = "SDN content caching: controller, proxy, cache and experiment harness"
)]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json (and requests.csv).
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: bool,
        /// Run with the controller unreachable.
        #[arg(long)]
        controller_down: bool,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run the shipped two-pass scenario and print a summary.
    Demo {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the controller's HTTP/JSON API.
    Controller {
        /// JSON or TOML config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        /// Simulated fabric to program; without one no flows are forked.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Run the transparent HTTP proxy.
    Proxy {
        #[arg(long, default_value = "0.0.0.0:3128")]
        listen: String,
        #[arg(long)]
        controller_url: String,
        #[arg(long, default_value = "index.html")]
        index_name: String,
    },
    /// Run a cache element.
    Cache {
        #[arg(long)]
        controller_url: String,
        #[arg(long, default_value_t = 8080)]
        serve_port: u16,
        #[arg(long)]
        capacity_bytes: u64,
        #[arg(long)]
        content_dir: PathBuf,
        #[arg(long, default_value = "0.0.0.0")]
        bind_ip: Ipv4Addr,
        /// Address registered with the controller; defaults to the bind address.
        #[arg(long)]
        advertise_ip: Option<Ipv4Addr>,
        /// Ingest a capture file and exit instead of serving.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type Result<T = ()> = std::result::Result<T, Box<dyn std::error::Error>>;

fn run(command: Command) -> Result {
    match command {
        Command::Run {
            scenario,
            out,
            csv,
            controller_down,
        } => {
            let scenario = Scenario::load(&scenario)?;
            let options = RunOptions {
                controller_down,
                keep_traces: false,
            };
            let report = run_scenario_with(&scenario, &options)?.report;
            summarize(&report);
            for path in emit_report(&report, &out, csv)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            println!(
                "ok: '{}' with {} files, {} requests, {} cache(s)",
                s.name,
                s.files.len(),
                s.requests.len(),
                s.roles.caches.len()
            );
        }
        Command::Demo { out } => {
            let report =
                run_scenario_with(&Scenario::default_scenario(), &RunOptions::default())?.report;
            summarize(&report);
            if let Some(out) = out {
                for path in emit_report(&report, &out, true)? {
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::Controller {
            config,
            listen,
            topology,
        } => {
            let mut config = match config {
                Some(path) => ControllerConfig::load(&path)?,
                None => ControllerConfig::default(),
            };
            if let Some(listen) = listen {
                config.listen = listen;
            }
            let (listen, workers) = (config.listen.clone(), config.api_workers);
            let mut controller = Controller::new(config);
            if let Some(path) = topology {
                let topology = load_topology(&std::fs::read_to_string(&path)?)?;
                controller = controller.with_fabric(Fabric::new(topology).into_shared());
                let routes = controller.install_base_routes()?;
                info!("programmed {routes} base routes from {}", path.display());
            }
            let server = ControllerServer::spawn(controller.into_shared(), &listen, workers)?;
            println!("controller listening on {}", server.url());
            park_forever();
        }
        Command::Proxy {
            listen,
            controller_url,
            index_name,
        } => {
            let config = ProxyConfig {
                listen,
                index_name,
                ..ProxyConfig::default()
            };
            let server =
                ProxyServer::spawn(config, Arc::new(HttpControllerClient::new(&controller_url)))?;
            println!("proxy listening on {}", server.local_addr());
            park_forever();
        }
        Command::Cache {
            controller_url,
            serve_port,
            capacity_bytes,
            content_dir,
            bind_ip,
            advertise_ip,
            replay,
        } => {
            let addr =
                SocketAddrV4::new(advertise_ip.unwrap_or(advertised_ip(bind_ip)), serve_port);
            let cache = Arc::new(Cache::open(
                CacheConfig::new(addr, capacity_bytes, content_dir),
                Arc::new(HttpControllerClient::new(&controller_url)),
                Arc::new(SystemClock::new()),
            )?);
            let session = cache.register()?;
            info!("registered as session {session}, advertising {addr}");
            if let Some(path) = replay {
                let reader = ReplayReader::new(BufReader::new(File::open(&path)?))?;
                for segment in reader {
                    match cache.observe_segment(&segment?) {
                        IngestOutcome::Stored(name) => println!("stored {name}"),
                        IngestOutcome::Failed(e) => println!("failed: {e}"),
                        IngestOutcome::NotCacheable { status } => {
                            println!("discarded status {status}")
                        }
                        IngestOutcome::Unclaimed => println!("discarded unclaimed stream"),
                        IngestOutcome::Buffered => {}
                    }
                }
                cache.report_stats()?;
                cache.deregister()?;
                return Ok(());
            }
            let _maintenance = cache.spawn_maintenance(Duration::from_secs(1));
            let server = CacheServer::spawn(
                Arc::clone(&cache),
                &SocketAddrV4::new(bind_ip, serve_port).to_string(),
                4,
            )?;
            println!("cache serving on {}", server.local_addr());
            park_forever();
        }
    }
    Ok(())
}

fn summarize(report: &Report) {
    let a = &report.aggregates;
    println!(
        "{}: {} requests, {} hits, {} misses (ratio {:.2})",
        report.config.scenario, a.requests, a.hits, a.misses, a.hit_ratio
    );
    let ms = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3} ms"));
    println!(
        "mean simulated latency: miss {}, hit {}",
        ms(a.mean_miss_latency_ms),
        ms(a.mean_hit_latency_ms)
    );
    println!("origin requests per file: {:?}", a.origin_requests);
}

fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}
