use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kserver_core::harness::{
    distortion, initial_servers, offline_opt_mcf, run, Adversary, AdversaryKind, Event, EventSink, ExperimentConfig, JsonlSink,
};
use kserver_core::instrumentation::{write_ledger_csv, LedgerRow};
use kserver_core::metric::MetricKind;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Randomized k-server simulator on dynamically embedded trees.
#[derive(Parser)]
#[command(name = "kserver", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the online algorithm and write JSON-lines events, a ledger CSV and a summary.
    Simulate(Common),
    /// Compute the offline optimum of the request sequence only.
    Opt(Common),
    /// Run with every invariant check enabled; exits nonzero on a violation.
    Verify(Common),
    /// Distortion statistics of the embedding after one request per point.
    Distort {
        #[command(flatten)]
        common: Common,
        /// Number of independent embeddings.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
}

/// Flags override the JSON config file, which overrides the defaults.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    metric: Option<MetricKind>,
    /// JSON distance matrix replacing the generated metric; sets `n` to its size.
    #[arg(long)]
    metric_file: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    adversary: Option<AdversaryKind>,
    /// Whitespace or comma separated request list for the trace adversary.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Skip the potential ledger.
    #[arg(long)]
    no_ledger: bool,
    /// Output path for the JSON-lines trace; the summary and CSV ledger go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$g = v; })* };
        }
        set!(metric => metric, n => n, k => k, horizon => horizon, replicas => replicas, tau => tau, seed => seed, adversary => adversary);
        if let Some(p) = &self.metric_file {
            let m = kserver_core::metric::FiniteMetric::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
            c.metric_file = Some(p.clone());
            c.n = m.n();
        }
        if let Some(p) = &self.trace {
            c.trace = Some(read_trace(p)?);
            c.adversary = AdversaryKind::Trace;
            if self.horizon.is_none() {
                c.horizon = c.trace.as_ref().map_or(0, Vec::len);
            }
        }
        if self.no_ledger {
            c.ledger = false;
        }
        Ok(c)
    }
}

fn read_trace(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().with_context(|| format!("bad request `{s}`")))
        .collect()
}

/// Streams events to a JSON-lines file and keeps ledger rows for the CSV export.
struct FileSink {
    jsonl: JsonlSink<BufWriter<File>>,
    rows: Vec<LedgerRow>,
}

impl EventSink for FileSink {
    fn emit(&mut self, e: Event) -> kserver_core::Result<()> {
        if let Event::Ledger(r) = &e {
            self.rows.push(r.clone());
        }
        self.jsonl.emit(e)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<kserver_core::harness::RunReport> {
    let report = match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut sink = FileSink { jsonl: JsonlSink(BufWriter::new(file)), rows: Vec::new() };
            let report = run(cfg, &mut sink)?;
            sink.jsonl.0.flush()?;
            std::fs::write(sibling(path, ".summary.json"), serde_json::to_string_pretty(&report)?)?;
            if !sink.rows.is_empty() {
                write_ledger_csv(BufWriter::new(File::create(sibling(path, ".ledger.csv"))?), &sink.rows)?;
            }
            report
        }
        None => run(cfg, &mut kserver_core::harness::NullSink)?,
    };
    log::info!("mean integral cost {:.6}, opt {:.6}", report.mean_cost_x, report.opt_cost);
    Ok(report)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KSERVER_LOG", "warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match cli.cmd {
        Cmd::Simulate(c) => {
            let report = simulate(&c.config()?, c.out.as_deref())?;
            serde_json::to_writer_pretty(stdout.lock(), &report)?;
        }
        Cmd::Opt(c) => {
            let cfg = c.config()?;
            cfg.validate()?;
            let m = cfg.build_metric()?;
            let mut adv = Adversary::new(cfg.adversary, cfg.metric, &m, cfg.k, cfg.adversary_seed(), cfg.trace.as_deref())?;
            let requests = if adv.is_adaptive() {
                let quiet = ExperimentConfig { ledger: false, ..cfg.clone() };
                run(&quiet, &mut kserver_core::harness::NullSink)?.requests
            } else {
                adv.stream(cfg.horizon)?
            };
            let sol = offline_opt_mcf(&m, &requests, &initial_servers(&cfg))?;
            serde_json::to_writer_pretty(stdout.lock(), &serde_json::json!({ "requests": requests.len(), "opt_cost": sol.cost }))?;
        }
        Cmd::Verify(c) => {
            let cfg = ExperimentConfig { check: true, ..c.config()? };
            let report = simulate(&cfg, c.out.as_deref())?;
            serde_json::to_writer_pretty(stdout.lock(), &report.violations)?;
            println!();
            if report.violations.total() > 0 {
                bail!("{} invariant violations", report.violations.total());
            }
        }
        Cmd::Distort { common, samples } => {
            let rep = distortion(&common.config()?, samples)?;
            serde_json::to_writer_pretty(stdout.lock(), &rep)?;
        }
    }
    println!();
    Ok(())
}
