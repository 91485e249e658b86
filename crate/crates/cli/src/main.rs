use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use modest::metrics::{RunReport, Summary};
use modest::scenario::ConfigError;
use modest::{Exec, Method, Scenario, ScenarioConfig};
use serde::Serialize;

/// Scenario runner for MoDeST, FedAvg and D-SGD simulations.
#[derive(Parser, Debug)]
#[command(name = "modest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its exports.
    Run(RunArgs),
    /// Run every (s, a) cell of a grid for each seed and write sweep.csv.
    Sweep(SweepArgs),
    /// Run the scenario under all three methods and write comparison.json.
    Compare(RunArgs),
    /// Check a config and print the resolved parameters.
    Validate(ConfigArg),
}

#[derive(Args, Debug)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    grid_s: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    grid_a: Vec<usize>,
    /// Seeds to run per cell; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

/// Exit status; 1 is also used for I/O failures.
enum Failure {
    Config(ConfigError),
    Stall(String),
    Other(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Validate(a) => cmd_validate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Stall(msg)) => {
            eprintln!("stalled: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(arg: &ConfigArg) -> Result<(ScenarioConfig, PathBuf), ConfigError> {
    let mut config = ScenarioConfig::load(&arg.config)?;
    if let Some(seed) = arg.seed {
        config.seed = seed;
    }
    let base = arg.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((config, base))
}

fn stall_message(r: &RunReport) -> Option<String> {
    let s = r.stall.as_ref()?;
    let waiting: Vec<String> = s
        .stalled_requests
        .iter()
        .map(|(j, k, live)| format!("{j} round {k} ({live} live candidates)"))
        .collect();
    Some(format!(
        "{} after round {} with {} live nodes; waiting: [{}]",
        s.reason,
        s.last_round,
        s.live_nodes,
        waiting.join(", ")
    ))
}

fn execute(sc: &Scenario, out: &Path) -> Result<RunReport, Failure> {
    let report = sc.run();
    report
        .export(out)
        .with_context(|| format!("writing exports to {}", out.display()))?;
    if let Some(e) = &report.error {
        return Err(Failure::Other(anyhow::anyhow!("run aborted: {e}")));
    }
    Ok(report)
}

fn print_summary(s: &Summary) {
    println!(
        "{}: {} rounds, {:.1} s virtual, {} bytes ({:.2}% overhead), final loss {}",
        s.method,
        s.rounds_completed,
        s.end_time_ms / 1000.0,
        s.total_usage_bytes,
        100.0 * s.overhead_share,
        s.final_loss.map_or("-".into(), |l| format!("{l:.4}")),
    );
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let (config, base) = load(&args.cfg)?;
    let sc = Scenario::new(config, &base)?;
    let report = execute(&sc, &args.out)?;
    print_summary(&report.summary());
    match stall_message(&report) {
        Some(msg) => Err(Failure::Stall(msg)),
        None => Ok(()),
    }
}

fn cmd_validate(args: &ConfigArg) -> Result<(), Failure> {
    let (config, base) = load(args)?;
    let sc = Scenario::new(config, &base)?;
    let p = &sc.protocol;
    println!("method          {}", sc.config.method.name());
    println!(
        "nodes           {} initial, {} total",
        sc.initial_nodes(),
        sc.total_nodes
    );
    println!(
        "s / a / sf      {} / {} / {}",
        p.sample_size, p.aggregators, p.success_fraction
    );
    println!("ping timeout    {:.1} ms", p.ping_timeout as f64 / 1000.0);
    println!("activity window {} rounds", p.activity_window);
    println!("stall window    {:.1} ms", sc.stall_window as f64 / 1000.0);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    s: usize,
    a: usize,
    seed: u64,
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let (config, base) = load(&args.run.cfg)?;
    let seeds = if args.seeds.is_empty() {
        vec![config.seed]
    } else {
        args.seeds.clone()
    };
    let mut cells = Vec::new();
    for &s in &args.grid_s {
        for &a in &args.grid_a {
            for &seed in &seeds {
                cells.push(Cell { s, a, seed });
            }
        }
    }
    // Validate the whole grid before running anything.
    let scenarios = cells
        .iter()
        .map(|c| {
            let mut cfg = config.clone();
            cfg.sample_size = c.s;
            cfg.aggregators = Some(c.a);
            cfg.seed = c.seed;
            Scenario::new(cfg, &base)
                .map_err(|e| ConfigError::Invalid(format!("grid cell s={} a={}: {e}", c.s, c.a)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reports = Exec::Parallel.map(&scenarios, |sc| sc.run());

    fs::create_dir_all(&args.run.out).context("creating output directory")?;
    let path = args.run.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).context("creating sweep.csv")?;
    w.write_record(["s", "a", "seed", "rounds_to_target", "vtime_to_target"])
        .context("writing sweep.csv")?;
    let mut stalled = Vec::new();
    for (c, r) in cells.iter().zip(&reports) {
        let hit = r.first_reaching_target();
        w.write_record([
            c.s.to_string(),
            c.a.to_string(),
            c.seed.to_string(),
            hit.map_or(String::new(), |p| p.round.to_string()),
            hit.map_or(String::new(), |p| (p.time as f64 / 1000.0).to_string()),
        ])
        .context("writing sweep.csv")?;
        if let Some(msg) = stall_message(r) {
            stalled.push(format!("s={} a={} seed={}: {msg}", c.s, c.a, c.seed));
        }
    }
    w.flush().context("writing sweep.csv")?;
    println!("{} runs written to {}", cells.len(), path.display());
    if stalled.is_empty() {
        Ok(())
    } else {
        Err(Failure::Stall(stalled.join("; ")))
    }
}

#[derive(Serialize)]
struct MethodResult {
    #[serde(flatten)]
    summary: Summary,
    /// Busiest node's (in+out) bytes over the network-wide (in+out) sum.
    max_node_share: f64,
}

#[derive(Serialize)]
struct Comparison {
    seed: u64,
    methods: Vec<MethodResult>,
    /// D-SGD total model bytes over MoDeST total model bytes.
    dsgd_over_modest_model_bytes: Option<f64>,
}

fn cmd_compare(args: &RunArgs) -> Result<(), Failure> {
    let (config, base) = load(&args.cfg)?;
    let seed = config.seed;
    let mut methods = Vec::new();
    let mut stalled = Vec::new();
    for method in [Method::Modest, Method::Fedavg, Method::Dsgd] {
        let mut cfg = config.clone();
        cfg.method = method;
        let sc = Scenario::new(cfg, &base)?;
        let report = execute(&sc, &args.out.join(method.name()))?;
        let summary = report.summary();
        print_summary(&summary);
        if let Some(msg) = stall_message(&report) {
            stalled.push(format!("{}: {msg}", method.name()));
        }
        let all = report.ledger.totals().usage();
        let max_node_share = if all == 0 {
            0.0
        } else {
            summary.per_node.max as f64 / all as f64
        };
        methods.push(MethodResult {
            summary,
            max_node_share,
        });
    }
    let model = |m: &str| {
        methods
            .iter()
            .find(|r| r.summary.method == m)
            .map(|r| r.summary.model_usage_bytes)
    };
    let ratio = match (model("dsgd"), model("modest")) {
        (Some(d), Some(m)) if m > 0 => Some(d as f64 / m as f64),
        _ => None,
    };
    let comparison = Comparison {
        seed,
        methods,
        dsgd_over_modest_model_bytes: ratio,
    };
    let path = args.out.join("comparison.json");
    let text = serde_json::to_string_pretty(&comparison).context("serializing comparison")?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    if let Some(r) = ratio {
        println!("dsgd/modest model bytes: {r:.2}x");
    }
    if stalled.is_empty() {
        Ok(())
    } else {
        Err(Failure::Stall(stalled.join("; ")))
    }
}
