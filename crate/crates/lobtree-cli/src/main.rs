//! Command line front end: resolves a configuration, runs one experiment,
//! writes the result table, and exits 0 (pass), 1 (fail), 2 (bad config),
//! or 3 (inconclusive).

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use lobtree::experiments::{self, ExperimentConfig, HarnessError, Outcome};
use lobtree::measures::JumpDistribution;

#[derive(Parser, Debug)]
#[command(
    name = "lobtree",
    version,
    about = "Monte Carlo experiment suite for an order-book Markov chain, its branching-tree coupling, and their scaling limits"
)]
struct Cli {
    /// Experiment name from the registry (see --list)
    #[arg(long)]
    experiment: Option<String>,

    /// List registered experiments and exit
    #[arg(long, default_value_t = false)]
    list: bool,

    /// Config file with key=value lines (same keys as the flags); explicit
    /// flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,

    /// Arrival/cancellation rate (default 1)
    #[arg(long)]
    lambda: Option<f64>,

    /// Jump pmf as "value:prob,...", e.g. "-1:0.3,1:0.7"
    #[arg(long = "j-pmf")]
    j_pmf: Option<String>,

    /// Scaling parameter for diffusion-scale experiments
    #[arg(long)]
    n: Option<u32>,

    /// Rescaled time at which marginals are sampled
    #[arg(long)]
    t: Option<f64>,

    /// Simulation horizon for path experiments
    #[arg(long)]
    horizon: Option<f64>,

    /// Replica count (trees, walks, or paths depending on the experiment)
    #[arg(long)]
    replicas: Option<u64>,

    /// Master seed; every result is a deterministic function of it
    #[arg(long)]
    seed: Option<u64>,

    /// Comma-separated integer knobs (thresholds, cutoffs, pairs, n ladder)
    #[arg(long = "u-list")]
    u_list: Option<String>,

    /// Comma-separated level knobs (label bounds, profile depths)
    #[arg(long = "y-list")]
    y_list: Option<String>,

    /// Comma-separated epsilon ladder for occupation estimates
    #[arg(long = "eps-list")]
    eps_list: Option<String>,

    /// Per-tree budget (node budget, step cap, or depth horizon)
    #[arg(long = "node-cap")]
    node_cap: Option<u64>,

    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format: csv (default) or json
    #[arg(long)]
    format: Option<String>,

    /// Worker threads; 0 or omitted uses the default pool
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(mut cli: Cli) -> Result<ExitCode> {
    if cli.list {
        print!("{}", render_catalog());
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(path) = cli.config.clone() {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        apply_config_file(&mut cli, &text)?;
    }
    let name = cli
        .experiment
        .clone()
        .ok_or_else(|| anyhow!("--experiment is required (or --list to see the registry)"))?;
    let cfg = build_config(&cli, &name)?;
    let report = match experiments::run(&cfg) {
        Ok(r) => r,
        Err(HarnessError::UnknownExperiment(n)) => {
            eprintln!("unknown experiment `{n}`; registered experiments:");
            eprint!("{}", render_catalog());
            return Ok(ExitCode::from(2));
        }
        Err(HarnessError::BadConfig(msg)) => return Err(anyhow!(msg)),
    };
    let rendered = match cli.format.as_deref().unwrap_or("csv") {
        "csv" => render_csv(&report),
        "json" => render_json(&report),
        other => return Err(anyhow!("unknown format `{other}` (use csv or json)")),
    };
    match &cli.out {
        Some(path) => std::fs::write(path, rendered)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{rendered}"),
    }
    for row in &report.rows {
        if let (Some(thr), Some(pass)) = (row.threshold, row.pass) {
            let verdict = if pass { "PASS" } else { "FAIL" };
            eprintln!(
                "{verdict} {}/{}: {} <= {}",
                report.name, row.statistic, row.value, thr
            );
        }
    }
    let (verdict, code) = match report.outcome {
        Outcome::Pass => ("PASS", ExitCode::SUCCESS),
        Outcome::Fail => ("FAIL", ExitCode::from(1)),
        Outcome::Inconclusive => ("INCONCLUSIVE", ExitCode::from(3)),
    };
    let checks = report.rows.iter().filter(|r| r.pass.is_some()).count();
    let passed = report
        .rows
        .iter()
        .filter(|r| r.pass == Some(true))
        .count();
    eprintln!("{verdict} {} ({passed}/{checks} checks)", report.name);
    Ok(code)
}

/// Fill unset CLI fields from key=value lines; `#` starts a comment.
fn apply_config_file(cli: &mut Cli, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim().to_string());
        let parse_err = |what: &str| anyhow!("config line {}: bad {what}", lineno + 1);
        match key {
            "experiment" => {
                cli.experiment.get_or_insert(value);
            }
            "lambda" => {
                cli.lambda
                    .get_or_insert(value.parse().map_err(|_| parse_err("lambda"))?);
            }
            "j-pmf" => {
                cli.j_pmf.get_or_insert(value);
            }
            "n" => {
                cli.n
                    .get_or_insert(value.parse().map_err(|_| parse_err("n"))?);
            }
            "t" => {
                cli.t
                    .get_or_insert(value.parse().map_err(|_| parse_err("t"))?);
            }
            "horizon" => {
                cli.horizon
                    .get_or_insert(value.parse().map_err(|_| parse_err("horizon"))?);
            }
            "replicas" => {
                cli.replicas
                    .get_or_insert(value.parse().map_err(|_| parse_err("replicas"))?);
            }
            "seed" => {
                cli.seed
                    .get_or_insert(value.parse().map_err(|_| parse_err("seed"))?);
            }
            "u-list" => {
                cli.u_list.get_or_insert(value);
            }
            "y-list" => {
                cli.y_list.get_or_insert(value);
            }
            "eps-list" => {
                cli.eps_list.get_or_insert(value);
            }
            "node-cap" => {
                cli.node_cap
                    .get_or_insert(value.parse().map_err(|_| parse_err("node-cap"))?);
            }
            "out" => {
                cli.out.get_or_insert(PathBuf::from(value));
            }
            "format" => {
                cli.format.get_or_insert(value);
            }
            "threads" => {
                cli.threads
                    .get_or_insert(value.parse().map_err(|_| parse_err("threads"))?);
            }
            other => return Err(anyhow!("config line {}: unknown key `{other}`", lineno + 1)),
        }
    }
    Ok(())
}

fn build_config(cli: &Cli, name: &str) -> Result<ExperimentConfig> {
    let mut cfg = match ExperimentConfig::preset(name) {
        Ok(cfg) => cfg,
        Err(HarnessError::UnknownExperiment(_)) => {
            // let the runner produce the listing-on-stderr path
            ExperimentConfig {
                experiment: name.to_string(),
                ..ExperimentConfig::preset("mean_killed").expect("registered")
            }
        }
        Err(e) => return Err(anyhow!(e.to_string())),
    };
    if let Some(l) = cli.lambda {
        cfg.lambda = l;
    }
    if let Some(pmf) = &cli.j_pmf {
        cfg.jumps = parse_pmf(pmf)?;
    }
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(t) = cli.t {
        cfg.t = t;
    }
    if let Some(h) = cli.horizon {
        cfg.horizon = h;
    }
    if let Some(r) = cli.replicas {
        cfg.replicas = r;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(u) = &cli.u_list {
        cfg.u_list = parse_list(u, "u-list")?;
    }
    if let Some(y) = &cli.y_list {
        cfg.y_list = parse_list(y, "y-list")?;
    }
    if let Some(e) = &cli.eps_list {
        cfg.eps_list = parse_list(e, "eps-list")?;
    }
    if let Some(c) = cli.node_cap {
        cfg.node_cap = c;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn parse_pmf(s: &str) -> Result<JumpDistribution> {
    let mut pairs = Vec::new();
    for part in s.split(',') {
        let (v, p) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("pmf entry `{part}` is not value:prob"))?;
        let v: i64 = v.trim().parse().context("pmf value")?;
        let p: f64 = p.trim().parse().context("pmf probability")?;
        pairs.push((v, p));
    }
    JumpDistribution::new(&pairs).map_err(|e| anyhow!(e.to_string()))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| anyhow!("bad {what} entry `{p}`"))
        })
        .collect()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn render_catalog() -> String {
    let mut s = String::new();
    for e in experiments::REGISTRY {
        let _ = writeln!(s, "{:<22} {}", e.name, e.summary);
    }
    s
}

fn render_csv(report: &experiments::ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# lobtree {} experiment={} seed={} generated={}",
        env!("CARGO_PKG_VERSION"),
        report.name,
        report.seed,
        unix_now()
    );
    let _ = writeln!(s, "experiment,statistic,value,threshold,pass");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.experiment,
            r.statistic,
            r.value,
            r.threshold.map(|t| t.to_string()).unwrap_or_default(),
            r.pass.map(|p| p.to_string()).unwrap_or_default()
        );
    }
    s
}

fn render_json(report: &experiments::ExperimentReport) -> String {
    let outcome = match report.outcome {
        Outcome::Pass => "pass",
        Outcome::Fail => "fail",
        Outcome::Inconclusive => "inconclusive",
    };
    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "experiment": r.experiment,
                "statistic": r.statistic,
                "value": r.value,
                "threshold": r.threshold,
                "pass": r.pass,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "tool": "lobtree",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": report.name,
        "seed": report.seed,
        "generated": unix_now(),
        "outcome": outcome,
        "rows": rows,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable report");
    s.push('\n');
    s
}
