//! Experiment registry, configuration, and runners.
//!
//! Each experiment checks one verifiable consequence of the model: an exact
//! combinatorial identity, a closed-form constant, or a scaling-limit law
//! probed at a finite scale with a pre-registered tolerance. Runners are
//! deterministic functions of the configuration: replicas are split into
//! fixed-size blocks, blocks run in parallel, and per-block results are
//! folded in index order, so output is identical for any thread count.

use rayon::prelude::*;
use thiserror::Error;

use crate::measures::{JumpDistribution, OrderBook};
use crate::rng::replica_rng;
use crate::sim::{collect_excursion_summaries, run_marks, MarkSample, ModelParams};
use crate::stats::{self, target, CouplingSamples, TauIdentity};
use crate::verify::{
    folded_normal_cdf, folded_normal_mean, ks_critical_two, ks_one_sample, ks_two_sample,
    local_time_mean, spearman_lag1, Freq, Moments,
};

/// Default master seed; every experiment is reproducible from it.
pub const DEFAULT_SEED: u64 = 20260822;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
}

/// One fully resolved experiment run. `preset` fills in the registered
/// defaults; callers override individual fields afterwards.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub lambda: f64,
    pub jumps: JumpDistribution,
    pub n: u32,
    pub t: f64,
    pub horizon: f64,
    pub replicas: u64,
    pub seed: u64,
    /// Integer-valued knob list; meaning depends on the experiment
    /// (depth/size thresholds, walk cutoff, contour (m,u) pairs, n ladder).
    pub u_list: Vec<u64>,
    pub y_list: Vec<f64>,
    pub eps_list: Vec<f64>,
    /// Per-tree budget: node budget, step cap, or depth horizon depending on
    /// the experiment (see the registry summary).
    pub node_cap: u64,
    /// Worker threads; 0 uses the process-wide default pool.
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<ExperimentConfig, HarnessError> {
        let info =
            find(name).ok_or_else(|| HarnessError::UnknownExperiment(name.to_string()))?;
        let mut cfg = ExperimentConfig {
            experiment: info.name.to_string(),
            lambda: 1.0,
            jumps: JumpDistribution::reference(),
            n: 100,
            t: 1.0,
            horizon: 1e6,
            replicas: 1_000_000,
            seed: DEFAULT_SEED,
            u_list: Vec::new(),
            y_list: Vec::new(),
            eps_list: Vec::new(),
            node_cap: 1_000_000,
            threads: 0,
        };
        match info.name {
            "tau_formula" => cfg.node_cap = 2000,
            "mean_killed" => {}
            "tail_h_gw" => cfg.u_list = vec![5, 10, 20],
            "tail_progeny" => cfg.u_list = vec![100, 400],
            "tail_h_barrier" => {
                cfg.replicas = 2_000_000;
                cfg.u_list = vec![50];
            }
            "tail_psi_star" => {
                cfg.replicas = 16_000_000;
                cfg.u_list = vec![50];
            }
            "label_count" => {
                cfg.y_list = vec![100.0];
                cfg.node_cap = 1500;
            }
            "min_walk_positive" => cfg.u_list = vec![1000],
            "contour_visits" => {
                cfg.replicas = 400_000;
                cfg.u_list = vec![1, 2, 2, 4];
            }
            "coupling_equivalence" => {
                cfg.replicas = 10_000;
                cfg.node_cap = 100_000;
            }
            "excursion_iid" => {
                cfg.replicas = 4_000;
                cfg.u_list = vec![0, 3];
            }
            "idle_fraction" => cfg.replicas = 16,
            "price_marginal" | "mass_marginal" => cfg.replicas = 2_000,
            "ratio_mass_price" => {
                cfg.replicas = 1_000;
                cfg.u_list = vec![25, 400];
            }
            "density_profile" => {
                cfg.replicas = 800;
                cfg.n = 200;
                cfg.y_list = vec![0.1, 0.25, 0.4];
            }
            "local_time" => {
                cfg.replicas = 2_000;
                cfg.n = 200;
                cfg.eps_list = vec![0.4, 0.2, 0.1];
            }
            "variance_recursion" => {
                cfg.u_list = vec![1, 2, 5];
                cfg.node_cap = 1 << 20;
            }
            _ => unreachable!("registry covers all presets"),
        }
        Ok(cfg)
    }
}

/// One output line: `experiment,statistic,value,threshold,pass`.
/// Info rows carry no threshold and no verdict.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub experiment: &'static str,
    pub statistic: String,
    pub value: f64,
    pub threshold: Option<f64>,
    pub pass: Option<bool>,
}

fn info(experiment: &'static str, statistic: impl Into<String>, value: f64) -> ResultRow {
    ResultRow {
        experiment,
        statistic: statistic.into(),
        value,
        threshold: None,
        pass: None,
    }
}

fn check(
    experiment: &'static str,
    statistic: impl Into<String>,
    value: f64,
    threshold: f64,
) -> ResultRow {
    ResultRow {
        experiment,
        statistic: statistic.into(),
        value,
        threshold: Some(threshold),
        pass: Some(value <= threshold),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Not enough data to decide (e.g. a conditioning event too rare).
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: &'static str,
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    pub outcome: Outcome,
}

impl ExperimentReport {
    fn conclude(name: &'static str, seed: u64, rows: Vec<ResultRow>, inconclusive: bool) -> Self {
        let outcome = if rows.iter().any(|r| r.pass == Some(false)) {
            Outcome::Fail
        } else if inconclusive {
            Outcome::Inconclusive
        } else {
            Outcome::Pass
        };
        ExperimentReport {
            name,
            seed,
            rows,
            outcome,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExperimentInfo {
    pub name: &'static str,
    pub id: u8,
    pub summary: &'static str,
}

pub const REGISTRY: &[ExperimentInfo] = &[
    ExperimentInfo {
        name: "tau_formula",
        id: 1,
        summary: "exploration step count equals 2|B|-|K|-1 on every tree; zero tolerance (node-cap = per-tree step cap)",
    },
    ExperimentInfo {
        name: "mean_killed",
        id: 2,
        summary: "mean killed-node count vs 1 - E(J)/P(J=1) within 3 SE (reference 3/7)",
    },
    ExperimentInfo {
        name: "tail_h_gw",
        id: 3,
        summary: "tree height tail P(h >= u) vs exactly 1/u within 3 SE, u from u-list",
    },
    ExperimentInfo {
        name: "tail_progeny",
        id: 4,
        summary: "sqrt(u) P(|T| >= u) within 10% of 1/sqrt(pi), u from u-list",
    },
    ExperimentInfo {
        name: "tail_h_barrier",
        id: 5,
        summary: "u P(barrier-tree height >= u) within 0.08 of E(J)/P(J=1) (reference 4/7)",
    },
    ExperimentInfo {
        name: "tail_psi_star",
        id: 6,
        summary: "u P(max barrier label >= u) within 0.05 of E(J)^2/P(J=1) (reference 0.2286)",
    },
    ExperimentInfo {
        name: "label_count",
        id: 7,
        summary: "(1/y) E #{labels <= y} within 10% of 1/P(J=1) (node-cap = generation horizon)",
    },
    ExperimentInfo {
        name: "min_walk_positive",
        id: 8,
        summary: "P(walk minimum >= 0 over cutoff steps) vs E(J)/P(J=1) within 3 SE, cutoff from u-list",
    },
    ExperimentInfo {
        name: "contour_visits",
        id: 9,
        summary: "E(contour visits to m | hits u) vs the gambler's-ruin formula within 3 SE, (m,u) pairs from u-list",
    },
    ExperimentInfo {
        name: "coupling_equivalence",
        id: 10,
        summary: "book excursions above 0 vs fresh tree explorations: four two-sample KS tests at 1% (node-cap = excursion jump cap)",
    },
    ExperimentInfo {
        name: "excursion_iid",
        id: 11,
        summary: "successive excursions look i.i.d.: lag-1 rank correlation in CI and split-half KS at 1%, thresholds a in u-list",
    },
    ExperimentInfo {
        name: "idle_fraction",
        id: 12,
        summary: "empty-book time over price-zero time within 0.02 of E(J) (reference 0.40)",
    },
    ExperimentInfo {
        name: "price_marginal",
        id: 13,
        summary: "scaled price at time t vs |N(0, 2 lambda E(J)^2 t)|: KS below 0.08 and decreasing in n",
    },
    ExperimentInfo {
        name: "mass_marginal",
        id: 14,
        summary: "scaled mass at time t vs |N(0, 2 lambda t)|: KS below 0.08, mean within 5%, KS decreasing in n",
    },
    ExperimentInfo {
        name: "ratio_mass_price",
        id: 15,
        summary: "E|mass - price/E(J)| (scaled) halves from the smallest to the largest n in u-list",
    },
    ExperimentInfo {
        name: "density_profile",
        id: 16,
        summary: "conditional on scaled price > 0.5: E(J) X([0,y])/y within 0.15 of 1 for y in y-list",
    },
    ExperimentInfo {
        name: "local_time",
        id: 17,
        summary: "price local time vs the Brownian prediction; mass/price local-time ratio vs E(J); eps-occupation convergence; sqrt-t scaling",
    },
    ExperimentInfo {
        name: "variance_recursion",
        id: 18,
        summary: "Var(Z_1+...+Z_n) vs the exact recursion within 3 SE, n from u-list",
    },
];

pub fn find(name: &str) -> Option<&'static ExperimentInfo> {
    REGISTRY.iter().find(|e| e.name == name)
}

/// Run one experiment. Block sizes are fixed per experiment, and block
/// results merge in index order: the report depends only on the config.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let experiment_info = find(&cfg.experiment)
        .ok_or_else(|| HarnessError::UnknownExperiment(cfg.experiment.clone()))?;
    if cfg.replicas == 0 {
        return Err(HarnessError::BadConfig("replicas must be >= 1".into()));
    }
    let params = ModelParams::new(cfg.lambda, cfg.jumps.clone())
        .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    let work = || dispatch(experiment_info, cfg, &params);
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        pool.install(work)
    } else {
        work()
    }
}

fn dispatch(
    experiment_info: &'static ExperimentInfo,
    cfg: &ExperimentConfig,
    params: &ModelParams,
) -> Result<ExperimentReport, HarnessError> {
    let id = experiment_info.id;
    let name = experiment_info.name;
    match name {
        "tau_formula" => Ok(tau_formula(cfg, name, id)),
        "mean_killed" => Ok(mean_killed(cfg, name, id)),
        "tail_h_gw" => Ok(tail_h_gw(cfg, name, id)),
        "tail_progeny" => Ok(tail_progeny(cfg, name, id)),
        "tail_h_barrier" => Ok(tail_h_barrier(cfg, name, id)),
        "tail_psi_star" => Ok(tail_psi_star(cfg, name, id)),
        "label_count" => label_count(cfg, name, id),
        "min_walk_positive" => min_walk_positive(cfg, name, id),
        "contour_visits" => contour_visits(cfg, name, id),
        "coupling_equivalence" => Ok(coupling_equivalence(cfg, params, name, id)),
        "excursion_iid" => Ok(excursion_iid(cfg, params, name, id)),
        "idle_fraction" => Ok(idle_fraction(cfg, params, name, id)),
        "price_marginal" => Ok(marginal(cfg, params, name, id, Marginal::Price)),
        "mass_marginal" => Ok(marginal(cfg, params, name, id, Marginal::Mass)),
        "ratio_mass_price" => ratio_mass_price(cfg, params, name, id),
        "density_profile" => Ok(density_profile(cfg, params, name, id)),
        "local_time" => local_time(cfg, params, name, id),
        "variance_recursion" => variance_recursion(cfg, name, id),
        _ => unreachable!("registry covers all runners"),
    }
}

// ---------------------------------------------------------------------------
// Fixed-block parallel driver
// ---------------------------------------------------------------------------

fn block_ranges(total: u64, block: u64) -> Vec<std::ops::Range<u64>> {
    let mut out = Vec::new();
    let mut lo = 0u64;
    while lo < total {
        let hi = (lo + block).min(total);
        out.push(lo..hi);
        lo = hi;
    }
    out
}

fn par_blocks<T, F>(total: u64, block: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<u64>) -> T + Sync + Send,
{
    block_ranges(total, block)
        .into_par_iter()
        .map(f)
        .collect()
}

const TREE_BLOCK: u64 = 65_536;
const SIM_BLOCK: u64 = 32;

/// One mark record per replica, paths simulated independently.
fn sim_mark_samples(
    params: &ModelParams,
    seed: u64,
    id: u8,
    lane: u8,
    replicas: u64,
    mark_times: &[f64],
    occ_levels: &[i64],
    count_levels: &[i64],
) -> Vec<Vec<MarkSample>> {
    par_blocks(replicas, SIM_BLOCK, |range| {
        range
            .map(|r| {
                run_marks(
                    params,
                    OrderBook::new(),
                    mark_times,
                    occ_levels,
                    count_levels,
                    replica_rng(seed, id, lane, r),
                )
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

// ---------------------------------------------------------------------------
// Tree-side runners
// ---------------------------------------------------------------------------

fn tau_formula(cfg: &ExperimentConfig, name: &'static str, id: u8) -> ExperimentReport {
    let step_cap = cfg.node_cap;
    let arena_cap = step_cap
        .saturating_mul(2)
        .saturating_add(16)
        .min(u32::MAX as u64) as u32;
    let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
        stats::tau_identity_block(&cfg.jumps, cfg.seed, id, range, step_cap, arena_cap)
    });
    let mut acc = TauIdentity::default();
    for p in &parts {
        acc.merge(p);
    }
    let rows = vec![
        check(name, "violations", acc.violations as f64, 0.0),
        info(name, "completed", acc.completed as f64),
        info(name, "capped", acc.capped as f64),
    ];
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn mean_killed(cfg: &ExperimentConfig, name: &'static str, id: u8) -> ExperimentReport {
    let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
        stats::killed_mean_block(&cfg.jumps, cfg.seed, id, range, cfg.node_cap)
    });
    let mut m = Moments::default();
    let mut excluded = 0u64;
    for (pm, pe) in &parts {
        m.merge(pm);
        excluded += pe;
    }
    let t = target::mean_killed(&cfg.jumps);
    let rows = vec![
        info(name, "mean", m.mean()),
        info(name, "se", m.se()),
        check(name, "abs_dev", (m.mean() - t).abs(), 3.0 * m.se()),
        info(name, "excluded", excluded as f64),
    ];
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn tail_h_gw(cfg: &ExperimentConfig, name: &'static str, id: u8) -> ExperimentReport {
    let mut rows = Vec::new();
    for &u in &cfg.u_list {
        let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
            stats::height_tail_block(&cfg.jumps, cfg.seed, id, range, u as u32)
        });
        let mut f = Freq::default();
        for p in &parts {
            f.merge(p);
        }
        let t = target::height_tail(u as u32);
        rows.push(info(name, format!("p_u{u}"), f.p()));
        rows.push(check(
            name,
            format!("abs_dev_u{u}"),
            (f.p() - t).abs(),
            3.0 * f.se(),
        ));
    }
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn tail_progeny(cfg: &ExperimentConfig, name: &'static str, id: u8) -> ExperimentReport {
    let mut rows = Vec::new();
    for &u in &cfg.u_list {
        let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
            stats::progeny_tail_block(&cfg.jumps, cfg.seed, id, range, u)
        });
        let mut f = Freq::default();
        for p in &parts {
            f.merge(p);
        }
        let scaled = (u as f64).sqrt() * f.p();
        rows.push(info(name, format!("scaled_tail_u{u}"), scaled));
        rows.push(info(
            name,
            format!("exact_scaled_u{u}"),
            (u as f64).sqrt() * target::progeny_tail_exact(u),
        ));
        rows.push(check(
            name,
            format!("abs_dev_u{u}"),
            (scaled - target::PROGENY_TAIL_CONST).abs(),
            0.1 * target::PROGENY_TAIL_CONST,
        ));
    }
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn tail_h_barrier(cfg: &ExperimentConfig, name: &'static str, id: u8) -> ExperimentReport {
    let mut rows = Vec::new();
    for &u in &cfg.u_list {
        let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
            stats::b_height_tail_block(&cfg.jumps, cfg.seed, id, range, u as u32, cfg.node_cap)
        });
        let mut f = Freq::default();
        let mut excluded = 0u64;
        for (pf, pe) in &parts {
            f.merge(pf);
            excluded += pe;
        }
        let scaled = u as f64 * f.p();
        rows.push(info(name, format!("scaled_tail_u{u}"), scaled));
        rows.push(check(
            name,
            format!("abs_dev_u{u}"),
            (scaled - target::barrier_height_tail_limit(&cfg.jumps)).abs(),
            0.08,
        ));
        rows.push(info(name, format!("excluded_u{u}"), excluded as f64));
    }
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn tail_psi_star(cfg: &ExperimentConfig, name: &'static str, id: u8) -> ExperimentReport {
    let mut rows = Vec::new();
    for &u in &cfg.u_list {
        let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
            stats::psi_tail_block(&cfg.jumps, cfg.seed, id, range, u as i64, cfg.node_cap)
        });
        let mut f = Freq::default();
        let mut excluded = 0u64;
        for (pf, pe) in &parts {
            f.merge(pf);
            excluded += pe;
        }
        let scaled = u as f64 * f.p();
        rows.push(info(name, format!("scaled_tail_u{u}"), scaled));
        rows.push(check(
            name,
            format!("abs_dev_u{u}"),
            (scaled - target::psi_tail_limit(&cfg.jumps)).abs(),
            0.05,
        ));
        rows.push(info(name, format!("excluded_u{u}"), excluded as f64));
    }
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn label_count(
    cfg: &ExperimentConfig,
    name: &'static str,
    id: u8,
) -> Result<ExperimentReport, HarnessError> {
    let y = *cfg
        .y_list
        .first()
        .ok_or_else(|| HarnessError::BadConfig("label_count needs a y value".into()))?;
    if y < 1.0 {
        return Err(HarnessError::BadConfig("y must be >= 1".into()));
    }
    let horizon = cfg.node_cap.min(u32::MAX as u64) as u32;
    let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
        stats::label_count_block(&cfg.jumps, cfg.seed, id, range, y as i64, horizon)
    });
    let mut m = Moments::default();
    for p in &parts {
        m.merge(p);
    }
    let normalized = m.mean() / y;
    let t = target::label_count_limit(&cfg.jumps);
    let rows = vec![
        info(name, "normalized_count", normalized),
        info(name, "se", m.se() / y),
        check(name, "abs_dev", (normalized - t).abs(), 0.1 * t),
    ];
    Ok(ExperimentReport::conclude(name, cfg.seed, rows, false))
}

fn min_walk_positive(
    cfg: &ExperimentConfig,
    name: &'static str,
    id: u8,
) -> Result<ExperimentReport, HarnessError> {
    let cutoff = *cfg
        .u_list
        .first()
        .ok_or_else(|| HarnessError::BadConfig("min_walk_positive needs a cutoff".into()))?;
    let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
        stats::min_walk_block(&cfg.jumps, cfg.seed, id, range, cutoff as u32)
    });
    let mut f = Freq::default();
    for p in &parts {
        f.merge(p);
    }
    let t = target::min_walk_positive(&cfg.jumps);
    let rho = target::chernoff_rho(&cfg.jumps);
    let truncation = rho.powi(cutoff as i32) / (1.0 - rho);
    let rows = vec![
        info(name, "p_nonnegative", f.p()),
        check(name, "abs_dev", (f.p() - t).abs(), 3.0 * f.se()),
        info(name, "truncation_bound", truncation),
    ];
    Ok(ExperimentReport::conclude(name, cfg.seed, rows, false))
}

fn contour_visits(
    cfg: &ExperimentConfig,
    name: &'static str,
    id: u8,
) -> Result<ExperimentReport, HarnessError> {
    if cfg.u_list.is_empty() || cfg.u_list.len() % 2 != 0 {
        return Err(HarnessError::BadConfig(
            "contour_visits needs (m,u) pairs in u-list".into(),
        ));
    }
    let pairs: Vec<(i64, i64)> = cfg
        .u_list
        .chunks(2)
        .map(|c| (c[0] as i64, c[1] as i64))
        .collect();
    let arena_cap = cfg.node_cap.min(u32::MAX as u64) as u32;
    let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
        stats::contour_conditional_block(&cfg.jumps, cfg.seed, id, range, &pairs, arena_cap)
    });
    let mut moms = vec![Moments::default(); pairs.len()];
    let mut attempts = 0u64;
    let mut capped = 0u64;
    for (pm, pa, pc) in &parts {
        for (a, b) in moms.iter_mut().zip(pm) {
            a.merge(b);
        }
        attempts += pa;
        capped += pc;
    }
    let mut rows = Vec::new();
    for ((m, u), mom) in pairs.iter().zip(&moms) {
        let t = target::contour_visits_conditional(*m as u32, *u as u32);
        rows.push(info(name, format!("cond_mean_m{m}_u{u}"), mom.mean()));
        rows.push(check(
            name,
            format!("abs_dev_m{m}_u{u}"),
            (mom.mean() - t).abs(),
            3.0 * mom.se(),
        ));
        rows.push(info(name, format!("kept_m{m}_u{u}"), mom.n as f64));
    }
    rows.push(info(name, "attempts", attempts as f64));
    rows.push(info(name, "capped", capped as f64));
    Ok(ExperimentReport::conclude(name, cfg.seed, rows, false))
}

fn variance_recursion(
    cfg: &ExperimentConfig,
    name: &'static str,
    id: u8,
) -> Result<ExperimentReport, HarnessError> {
    if cfg.u_list.is_empty() {
        return Err(HarnessError::BadConfig(
            "variance_recursion needs generation counts in u-list".into(),
        ));
    }
    let mut n_list: Vec<u32> = cfg.u_list.iter().map(|&u| u as u32).collect();
    n_list.sort_unstable();
    let width_budget = cfg.node_cap.min(usize::MAX as u64) as usize;
    let parts = par_blocks(cfg.replicas, TREE_BLOCK, |range| {
        stats::gen_var_block(&cfg.jumps, cfg.seed, id, range, &n_list, width_budget)
    });
    let mut acc = stats::GenVarAcc::new(&n_list);
    for p in &parts {
        acc.merge(p);
    }
    let mut rows = Vec::new();
    for (i, &n) in n_list.iter().enumerate() {
        let v = acc.moments[i].var();
        let t = target::var_gen_sum(n);
        rows.push(info(name, format!("var_n{n}"), v));
        rows.push(check(
            name,
            format!("abs_dev_n{n}"),
            (v - t).abs(),
            3.0 * acc.moments[i].var_se(),
        ));
    }
    rows.push(info(name, "excluded", acc.excluded as f64));
    Ok(ExperimentReport::conclude(name, cfg.seed, rows, false))
}

// ---------------------------------------------------------------------------
// Chain-side runners
// ---------------------------------------------------------------------------

fn coupling_equivalence(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
) -> ExperimentReport {
    let per_side = cfg.replicas as usize;
    let jump_cap = cfg.node_cap.max(2);
    // the exploration has one step less than the excursion has jumps, so the
    // caps are offset by one to condition both sides on the same event
    let tau_cap = jump_cap - 1;
    let (book, book_report) = collect_excursion_summaries(
        params,
        0,
        per_side,
        jump_cap,
        replica_rng(cfg.seed, id, 0, 0),
    );
    let parts = par_blocks(cfg.replicas, 2_048, |range| {
        stats::coupling_tree_block(
            &cfg.jumps,
            cfg.lambda,
            cfg.seed,
            id,
            range,
            tau_cap,
            1_000_000,
        )
    });
    let mut trees = CouplingSamples::default();
    for p in parts {
        trees.merge(p);
    }
    let mut rows = Vec::new();
    let pairs: [(&str, Vec<f64>, &[f64]); 4] = [
        (
            "ks_jump_count",
            book.iter().map(|e| (e.jump_count - 1) as f64).collect(),
            &trees.taus,
        ),
        (
            "ks_height",
            book.iter().map(|e| e.height as f64).collect(),
            &trees.max_labels,
        ),
        (
            "ks_deposited",
            book.iter().map(|e| e.deposited_below as f64).collect(),
            &trees.kills,
        ),
        (
            "ks_duration",
            book.iter().map(|e| e.duration).collect(),
            &trees.durations,
        ),
    ];
    for (stat, mut a, b) in pairs {
        let mut b = b.to_vec();
        let thr = ks_critical_two(0.01, a.len(), b.len());
        let d = ks_two_sample(&mut a, &mut b);
        rows.push(check(name, stat, d, thr));
    }
    rows.push(info(name, "book_excursions", book.len() as f64));
    rows.push(info(name, "book_aborted", book_report.aborted_over_cap as f64));
    rows.push(info(name, "tree_samples", trees.taus.len() as f64));
    rows.push(info(name, "tree_rejected", trees.rejected as f64));
    rows.push(info(name, "tree_overflow", trees.overflow as f64));
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn excursion_iid(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
) -> ExperimentReport {
    let mut rows = Vec::new();
    let mut inconclusive = false;
    for &a in &cfg.u_list {
        let (exc, _) = collect_excursion_summaries(
            params,
            a as i64,
            cfg.replicas as usize,
            cfg.node_cap.max(2),
            replica_rng(cfg.seed, id, a as u8, 0),
        );
        if exc.len() < 100 {
            inconclusive = true;
            continue;
        }
        let jump_counts: Vec<f64> = exc.iter().map(|e| e.jump_count as f64).collect();
        let rho = spearman_lag1(&jump_counts);
        let ci = 1.96 / ((jump_counts.len() - 1) as f64).sqrt();
        rows.push(check(name, format!("spearman_abs_a{a}"), rho.abs(), ci));
        let heights: Vec<f64> = exc.iter().map(|e| e.height as f64).collect();
        let half = heights.len() / 2;
        let mut first = heights[..half].to_vec();
        let mut second = heights[half..].to_vec();
        let thr = ks_critical_two(0.01, first.len(), second.len());
        let d = ks_two_sample(&mut first, &mut second);
        rows.push(check(name, format!("ks_split_a{a}"), d, thr));
    }
    ExperimentReport::conclude(name, cfg.seed, rows, inconclusive)
}

fn idle_fraction(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
) -> ExperimentReport {
    let horizon = cfg.horizon;
    let per_path = par_blocks(cfg.replicas, 1, |range| {
        range
            .map(|r| {
                let s = run_marks(
                    params,
                    OrderBook::new(),
                    &[horizon],
                    &[],
                    &[],
                    replica_rng(cfg.seed, id, 0, r),
                );
                let last = s.last().expect("one mark");
                (last.time_mass_zero, last.ell)
            })
            .collect::<Vec<_>>()
    });
    let (mut tmz, mut ell) = (0.0f64, 0.0f64);
    for (a, b) in per_path.into_iter().flatten() {
        tmz += a;
        ell += b;
    }
    let ratio = tmz / ell;
    let t = cfg.jumps.mean();
    let rows = vec![
        info(name, "idle_fraction", ratio),
        check(name, "abs_dev", (ratio - t).abs(), 0.02),
        info(name, "price_zero_time", ell),
        info(name, "paths", cfg.replicas as f64),
    ];
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

#[derive(Clone, Copy)]
enum Marginal {
    Price,
    Mass,
}

fn marginal(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
    kind: Marginal,
) -> ExperimentReport {
    let sigma2 = match kind {
        Marginal::Price => {
            2.0 * cfg.lambda * cfg.jumps.mean() * cfg.jumps.mean()
        }
        Marginal::Mass => 2.0 * cfg.lambda,
    };
    let sample_at = |n: u32, lane: u8, replicas: u64| -> Vec<f64> {
        let horizon = (n as f64) * (n as f64) * cfg.t;
        sim_mark_samples(params, cfg.seed, id, lane, replicas, &[horizon], &[], &[])
            .iter()
            .map(|s| {
                let last = s.last().expect("one mark");
                match kind {
                    Marginal::Price => last.price as f64 / n as f64,
                    Marginal::Mass => last.mass as f64 / n as f64,
                }
            })
            .collect()
    };
    let ks_of = |samples: &mut Vec<f64>| -> f64 {
        ks_one_sample(samples, |x| folded_normal_cdf(sigma2, cfg.t, x))
    };
    let mut main = sample_at(cfg.n, 0, cfg.replicas);
    let mean = main.iter().sum::<f64>() / main.len() as f64;
    let ks_main = ks_of(&mut main);
    // n-trend runs use more replicas: the finite-n KS gap is smaller than
    // the sampling noise at the base replica count
    let trend_replicas = cfg.replicas * 4;
    let mut small = sample_at(cfg.n / 2, 1, trend_replicas);
    let mut large = sample_at(cfg.n * 2, 2, trend_replicas);
    let ks_small = ks_of(&mut small);
    let ks_large = ks_of(&mut large);
    let mut rows = vec![
        check(name, format!("ks_n{}", cfg.n), ks_main, 0.08),
        info(name, format!("ks_n{}", cfg.n / 2), ks_small),
        info(name, format!("ks_n{}", cfg.n * 2), ks_large),
        check(name, "ks_trend", ks_large - ks_small, 0.0),
    ];
    if let Marginal::Mass = kind {
        let t_mean = folded_normal_mean(sigma2, cfg.t);
        rows.push(info(name, "mean", mean));
        rows.push(check(
            name,
            "mean_dev",
            (mean - t_mean).abs(),
            0.05 * t_mean,
        ));
    }
    ExperimentReport::conclude(name, cfg.seed, rows, false)
}

fn ratio_mass_price(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
) -> Result<ExperimentReport, HarnessError> {
    if cfg.u_list.len() < 2 {
        return Err(HarnessError::BadConfig(
            "ratio_mass_price needs at least two n values in u-list".into(),
        ));
    }
    let mut n_list: Vec<u32> = cfg.u_list.iter().map(|&u| u as u32).collect();
    n_list.sort_unstable();
    let ej = cfg.jumps.mean();
    let base_n = n_list[0] as f64;
    let mut rows = Vec::new();
    let mut devs = Vec::new();
    for (i, &n) in n_list.iter().enumerate() {
        // larger n costs more per path; scale replicas down as 1/sqrt(n)
        let replicas = ((cfg.replicas as f64 * (base_n / n as f64).sqrt()).round() as u64).max(100);
        let horizon = (n as f64) * (n as f64) * cfg.t;
        let samples =
            sim_mark_samples(params, cfg.seed, id, i as u8, replicas, &[horizon], &[], &[]);
        let mut m = Moments::default();
        for s in &samples {
            let last = s.last().expect("one mark");
            let mass = last.mass as f64 / n as f64;
            let price = last.price as f64 / n as f64;
            m.push((mass - price / ej).abs());
        }
        rows.push(info(name, format!("deviation_n{n}"), m.mean()));
        devs.push(m.mean());
    }
    let first = devs[0];
    let last = *devs.last().expect("nonempty");
    rows.push(check(name, "halving_ratio", last / first, 0.5));
    rows.push(check(name, "abs_cap", last, 0.2));
    Ok(ExperimentReport::conclude(name, cfg.seed, rows, false))
}

fn density_profile(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
) -> ExperimentReport {
    let n = cfg.n;
    let p0 = 0.5;
    let ej = cfg.jumps.mean();
    let horizon = (n as f64) * (n as f64) * cfg.t;
    let count_levels: Vec<i64> = cfg
        .y_list
        .iter()
        .map(|&y| (y * n as f64 + 1e-9).floor() as i64)
        .collect();
    let samples = sim_mark_samples(
        params,
        cfg.seed,
        id,
        0,
        cfg.replicas,
        &[horizon],
        &[],
        &count_levels,
    );
    let hits: Vec<&MarkSample> = samples
        .iter()
        .map(|s| s.last().expect("one mark"))
        .filter(|s| s.price as f64 / n as f64 > p0)
        .collect();
    let mut rows = vec![info(name, "conditioning_hits", hits.len() as f64)];
    let inconclusive = hits.len() < 100;
    for (i, &y) in cfg.y_list.iter().enumerate() {
        let mut m = Moments::default();
        for s in &hits {
            let scaled_mass = s.count_le[i] as f64 / n as f64;
            m.push(ej * scaled_mass / y);
        }
        rows.push(info(name, format!("profile_y{y}"), m.mean()));
        if !inconclusive {
            rows.push(check(
                name,
                format!("profile_dev_y{y}"),
                (m.mean() - 1.0).abs(),
                0.15,
            ));
        }
    }
    ExperimentReport::conclude(name, cfg.seed, rows, inconclusive)
}

fn local_time(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    name: &'static str,
    id: u8,
) -> Result<ExperimentReport, HarnessError> {
    if cfg.eps_list.is_empty() {
        return Err(HarnessError::BadConfig(
            "local_time needs an eps-list".into(),
        ));
    }
    let n = cfg.n as f64;
    let t = cfg.t;
    let occ_levels: Vec<i64> = cfg
        .eps_list
        .iter()
        .map(|&e| (e * n + 1e-9).floor() as i64)
        .collect();
    let marks = [n * n * t, 4.0 * n * n * t];
    let samples = sim_mark_samples(
        params,
        cfg.seed,
        id,
        0,
        cfg.replicas,
        &marks,
        &occ_levels,
        &[],
    );
    let mut l_price = Moments::default();
    let mut l_mass = Moments::default();
    let mut l_price_4t = Moments::default();
    let mut occ_dev = vec![Moments::default(); cfg.eps_list.len()];
    let (mut tmz_total, mut ell_total) = (0.0f64, 0.0f64);
    for s in &samples {
        let at_t = &s[0];
        let at_4t = &s[1];
        let lp = at_t.ell / n;
        l_price.push(lp);
        l_mass.push(at_t.time_mass_zero / n);
        l_price_4t.push(at_4t.ell / n);
        tmz_total += at_t.time_mass_zero;
        ell_total += at_t.ell;
        for (i, &eps) in cfg.eps_list.iter().enumerate() {
            let occ = at_t.occ_le[i] / (eps * n * n);
            occ_dev[i].push((lp - occ).abs());
        }
    }
    let alpha = params.alpha();
    let ej = cfg.jumps.mean();
    let target_price = local_time_mean(alpha * ej, t);
    let target_mass = local_time_mean(alpha, t);
    let ratio = tmz_total / ell_total;
    let mut rows = vec![
        info(name, "mean_l_price", l_price.mean()),
        check(
            name,
            "l_price_dev",
            (l_price.mean() - target_price).abs(),
            0.1 * target_price,
        ),
        info(name, "mean_l_mass", l_mass.mean()),
        info(name, "l_mass_target", target_mass),
        info(name, "ratio_mass_price", ratio),
        check(name, "ratio_dev", (ratio - ej).abs(), 0.05),
    ];
    for (i, &eps) in cfg.eps_list.iter().enumerate() {
        rows.push(info(name, format!("occ_gap_eps{eps}"), occ_dev[i].mean()));
        if i > 0 {
            rows.push(check(
                name,
                format!("occ_gap_step{i}"),
                occ_dev[i].mean() - occ_dev[i - 1].mean(),
                0.0,
            ));
        }
    }
    let doubling = l_price_4t.mean() / l_price.mean();
    rows.push(info(name, "quadrupled_t_ratio", doubling));
    rows.push(check(name, "doubling_dev", (doubling - 2.0).abs(), 0.3));
    Ok(ExperimentReport::conclude(name, cfg.seed, rows, false))
}
