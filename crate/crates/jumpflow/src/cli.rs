//! Command-line front end: scenario runner, verification pipelines,
//! reproducible configs, and machine-readable outputs.
//!
//! Exit codes: 0 = success / all verdicts pass, 1 = verification failure or
//! diverged paths, 2 = usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Once;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::empirical::{quantile_cloud, wasserstein1_1d, MarginalFlow, ProbCloud};
use crate::error::{Error, Result};
use crate::model::{audit_linear_growth, CoefficientSet, ProbeSpec};
use crate::oracle::{fp_grid_solve, grid_to_cloud, scenario, GridSpec, Scenario, SCENARIO_NAMES};
use crate::simulate::{
    simulate_base_paths, simulate_regularized_paths, smoothed_cloud_sample, uniform_grid,
    InitialLaw, PathEnsemble,
};
use crate::verify::{
    compact_bank, martingale_statistic, weak_residual, write_residual_csv, GeneratorMode,
    ResidualMode, ResidualReport, Window,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Per-epsilon W1 budget used by the chain pipeline.
pub const CHAIN_W1_TOL: f64 = 0.03;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct VerifyConfig {
    /// Evaluation times; defaults to the grid horizon.
    #[serde(default)]
    pub times: Vec<f64>,
    /// Named corruption applied to the dynamics before verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_control: Option<String>,
    /// Extra probe report to emit (`growth`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FpConfig {
    pub l: f64,
    pub m: usize,
    pub dt: f64,
    #[serde(default)]
    pub times: Vec<f64>,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self {
            l: 30.0,
            m: 3000,
            dt: 1e-3,
            times: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub svg: bool,
}

/// Everything a run needs; serialized as `config.echo.json` so any run can be
/// reproduced bit-exactly from its output directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub scenario: String,
    pub grid: GridConfig,
    pub mc: McConfig,
    /// Mollification levels; drives the regularized simulator when nonempty.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub fp: FpConfig,
    pub output: OutputConfig,
}

#[derive(Parser, Debug)]
#[command(
    name = "jumpflow",
    about = "Simulate jumping SDEs with rough coefficients and verify their nonlocal Fokker-Planck marginals"
)]
struct Cli {
    /// Worker thread cap (falls back to JUMPFLOW_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Parser)]
struct CommonArgs {
    /// Registered scenario name.
    #[arg(long, default_value = "compound-poisson")]
    scenario: String,
    /// Time horizon.
    #[arg(long, default_value_t = 1.0)]
    t_end: f64,
    /// Number of uniform time steps (overridden by --dt).
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Step size; converted to a step count on [0, t_end].
    #[arg(long)]
    dt: Option<f64>,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Emit a minimal SVG next to each tabular report.
    #[arg(long, default_value_t = false)]
    svg: bool,
    /// Load the full run configuration from a config.echo.json instead of
    /// the flags above (--out still applies).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the base (or, with --epsilon, regularized) SDE simulator.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Mollification level; switches to the regularized simulator.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Weak-PDE residual sweep over the compact test bank.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluation times (defaults to t_end).
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        /// Corrupt the dynamics before testing (`double-drift`).
        #[arg(long)]
        negative_control: Option<String>,
        /// Emit an extra probe report (`growth`).
        #[arg(long)]
        probe: Option<String>,
    },
    /// Mollify, simulate the regularized SDE, and check marginals and the
    /// martingale statistic for each epsilon.
    Chain {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated mollification levels.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
    },
    /// Solve the nonlocal Fokker-Planck equation on a 1D grid.
    FpSolve {
        #[command(flatten)]
        common: CommonArgs,
        /// Domain half-width.
        #[arg(long, default_value_t = 30.0)]
        l: f64,
        /// Cell count.
        #[arg(long, default_value_t = 3000)]
        m: usize,
        /// Solver step size.
        #[arg(long, default_value_t = 1e-3)]
        fp_dt: f64,
        /// Snapshot times (defaults to t_end).
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
    },
    /// Scenario registry operations.
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(Subcommand, Debug)]
enum ScenarioAction {
    /// List registered scenarios.
    List,
}

static THREAD_POOL: Once = Once::new();

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("JUMPFLOW_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        THREAD_POOL.call_once(|| {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        });
    }
}

fn common_to_config(command: &str, common: &CommonArgs) -> Result<RunConfig> {
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.output.dir = common.out.clone();
        return Ok(cfg);
    }
    if !(common.t_end > 0.0) {
        return Err(Error::Config("t_end must be positive".into()));
    }
    let steps = match common.dt {
        Some(dt) if dt > 0.0 && dt <= common.t_end => {
            (common.t_end / dt).round().max(1.0) as usize
        }
        Some(dt) => return Err(Error::Config(format!("invalid dt {dt}"))),
        None => common.steps,
    };
    if steps == 0 {
        return Err(Error::Config("need at least one step".into()));
    }
    Ok(RunConfig {
        command: command.to_string(),
        scenario: common.scenario.clone(),
        grid: GridConfig {
            t_end: common.t_end,
            steps,
        },
        mc: McConfig {
            n_paths: common.n,
            seed: common.seed,
        },
        epsilons: Vec::new(),
        verify: VerifyConfig::default(),
        fp: FpConfig::default(),
        output: OutputConfig {
            dir: common.out.clone(),
            svg: common.svg,
        },
    })
}

fn write_echo(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output.dir)?;
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(cfg.output.dir.join("config.echo.json"), text + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

/// Minimal SVG polyline over a numeric series, for quick inspection.
fn write_svg(path: &Path, series: &[(f64, f64)]) -> Result<()> {
    let (w, h) = (640.0, 360.0);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in series {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0.is_finite() && y0.is_finite()) || series.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let sx = |x: f64| 20.0 + (w - 40.0) * (x - x0) / (x1 - x0).max(1e-300);
    let sy = |y: f64| h - 20.0 - (h - 40.0) * (y - y0) / (y1 - y0).max(1e-300);
    let points: Vec<String> = series
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\
         </svg>\n",
        points.join(" ")
    );
    fs::write(path, svg)?;
    Ok(())
}

/// Marginal flow for a scenario on the given grid: exact when the registry
/// has closed-form marginals, otherwise grid-solved and coarsened to
/// equal-weight quantile atoms.
pub fn scenario_flow(scn: &Scenario, grid: &[f64], quantile_atoms: usize) -> Result<MarginalFlow> {
    if let Some(flow) = scn.exact_flow(grid) {
        return Ok(flow);
    }
    let t_end = *grid.last().unwrap();
    let spec = GridSpec { l: 30.0, m: 3000 };
    let run = |dt: f64| fp_grid_solve(scn, spec, t_end, dt, grid);
    let snapshots = match run(1e-3) {
        Err(Error::Stability { suggested, .. }) => run(suggested)?,
        other => other?,
    };
    let clouds = snapshots
        .iter()
        .map(|g| quantile_cloud(&grid_to_cloud(g)?, quantile_atoms))
        .collect::<Result<Vec<_>>>()?;
    MarginalFlow::new(grid.to_vec(), clouds)
}

fn cmd_simulate(cfg: &RunConfig, epsilon: Option<f64>) -> Result<i32> {
    let mut cfg = cfg.clone();
    if let Some(eps) = epsilon {
        cfg.epsilons = vec![eps];
    }
    let scn = scenario(&cfg.scenario)?;
    let grid = uniform_grid(cfg.grid.t_end, cfg.grid.steps);
    let ens = match cfg.epsilons.first() {
        None => simulate_base_paths(
            &scn.coeffs,
            &scn.kernel,
            &InitialLaw::Cloud(scn.initial.clone()),
            &grid,
            cfg.mc.n_paths,
            cfg.mc.seed,
        ),
        Some(&eps) => {
            let flow = scenario_flow(&scn, &grid, 128)?;
            simulate_regularized_paths(
                &scn.coeffs,
                &scn.kernel,
                &flow,
                eps,
                &grid,
                cfg.mc.n_paths,
                cfg.mc.seed,
            )
        }
    };
    let ens = match ens {
        Ok(e) => e,
        Err(Error::DivergedPaths { .. }) => return Ok(EXIT_VERIFICATION_FAILED),
        Err(e) => return Err(e),
    };
    write_echo(&cfg)?;
    let mut csv = Vec::new();
    ens.write_csv(&mut csv)?;
    fs::write(cfg.output.dir.join("ensemble.csv"), csv)?;
    write_json(&cfg.output.dir, "summary.json", &ens.summary())?;
    if cfg.output.svg {
        let mean_path: Vec<(f64, f64)> = ens
            .grid()
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let m = ens.states().iter().map(|p| p[k][0]).sum::<f64>()
                    / ens.n_paths() as f64;
                (t, m)
            })
            .collect();
        write_svg(&cfg.output.dir.join("ensemble.svg"), &mean_path)?;
    }
    Ok(EXIT_OK)
}

fn apply_negative_control(scn: &mut Scenario, name: &str) -> Result<()> {
    match name {
        "double-drift" => {
            let inner = scn.coeffs.clone();
            scn.coeffs = CoefficientSet::new(
                inner.dim(),
                inner.horizon(),
                {
                    let inner = inner.clone();
                    std::sync::Arc::new(move |t, x: &nalgebra::DVector<f64>| {
                        inner.drift(t, x) * 2.0
                    })
                },
                std::sync::Arc::new(move |t, x: &nalgebra::DVector<f64>| inner.sigma(t, x)),
            );
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown negative control '{other}' (try double-drift)"
        ))),
    }
}

#[derive(Serialize)]
struct VerifySummary {
    pass: usize,
    fail: usize,
    all_pass: bool,
}

fn mc_flow(scn: &Scenario, cfg: &RunConfig, grid: &[f64]) -> Result<(MarginalFlow, f64)> {
    let ens = simulate_base_paths(
        &scn.coeffs,
        &scn.kernel,
        &InitialLaw::Cloud(scn.initial.clone()),
        grid,
        cfg.mc.n_paths,
        cfg.mc.seed,
    )?;
    let clouds = grid
        .iter()
        .map(|&t| ens.marginal_at(t))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        MarginalFlow::new(grid.to_vec(), clouds)?,
        (cfg.mc.n_paths as f64).sqrt(),
    ))
}

fn cmd_verify(cfg: &RunConfig) -> Result<i32> {
    let mut scn = scenario(&cfg.scenario)?;
    let baseline = scenario(&cfg.scenario)?;
    if let Some(name) = &cfg.verify.negative_control {
        apply_negative_control(&mut scn, name)?;
    }
    let grid = uniform_grid(cfg.grid.t_end, cfg.grid.steps);
    let dt = cfg.grid.t_end / cfg.grid.steps as f64;
    // The flow always comes from the uncorrupted dynamics; the residual is
    // evaluated with the (possibly corrupted) generator.
    let (flow, mc_scale) = match baseline.exact_flow(&grid) {
        Some(flow) => (flow, None),
        None => {
            let (flow, sqrt_n) = mc_flow(&baseline, cfg, &grid)?;
            (flow, Some(sqrt_n))
        }
    };
    let times = if cfg.verify.times.is_empty() {
        vec![cfg.grid.t_end]
    } else {
        cfg.verify.times.clone()
    };

    let bank = compact_bank(scn.coeffs.dim());
    let mut reports: Vec<ResidualReport> = Vec::new();
    for &t in &times {
        for psi in &bank {
            // Statistical budget for MC flows: a conservative per-term bound
            // assembled from the cloud variances.
            let se = mc_scale.map(|sqrt_n| {
                let sd = |cloud: &ProbCloud, f: &dyn Fn(&nalgebra::DVector<f64>) -> f64| {
                    let mean: f64 = cloud
                        .points()
                        .iter()
                        .zip(cloud.weights())
                        .map(|(x, w)| w * f(x))
                        .sum();
                    let var: f64 = cloud
                        .points()
                        .iter()
                        .zip(cloud.weights())
                        .map(|(x, w)| w * (f(x) - mean).powi(2))
                        .sum();
                    var.sqrt()
                };
                let value_fn = |x: &nalgebra::DVector<f64>| psi.value(x);
                let mut budget = sd(flow.cloud_at(t), &value_fn) + sd(&flow.clouds()[0], &value_fn);
                let gen_fn = |x: &nalgebra::DVector<f64>| {
                    crate::verify::apply_generator(&baseline.coeffs, &baseline.kernel, psi, t, x)
                        .map(|(a, b)| a + b)
                        .unwrap_or(0.0)
                };
                budget += t * sd(flow.cloud_at(t), &gen_fn);
                budget / sqrt_n
            });
            reports.push(weak_residual(
                &flow,
                &scn.coeffs,
                &scn.kernel,
                psi,
                t,
                ResidualMode::Plain,
                baseline.tol.residual_c_fit * dt,
                se,
            )?);
        }
    }

    write_echo(cfg)?;
    let mut csv = Vec::new();
    write_residual_csv(&reports, &mut csv)?;
    fs::write(cfg.output.dir.join("residuals.csv"), csv)?;
    let pass = reports.iter().filter(|r| r.verdict).count();
    let summary = VerifySummary {
        pass,
        fail: reports.len() - pass,
        all_pass: pass == reports.len(),
    };
    write_json(&cfg.output.dir, "summary.json", &summary)?;

    if cfg.verify.probe.as_deref() == Some("growth") {
        let spec = ProbeSpec {
            t_grid: times.clone(),
            radii: vec![1.0, 10.0, 100.0],
            samples_per_radius: 200,
            seed: cfg.mc.seed,
        };
        let report = audit_linear_growth(&scn.coeffs, &scn.kernel, &spec)?;
        write_json(&cfg.output.dir, "growth.json", &report)?;
    }
    if cfg.output.svg && !reports.is_empty() {
        let series: Vec<(f64, f64)> = reports
            .iter()
            .enumerate()
            .map(|(i, r)| (i as f64, r.residual))
            .collect();
        write_svg(&cfg.output.dir.join("residuals.svg"), &series)?;
    }
    Ok(if summary.all_pass {
        EXIT_OK
    } else {
        EXIT_VERIFICATION_FAILED
    })
}

#[derive(Debug, Serialize)]
pub struct ChainRow {
    pub epsilon: f64,
    pub w1: f64,
    pub w1_tol: f64,
    pub sup_norm_moment: f64,
    pub k_hat: f64,
    pub k_se: f64,
    pub k_budget: f64,
    pub pass: bool,
}

/// One epsilon leg of the regularized chain: simulate against the flow,
/// compare the terminal marginal with the smoothed flow cloud, and run the
/// mollified martingale battery.
pub fn chain_step(
    scn: &Scenario,
    flow: &MarginalFlow,
    eps: f64,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<(ChainRow, PathEnsemble)> {
    let t_end = *grid.last().unwrap();
    let dt = t_end / (grid.len() - 1) as f64;
    let ens = simulate_regularized_paths(
        &scn.coeffs,
        &scn.kernel,
        flow,
        eps,
        grid,
        n_paths,
        seed,
    )?;
    let marginal = ens.marginal_at(t_end)?;
    let reference = smoothed_cloud_sample(
        flow.cloud_at(t_end),
        eps,
        n_paths,
        seed ^ 0x5eed_0f0f,
    )?;
    let w1 = wasserstein1_1d(&marginal, &reference)?;

    let bank = compact_bank(scn.coeffs.dim());
    let window = Window {
        obs_times: vec![grid[grid.len() / 5], grid[2 * grid.len() / 5]],
        s: grid[grid.len() / 2],
        t: t_end,
    };
    let mode = GeneratorMode::Mollified { flow, eps };
    // The martingale budget carries its own standard error, so a prefix
    // subsample keeps the battery cost flat in N.
    let battery_ens = ens.subsample(10_000);
    let mut k_worst = (0.0f64, f64::INFINITY);
    for psi in bank.iter().take(3) {
        let (k_hat, se) = martingale_statistic(
            &battery_ens,
            &scn.coeffs,
            &scn.kernel,
            &mode,
            &window,
            &bank[0..2],
            psi,
        )?;
        if k_hat.abs() - 3.0 * se > k_worst.0.abs() - 3.0 * k_worst.1 {
            k_worst = (k_hat, se);
        }
    }
    let k_budget = 3.0 * k_worst.1 + scn.tol.martingale_c_fit * dt;
    let row = ChainRow {
        epsilon: eps,
        w1,
        w1_tol: CHAIN_W1_TOL,
        sup_norm_moment: ens.sup_norm_moment(),
        k_hat: k_worst.0,
        k_se: k_worst.1,
        k_budget,
        pass: w1 <= CHAIN_W1_TOL && k_worst.0.abs() <= k_budget,
    };
    Ok((row, ens))
}

fn cmd_chain(cfg: &RunConfig) -> Result<i32> {
    if cfg.epsilons.is_empty() {
        return Err(Error::Config(
            "chain requires --epsilons (e.g. --epsilons 0.5,0.1,0.02)".into(),
        ));
    }
    let scn = scenario(&cfg.scenario)?;
    let grid = uniform_grid(cfg.grid.t_end, cfg.grid.steps);
    let flow = scenario_flow(&scn, &grid, 128)?;
    let mut rows = Vec::new();
    for &eps in &cfg.epsilons {
        let (row, _) = chain_step(&scn, &flow, eps, &grid, cfg.mc.n_paths, cfg.mc.seed)?;
        rows.push(row);
    }
    write_echo(cfg)?;
    let mut csv = String::from("epsilon,w1,w1_tol,sup_norm_moment,k_hat,k_se,k_budget,pass\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:.6},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.epsilon, r.w1, r.w1_tol, r.sup_norm_moment, r.k_hat, r.k_se, r.k_budget,
            if r.pass { "pass" } else { "fail" }
        ));
    }
    fs::write(cfg.output.dir.join("chain.csv"), csv)?;
    write_json(&cfg.output.dir, "summary.json", &rows)?;
    if cfg.output.svg {
        let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon, r.w1)).collect();
        write_svg(&cfg.output.dir.join("chain.svg"), &series)?;
    }
    Ok(if rows.iter().all(|r| r.pass) {
        EXIT_OK
    } else {
        EXIT_VERIFICATION_FAILED
    })
}

#[derive(Serialize)]
struct FpSummary {
    times: Vec<f64>,
    leaked_mass: f64,
    clipped_mass: f64,
}

fn cmd_fp_solve(cfg: &RunConfig) -> Result<i32> {
    let scn = scenario(&cfg.scenario)?;
    let times = if cfg.fp.times.is_empty() {
        vec![cfg.grid.t_end]
    } else {
        cfg.fp.times.clone()
    };
    let spec = GridSpec {
        l: cfg.fp.l,
        m: cfg.fp.m,
    };
    let snapshots = fp_grid_solve(&scn, spec, cfg.grid.t_end, cfg.fp.dt, &times)?;
    write_echo(cfg)?;
    for g in &snapshots {
        let mut csv = Vec::new();
        g.write_csv(&mut csv)?;
        fs::write(cfg.output.dir.join(format!("fp_t{:.4}.csv", g.t)), csv)?;
        if cfg.output.svg {
            let series: Vec<(f64, f64)> = g
                .centers()
                .iter()
                .zip(&g.cell_avg)
                .map(|(&c, &v)| (c, v))
                .collect();
            write_svg(&cfg.output.dir.join(format!("fp_t{:.4}.svg", g.t)), &series)?;
        }
    }
    let last = snapshots.last().unwrap();
    write_json(
        &cfg.output.dir,
        "summary.json",
        &FpSummary {
            times,
            leaked_mass: last.leaked_mass,
            clipped_mass: last.clipped_mass,
        },
    )?;
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> Result<i32> {
    configure_threads(cli.threads);
    match cli.command {
        Command::Simulate { common, epsilon } => {
            let cfg = common_to_config("simulate", &common)?;
            cmd_simulate(&cfg, epsilon)
        }
        Command::Verify {
            common,
            times,
            negative_control,
            probe,
        } => {
            let mut cfg = common_to_config("verify", &common)?;
            if common.config.is_none() {
                cfg.verify = VerifyConfig {
                    times,
                    negative_control,
                    probe,
                };
            }
            cmd_verify(&cfg)
        }
        Command::Chain { common, epsilons } => {
            let mut cfg = common_to_config("chain", &common)?;
            if common.config.is_none() {
                cfg.epsilons = epsilons;
            }
            cmd_chain(&cfg)
        }
        Command::FpSolve {
            common,
            l,
            m,
            fp_dt,
            times,
        } => {
            let mut cfg = common_to_config("fp-solve", &common)?;
            if common.config.is_none() {
                cfg.fp = FpConfig {
                    l,
                    m,
                    dt: fp_dt,
                    times,
                };
            }
            cmd_fp_solve(&cfg)
        }
        Command::Scenario { action } => match action {
            ScenarioAction::List => {
                for name in SCENARIO_NAMES {
                    let s = scenario(name)?;
                    println!("{name}: {}", s.notes);
                }
                Ok(EXIT_OK)
            }
        },
    }
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with success.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Error::DivergedPaths { .. }) => EXIT_VERIFICATION_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = RunConfig {
            command: "chain".into(),
            scenario: "ou-jump".into(),
            grid: GridConfig {
                t_end: 1.0,
                steps: 100,
            },
            mc: McConfig {
                n_paths: 1000,
                seed: 7,
            },
            epsilons: vec![0.5, 0.1],
            verify: VerifyConfig::default(),
            fp: FpConfig::default(),
            output: OutputConfig {
                dir: PathBuf::from("/tmp/x"),
                svg: false,
            },
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn scenario_flow_uses_exact_marginals_when_available() {
        let scn = scenario("compound-poisson").unwrap();
        let grid = uniform_grid(1.0, 10);
        let flow = scenario_flow(&scn, &grid, 64).unwrap();
        // Exact Poisson clouds, not quantile coarsenings.
        let p0 = flow.cloud_at(1.0).weights()[0];
        assert!((p0 - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn scenario_flow_grid_solves_rough_scenarios() {
        let scn = scenario("two-sided-jumps").unwrap();
        let grid = uniform_grid(0.5, 5);
        let flow = scenario_flow(&scn, &grid, 32).unwrap();
        assert!(flow.cloud_at(0.5).len() <= 32);
        // Symmetric law: median atom near 0.
        let m1 = flow.cloud_at(0.5).first_moment();
        assert!(m1 < 1.5);
    }

    #[test]
    fn negative_control_requires_known_name() {
        let mut scn = scenario("pure-drift").unwrap();
        assert!(apply_negative_control(&mut scn, "double-drift").is_ok());
        let x = nalgebra::DVector::from_column_slice(&[1.0]);
        assert_eq!(scn.coeffs.drift(0.0, &x)[0], -2.0);
        assert!(apply_negative_control(&mut scn, "nope").is_err());
    }

    #[test]
    fn svg_writer_emits_polyline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        write_svg(&path, &[(0.0, 1.0), (1.0, 2.0), (2.0, 0.5)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
    }
}
