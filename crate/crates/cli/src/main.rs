//! `otcal`: synthetic market generation, calibration, pricing, simulation
//! and reporting on top of `otcal-core`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use otcal_core::calib::{self, CalibrationReport, ReportRow};
use otcal_core::config::{Config, Problem};
use otcal_core::hjb::SolveOptions;
use otcal_core::io::{self, McRow, SkewRow};
use otcal_core::pricing::{self, ModelSurfaces};
use otcal_core::validate::{self, Dynamics, McSettings, TestFunction};
use otcal_core::Error;

const EXIT_NON_CONVERGENCE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "otcal", version, about = "Optimal-transport calibration of local volatility under Hull-White rates")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Problem configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Grid size override, e.g. 50x50.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Number of smoothing epochs after the first calibration.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Monte Carlo seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Price the instruments under the generating model and write market.csv.
    GenData,
    /// Calibrate to market.csv; writes report.csv, lambda.csv, trace.csv and beta11_t{k}.csv.
    Calibrate {
        /// Market quotes; defaults to OUT/market.csv.
        #[arg(long)]
        market: Option<PathBuf>,
        /// Also dump the value function slices phi_t{k}.csv.
        #[arg(long)]
        dump_phi: bool,
    },
    /// Reprice the instruments under a model and write prices.csv.
    Price {
        #[arg(long, value_enum, default_value_t = Model::Calibrated)]
        model: Model,
        #[arg(long)]
        market: Option<PathBuf>,
    },
    /// Simulate paths; writes paths_sample.csv, density_check.csv and mc_prices.csv.
    Simulate {
        #[arg(long, value_enum, default_value_t = Model::Generating)]
        model: Model,
        /// Path count override.
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Implied-volatility skews of the three models, skew_{maturity}.csv.
    Report {
        /// Strikes of the skew ladder as start:stop:step.
        #[arg(long, default_value = "70:140:2.5")]
        strikes: String,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Model {
    Generating,
    Reference,
    Calibrated,
}

/// A failure carrying its exit status.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::Invalid(_) | Error::OffGrid(_) | Error::GridMismatch) => EXIT_CONFIG,
            Some(Error::Io(_) | Error::Csv(_)) | None => 1,
            Some(_) => EXIT_NUMERICAL,
        };
        Self { code, error }
    }
}

fn config_error(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_CONFIG, error: anyhow!("{msg}") }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NxM, got {s:?}"))?;
    let n = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((n(a)?, n(b)?))
}

fn strike_ladder(raw: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<f64> = raw.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(config_error)?;
    match parts[..] {
        [k] => Ok(vec![k]),
        [a, b, h] if h > 0.0 && b >= a && a > 0.0 => {
            let n = ((b - a) / h + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| a + i as f64 * h).collect())
        }
        _ => Err(config_error(format!("bad strike ladder {raw:?}"))),
    }
}

fn init_logging(run: &RunArgs) {
    let level = if run.quiet {
        log::LevelFilter::Error
    } else if run.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).parse_default_env().init();
}

/// Loads the config and applies the command-line overrides.
fn load_config(run: &RunArgs) -> CliResult<Config> {
    let path = run.config.as_ref().ok_or_else(|| config_error("--config is required"))?;
    let mut cfg = Config::load(path)?;
    if let Some((n_z, n_r)) = run.grid {
        cfg = cfg.with_grid(n_z, n_r);
    }
    if let Some(e) = run.epochs {
        cfg.settings.smoothing_epochs = e;
    }
    if let Some(s) = run.seed {
        cfg.simulation.seed = s;
    }
    Ok(cfg)
}

fn market_path(run: &RunArgs, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| run.out.join("market.csv"))
}

/// Installs quoted prices on the config's instruments, matching on
/// maturity and strike.
fn attach_market(cfg: &mut Config, path: &Path) -> CliResult<()> {
    if !path.exists() {
        return Err(config_error(format!("market file {} not found; run gen-data first", path.display())));
    }
    let quotes = io::load_market(path)?;
    for inst in &mut cfg.instruments {
        let q = quotes
            .iter()
            .find(|q| q.maturity_days == inst.maturity_days && (q.strike - inst.strike).abs() <= 1e-9 * inst.strike)
            .ok_or_else(|| config_error(format!("no market quote for {} days, strike {}", inst.maturity_days, inst.strike)))?;
        inst.price = Some(q.price);
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> otcal_core::Result<()>) -> CliResult<()> {
    let mut w = io::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(&mut w)?;
    w.flush()?;
    info!("wrote {}", path.display());
    Ok(())
}

fn surfaces(problem: &Problem, model: Model, out: &Path) -> CliResult<ModelSurfaces> {
    let sigma_r = problem.hw.sigma_r;
    Ok(match model {
        Model::Generating => ModelSurfaces::generating(problem.grid, &problem.generating, sigma_r)?,
        Model::Reference => ModelSurfaces::reference(&problem.reference, sigma_r),
        Model::Calibrated => {
            let n = problem.time.n_steps();
            if !io::slice_path(out, "beta11", 0).exists() {
                return Err(config_error(format!("no calibrated surfaces in {}; run calibrate first", out.display())));
            }
            let slices = io::read_slices(out, "beta11", problem.grid, n).context("reading calibrated surfaces")?;
            let s = ModelSurfaces::calibrated(slices, &problem.reference, sigma_r);
            s.validate(sigma_r)?;
            s
        }
    })
}

fn gen_data(run: &RunArgs) -> CliResult<()> {
    let problem = load_config(run)?.to_problem()?;
    let start = Instant::now();
    let prices = pricing::generate_market_prices(&problem)?;
    let quotes = io::market_quotes(&problem, &prices)?;
    for q in &quotes {
        info!("{:>4}d K={:<7} price {:.6}  iv {:.6}", q.maturity_days, q.strike, q.price, q.implied_vol);
    }
    info!("priced {} instruments in {:.2?}", quotes.len(), start.elapsed());
    write_file(&run.out.join("market.csv"), |w| io::write_market(w, &quotes))
}

fn calibrate(run: &RunArgs, market: &Option<PathBuf>, dump_phi: bool) -> CliResult<()> {
    let mut cfg = load_config(run)?;
    attach_market(&mut cfg, &market_path(run, market))?;
    let problem = cfg.to_problem()?;
    let result = calib::run_calibration(&problem)?;
    let report = CalibrationReport::build(&problem, &result)?;
    for r in &report.rows {
        info!(
            "{:>4}d K={:<7} market {:.6} model {:.6}  iv error {:+.2e}",
            r.maturity_days,
            r.strike,
            r.market_price,
            r.model_price,
            r.model_iv - r.market_iv
        );
    }
    info!(
        "|grad| = {:.3e} after {} iterations over {} smoothing epochs, {:.1} s",
        report.grad_sup, report.outer_iterations, report.epochs, report.wall_s
    );
    let out = &run.out;
    write_file(&out.join("report.csv"), |w| io::write_report(w, &report))?;
    write_file(&out.join("lambda.csv"), |w| io::write_lambda(w, &result.state.lambda))?;
    write_file(&out.join("trace.csv"), |w| io::write_trace(w, &result.trace))?;
    io::write_slices(out, "beta11", &result.beta11)?;
    info!("wrote {} beta11 slices", result.beta11.len());
    if dump_phi {
        let objective = calib::DualObjective::new(&problem, result.reference.clone(), &result.vegas)?;
        let sol = objective.solver.solve(&result.state.lambda, SolveOptions { keep_phi: true, sensitivities: false })?;
        io::write_slices(out, "phi", &sol.phi)?;
        info!("wrote {} phi slices", sol.phi.len());
    }
    if !report.converged {
        return Err(Failure {
            code: EXIT_NON_CONVERGENCE,
            error: anyhow!("calibration did not converge: |grad| = {:.3e}", report.grad_sup),
        });
    }
    Ok(())
}

fn price(run: &RunArgs, model: Model, market: &Option<PathBuf>) -> CliResult<()> {
    let mut cfg = load_config(run)?;
    attach_market(&mut cfg, &market_path(run, market))?;
    let problem = cfg.to_problem()?;
    let s = surfaces(&problem, model, &run.out)?;
    let prices = pricing::price_calls(&problem, &s, &problem.instruments)?;
    let rows = problem
        .instruments
        .iter()
        .zip(&prices)
        .enumerate()
        .map(|(i, (inst, &p))| {
            Ok(ReportRow {
                maturity_days: inst.maturity_days,
                strike: inst.strike,
                market_price: inst.price,
                model_price: p,
                market_iv: problem.implied_vol(i, inst.price)?,
                model_iv: problem.implied_vol(i, p)?,
                grad: 0.0,
            })
        })
        .collect::<otcal_core::Result<Vec<_>>>()?;
    write_file(&run.out.join("prices.csv"), |w| io::write_prices(w, &rows))
}

/// Gaussian bumps along the log-price axis at the initial rate.
fn bump_functions(problem: &Problem) -> Vec<TestFunction> {
    let r0 = problem.hw.r0_scaled();
    [80.0f64, 86.0, 92.0, 98.0, 105.0]
        .iter()
        .map(|s| TestFunction::Gaussian { z0: s.ln(), r0, sz: 0.08, sr: 1.0 })
        .collect()
}

/// Four interior check times spread over the horizon.
fn check_nodes(problem: &Problem) -> Vec<usize> {
    let n = problem.time.n_steps();
    let mut v: Vec<usize> = [1, 3, 5, 7].iter().map(|&q| (q * n / 8).clamp(2, n.saturating_sub(2))).collect();
    v.dedup();
    v
}

fn simulate(run: &RunArgs, model: Model, paths: Option<usize>) -> CliResult<()> {
    let cfg = load_config(run)?;
    let problem = cfg.to_problem()?;
    let s = match model {
        Model::Generating => None,
        m => Some(surfaces(&problem, m, &run.out)?),
    };
    let dynamics = match &s {
        None => Dynamics::Generating(&problem.generating),
        Some(s) => Dynamics::Surfaces(s),
    };
    let mut settings = McSettings::from_problem(&problem);
    if let Some(p) = paths {
        settings.paths = p;
    }
    let start = Instant::now();
    let sample = validate::sample_paths(&problem, dynamics, 100, settings.seed)?;
    write_file(&run.out.join("paths_sample.csv"), |w| io::write_paths_sample(w, &problem.time, &sample))?;

    let checks = check_nodes(&problem);
    let mut nodes = validate::fp_record_nodes(&checks);
    let maturities: Vec<usize> = (0..problem.instruments.len()).map(|i| problem.maturity_node(i)).collect();
    nodes.extend(&maturities);
    nodes.sort_unstable();
    nodes.dedup();
    let batch = validate::euler_simulate(&problem, dynamics, &nodes, settings)?;
    info!("simulated {} paths in {:.2?}", settings.paths, start.elapsed());

    let functions = bump_functions(&problem);
    let fp = validate::discounted_fp_residual(&problem, &batch, dynamics, &functions, &checks)?;
    let outside = fp.iter().filter(|r| !r.within_bar()).count();
    if outside > 0 {
        warn!("{outside} of {} Fokker-Planck residuals exceed their error bar", fp.len());
    }
    write_file(&run.out.join("density_check.csv"), |w| io::write_density_check(w, &problem.time, &fp))?;

    let pde_surfaces = match s {
        Some(s) => s,
        None => ModelSurfaces::generating(problem.grid, &problem.generating, problem.hw.sigma_r)?,
    };
    let pde = pricing::price_calls(&problem, &pde_surfaces, &problem.instruments)?;
    let mut rows = Vec::new();
    for (i, inst) in problem.instruments.iter().enumerate() {
        let mc = batch.mc_price(problem.maturity_node(i), problem.hw.rate_scale, |z, _| inst.payoff(z))?;
        rows.push(McRow { maturity_days: inst.maturity_days, strike: inst.strike, pde_price: pde[i], mc });
    }
    write_file(&run.out.join("mc_prices.csv"), |w| io::write_mc_prices(w, &rows))
}

fn report(run: &RunArgs, ladder: &str) -> CliResult<()> {
    let problem = load_config(run)?.to_problem()?;
    let strikes = strike_ladder(ladder)?;
    let models = [Model::Generating, Model::Reference, Model::Calibrated];
    let all: Vec<ModelSurfaces> = models.iter().map(|&m| surfaces(&problem, m, &run.out)).collect::<CliResult<_>>()?;
    let mut maturities: Vec<u32> = problem.instruments.iter().map(|i| i.maturity_days).collect();
    maturities.sort_unstable();
    maturities.dedup();
    for d in maturities {
        let calls = strikes.iter().map(|&k| problem.call(d, k)).collect::<otcal_core::Result<Vec<_>>>()?;
        let mut ivs: Vec<Vec<f64>> = Vec::new();
        for s in &all {
            let prices = pricing::price_calls(&problem, s, &calls)?;
            // deep strikes can fall outside the no-arbitrage band on the grid
            ivs.push(calls.iter().zip(&prices).map(|(c, &p)| problem.quote_iv(c, p).unwrap_or(f64::NAN)).collect());
        }
        let rows: Vec<SkewRow> = strikes
            .iter()
            .enumerate()
            .map(|(j, &k)| SkewRow { strike: k, generating_iv: ivs[0][j], reference_iv: ivs[1][j], calibrated_iv: ivs[2][j] })
            .collect();
        let worst = rows
            .iter()
            .filter(|r| (85.0..=120.0).contains(&r.strike))
            .map(|r| (r.calibrated_iv - r.generating_iv).abs())
            .fold(0.0, f64::max);
        info!("{d}d: max |calibrated - generating| IV on [85, 120] = {worst:.2e}");
        write_file(&run.out.join(format!("skew_{d}.csv")), |w| io::write_skew(w, &rows))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    std::fs::create_dir_all(&cli.run.out).with_context(|| format!("creating {}", cli.run.out.display()))?;
    match &cli.command {
        Command::GenData => gen_data(&cli.run),
        Command::Calibrate { market, dump_phi } => calibrate(&cli.run, market, *dump_phi),
        Command::Price { model, market } => price(&cli.run, *model, market),
        Command::Simulate { model, paths } => simulate(&cli.run, *model, *paths),
        Command::Report { strikes } => report(&cli.run, strikes),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.run);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
