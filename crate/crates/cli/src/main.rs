#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod surface;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use normvol::asymptotics::Expansion;
use normvol::bachelier::{atm_lognormal_from_normal, atm_normal_from_lognormal};
use normvol::exact::{
    deviation_table, geometric_grid, kink_sqrt_t_coefficient, model2b_density_call, shifted_ln_exact_call,
    sqrt_t_detector,
};
use normvol::mc::mc_call;
use normvol::pde::{extract_local_vol, implied_smile_at, solve_forward_at, ExtractionSteps};
use normvol::{implied_normal_vol, MarketSetup, QuadratureSpec, SmileFlag};
use serde::Serialize;

use config::{config_err, ConfigError, ExperimentConfig, Format, Method, ModelConfig, Overrides};
use surface::Surface;

#[derive(Parser)]
#[command(name = "normvol", version, about = "Normal implied volatility under local volatility")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smiles from an experiment file, one row per (K, T, method).
    Smile(RunArgs),
    /// ATM deviations of the truncated expansions from the exact vol of the
    /// shifted log-normal model.
    Table1(TableArgs),
    /// Fit the ATM vol to c T^p and classify the short-maturity behaviour.
    SqrtT(RunArgs),
    /// Exact ATM conversion between normal and lognormal vols.
    Convert(ConvertArgs),
    /// Local vol from an implied normal vol surface stored as CSV.
    ExtractLv(ExtractArgs),
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long)]
    sigma0: Option<f64>,
    /// Skew; for piecewise models sets b_left = -b, b_right = b.
    #[arg(long, allow_negative_numbers = true)]
    b: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    b_left: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    b_right: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    s0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    mu0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    mu1: Option<f64>,
}

impl ParamArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            sigma0: self.sigma0,
            b: self.b,
            b_left: self.b_left,
            b_right: self.b_right,
            gamma: self.gamma,
            rho: self.rho,
            s0: self.s0,
            mu0: self.mu0,
            mu1: self.mu1,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
    /// Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, default_value_t = 0.03)]
    sigma_bar: f64,
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    b: f64,
    #[arg(long, default_value_t = 0.03, allow_negative_numbers = true)]
    s0: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,30")]
    maturities: Vec<f64>,
    /// Also write the rows to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    /// normal to lognormal
    N2ln,
    /// lognormal to normal
    Ln2n,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    forward: f64,
    #[arg(long)]
    maturity: f64,
    #[arg(long)]
    value: f64,
    #[arg(long, value_enum)]
    direction: Direction,
}

#[derive(Args)]
struct ExtractArgs {
    /// CSV with columns K, T, sigma_N (extra columns allowed).
    #[arg(long)]
    surface: PathBuf,
    /// Keep only rows whose `method` column equals this.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    s0: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu0: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu1: f64,
    /// Single strike; with --maturity extracts one point.
    #[arg(long, allow_negative_numbers = true, requires = "maturity")]
    strike: Option<f64>,
    #[arg(long, requires = "strike")]
    maturity: Option<f64>,
    #[arg(long)]
    strike_fraction: Option<f64>,
    #[arg(long)]
    time_fraction: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

/// One output line of `smile`.
#[derive(Serialize)]
struct Row {
    #[serde(rename = "K")]
    k: f64,
    #[serde(rename = "T")]
    t: f64,
    method: String,
    #[serde(rename = "sigma_N")]
    sigma_n: f64,
    flag: &'static str,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else if e.chain().any(|c| c.is::<normvol::Error>()) {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Smile(a) => cmd_smile(a),
        Command::Table1(a) => cmd_table1(a),
        Command::SqrtT(a) => cmd_sqrt_t(a),
        Command::Convert(a) => cmd_convert(a),
        Command::ExtractLv(a) => cmd_extract(a),
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_smile(a: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let exp = cfg.build(&a.params.overrides(), &base_dir(&a.config))?;
    let strikes = exp.strikes()?;
    let ts = exp.maturities()?;
    let methods = exp.methods()?;
    let setup = exp.setup;
    let grid = exp.raw.pde.unwrap_or_default();
    let mut mc = exp.raw.mc.unwrap_or_default();
    if let Some(seed) = a.seed {
        mc.seed = seed;
    }
    if methods.contains(&Method::Exact) {
        for (label, _, c) in &exp.models {
            exact_support(c, &setup).map_err(|msg| ConfigError(format!("methods: exact for model {label}: {msg}")))?;
        }
    }

    let mut rows = Vec::new();
    for (label, model, cfg) in &exp.models {
        let tag = |m: Method| if label.is_empty() { m.name().to_string() } else { format!("{label}:{}", m.name()) };
        let expansion = Expansion::from_setup(model, &setup, QuadratureSpec::default())?;
        let pde = if methods.contains(&Method::Pde) {
            Some(solve_forward_at(model, &setup, &grid, &ts).context("pde solve")?)
        } else {
            None
        };
        for &t in &ts {
            for &m in &methods {
                let here = |k: f64| format!("K={k}, T={t}, method={}", m.name());
                match m {
                    Method::Asympt0 | Method::Asympt1 | Method::Asympt2 => {
                        let order = match m {
                            Method::Asympt0 => 0,
                            Method::Asympt1 => 1,
                            _ => 2,
                        };
                        let flag = if expansion.is_reliable() { SmileFlag::Ok } else { SmileFlag::LowConfidence };
                        for &k in &strikes {
                            let v = expansion.smile(k, t, order).with_context(|| here(k))?;
                            rows.push(Row { k, t, method: tag(m), sigma_n: v, flag: flag.as_str() });
                        }
                    }
                    Method::Pde => {
                        let sol = pde.as_ref().expect("solved above");
                        let smile = implied_smile_at(sol, model, &setup, t, &strikes)
                            .with_context(|| format!("T={t}, method=pde"))?;
                        for p in smile.points {
                            rows.push(Row { k: p.strike, t, method: tag(m), sigma_n: p.sigma_n, flag: p.flag.as_str() });
                        }
                    }
                    Method::Mc => {
                        for &k in &strikes {
                            let e = mc_call(model, &setup, k, t, &mc).with_context(|| here(k))?;
                            let (v, flag) = vol_from_estimate(e.mean, e.std_error, setup.forward(t), k, t)
                                .with_context(|| here(k))?;
                            rows.push(Row { k, t, method: tag(m), sigma_n: v, flag: flag.as_str() });
                        }
                    }
                    Method::Exact => {
                        for &k in &strikes {
                            let price = exact_price(cfg, &setup, k, t).with_context(|| here(k))?;
                            let (v, flag) = vol_from_estimate(price, 0.0, setup.forward(t), k, t)
                                .with_context(|| here(k))?;
                            rows.push(Row { k, t, method: tag(m), sigma_n: v, flag: flag.as_str() });
                        }
                    }
                }
            }
        }
    }

    let format = a.output.format.or(exp.raw.output.as_ref().and_then(|o| o.format)).unwrap_or(Format::Csv);
    let out = a.output.out.clone().or(exp.raw.output.as_ref().and_then(|o| o.path.clone()));
    let text = match format {
        Format::Csv => {
            let mut s = String::from("K,T,method,sigma_N,flag\n");
            for r in &rows {
                writeln!(s, "{},{},{},{},{}", r.k, r.t, r.method, r.sigma_n, r.flag)?;
            }
            s
        }
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
    };
    emit(&text, out.as_deref())
}

/// Implied vol of a price known up to `se`, clamped at intrinsic.
fn vol_from_estimate(price: f64, se: f64, f: f64, k: f64, t: f64) -> Result<(f64, SmileFlag)> {
    let intrinsic = (f - k).max(0.0);
    if price <= intrinsic {
        return Ok((0.0, SmileFlag::Clamped));
    }
    let v = implied_normal_vol(price, f, k, t)?;
    let flag = if price - intrinsic < 3.0 * se { SmileFlag::LowConfidence } else { SmileFlag::Ok };
    Ok((v, flag))
}

fn exact_support(c: &ModelConfig, setup: &MarketSetup) -> std::result::Result<(), String> {
    if setup.mu0 != 0.0 || setup.mu1 != 0.0 {
        return Err("closed forms need zero drift".into());
    }
    match c {
        ModelConfig::ShiftedLognormal { .. } => Ok(()),
        ModelConfig::PiecewiseLinear { b_left, b_right, .. } if *b_left == -*b_right && *b_right > 0.0 => Ok(()),
        ModelConfig::PiecewiseLinear { b_left, b_right, .. } if *b_left == 0.0 && *b_right == 0.0 => Ok(()),
        _ => Err(format!("no closed form for family {}", c.family())),
    }
}

fn exact_price(c: &ModelConfig, setup: &MarketSetup, k: f64, t: f64) -> Result<f64> {
    let s0 = setup.s0;
    Ok(match c {
        ModelConfig::ShiftedLognormal { sigma0, b, .. } => shifted_ln_exact_call(*sigma0, *b, s0, k, t)?,
        ModelConfig::PiecewiseLinear { sigma0, b_right, .. } if *b_right > 0.0 => {
            model2b_density_call(*sigma0, *b_right, t, k - s0)?
        }
        ModelConfig::PiecewiseLinear { sigma0, .. } => normvol::bachelier_call(s0, k, t, *sigma0)?,
        _ => unreachable!("checked by exact_support"),
    })
}

fn pct(v: f64) -> String {
    let r = (v * 1e6).round() / 1e4;
    // no "-0.0000%"
    format!("{:.4}%", if r == 0.0 { 0.0 } else { r })
}

fn cmd_table1(a: TableArgs) -> Result<()> {
    if a.maturities.is_empty() || a.maturities.iter().any(|t| !(*t > 0.0)) {
        return config_err("--maturities must be positive");
    }
    let rows = deviation_table(a.sigma_bar, a.b, a.s0, &a.maturities)?;
    println!("sigma_bar = {}, b = {}", a.sigma_bar, a.b);
    println!("{:>6} {:>8} {:>12} {:>12} {:>12}", "T", "b^2 T", "s0 - ex", "s1 - ex", "s2 - ex");
    for r in &rows {
        println!(
            "{:>6} {:>8.4} {:>12} {:>12} {:>12}",
            r.maturity,
            r.b2t,
            pct(r.deviations[0]),
            pct(r.deviations[1]),
            pct(r.deviations[2])
        );
    }
    if let Some(out) = &a.out {
        let text = match a.format {
            Format::Csv => {
                let mut s = String::from("T,b2T,exact,dev0,dev1,dev2\n");
                for r in &rows {
                    let [d0, d1, d2] = r.deviations;
                    writeln!(s, "{},{},{},{},{},{}", r.maturity, r.b2t, r.exact, d0, d1, d2)?;
                }
                s
            }
            Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
        };
        emit(&text, Some(out))?;
    }
    Ok(())
}

fn cmd_sqrt_t(a: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let exp = cfg.build(&a.params.overrides(), &base_dir(&a.config))?;
    let [(_, model, _)] = exp.models.as_slice() else {
        return config_err("model: sqrt-t takes exactly one model");
    };
    let fit_cfg = exp.raw.sqrt_t.unwrap_or_default();
    if fit_cfg.count < 5 || !(fit_cfg.t_min > 0.0 && fit_cfg.t_max > fit_cfg.t_min) {
        return config_err("sqrt_t: need count >= 5 and 0 < t_min < t_max");
    }
    let ts = geometric_grid(fit_cfg.t_min, fit_cfg.t_max, fit_cfg.count);
    let grid = exp.raw.pde.unwrap_or_default();
    let report = sqrt_t_detector(model, &exp.setup, &grid, &ts)?;

    let mut lines = vec![report.describe()];
    let f0 = exp.setup.s0;
    let reference = kink_sqrt_t_coefficient(model, f0);
    if reference != 0.0 {
        lines.push(format!(
            "reference c = {reference:.6e} (fit/reference = {:.4})",
            report.coefficient / reference
        ));
        let e = Expansion::from_setup(model, &exp.setup, QuadratureSpec::default())?;
        let (l, r) = e.sigma1_limits();
        lines.push(format!("sigma_1 jump at F0 = {:.6e}", r - l));
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let out = a.output.out.clone().or(exp.raw.output.as_ref().and_then(|o| o.path.clone()));
    emit(&json, out.as_deref())?;
    for l in lines {
        // keep stdout parseable when the report goes there
        if out.is_some() {
            println!("{l}");
        } else {
            eprintln!("{l}");
        }
    }
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    if !(a.forward > 0.0 && a.maturity > 0.0) {
        return config_err("--forward and --maturity must be positive");
    }
    let v = match a.direction {
        Direction::Ln2n => atm_normal_from_lognormal(a.forward, a.value, a.maturity)?,
        Direction::N2ln => atm_lognormal_from_normal(a.forward, a.value, a.maturity)?,
    };
    println!("{v}");
    Ok(())
}

#[derive(Serialize)]
struct LvRow {
    #[serde(rename = "K")]
    k: f64,
    #[serde(rename = "T")]
    t: f64,
    sigma_d: f64,
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.surface)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", a.surface.display())))?;
    let surface = Surface::from_csv(&text, a.method.as_deref())?;
    let setup = MarketSetup::new(a.s0, a.mu0, a.mu1).map_err(|e| ConfigError(e.to_string()))?;
    let mut steps = ExtractionSteps::default();
    if let Some(v) = a.strike_fraction {
        steps.strike_fraction = v;
    }
    if let Some(v) = a.time_fraction {
        steps.time_fraction = v;
    }
    let f = |k: f64, t: f64| surface.vol(k, t);
    let mut rows = Vec::new();
    if let (Some(k), Some(t)) = (a.strike, a.maturity) {
        let v = extract_local_vol(f, &setup, k, t, &steps).with_context(|| format!("K={k}, T={t}"))?;
        rows.push(LvRow { k, t, sigma_d: v });
    } else {
        let mut skipped = 0;
        for (l, &t) in surface.times().iter().enumerate() {
            for &k in surface.strikes(l) {
                match extract_local_vol(f, &setup, k, t, &steps) {
                    Ok(v) => rows.push(LvRow { k, t, sigma_d: v }),
                    Err(normvol::Error::Domain(_)) | Err(normvol::Error::SingularSurface { .. }) => skipped += 1,
                    Err(e) => return Err(e).with_context(|| format!("K={k}, T={t}")),
                }
            }
        }
        if rows.is_empty() {
            anyhow::bail!(normvol::Error::Domain(
                "no surface node has the neighbours needed for the differences".into()
            ));
        }
        if skipped > 0 {
            eprintln!("skipped {skipped} nodes without enough neighbours or with a singular surface");
        }
    }
    let text = match a.output.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut s = String::from("K,T,sigma_D\n");
            for r in &rows {
                writeln!(s, "{},{},{}", r.k, r.t, r.sigma_d)?;
            }
            s
        }
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
    };
    emit(&text, a.output.out.as_deref())
}

