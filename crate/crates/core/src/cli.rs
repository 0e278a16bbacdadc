//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when the input or configuration is invalid
//! (nothing is written), 2 when a run fails after validation.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::design::{compute_layout, Assignment, DesignError, DesignParams, MbcrDetail, Scheme};
use crate::dgp::DgpSpec;
use crate::estimator::{EstimatorError, ObservedData};
use crate::harness::config::{Grid, OneOrMany};
use crate::harness::{self, Experiment, ExperimentConfig, HarnessError, MethodSpec, Setting};
use crate::interval::{
    interval_for, Interval, IntervalError, IntervalOptions, LambdaRule, Method, ScaleRule,
};
use crate::rng::seeded;
use crate::SCHEMA_VERSION;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (report schema 1)");

/// Environment variable overriding the default worker count.
pub const THREADS_ENV: &str = "TIGHTCI_THREADS";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Validation(e.to_string()),
            HarnessError::Runtime(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<IntervalError> for CliError {
    fn from(e: IntervalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "tightci", version = VERSION, about = "Nonasymptotic confidence intervals for the average treatment effect")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a confidence interval from observed data.
    Ci(CiArgs),
    /// Run an experiment described by a JSON configuration.
    Simulate(SimulateArgs),
    /// Tabulate the exact law of the mini-batch assignment.
    Equivalence(EquivalenceArgs),
    /// Closed-form width scaling over a grid.
    Scaling(ScalingArgs),
    /// Monte Carlo RMSE of the Horvitz-Thompson estimator.
    Rmse(RmseArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Bernoulli,
    Complete,
    Mbcr,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Bernoulli => Scheme::Bernoulli,
            SchemeArg::Complete => Scheme::Complete,
            SchemeArg::Mbcr => Scheme::Mbcr,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LambdaArg {
    Appendix,
    MainText,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Corrected,
    Literal,
}

#[derive(Debug, Args)]
pub struct CiArgs {
    /// CSV with columns y,z and, for mini-batch data, optional beta,eta (0-based).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Propensity (Bernoulli designs).
    #[arg(long)]
    pub pi: Option<f64>,
    /// Treated count (complete and mini-batch designs); defaults to sum(z).
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub method: String,
    /// Total miscoverage. The Studentized interval spends half on each side.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Clip endpoints to [-1, 1].
    #[arg(long)]
    pub clip: bool,
    /// CSV with columns beta,eta giving the mini-batch permutations.
    #[arg(long)]
    pub assignment: Option<PathBuf>,
    /// Regenerate the mini-batch permutations from this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print machine-readable JSON.
    #[arg(long)]
    pub json: bool,
    #[arg(long, value_enum, default_value = "appendix")]
    pub lambda_rule: LambdaArg,
    #[arg(long, value_enum, default_value = "corrected")]
    pub scale_rule: ScaleArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; overrides TIGHTCI_THREADS.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EquivalenceArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub n1: usize,
    /// Largest configuration space to enumerate exactly.
    #[arg(long, default_value_t = crate::design::DEFAULT_ENUMERATION_BUDGET)]
    pub budget: u128,
    /// Draws for the approximate check when enumeration is refused (0 disables it).
    #[arg(long, default_value_t = 0)]
    pub monte_carlo_draws: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write equivalence.csv and manifest.json here instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub pi: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    pub alpha: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "hoeff-mbcr,sub-bernoulli-bern,sub-bernoulli-mbcr,naive-hoeffding"
    )]
    pub methods: Vec<String>,
    #[arg(long, value_enum, default_value = "appendix")]
    pub lambda_rule: LambdaArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DgpArg {
    Fig2a,
    Fig2b,
    Fig2c,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SettingArg {
    DesignBased,
    Superpopulation,
}

#[derive(Debug, Args)]
pub struct RmseArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub pi: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        value_enum,
        default_value = "mbcr,bernoulli"
    )]
    pub schemes: Vec<SchemeArg>,
    #[arg(long, value_enum, default_value = "fig2a")]
    pub dgp: DgpArg,
    #[arg(long, value_enum, default_value = "design-based")]
    pub setting: SettingArg,
    #[arg(long, default_value_t = 1000)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Worker count: explicit flag, then `TIGHTCI_THREADS`, then all cores.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(w) = flag {
        return if w == 0 {
            Err(validation("--workers must be at least 1"))
        } else {
            Ok(w)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(validation(format!(
                "{THREADS_ENV}={v} is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Ci(a) => cmd_ci(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Equivalence(a) => cmd_equivalence(&a, out),
        Command::Scaling(a) => cmd_scaling(&a, out),
        Command::Rmse(a) => cmd_rmse(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

#[derive(Debug, Default)]
struct DataColumns {
    y: Vec<f64>,
    z: Vec<bool>,
    beta: Option<Vec<usize>>,
    eta: Option<Vec<usize>>,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn parse_cell<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    row: usize,
) -> Result<T, CliError> {
    let raw = record.get(idx).unwrap_or("");
    raw.parse().map_err(|_| {
        validation(format!(
            "row {row}: column '{name}' has invalid value '{raw}'"
        ))
    })
}

fn read_data(path: &Path) -> Result<DataColumns, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| validation(e.to_string()))?
        .clone();
    let known = ["y", "z", "beta", "eta"];
    if let Some(h) = headers.iter().find(|h| !known.contains(h)) {
        return Err(validation(format!(
            "unexpected column '{h}' (expected y,z and optionally beta,eta)"
        )));
    }
    let (yi, zi) = match (column_index(&headers, "y"), column_index(&headers, "z")) {
        (Some(y), Some(z)) => (y, z),
        _ => return Err(validation("data file needs columns 'y' and 'z'")),
    };
    let bi = column_index(&headers, "beta");
    let ei = column_index(&headers, "eta");
    if bi.is_some() != ei.is_some() {
        return Err(validation("columns 'beta' and 'eta' must appear together"));
    }
    let mut cols = DataColumns::default();
    let (mut beta, mut eta) = (Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| validation(format!("row {row}: {e}")))?;
        cols.y.push(parse_cell(&rec, yi, "y", row)?);
        let z: u8 = parse_cell(&rec, zi, "z", row)?;
        if z > 1 {
            return Err(validation(format!("row {row}: z must be 0 or 1")));
        }
        cols.z.push(z == 1);
        if let (Some(b), Some(e)) = (bi, ei) {
            beta.push(parse_cell(&rec, b, "beta", row)?);
            eta.push(parse_cell(&rec, e, "eta", row)?);
        }
    }
    if cols.y.is_empty() {
        return Err(validation("data file has no rows"));
    }
    if bi.is_some() {
        cols.beta = Some(beta);
        cols.eta = Some(eta);
    }
    Ok(cols)
}

fn read_permutations(path: &Path) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| validation(e.to_string()))?
        .clone();
    let (bi, ei) = match (
        column_index(&headers, "beta"),
        column_index(&headers, "eta"),
    ) {
        (Some(b), Some(e)) if headers.len() == 2 => (b, e),
        _ => {
            return Err(validation(
                "assignment file needs exactly the columns beta,eta",
            ))
        }
    };
    let (mut beta, mut eta) = (Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| validation(format!("row {}: {e}", k + 1)))?;
        beta.push(parse_cell(&rec, bi, "beta", k + 1)?);
        eta.push(parse_cell(&rec, ei, "eta", k + 1)?);
    }
    Ok((beta, eta))
}

fn build_assignment(args: &CiArgs, cols: &DataColumns) -> Result<Assignment, CliError> {
    let scheme: Scheme = args.scheme.into();
    let n = cols.z.len();
    let treated = cols.z.iter().filter(|&&b| b).count();
    match scheme {
        Scheme::Bernoulli => {
            if args.n1.is_some() {
                return Err(validation("Bernoulli designs take --pi, not --n1"));
            }
            let pi = args
                .pi
                .ok_or_else(|| validation("Bernoulli designs need --pi"))?;
            Ok(Assignment::bernoulli(cols.z.clone(), pi)?)
        }
        Scheme::Complete | Scheme::Mbcr => {
            if args.pi.is_some() {
                return Err(validation(format!(
                    "{scheme} randomization takes the integer treated count --n1, not --pi"
                )));
            }
            let n1 = args.n1.unwrap_or(treated);
            if n1 != treated {
                return Err(validation(format!(
                    "--n1 {n1} disagrees with the {treated} treated units in the data"
                )));
            }
            DesignParams::complete(n, n1)?;
            if scheme == Scheme::Complete {
                return Ok(Assignment::complete(cols.z.clone())?);
            }
            let sources = usize::from(cols.beta.is_some())
                + usize::from(args.assignment.is_some())
                + usize::from(args.seed.is_some());
            if sources != 1 {
                return Err(validation(
                    "mini-batch data needs exactly one source of permutations: beta,eta columns, --assignment, or --seed",
                ));
            }
            let layout = compute_layout(n, n1)?;
            let detail = if let (Some(b), Some(e)) = (&cols.beta, &cols.eta) {
                MbcrDetail::new(layout, b.clone(), e.clone())?
            } else if let Some(path) = &args.assignment {
                let (b, e) = read_permutations(path)?;
                MbcrDetail::new(layout, b, e)?
            } else {
                let seed = args.seed.expect("counted above");
                let drawn = crate::design::draw_mbcr(&layout, &mut seeded(seed));
                drawn.mbcr_detail().expect("mini-batch draw").clone()
            };
            Ok(Assignment::mbcr_with_observed(detail, &cols.z)?)
        }
    }
}

/// JSON emitted by `ci --json`.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct CiOutput {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub scheme: Scheme,
    pub n: usize,
    pub n1: usize,
    /// Total miscoverage requested on the command line.
    pub alpha_total: f64,
    pub estimate: f64,
    pub half_width: f64,
    pub interval: Interval,
}

fn cmd_ci(args: &CiArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let method: Method = args.method.parse().map_err(validation)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(validation(format!(
            "--alpha must lie strictly between 0 and 1, got {}",
            args.alpha
        )));
    }
    let cols = read_data(&args.data)?;
    let assignment = build_assignment(args, &cols)?;
    let data = ObservedData::new(cols.y.clone(), assignment)?;
    let options = IntervalOptions {
        lambda_rule: match args.lambda_rule {
            LambdaArg::Appendix => LambdaRule::Appendix,
            LambdaArg::MainText => LambdaRule::MainText,
        },
        scale_rule: match args.scale_rule {
            ScaleArg::Corrected => ScaleRule::Corrected,
            ScaleArg::Literal => ScaleRule::Literal,
        },
        clip: args.clip,
    };
    // each Studentized bound holds at its own level, so split the total
    let level = if method == Method::Studentized {
        args.alpha / 2.0
    } else {
        args.alpha
    };
    let ci = interval_for(method, &data, level, options)?;
    let a = data.assignment();
    let output = CiOutput {
        tool: "tightci".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        schema_version: SCHEMA_VERSION,
        scheme: a.scheme(),
        n: a.n(),
        n1: a.n1(),
        alpha_total: args.alpha,
        estimate: ci.center(),
        half_width: ci.half_width(),
        interval: ci,
    };
    let write_err = |e: std::io::Error| CliError::Runtime(e.to_string());
    if args.json {
        let text =
            serde_json::to_string_pretty(&output).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(out, "{text}").map_err(write_err)?;
    } else {
        let tuning = serde_json::to_string(&output.interval.tuning)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(out, "method:     {}", output.interval.method).map_err(write_err)?;
        writeln!(
            out,
            "scheme:     {}  (n={}, n1={})",
            output.scheme, output.n, output.n1
        )
        .map_err(write_err)?;
        writeln!(out, "alpha:      {}", output.alpha_total).map_err(write_err)?;
        writeln!(out, "estimate:   {}", output.estimate).map_err(write_err)?;
        writeln!(
            out,
            "interval:   [{}, {}]",
            output.interval.lower, output.interval.upper
        )
        .map_err(write_err)?;
        writeln!(out, "half-width: {}", output.half_width).map_err(write_err)?;
        writeln!(out, "tuning:     {tuning}").map_err(write_err)?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let workers = resolve_workers(args.workers)?;
    let bytes = std::fs::read(&args.config)
        .map_err(|e| validation(format!("{}: {e}", args.config.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| validation("configuration is not valid UTF-8"))?;
    let config = ExperimentConfig::from_json(&text)?;
    let report = harness::run(&config, workers)?;
    finish_report(&report, &args.out, &bytes, config.seed, out)
}

fn finish_report(
    report: &harness::Report,
    dir: &Path,
    config_bytes: &[u8],
    seed: u64,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let manifest = report.write_outputs(dir, config_bytes, seed)?;
    for s in &manifest.skipped {
        eprintln!(
            "skipped {}:{} at n={}, pi={}: {}",
            s.method, s.scheme, s.n, s.pi, s.reason
        );
    }
    for o in &manifest.outputs {
        writeln!(
            out,
            "wrote {} ({} rows)",
            dir.join(&o.file).display(),
            o.rows
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn cmd_equivalence(args: &EquivalenceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let workers = resolve_workers(args.workers)?;
    compute_layout(args.n, args.n1)?;
    let config = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment: Experiment::Equivalence,
        grid: Grid {
            n: vec![args.n],
            pi: None,
            n1: Some(vec![args.n1]),
            alpha: vec![0.05],
        },
        methods: vec![],
        schemes: vec![],
        dgp: DgpSpec::fig2a(),
        replications: 1,
        seed: args.seed,
        setting: OneOrMany::One(Setting::DesignBased),
        clip: false,
        lambda_rule: LambdaRule::Appendix,
        scale_rule: ScaleRule::Corrected,
        enumeration_budget: args.budget,
        monte_carlo_draws: args.monte_carlo_draws,
    };
    let report = harness::run(&config, workers)?;
    match &args.out {
        Some(dir) => {
            let bytes =
                serde_json::to_vec(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
            finish_report(&report, dir, &bytes, config.seed, out)
        }
        None => out
            .write_all(&report.to_csv()?)
            .map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn parse_methods(list: &[String]) -> Result<Vec<MethodSpec>, CliError> {
    list.iter()
        .map(|m| MethodSpec::parse(m).map_err(validation))
        .collect()
}

fn cmd_scaling(args: &ScalingArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment: Experiment::WidthScaling,
        grid: Grid {
            n: args.n.clone(),
            pi: Some(args.pi.clone()),
            n1: None,
            alpha: args.alpha.clone(),
        },
        methods: parse_methods(&args.methods)?,
        schemes: vec![],
        dgp: DgpSpec::fig2a(),
        replications: 1,
        seed: 0,
        setting: OneOrMany::One(Setting::DesignBased),
        clip: false,
        lambda_rule: match args.lambda_rule {
            LambdaArg::Appendix => LambdaRule::Appendix,
            LambdaArg::MainText => LambdaRule::MainText,
        },
        scale_rule: ScaleRule::Corrected,
        enumeration_budget: crate::design::DEFAULT_ENUMERATION_BUDGET,
        monte_carlo_draws: 0,
    };
    config.validate()?;
    let report = harness::run(&config, 1)?;
    emit(&report, &config, args.out.as_deref(), out)
}

fn emit(
    report: &harness::Report,
    config: &ExperimentConfig,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    match dir {
        Some(dir) => {
            let bytes = serde_json::to_vec(config).map_err(|e| CliError::Runtime(e.to_string()))?;
            finish_report(report, dir, &bytes, config.seed, out)
        }
        None => out
            .write_all(&report.to_csv()?)
            .map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn cmd_rmse(args: &RmseArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let workers = resolve_workers(args.workers)?;
    let config = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment: Experiment::Rmse,
        grid: Grid {
            n: args.n.clone(),
            pi: Some(args.pi.clone()),
            n1: None,
            alpha: vec![0.05],
        },
        methods: vec![],
        schemes: args.schemes.iter().map(|&s| s.into()).collect(),
        dgp: match args.dgp {
            DgpArg::Fig2a => DgpSpec::fig2a(),
            DgpArg::Fig2b => DgpSpec::fig2b(),
            DgpArg::Fig2c => DgpSpec::fig2c(),
        },
        replications: args.replications,
        seed: args.seed,
        setting: OneOrMany::One(match args.setting {
            SettingArg::DesignBased => Setting::DesignBased,
            SettingArg::Superpopulation => Setting::Superpopulation,
        }),
        clip: false,
        lambda_rule: LambdaRule::Appendix,
        scale_rule: ScaleRule::Corrected,
        enumeration_budget: crate::design::DEFAULT_ENUMERATION_BUDGET,
        monte_carlo_draws: 0,
    };
    config.validate()?;
    let report = harness::run(&config, workers)?;
    emit(&report, &config, args.out.as_deref(), out)
}
