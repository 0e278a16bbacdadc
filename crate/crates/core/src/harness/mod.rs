//! Deterministic Monte Carlo experiments.
//!
//! Replication `r` of a grid cell draws everything from its own stream
//! `rng::replication_stream(seed, cell, r)`. Replications run on a rayon pool
//! of any size, are collected by index, and are aggregated sequentially, so
//! reports are byte-identical regardless of the worker count.

pub mod config;
pub mod report;

use std::collections::HashMap;

use num_rational::Ratio;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::design::{
    compute_layout, draw_bernoulli, draw_complete, draw_mbcr, enumerate_mbcr_distribution,
    Assignment, DesignError, MbcrLayout, Scheme,
};
use crate::dgp::{sample_population, DgpSpec};
use crate::estimator::{ht_mbcr, ht_standard, PotentialTable};
use crate::interval::{
    hoeff_mbcr_ci, interval_for, naive_hoeffding_ci, sub_bernoulli_bern_ci, sub_bernoulli_mbcr_ci,
    LambdaRule, Method,
};
use crate::rng::{mix, replication_stream, StreamRng, CELL_STREAM};
use crate::SCHEMA_VERSION;

pub use config::{DesignPoint, Experiment, ExperimentConfig, MethodSpec, Setting};
pub use report::{EquivalenceRow, Manifest, Report, ReportRow, SkippedCell};

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The configuration is invalid; nothing was run.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

/// Runs the experiment named in `config` on `workers` threads.
pub fn run(config: &ExperimentConfig, workers: usize) -> Result<Report, HarnessError> {
    config.validate()?;
    match config.experiment {
        Experiment::Coverage => run_coverage(config, workers),
        Experiment::WidthScaling => run_width_scaling(config),
        Experiment::Rmse => run_rmse(config, workers),
        Experiment::Equivalence => run_equivalence_grid(config, workers),
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Runtime(format!("cannot start worker pool: {e}")))
}

fn scheme_code(s: Scheme) -> u64 {
    match s {
        Scheme::Bernoulli => 1,
        Scheme::Complete => 2,
        Scheme::Mbcr => 3,
    }
}

fn setting_code(s: Setting) -> u64 {
    match s {
        Setting::DesignBased => 1,
        Setting::Superpopulation => 2,
    }
}

/// Identifier of the table shared by every scheme at one design point.
fn table_id(setting: Setting, point: &DesignPoint) -> u64 {
    mix(&[setting_code(setting), point.n as u64, point.pi.to_bits()])
}

fn cell_id(setting: Setting, point: &DesignPoint, scheme: Scheme) -> u64 {
    mix(&[table_id(setting, point), scheme_code(scheme)])
}

/// Potential outcomes and estimand for a cell.
enum Population {
    Fixed { table: PotentialTable, target: f64 },
    Resampled { spec: DgpSpec, target: f64 },
}

impl Population {
    fn new(
        config: &ExperimentConfig,
        setting: Setting,
        point: &DesignPoint,
        fixed: Option<&PotentialTable>,
    ) -> Result<Self, HarnessError> {
        match setting {
            Setting::DesignBased => {
                let table = match fixed {
                    Some(t) => t.clone(),
                    None => {
                        let mut rng =
                            replication_stream(config.seed, table_id(setting, point), CELL_STREAM);
                        sample_population(&config.dgp, point.n, &mut rng)
                            .map_err(|e| HarnessError::Runtime(e.to_string()))?
                    }
                };
                let target = table.psi_db();
                Ok(Population::Fixed { table, target })
            }
            Setting::Superpopulation => {
                let target = config.dgp.psi_iid().ok_or_else(|| {
                    HarnessError::Config("superpopulation runs need a sampled process".into())
                })?;
                Ok(Population::Resampled {
                    spec: config.dgp.clone(),
                    target,
                })
            }
        }
    }

    fn target(&self) -> f64 {
        match self {
            Population::Fixed { target, .. } | Population::Resampled { target, .. } => *target,
        }
    }

    fn draw(
        &self,
        n: usize,
        rng: &mut StreamRng,
    ) -> Result<std::borrow::Cow<'_, PotentialTable>, HarnessError> {
        match self {
            Population::Fixed { table, .. } => Ok(std::borrow::Cow::Borrowed(table)),
            Population::Resampled { spec, .. } => sample_population(spec, n, rng)
                .map(std::borrow::Cow::Owned)
                .map_err(|e| HarnessError::Runtime(e.to_string())),
        }
    }
}

fn draw_assignment(
    scheme: Scheme,
    point: &DesignPoint,
    layout: Option<&MbcrLayout>,
    rng: &mut StreamRng,
) -> Result<Assignment, DesignError> {
    match scheme {
        Scheme::Bernoulli => draw_bernoulli(point.n, point.pi, rng),
        Scheme::Complete => draw_complete(point.n, point.n1.unwrap_or(0), rng),
        Scheme::Mbcr => Ok(draw_mbcr(
            layout.expect("mini-batch cells carry a layout"),
            rng,
        )),
    }
}

fn cell_layout(scheme: Scheme, point: &DesignPoint) -> Option<MbcrLayout> {
    match (scheme, point.n1) {
        (Scheme::Mbcr, Some(n1)) => compute_layout(point.n, n1).ok(),
        _ => None,
    }
}

fn load_fixed_table(config: &ExperimentConfig) -> Result<Option<PotentialTable>, HarnessError> {
    match &config.dgp {
        DgpSpec::FixedTable { path } => PotentialTable::from_csv_path(path)
            .map(Some)
            .map_err(|e| HarnessError::Config(format!("dgp.path: {e}"))),
        _ => Ok(None),
    }
}

fn fixed_table_for(fixed: Option<&PotentialTable>, point: &DesignPoint) -> Result<(), String> {
    match fixed {
        Some(t) if t.n() != point.n => {
            Err(format!("fixed table has {} rows, not n={}", t.n(), point.n))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Outcome {
    covered: bool,
    half_width: f64,
    lower_margin: f64,
    upper_margin: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    covered: usize,
    half_width: f64,
    lower_margin: f64,
    upper_margin: f64,
}

fn skipped(spec: &MethodSpec, point: &DesignPoint, reason: String) -> SkippedCell {
    SkippedCell {
        method: spec.method.to_string(),
        scheme: spec.scheme.to_string(),
        n: point.n,
        pi: point.pi,
        reason,
    }
}

/// Coverage study: records, per method and α, how often the interval
/// contains the target estimand and how wide it is.
pub fn run_coverage(config: &ExperimentConfig, workers: usize) -> Result<Report, HarnessError> {
    let pool = thread_pool(workers)?;
    let fixed = load_fixed_table(config)?;
    let options = config.options();
    let alphas = &config.grid.alpha;
    let reps = config.replications;
    let mut rows = Vec::new();
    let mut skipped_cells = Vec::new();

    for (si, setting) in config.settings().into_iter().enumerate() {
        for point in config.design_points() {
            let mut runnable: Vec<(usize, MethodSpec)> = Vec::new();
            for (k, spec) in config.methods.iter().enumerate() {
                let failure = config::precondition_failure(spec, &point, &options)
                    .or_else(|| fixed_table_for(fixed.as_ref(), &point).err());
                match failure {
                    Some(reason) => {
                        if si == 0 {
                            skipped_cells.push(skipped(spec, &point, reason));
                        }
                    }
                    None => runnable.push((k, *spec)),
                }
            }
            if runnable.is_empty() {
                continue;
            }
            let population = Population::new(config, setting, &point, fixed.as_ref())?;
            let target = population.target();
            let mut tallies: HashMap<usize, Vec<Tally>> = HashMap::new();
            let mut schemes: Vec<Scheme> = runnable.iter().map(|(_, s)| s.scheme).collect();
            schemes.sort();
            schemes.dedup();
            for scheme in schemes {
                let specs: Vec<(usize, MethodSpec)> = runnable
                    .iter()
                    .copied()
                    .filter(|(_, s)| s.scheme == scheme)
                    .collect();
                let layout = cell_layout(scheme, &point);
                let cell = cell_id(setting, &point, scheme);
                let replicate = |r: usize| -> Result<Vec<Outcome>, HarnessError> {
                    let mut rng = replication_stream(config.seed, cell, r as u64);
                    let table = population.draw(point.n, &mut rng)?;
                    let assignment = draw_assignment(scheme, &point, layout.as_ref(), &mut rng)
                        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
                    let data = table
                        .observe(assignment)
                        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
                    let mut out = Vec::with_capacity(specs.len() * alphas.len());
                    for (_, spec) in &specs {
                        for &alpha in alphas {
                            let ci =
                                interval_for(spec.method, &data, alpha, options).map_err(|e| {
                                    HarnessError::Runtime(format!("{}: {e}", spec.label()))
                                })?;
                            let center = ci.center();
                            out.push(Outcome {
                                covered: ci.contains(target),
                                half_width: ci.half_width(),
                                lower_margin: center - ci.lower,
                                upper_margin: ci.upper - center,
                            });
                        }
                    }
                    Ok(out)
                };
                let results: Vec<Vec<Outcome>> = pool.install(|| {
                    (0..reps)
                        .into_par_iter()
                        .map(replicate)
                        .collect::<Result<_, _>>()
                })?;
                let mut acc = vec![Tally::default(); specs.len() * alphas.len()];
                for rep in &results {
                    for (t, o) in acc.iter_mut().zip(rep) {
                        t.covered += usize::from(o.covered);
                        t.half_width += o.half_width;
                        t.lower_margin += o.lower_margin;
                        t.upper_margin += o.upper_margin;
                    }
                }
                for (j, (k, _)) in specs.iter().enumerate() {
                    tallies.insert(*k, acc[j * alphas.len()..(j + 1) * alphas.len()].to_vec());
                }
            }
            for (k, spec) in &runnable {
                for (ai, &alpha) in alphas.iter().enumerate() {
                    let t = tallies[k][ai];
                    let r = reps as f64;
                    let rate = t.covered as f64 / r;
                    let mean_half = t.half_width / r;
                    rows.push(ReportRow {
                        schema_version: SCHEMA_VERSION,
                        experiment: Experiment::Coverage.as_str().into(),
                        method: spec.method.to_string(),
                        scheme: spec.scheme.to_string(),
                        setting: setting.as_str().into(),
                        n: point.n,
                        n1: point.n1,
                        pi: point.pi,
                        alpha: Some(alpha),
                        coverage_rate: Some(rate),
                        coverage_se: Some((rate * (1.0 - rate) / r).sqrt()),
                        mean_halfwidth: Some(mean_half),
                        width_times_sqrt_npi: Some(mean_half * (point.n as f64 * point.pi).sqrt()),
                        mean_lower_margin: Some(t.lower_margin / r),
                        mean_upper_margin: Some(t.upper_margin / r),
                        rmse: None,
                        rmse_bound: None,
                        replications: Some(reps),
                        seed: Some(config.seed),
                    });
                }
            }
        }
    }
    Ok(Report {
        experiment: Experiment::Coverage,
        rows,
        equivalence: Vec::new(),
        skipped: skipped_cells,
    })
}

/// Closed-form half-width of `method` at a design point, centered at zero.
pub fn closed_form_half_width(
    spec: &MethodSpec,
    point: &DesignPoint,
    alpha: f64,
    lambda_rule: LambdaRule,
) -> Result<f64, String> {
    let layout = || -> Result<MbcrLayout, String> {
        let n1 = point
            .n1
            .ok_or_else(|| "needs an integral treated count".to_string())?;
        compute_layout(point.n, n1).map_err(|e| e.to_string())
    };
    let ci = match spec.method {
        Method::HoeffMbcr => hoeff_mbcr_ci(0.0, &layout()?, alpha),
        Method::SubBernoulliMbcr => sub_bernoulli_mbcr_ci(0.0, &layout()?, alpha, lambda_rule),
        Method::SubBernoulliBern => sub_bernoulli_bern_ci(0.0, point.n, point.pi, alpha),
        Method::NaiveHoeffding => naive_hoeffding_ci(0.0, point.n, point.pi, alpha),
        Method::Studentized | Method::Clt => {
            return Err(format!(
                "{} depends on the data; width scaling covers closed-form intervals only",
                spec.method
            ))
        }
    };
    ci.map(|c| c.half_width()).map_err(|e| e.to_string())
}

/// Width study: closed-form half-widths and their `√(nπ)` rescaling.
pub fn run_width_scaling(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let options = config.options();
    let mut rows = Vec::new();
    let mut skipped_cells = Vec::new();
    for point in config.design_points() {
        for spec in &config.methods {
            let failure = if spec.method.is_closed_form() {
                config::precondition_failure(spec, &point, &options)
            } else {
                Some(format!(
                    "{} depends on the data; width scaling covers closed-form intervals only",
                    spec.method
                ))
            };
            if let Some(reason) = failure {
                skipped_cells.push(skipped(spec, &point, reason));
                continue;
            }
            for &alpha in &config.grid.alpha {
                let half = closed_form_half_width(spec, &point, alpha, config.lambda_rule)
                    .map_err(HarnessError::Runtime)?;
                rows.push(ReportRow {
                    schema_version: SCHEMA_VERSION,
                    experiment: Experiment::WidthScaling.as_str().into(),
                    method: spec.method.to_string(),
                    scheme: spec.scheme.to_string(),
                    setting: String::new(),
                    n: point.n,
                    n1: point.n1,
                    pi: point.pi,
                    alpha: Some(alpha),
                    coverage_rate: None,
                    coverage_se: None,
                    mean_halfwidth: Some(half),
                    width_times_sqrt_npi: Some(half * (point.n as f64 * point.pi).sqrt()),
                    mean_lower_margin: None,
                    mean_upper_margin: None,
                    rmse: None,
                    rmse_bound: None,
                    replications: None,
                    seed: None,
                });
            }
        }
    }
    Ok(Report {
        experiment: Experiment::WidthScaling,
        rows,
        equivalence: Vec::new(),
        skipped: skipped_cells,
    })
}

/// Worst-case RMSE bound for the Horvitz-Thompson estimator of `scheme`.
pub fn rmse_bound(scheme: Scheme, n: usize, pi: f64) -> f64 {
    let npi = n as f64 * pi;
    match scheme {
        Scheme::Bernoulli => (2.0 / npi).sqrt(),
        Scheme::Complete | Scheme::Mbcr => 2.0 / npi.sqrt(),
    }
}

/// RMSE study of the Horvitz-Thompson estimator under each scheme.
pub fn run_rmse(config: &ExperimentConfig, workers: usize) -> Result<Report, HarnessError> {
    let pool = thread_pool(workers)?;
    let fixed = load_fixed_table(config)?;
    let reps = config.replications;
    let mut rows = Vec::new();
    let mut skipped_cells = Vec::new();
    for (si, setting) in config.settings().into_iter().enumerate() {
        for point in config.design_points() {
            for scheme in config.rmse_schemes() {
                let label = MethodSpec {
                    method: Method::HoeffMbcr,
                    scheme,
                };
                let failure = match (scheme, point.n1) {
                    (Scheme::Bernoulli, _) => None,
                    (_, None) => Some(format!(
                        "{scheme} randomization needs an integral treated count"
                    )),
                    (Scheme::Mbcr, Some(n1)) => {
                        compute_layout(point.n, n1).err().map(|e| e.to_string())
                    }
                    (Scheme::Complete, Some(n1)) => {
                        crate::design::DesignParams::complete(point.n, n1)
                            .err()
                            .map(|e| e.to_string())
                    }
                }
                .or_else(|| fixed_table_for(fixed.as_ref(), &point).err());
                if let Some(reason) = failure {
                    if si == 0 {
                        let mut s = skipped(&label, &point, reason);
                        s.method = "horvitz-thompson".into();
                        skipped_cells.push(s);
                    }
                    continue;
                }
                let population = Population::new(config, setting, &point, fixed.as_ref())?;
                let target = population.target();
                let layout = cell_layout(scheme, &point);
                let cell = cell_id(setting, &point, scheme);
                let replicate = |r: usize| -> Result<f64, HarnessError> {
                    let mut rng = replication_stream(config.seed, cell, r as u64);
                    let table = population.draw(point.n, &mut rng)?;
                    let assignment = draw_assignment(scheme, &point, layout.as_ref(), &mut rng)
                        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
                    let data = table
                        .observe(assignment)
                        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
                    let est = match scheme {
                        Scheme::Mbcr => ht_mbcr(&data),
                        _ => ht_standard(&data, point.pi),
                    }
                    .map_err(|e| HarnessError::Runtime(e.to_string()))?;
                    Ok((est - target).powi(2))
                };
                let errors: Vec<f64> = pool.install(|| {
                    (0..reps)
                        .into_par_iter()
                        .map(replicate)
                        .collect::<Result<_, _>>()
                })?;
                let mse = errors.iter().sum::<f64>() / reps as f64;
                rows.push(ReportRow {
                    schema_version: SCHEMA_VERSION,
                    experiment: Experiment::Rmse.as_str().into(),
                    method: "horvitz-thompson".into(),
                    scheme: scheme.to_string(),
                    setting: setting.as_str().into(),
                    n: point.n,
                    n1: point.n1,
                    pi: point.pi,
                    alpha: None,
                    coverage_rate: None,
                    coverage_se: None,
                    mean_halfwidth: None,
                    width_times_sqrt_npi: None,
                    mean_lower_margin: None,
                    mean_upper_margin: None,
                    rmse: Some(mse.sqrt()),
                    rmse_bound: Some(rmse_bound(scheme, point.n, point.pi)),
                    replications: Some(reps),
                    seed: Some(config.seed),
                });
            }
        }
    }
    Ok(Report {
        experiment: Experiment::Rmse,
        rows,
        equivalence: Vec::new(),
        skipped: skipped_cells,
    })
}

/// Largest number of distinct assignments the sampled check will tabulate.
pub const MAX_MONTE_CARLO_CATEGORIES: u64 = 1_000_000;

fn bit_string(z: &[bool]) -> String {
    z.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Law of the mini-batch assignment at `(n, n1)`.
///
/// Enumerates exactly when the configuration space fits in `budget`, and
/// every row then says whether its probability equals `1/C(n, n1)` as an
/// exact rational. Otherwise draws `mc_draws` assignments and reports a
/// chi-square goodness-of-fit statistic against the uniform law; those rows
/// are approximate and carry no `equal` verdict.
pub fn run_equivalence(
    n: usize,
    n1: usize,
    budget: u128,
    mc_draws: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<EquivalenceRow>, HarnessError> {
    let layout = compute_layout(n, n1).map_err(|e| HarnessError::Config(e.to_string()))?;
    let arrangements = if n <= 64 {
        num_integer::binomial(n as u128, n1 as u128)
    } else {
        u128::MAX
    };
    let expected = format!("1/{arrangements}");
    match enumerate_mbcr_distribution(&layout, budget) {
        Ok(dist) => {
            let uniform = Ratio::new(1u128, arrangements);
            Ok(dist
                .rows()
                .map(|(z, count)| {
                    let p = Ratio::new(count as u128, dist.total() as u128);
                    EquivalenceRow {
                        schema_version: SCHEMA_VERSION,
                        n,
                        n1,
                        method: "exact".into(),
                        assignment: bit_string(&z),
                        count,
                        total: dist.total(),
                        probability: format!("{}/{}", p.numer(), p.denom()),
                        expected: expected.clone(),
                        equal: Some(p == uniform && dist.support_size() as u128 == arrangements),
                        chi_square: None,
                        degrees_of_freedom: None,
                        p_value: None,
                    }
                })
                .collect())
        }
        Err(DesignError::BudgetExceeded { .. }) => {
            if arrangements > MAX_MONTE_CARLO_CATEGORIES as u128 {
                return Err(HarnessError::Runtime(format!(
                    "enumeration exceeds the budget and C({n}, {n1}) = {arrangements} assignments are too many to tabulate by sampling"
                )));
            }
            if mc_draws == 0 {
                return Err(HarnessError::Runtime(
                    "enumeration exceeds the budget; set a positive number of Monte Carlo draws for the approximate check".into(),
                ));
            }
            monte_carlo_equivalence(&layout, arrangements as u64, mc_draws, seed, workers)
        }
        Err(e) => Err(HarnessError::Runtime(e.to_string())),
    }
}

fn monte_carlo_equivalence(
    layout: &MbcrLayout,
    arrangements: u64,
    draws: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<EquivalenceRow>, HarnessError> {
    let (n, n1) = (layout.n(), layout.n1());
    let cell = mix(&[0xE0, n as u64, n1 as u64]);
    // fixed-size chunks keep the stream layout independent of the pool size
    const CHUNK: u64 = 4096;
    let chunks = draws.div_ceil(CHUNK);
    let pool = thread_pool(workers)?;
    let partial: Vec<HashMap<String, u64>> = pool.install(|| {
        (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = replication_stream(seed, cell, c);
                let mut counts = HashMap::new();
                for _ in c * CHUNK..((c + 1) * CHUNK).min(draws) {
                    let a = draw_mbcr(layout, &mut rng);
                    *counts.entry(bit_string(a.z())).or_insert(0) += 1;
                }
                counts
            })
            .collect()
    });
    let mut counts: std::collections::BTreeMap<String, u64> = std::collections::BTreeMap::new();
    for part in partial {
        for (k, v) in part {
            *counts.entry(k).or_insert(0) += v;
        }
    }
    let expected_count = draws as f64 / arrangements as f64;
    let observed_sq: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected_count).powi(2))
        .sum();
    let unseen = arrangements - counts.len() as u64;
    let chi_square =
        (observed_sq + unseen as f64 * expected_count * expected_count) / expected_count;
    let df = arrangements - 1;
    let p_value = if df == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(df as f64).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        dist.sf(chi_square)
    };
    Ok(counts
        .into_iter()
        .map(|(assignment, count)| EquivalenceRow {
            schema_version: SCHEMA_VERSION,
            n,
            n1,
            method: "monte-carlo".into(),
            assignment,
            count,
            total: draws,
            probability: format!("{count}/{draws}"),
            expected: format!("1/{arrangements}"),
            equal: None,
            chi_square: Some(chi_square),
            degrees_of_freedom: Some(df),
            p_value: Some(p_value),
        })
        .collect())
}

fn run_equivalence_grid(config: &ExperimentConfig, workers: usize) -> Result<Report, HarnessError> {
    let mut rows = Vec::new();
    let mut skipped_cells = Vec::new();
    for point in config.design_points() {
        let n1 = point.n1.expect("validated");
        match compute_layout(point.n, n1) {
            Ok(_) => rows.extend(run_equivalence(
                point.n,
                n1,
                config.enumeration_budget,
                config.monte_carlo_draws,
                config.seed,
                workers,
            )?),
            Err(e) => skipped_cells.push(SkippedCell {
                method: "exact".into(),
                scheme: Scheme::Mbcr.to_string(),
                n: point.n,
                pi: point.pi,
                reason: e.to_string(),
            }),
        }
    }
    Ok(Report {
        experiment: Experiment::Equivalence,
        rows: Vec::new(),
        equivalence: rows,
        skipped: skipped_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coverage_config(reps: usize) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"schema_version":1,"experiment":"coverage","grid":{{"n":[200,105],"pi":[0.1,0.25]}},
               "methods":["hoeff-mbcr","sub-bernoulli-bern","studentized","clt"],
               "replications":{reps},"seed":7,"setting":["design-based","superpopulation"]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn coverage_is_worker_independent() {
        let c = coverage_config(60);
        let a = run(&c, 1).unwrap().to_csv().unwrap();
        let b = run(&c, 4).unwrap().to_csv().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_skips_non_integral_cells() {
        let report = run(&coverage_config(5), 2).unwrap();
        // n=105, pi=0.25 has no integral n1: mini-batch methods skipped, Bernoulli ones run
        assert!(report
            .skipped
            .iter()
            .any(|s| s.n == 105 && s.method == "hoeff-mbcr"));
        assert!(report.rows.iter().any(|r| r.n == 105
            && r.method == "sub-bernoulli-bern"
            && (r.pi - 0.25).abs() < 1e-12));
        for r in &report.rows {
            let rate = r.coverage_rate.unwrap();
            assert!((0.0..=1.0).contains(&rate));
        }
    }

    #[test]
    fn extreme_alpha_runs() {
        let mut c = coverage_config(5);
        c.grid.alpha = vec![1.0 - 1e-9];
        let report = run(&c, 2).unwrap();
        assert!(report
            .rows
            .iter()
            .all(|r| r.mean_halfwidth.unwrap().is_finite()));
    }

    #[test]
    fn width_scaling_identity() {
        let c = ExperimentConfig::from_json(
            r#"{"schema_version":1,"experiment":"width-scaling","grid":{"n":[1000000],"pi":[0.001]},
               "methods":["hoeff-mbcr","naive-hoeffding","studentized"]}"#,
        )
        .unwrap();
        let report = run(&c, 1).unwrap();
        let hoeff = report
            .rows
            .iter()
            .find(|r| r.method == "hoeff-mbcr")
            .unwrap();
        assert!((hoeff.width_times_sqrt_npi.unwrap() - (2.0 * 40f64.ln()).sqrt()).abs() < 1e-10);
        assert_eq!(report.skipped.len(), 1);
    }

    #[test]
    fn rmse_constant_table_is_zero() {
        let c = ExperimentConfig::from_json(
            r#"{"schema_version":1,"experiment":"rmse","grid":{"n":[100],"pi":[0.1]},"schemes":["mbcr"],
               "dgp":{"kind":"uniform-null","lo":0.3,"hi":0.3},"replications":20,"seed":3}"#,
        )
        .unwrap();
        let report = run(&c, 2).unwrap();
        assert!(report.rows[0].rmse.unwrap() < 1e-14);
    }

    #[test]
    fn equivalence_exact_and_sampled() {
        let rows =
            run_equivalence(6, 2, crate::design::DEFAULT_ENUMERATION_BUDGET, 0, 0, 1).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows
            .iter()
            .all(|r| r.equal == Some(true) && r.count == 1728 && r.probability == "1/15"));
        let rows = run_equivalence(6, 2, 1000, 30_000, 5, 3).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.method == "monte-carlo" && r.equal.is_none()));
        assert_eq!(rows.iter().map(|r| r.count).sum::<u64>(), 30_000);
        assert!(rows[0].p_value.unwrap() > 1e-4);
        let again = run_equivalence(6, 2, 1000, 30_000, 5, 1).unwrap();
        assert_eq!(rows, again);
        assert!(run_equivalence(6, 2, 1000, 0, 5, 1).is_err());
    }
}
