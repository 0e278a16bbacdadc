//! Confidence intervals for the average treatment effect.
//!
//! Every constructor records the constants it used in a [`Tuning`] value.
//! Endpoints are always computed *from* the tuning record, so a serialized
//! interval can be re-evaluated and reproduces its endpoints bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::design::{MbcrLayout, Scheme};
use crate::estimator::{
    groupwise_sums, ht_mbcr, ht_standard, EstimateVariant, EstimatorError, ObservedData,
};

#[derive(Debug, Error)]
pub enum IntervalError {
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    Alpha(f64),
    #[error("{0}")]
    Domain(String),
    #[error("insufficient groups for cross-fitting: need at least 4, have {0}")]
    InsufficientGroups(usize),
    #[error("method {method} cannot be used with {scheme} assignments: {reason}")]
    Incompatible {
        method: Method,
        scheme: Scheme,
        reason: String,
    },
    #[error("both arms must contain at least one unit")]
    EmptyArm,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    HoeffMbcr,
    SubBernoulliBern,
    SubBernoulliMbcr,
    Studentized,
    NaiveHoeffding,
    Clt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::HoeffMbcr,
        Method::SubBernoulliBern,
        Method::SubBernoulliMbcr,
        Method::Studentized,
        Method::NaiveHoeffding,
        Method::Clt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::HoeffMbcr => "hoeff-mbcr",
            Method::SubBernoulliBern => "sub-bernoulli-bern",
            Method::SubBernoulliMbcr => "sub-bernoulli-mbcr",
            Method::Studentized => "studentized",
            Method::NaiveHoeffding => "naive-hoeffding",
            Method::Clt => "clt",
        }
    }

    /// Scheme a method runs under when none is requested.
    pub fn default_scheme(self) -> Scheme {
        match self {
            Method::HoeffMbcr | Method::SubBernoulliMbcr | Method::Studentized => Scheme::Mbcr,
            Method::SubBernoulliBern | Method::NaiveHoeffding | Method::Clt => Scheme::Bernoulli,
        }
    }

    /// True when the interval depends on the data only through a point
    /// estimate and closed-form constants.
    pub fn is_closed_form(self) -> bool {
        !matches!(self, Method::Studentized | Method::Clt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!(
                    "unknown method '{s}' (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Choice of λ for the mini-batch sub-Bernoulli interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// `√(2 log(2/α) / (4TG² + 4Ḡ²))`, matched to the variance proxy of the
    /// bound; attains the `√(8 log(2/α)/(nπ))` width.
    #[default]
    Appendix,
    /// `√(2 log(2/α) / (TG²))`.
    MainText,
}

/// Scale constant `c` of the Studentized interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleRule {
    /// `1/(1 − 1/G) + 1`, the one-sided range of a centered pseudo-outcome.
    #[default]
    Corrected,
    /// `1/(1 − G) + 1` as printed; non-positive for `G = 2`.
    Literal,
}

/// Cross-fitting statistics for one variant (standard or mirrored).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitTerms {
    pub sum: f64,
    pub v1: f64,
    pub v2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl SplitTerms {
    fn penalty(&self, n: f64, log_term: f64) -> f64 {
        (self.gamma2 * self.v1 + log_term) / (n * self.lambda2)
            + (self.gamma1 * self.v2 + log_term) / (n * self.lambda1)
    }
}

/// Constants used to build an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Tuning {
    /// Half-width `c_n √(2L/n)`.
    Hoeffding {
        psi_hat: f64,
        n: f64,
        log_term: f64,
        c_n: f64,
    },
    /// Half-width `(L + κ)/(nλ)`.
    SubBernoulli {
        psi_hat: f64,
        n: f64,
        log_term: f64,
        lambda: f64,
        kappa: f64,
    },
    /// Half-width `r √(L/(2n))` with `r = 1/(1 − π) + 1/π`.
    Naive {
        psi_hat: f64,
        n: f64,
        log_term: f64,
        range: f64,
    },
    /// Half-width `z √(V/n)`.
    Normal {
        psi_hat: f64,
        n: f64,
        z: f64,
        variance: f64,
    },
    /// Lower endpoint `Σθ̂ℓ/n − penalty(ℓ)`, upper `Σθ̂u/n + penalty(u)`.
    Studentized {
        n: f64,
        log_term: f64,
        c: f64,
        lower: SplitTerms,
        upper: SplitTerms,
    },
}

impl Tuning {
    /// Unclipped endpoints implied by the constants.
    pub fn endpoints(&self) -> (f64, f64) {
        match *self {
            Tuning::Hoeffding {
                psi_hat,
                n,
                log_term,
                c_n,
            } => {
                let h = c_n * (2.0 * log_term / n).sqrt();
                (psi_hat - h, psi_hat + h)
            }
            Tuning::SubBernoulli {
                psi_hat,
                n,
                log_term,
                lambda,
                kappa,
            } => {
                let h = (log_term + kappa) / (n * lambda);
                (psi_hat - h, psi_hat + h)
            }
            Tuning::Naive {
                psi_hat,
                n,
                log_term,
                range,
            } => {
                let h = range * (log_term / (2.0 * n)).sqrt();
                (psi_hat - h, psi_hat + h)
            }
            Tuning::Normal {
                psi_hat,
                n,
                z,
                variance,
            } => {
                let h = z * (variance / n).sqrt();
                (psi_hat - h, psi_hat + h)
            }
            Tuning::Studentized {
                n,
                log_term,
                lower,
                upper,
                ..
            } => (
                lower.sum / n - lower.penalty(n, log_term),
                upper.sum / n + upper.penalty(n, log_term),
            ),
        }
    }

    /// Point estimate the interval is built around. For the Studentized
    /// interval this is the standard (lower-anchor) estimate.
    pub fn center(&self) -> f64 {
        match *self {
            Tuning::Hoeffding { psi_hat, .. }
            | Tuning::SubBernoulli { psi_hat, .. }
            | Tuning::Naive { psi_hat, .. }
            | Tuning::Normal { psi_hat, .. } => psi_hat,
            Tuning::Studentized { n, lower, .. } => lower.sum / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub method: Method,
    pub tuning: Tuning,
    /// Whether endpoints were clipped to `[-1, 1]`.
    pub clipped: bool,
}

impl Interval {
    pub fn from_tuning(method: Method, alpha: f64, tuning: Tuning, clip: bool) -> Self {
        let (mut lower, mut upper) = tuning.endpoints();
        if clip {
            lower = lower.clamp(-1.0, 1.0);
            upper = upper.clamp(-1.0, 1.0);
        }
        Self {
            lower,
            upper,
            alpha,
            method,
            tuning,
            clipped: clip,
        }
    }

    /// Recomputes the interval from its tuning record.
    pub fn reevaluate(&self) -> Interval {
        Interval::from_tuning(self.method, self.alpha, self.tuning.clone(), self.clipped)
    }

    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }

    pub fn center(&self) -> f64 {
        self.tuning.center()
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    /// Returns a copy with endpoints clipped to `[-1, 1]`.
    pub fn clipped(&self) -> Interval {
        Interval::from_tuning(self.method, self.alpha, self.tuning.clone(), true)
    }
}

fn log_term(alpha: f64) -> Result<f64, IntervalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok((2.0 / alpha).ln())
    } else {
        Err(IntervalError::Alpha(alpha))
    }
}

/// Sub-Bernoulli cumulant generating function
/// `log(b/(b−a) e^{λa} − a/(b−a) e^{λb})` for `a < 0 < b`.
pub fn gamma_b(lambda: f64, a: f64, b: f64) -> Result<f64, IntervalError> {
    if !(a < 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(IntervalError::Domain(format!(
            "sub-Bernoulli range needs a < 0 < b, got a={a}, b={b}"
        )));
    }
    if !lambda.is_finite() {
        return Err(IntervalError::Domain(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    let w_hi = -a / (b - a);
    let w_lo = b / (b - a);
    let s = lambda * (b - a);
    // factor out e^{λa} (or e^{λb} for large spreads) before taking the log
    let value = if s.abs() < 1.0 {
        lambda * a + (w_hi * s.exp_m1()).ln_1p()
    } else if s > 0.0 {
        lambda * b + (w_hi + w_lo * (-s).exp()).ln()
    } else {
        lambda * a + (w_lo + w_hi * s.exp()).ln()
    };
    Ok(value)
}

/// One-sided sub-exponential function `c⁻²(−log(1 − cλ) − cλ)` on `0 ≤ λ < 1/c`.
pub fn gamma_e(lambda: f64, c: f64) -> Result<f64, IntervalError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(IntervalError::Domain(format!(
            "scale c must be positive, got {c}"
        )));
    }
    let x = c * lambda;
    if !(0.0..1.0).contains(&x) {
        return Err(IntervalError::Domain(format!(
            "lambda={lambda} outside [0, 1/c) for c={c}"
        )));
    }
    let core = if x < 1e-2 {
        // Σ_{k≥2} x^k / k, truncated well below double precision
        let mut term = x;
        let mut total = 0.0;
        for k in 2..=20 {
            term *= x;
            total += term / k as f64;
        }
        total
    } else {
        -(-x).ln_1p() - x
    };
    Ok(core / (c * c))
}

/// `c_n = √((TG² + Ḡ²)/n)`.
pub fn cn_mbcr(layout: &MbcrLayout) -> f64 {
    let g = layout.group_size() as f64;
    let gbar = layout.final_size() as f64;
    ((layout.full_groups() as f64 * g * g + gbar * gbar) / layout.n() as f64).sqrt()
}

/// Closed-form value or upper bound for `c_n` in terms of π alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnBound {
    pub value: f64,
    /// True when `value` equals `c_n` (no final group).
    pub exact: bool,
    /// Treated units in the final group, selecting the bound's form.
    pub final_treated: usize,
}

pub fn cn_mbcr_bounds(layout: &MbcrLayout) -> CnBound {
    let pi = layout.pi();
    let n = layout.n() as f64;
    let value = match layout.final_treated() {
        0 => 1.0 / pi.sqrt(),
        1 => (1.0 + pi) / pi.sqrt(),
        _ => ((1.0 + pi).powi(2) / pi + 2.0 * (1.0 / pi + 1.0).powi(2) / n).sqrt(),
    };
    CnBound {
        value,
        exact: layout.final_treated() == 0,
        final_treated: layout.final_treated(),
    }
}

/// Hoeffding interval under mini-batch complete randomization,
/// `ψ̂′ ± c_n √(2 log(2/α)/n)`.
pub fn hoeff_mbcr_ci(
    psi_hat: f64,
    layout: &MbcrLayout,
    alpha: f64,
) -> Result<Interval, IntervalError> {
    let tuning = Tuning::Hoeffding {
        psi_hat,
        n: layout.n() as f64,
        log_term: log_term(alpha)?,
        c_n: cn_mbcr(layout),
    };
    Ok(Interval::from_tuning(
        Method::HoeffMbcr,
        alpha,
        tuning,
        false,
    ))
}

fn check_pi(pi: f64) -> Result<(), IntervalError> {
    if pi > 0.0 && pi <= 0.5 {
        Ok(())
    } else {
        Err(IntervalError::Domain(format!(
            "propensity {pi} must lie in (0, 1/2]"
        )))
    }
}

/// Sub-Bernoulli interval valid under Bernoulli (and complete)
/// randomization with propensity `pi`.
pub fn sub_bernoulli_bern_ci(
    psi_hat: f64,
    n: usize,
    pi: f64,
    alpha: f64,
) -> Result<Interval, IntervalError> {
    let log_term = log_term(alpha)?;
    check_pi(pi)?;
    let nf = n as f64;
    let a = -1.0 / (1.0 - pi) - 1.0;
    let b = 1.0 / pi + 1.0;
    let lambda = (2.0 * log_term / (nf * (-a) * b)).sqrt();
    let kappa = nf * gamma_b(lambda, a, b)?;
    let tuning = Tuning::SubBernoulli {
        psi_hat,
        n: nf,
        log_term,
        lambda,
        kappa,
    };
    Ok(Interval::from_tuning(
        Method::SubBernoulliBern,
        alpha,
        tuning,
        false,
    ))
}

/// Sub-Bernoulli interval under mini-batch complete randomization; the final
/// group contributes its own `log cosh(2Ḡλ)` term.
pub fn sub_bernoulli_mbcr_ci(
    psi_hat: f64,
    layout: &MbcrLayout,
    alpha: f64,
    rule: LambdaRule,
) -> Result<Interval, IntervalError> {
    let log_term = log_term(alpha)?;
    let g = layout.group_size() as f64;
    let gbar = layout.final_size() as f64;
    let t = layout.full_groups() as f64;
    let lambda = match rule {
        LambdaRule::Appendix => (2.0 * log_term / (4.0 * t * g * g + 4.0 * gbar * gbar)).sqrt(),
        LambdaRule::MainText if t > 0.0 => (2.0 * log_term / (t * g * g)).sqrt(),
        LambdaRule::MainText => {
            return Err(IntervalError::Domain(
                "main-text lambda needs at least one full group".into(),
            ))
        }
    };
    let mut kappa = t * gamma_b(lambda, -2.0 * g, 2.0 * g)?;
    if gbar > 0.0 {
        kappa += gamma_b(lambda, -2.0 * gbar, 2.0 * gbar)?;
    }
    let tuning = Tuning::SubBernoulli {
        psi_hat,
        n: layout.n() as f64,
        log_term,
        lambda,
        kappa,
    };
    Ok(Interval::from_tuning(
        Method::SubBernoulliMbcr,
        alpha,
        tuning,
        false,
    ))
}

/// Dispatches to the Bernoulli or mini-batch sub-Bernoulli interval.
pub fn sub_bernoulli_ci(
    psi_hat: f64,
    scheme: Scheme,
    n: usize,
    pi: f64,
    layout: Option<&MbcrLayout>,
    alpha: f64,
    rule: LambdaRule,
) -> Result<Interval, IntervalError> {
    match (scheme, layout) {
        (Scheme::Mbcr, Some(layout)) => sub_bernoulli_mbcr_ci(psi_hat, layout, alpha, rule),
        (Scheme::Mbcr, None) => Err(IntervalError::Domain(
            "mini-batch sub-Bernoulli interval needs the layout".into(),
        )),
        _ => sub_bernoulli_bern_ci(psi_hat, n, pi, alpha),
    }
}

/// Two-sided version of the textbook Hoeffding bound,
/// `ψ̂ ± (1/(1−π) + 1/π) √(log(2/α)/(2n))`.
pub fn naive_hoeffding_ci(
    psi_hat: f64,
    n: usize,
    pi: f64,
    alpha: f64,
) -> Result<Interval, IntervalError> {
    let log_term = log_term(alpha)?;
    check_pi(pi)?;
    let tuning = Tuning::Naive {
        psi_hat,
        n: n as f64,
        log_term,
        range: 1.0 / (1.0 - pi) + 1.0 / pi,
    };
    Ok(Interval::from_tuning(
        Method::NaiveHoeffding,
        alpha,
        tuning,
        false,
    ))
}

/// Normal-approximation interval around the Horvitz-Thompson estimate with
/// the plug-in variance of the pseudo-outcomes. Asymptotic only.
pub fn clt_ci(data: &ObservedData, prop: f64, alpha: f64) -> Result<Interval, IntervalError> {
    log_term(alpha)?;
    let n1 = data.z().iter().filter(|&&z| z).count();
    if n1 == 0 || n1 == data.n() {
        return Err(IntervalError::EmptyArm);
    }
    let psi_hat = ht_standard(data, prop)?;
    let nf = data.n() as f64;
    let variance = data
        .y()
        .iter()
        .zip(data.z())
        .map(|(&y, &z)| {
            let p = if z { y / prop } else { -y / (1.0 - prop) };
            (p - psi_hat).powi(2)
        })
        .sum::<f64>()
        / nf;
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - alpha / 2.0);
    let tuning = Tuning::Normal {
        psi_hat,
        n: nf,
        z,
        variance,
    };
    Ok(Interval::from_tuning(Method::Clt, alpha, tuning, false))
}

/// Scale `c` for the Studentized interval of the given assignment.
pub fn studentized_scale(data: &ObservedData, rule: ScaleRule) -> Result<f64, IntervalError> {
    let a = data.assignment();
    // inverse propensities of the groups present: G, and G̃ for a final group
    let mut inverse_props = Vec::with_capacity(2);
    match a.mbcr_detail() {
        Some(d) => {
            let l = d.layout();
            if l.full_groups() > 0 {
                inverse_props.push(l.group_size() as f64);
            }
            if let Some(gt) = l.gtilde() {
                inverse_props.push(gt);
            }
        }
        None => inverse_props.push(1.0 / a.pi()),
    }
    let c = inverse_props
        .iter()
        .map(|&g| match rule {
            ScaleRule::Corrected => 1.0 / (1.0 - 1.0 / g),
            ScaleRule::Literal => 1.0 / (1.0 - g),
        })
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    if !(c > 0.0 && c.is_finite()) {
        return Err(IntervalError::Domain(format!(
            "scale constant c={c} is not positive; the literal scale rule is undefined for this design"
        )));
    }
    Ok(c)
}

/// Sequential squared deviations of `thetas` from running means seeded with
/// `seed_sum` over `seed_count` earlier values.
fn running_variance(thetas: &[f64], seed_sum: f64, seed_count: usize) -> f64 {
    let mut sum = seed_sum;
    let mut count = seed_count as f64;
    let mut v = 0.0;
    for &theta in thetas {
        let mu = sum / count;
        v += (theta - mu).powi(2);
        sum += theta;
        count += 1.0;
    }
    v
}

fn split_terms(thetas: &[f64], log_term: f64, c: f64) -> Result<SplitTerms, IntervalError> {
    let m1 = thetas.len() / 2;
    let (first, second) = thetas.split_at(m1);
    let sum1: f64 = first.iter().sum();
    let sum2: f64 = second.iter().sum();
    let v1 = running_variance(first, sum2, second.len());
    let v2 = running_variance(second, sum1, first.len());
    let cap = 1.0 / (2.0 * c);
    let lambda_for = |v: f64| {
        if v > 0.0 {
            (2.0 * log_term / v).sqrt().min(cap)
        } else {
            cap
        }
    };
    let lambda1 = lambda_for(v1);
    let lambda2 = lambda_for(v2);
    Ok(SplitTerms {
        sum: thetas.iter().sum(),
        v1,
        v2,
        lambda1,
        lambda2,
        gamma1: gamma_e(lambda1, c)?,
        gamma2: gamma_e(lambda2, c)?,
    })
}

/// Cross-fit Studentized interval. Each one-sided bound holds with
/// probability `1 − alpha`, so the interval covers with probability at
/// least `1 − 2·alpha`.
pub fn studentized_ci(
    data: &ObservedData,
    alpha: f64,
    rule: ScaleRule,
) -> Result<Interval, IntervalError> {
    let log_term = log_term(alpha)?;
    let scheme = data.assignment().scheme();
    if scheme != Scheme::Bernoulli && data.assignment().mbcr_detail().is_none() {
        return Err(IntervalError::Incompatible {
            method: Method::Studentized,
            scheme,
            reason: "cross-fitting needs Bernoulli singletons or mini-batch groups".into(),
        });
    }
    let lower_thetas = groupwise_sums(data, EstimateVariant::Standard)?;
    if lower_thetas.len() < 4 {
        return Err(IntervalError::InsufficientGroups(lower_thetas.len()));
    }
    let upper_thetas = groupwise_sums(data, EstimateVariant::Mirrored)?;
    let c = studentized_scale(data, rule)?;
    let tuning = Tuning::Studentized {
        n: data.n() as f64,
        log_term,
        c,
        lower: split_terms(&lower_thetas, log_term, c)?,
        upper: split_terms(&upper_thetas, log_term, c)?,
    };
    Ok(Interval::from_tuning(
        Method::Studentized,
        alpha,
        tuning,
        false,
    ))
}

/// Settings shared by [`interval_for`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalOptions {
    pub lambda_rule: LambdaRule,
    pub scale_rule: ScaleRule,
    pub clip: bool,
}

/// Rejects method and design pairs for which the interval has no guarantee.
pub fn check_compatible(
    method: Method,
    scheme: Scheme,
    layout: Option<&MbcrLayout>,
) -> Result<(), IntervalError> {
    let fail = |reason: &str| {
        Err(IntervalError::Incompatible {
            method,
            scheme,
            reason: reason.to_string(),
        })
    };
    match (method, scheme) {
        (Method::HoeffMbcr | Method::SubBernoulliMbcr, Scheme::Bernoulli) => {
            fail("it relies on exactly one treated unit per batch; use sub-bernoulli-bern")
        }
        (Method::HoeffMbcr | Method::SubBernoulliMbcr, Scheme::Complete) => match layout {
            Some(l) if l.is_exact() => Ok(()),
            _ => fail("complete randomization matches the mini-batch estimator only when n1 divides n; use scheme mbcr or sub-bernoulli-bern"),
        },
        (Method::Studentized, Scheme::Complete) => {
            fail("cross-fitting needs the mini-batch groups; use scheme mbcr")
        }
        _ => Ok(()),
    }
}

/// Computes the point estimate appropriate to `method` and builds its
/// interval. For mini-batch methods on complete-randomization data the
/// layout must be exact, in which case `ψ̂′` equals the standard estimate.
pub fn interval_for(
    method: Method,
    data: &ObservedData,
    alpha: f64,
    options: IntervalOptions,
) -> Result<Interval, IntervalError> {
    let a = data.assignment();
    let scheme = a.scheme();
    let layout_owned;
    let layout = match a.mbcr_detail() {
        Some(d) => Some(d.layout()),
        None if scheme == Scheme::Complete => {
            layout_owned = crate::design::compute_layout(a.n(), a.n1()).ok();
            layout_owned.as_ref()
        }
        None => None,
    };
    check_compatible(method, scheme, layout)?;
    let mbcr_estimate = || -> Result<f64, IntervalError> {
        match a.mbcr_detail() {
            Some(_) => Ok(ht_mbcr(data)?),
            None => Ok(ht_standard(data, a.pi())?),
        }
    };
    let interval = match method {
        Method::HoeffMbcr => hoeff_mbcr_ci(mbcr_estimate()?, layout.expect("checked"), alpha)?,
        Method::SubBernoulliMbcr => sub_bernoulli_mbcr_ci(
            mbcr_estimate()?,
            layout.expect("checked"),
            alpha,
            options.lambda_rule,
        )?,
        Method::SubBernoulliBern => {
            sub_bernoulli_bern_ci(ht_standard(data, a.pi())?, a.n(), a.pi(), alpha)?
        }
        Method::NaiveHoeffding => {
            naive_hoeffding_ci(ht_standard(data, a.pi())?, a.n(), a.pi(), alpha)?
        }
        Method::Clt => clt_ci(data, a.pi(), alpha)?,
        Method::Studentized => studentized_ci(data, alpha, options.scale_rule)?,
    };
    Ok(if options.clip {
        interval.clipped()
    } else {
        interval
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{compute_layout, draw_bernoulli, draw_mbcr, Assignment, MbcrDetail};
    use crate::estimator::{PotentialTable, Provenance};
    use crate::rng::seeded;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn gamma_b_values() {
        assert_eq!(gamma_b(0.0, -1.0, 2.0).unwrap(), 0.0);
        assert_relative_eq!(
            gamma_b(1.0, -1.0, 1.0).unwrap(),
            0.4337808304830272,
            epsilon = 1e-15
        );
        let ratio = gamma_b(0.1, -1.0, 2.0).unwrap() / (0.01 / 2.0);
        assert_relative_eq!(ratio, 2.0611818576836, epsilon = 1e-12);
        // far tail stays finite
        assert!(gamma_b(50.0, -30.0, 40.0).unwrap().is_finite());
        assert!(gamma_b(-50.0, -30.0, 40.0).unwrap().is_finite());
        assert!(gamma_b(0.1, 1.0, 2.0).is_err());
    }

    #[test]
    fn gamma_b_symmetric_is_log_cosh() {
        for &(lambda, b) in &[(0.3f64, 2.0f64), (1.7, 0.5), (1e-6, 3.0), (4.0, 5.0)] {
            let direct = (lambda * b).cosh().ln();
            assert_relative_eq!(
                gamma_b(lambda, -b, b).unwrap(),
                direct,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn gamma_e_values() {
        assert_eq!(gamma_e(0.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            gamma_e(0.5, 1.0).unwrap(),
            0.19314718055994531,
            epsilon = 1e-15
        );
        let ratio = gamma_e(1e-4, 2.0).unwrap() / (1e-8 / 2.0);
        assert!((ratio - 1.0).abs() < 1e-3);
        assert!(gamma_e(1.0, 1.0).is_err());
        assert!(gamma_e(0.1, 0.0).is_err());
        // series and closed form agree at the switch point
        let x = 1e-2;
        assert_relative_eq!(
            gamma_e(x * (1.0 - 1e-12), 1.0).unwrap(),
            -(-x).ln_1p() - x,
            max_relative = 1e-9
        );
    }

    #[test]
    fn hoeffding_examples() {
        let l = compute_layout(1000, 100).unwrap();
        let ci = hoeff_mbcr_ci(0.0, &l, 0.05).unwrap();
        assert_relative_eq!(ci.half_width(), 0.2716203031481239, epsilon = 1e-14);
        let l = compute_layout(9, 4).unwrap();
        assert_relative_eq!(cn_mbcr(&l), 3f64.sqrt(), epsilon = 1e-15);
        let b = cn_mbcr_bounds(&l);
        assert_relative_eq!(b.value, 2.6536138880151096, epsilon = 1e-14);
        assert!(!b.exact);
        let l = compute_layout(10, 5).unwrap();
        assert_relative_eq!(cn_mbcr(&l), 2f64.sqrt(), epsilon = 1e-15);
        assert!(hoeff_mbcr_ci(0.0, &l, 1.5).is_err());
        assert!(hoeff_mbcr_ci(0.0, &l, 0.0).is_err());
    }

    #[test]
    fn cn_bound_sweep() {
        for n in 2..=2000usize {
            for n1 in 1..=n / 2 {
                if let Ok(l) = compute_layout(n, n1) {
                    let b = cn_mbcr_bounds(&l);
                    let c = cn_mbcr(&l);
                    if b.exact {
                        assert!((b.value - c).abs() <= 1e-12 * c, "n={n} n1={n1}");
                    } else {
                        assert!(
                            b.value >= c * (1.0 - 1e-12),
                            "n={n} n1={n1}: {} < {c}",
                            b.value
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn sub_bernoulli_bern_example() {
        let ci = sub_bernoulli_bern_ci(0.0, 1000, 0.1, 0.05).unwrap();
        match ci.tuning {
            Tuning::SubBernoulli { lambda, kappa, .. } => {
                assert_relative_eq!(lambda, 0.017824212092486632, epsilon = 1e-15);
                assert_relative_eq!(kappa, 3.8865219565548527, epsilon = 1e-12);
            }
            _ => unreachable!(),
        }
        assert_relative_eq!(ci.half_width(), 0.4250062427085917, epsilon = 1e-13);
    }

    #[test]
    fn asymptotic_constants() {
        let (n, pi, alpha) = (10_000_000usize, 1e-3, 0.05);
        let l40 = (40f64).ln();
        let bern = sub_bernoulli_bern_ci(0.0, n, pi, alpha).unwrap();
        let ratio = bern.half_width() * (n as f64 * pi).sqrt() / (4.0 * l40).sqrt();
        assert_relative_eq!(ratio, 1.00396341533798, epsilon = 1e-9);
        let l = compute_layout(n, 10_000).unwrap();
        let mbcr = sub_bernoulli_mbcr_ci(0.0, &l, alpha, LambdaRule::Appendix).unwrap();
        let ratio = mbcr.half_width() * (n as f64 * pi).sqrt() / (8.0 * l40).sqrt();
        assert_relative_eq!(ratio, 0.999_938_530_768_906_7, epsilon = 1e-9);
        let main = sub_bernoulli_mbcr_ci(0.0, &l, alpha, LambdaRule::MainText).unwrap();
        assert!(main.half_width() > mbcr.half_width());
    }

    #[test]
    fn naive_examples() {
        let ci = naive_hoeffding_ci(0.0, 1000, 0.1, 0.05).unwrap();
        assert_relative_eq!(ci.half_width(), 0.47718823149637507, epsilon = 1e-14);
        let ci = naive_hoeffding_ci(0.0, 1000, 0.5, 0.05).unwrap();
        assert_relative_eq!(
            ci.half_width(),
            4.0 * ((40f64).ln() / 2000.0).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn hoeffding_narrower_than_naive() {
        for k in 4..=200usize {
            let n = 50 * k;
            let l = compute_layout(n, 50).unwrap();
            let pi = l.pi();
            let h = hoeff_mbcr_ci(0.0, &l, 0.05).unwrap().half_width();
            let naive = naive_hoeffding_ci(0.0, n, pi, 0.05).unwrap().half_width();
            assert!(h <= naive, "pi={pi}");
        }
    }

    #[test]
    fn widths_decrease_in_alpha_and_n() {
        let alphas = [0.01, 0.05, 0.1, 0.2];
        for k in [2usize, 5, 10] {
            let mut prev_n = f64::INFINITY;
            for m in [10usize, 20, 40, 80] {
                let n = k * m;
                let l = compute_layout(n, m).unwrap();
                let widths = |alpha: f64| {
                    [
                        hoeff_mbcr_ci(0.0, &l, alpha).unwrap().half_width(),
                        sub_bernoulli_bern_ci(0.0, n, l.pi(), alpha)
                            .unwrap()
                            .half_width(),
                        sub_bernoulli_mbcr_ci(0.0, &l, alpha, LambdaRule::Appendix)
                            .unwrap()
                            .half_width(),
                        naive_hoeffding_ci(0.0, n, l.pi(), alpha)
                            .unwrap()
                            .half_width(),
                    ]
                };
                let mut prev = [f64::INFINITY; 4];
                for &alpha in &alphas {
                    let w = widths(alpha);
                    for i in 0..4 {
                        assert!(w[i] < prev[i]);
                    }
                    prev = w;
                }
                let w = widths(0.05)[0];
                assert!(w < prev_n);
                prev_n = w;
            }
        }
    }

    fn mbcr_data(
        n: usize,
        n1: usize,
        seed: u64,
        y: impl Fn(&mut crate::rng::StreamRng) -> (f64, f64),
    ) -> ObservedData {
        let mut rng = seeded(seed);
        let (y0, y1): (Vec<f64>, Vec<f64>) = (0..n).map(|_| y(&mut rng)).unzip();
        let table = PotentialTable::new(y0, y1, Provenance::Fixed).unwrap();
        let layout = compute_layout(n, n1).unwrap();
        table.observe(draw_mbcr(&layout, &mut rng)).unwrap()
    }

    #[test]
    fn studentized_basic() {
        let d = mbcr_data(1000, 100, 3, |r| {
            let v = r.gen_range(0.0..0.1);
            (v, v)
        });
        let ci = studentized_ci(&d, 0.025, ScaleRule::Corrected).unwrap();
        assert!(ci.lower <= ci.upper);
        match ci.tuning {
            Tuning::Studentized {
                c, lower, upper, ..
            } => {
                let cap = 1.0 / (2.0 * c);
                for s in [lower, upper] {
                    assert!(s.lambda1 <= cap && s.lambda2 <= cap);
                }
                assert_relative_eq!(c, 1.0 / (1.0 - 0.1) + 1.0, epsilon = 1e-15);
            }
            _ => unreachable!(),
        }
        let hoeff = hoeff_mbcr_ci(
            ht_mbcr(&d).unwrap(),
            d.assignment().mbcr_detail().unwrap().layout(),
            0.05,
        )
        .unwrap();
        assert!(ci.upper - ci.center() < hoeff.half_width());
    }

    #[test]
    fn studentized_zero_variance_branch() {
        // every group sum is zero: y ≡ 0
        let d = mbcr_data(40, 10, 1, |_| (0.0, 0.0));
        let ci = studentized_ci(&d, 0.05, ScaleRule::Corrected).unwrap();
        let Tuning::Studentized {
            c,
            lower,
            log_term,
            n,
            ..
        } = ci.tuning
        else {
            unreachable!()
        };
        assert_eq!(lower.v1, 0.0);
        assert_eq!(lower.lambda1, 1.0 / (2.0 * c));
        // each split contributes log(2/α)·2c/n
        assert_relative_eq!(-ci.lower, 2.0 * log_term * 2.0 * c / n, epsilon = 1e-15);
    }

    #[test]
    fn studentized_preconditions() {
        let d = mbcr_data(6, 2, 1, |_| (0.5, 0.5));
        assert!(matches!(
            studentized_ci(&d, 0.05, ScaleRule::Corrected),
            Err(IntervalError::InsufficientGroups(2))
        ));
        let c = ObservedData::new(
            vec![0.1; 8],
            Assignment::complete(vec![true, true, false, false, false, false, false, false])
                .unwrap(),
        )
        .unwrap();
        assert!(matches!(
            studentized_ci(&c, 0.05, ScaleRule::Corrected),
            Err(IntervalError::Incompatible { .. })
        ));
        // literal scale is non-positive when G = 2
        let d = mbcr_data(40, 20, 1, |_| (0.5, 0.5));
        assert!(studentized_ci(&d, 0.05, ScaleRule::Literal).is_err());
        let d = mbcr_data(40, 10, 1, |_| (0.5, 0.5));
        assert!(studentized_ci(&d, 0.05, ScaleRule::Literal).is_ok());
    }

    #[test]
    fn studentized_bernoulli() {
        let mut rng = seeded(5);
        let table = PotentialTable::new(
            (0..200).map(|_| rng.gen()).collect(),
            (0..200).map(|_| rng.gen()).collect(),
            Provenance::Fixed,
        )
        .unwrap();
        let d = table
            .observe(draw_bernoulli(200, 0.2, &mut rng).unwrap())
            .unwrap();
        let ci = studentized_ci(&d, 0.05, ScaleRule::Corrected).unwrap();
        assert!(ci.lower < ci.upper);
        let Tuning::Studentized { c, .. } = ci.tuning else {
            unreachable!()
        };
        assert_relative_eq!(c, 1.0 / 0.8 + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn running_mean_matches_formula() {
        // m1 = 2, m2 = 3; split 1 seeded from split 2 and vice versa
        let th = [1.0, 4.0, -2.0, 0.5, 3.0];
        let s2 = -2.0 + 0.5 + 3.0;
        let v1 = (1.0 - s2 / 3.0f64).powi(2) + (4.0 - (s2 + 1.0) / 4.0f64).powi(2);
        let s1 = 5.0;
        let v2 = (-2.0 - s1 / 2.0f64).powi(2)
            + (0.5 - (s1 - 2.0) / 3.0f64).powi(2)
            + (3.0 - (s1 - 1.5) / 4.0f64).powi(2);
        let t = split_terms(&th, (40f64).ln(), 2.0).unwrap();
        assert_relative_eq!(t.v1, v1, epsilon = 1e-14);
        assert_relative_eq!(t.v2, v2, epsilon = 1e-14);
    }

    #[test]
    fn clt_examples() {
        let normal = Normal::standard();
        assert_relative_eq!(
            normal.inverse_cdf(0.975),
            1.9599639845400542,
            epsilon = 1e-9
        );
        let a = Assignment::complete(vec![true, false, true, false]).unwrap();
        let d = ObservedData::new(vec![0.0; 4], a).unwrap();
        let ci = clt_ci(&d, 0.5, 0.05).unwrap();
        assert_eq!(ci.half_width(), 0.0);
        let a = Assignment::bernoulli(vec![false; 4], 0.5).unwrap();
        let d = ObservedData::new(vec![0.2; 4], a).unwrap();
        assert!(matches!(
            clt_ci(&d, 0.5, 0.05),
            Err(IntervalError::EmptyArm)
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let d = mbcr_data(500, 50, 9, |r| (r.gen(), r.gen()));
        for m in Method::ALL {
            let Ok(ci) = interval_for(m, &d, 0.05, IntervalOptions::default()) else {
                continue;
            };
            let text = serde_json::to_string(&ci).unwrap();
            let back: Interval = serde_json::from_str(&text).unwrap();
            let again = back.reevaluate();
            assert_eq!(again.lower.to_bits(), ci.lower.to_bits(), "{m}");
            assert_eq!(again.upper.to_bits(), ci.upper.to_bits(), "{m}");
        }
    }

    #[test]
    fn compatibility_rules() {
        let l = compute_layout(9, 4).unwrap();
        assert!(check_compatible(Method::HoeffMbcr, Scheme::Bernoulli, None).is_err());
        assert!(check_compatible(Method::HoeffMbcr, Scheme::Complete, Some(&l)).is_err());
        let exact = compute_layout(9, 3).unwrap();
        assert!(check_compatible(Method::HoeffMbcr, Scheme::Complete, Some(&exact)).is_ok());
        assert!(check_compatible(Method::Studentized, Scheme::Complete, Some(&exact)).is_err());
        assert!(check_compatible(Method::SubBernoulliBern, Scheme::Complete, None).is_ok());
        let detail = MbcrDetail::new(l, (0..9).collect(), (0..9).collect()).unwrap();
        let d = ObservedData::new(vec![0.5; 9], Assignment::mbcr(detail)).unwrap();
        assert!(interval_for(Method::HoeffMbcr, &d, 0.05, IntervalOptions::default()).is_ok());
    }

    #[test]
    fn clipping() {
        let l = compute_layout(20, 2).unwrap();
        let ci = hoeff_mbcr_ci(0.3, &l, 0.05).unwrap();
        assert!(ci.lower < -1.0 && ci.upper > 1.0);
        let c = ci.clipped();
        assert_eq!((c.lower, c.upper), (-1.0, 1.0));
        assert_eq!(c.reevaluate(), c);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.as_str())
            );
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}
