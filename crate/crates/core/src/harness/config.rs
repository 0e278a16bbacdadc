//! Declarative experiment description, read from JSON.

use serde::{Deserialize, Serialize};

use crate::design::{compute_layout, Scheme};
use crate::dgp::DgpSpec;
use crate::interval::{check_compatible, IntervalOptions, LambdaRule, Method, ScaleRule};
use crate::SCHEMA_VERSION;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Coverage,
    WidthScaling,
    Rmse,
    Equivalence,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Coverage => "coverage",
            Experiment::WidthScaling => "width-scaling",
            Experiment::Rmse => "rmse",
            Experiment::Equivalence => "equivalence",
        }
    }
}

/// Which estimand a replication targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// One table per grid cell; target `ψ_DB`.
    DesignBased,
    /// A fresh table every replication; target `ψ_iid`.
    Superpopulation,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::DesignBased => "design-based",
            Setting::Superpopulation => "superpopulation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    /// Propensities; mutually exclusive with `n1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    /// Treated counts; mutually exclusive with `pi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<Vec<usize>>,
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
}

fn default_alpha() -> Vec<f64> {
    vec![0.05]
}

fn default_setting() -> OneOrMany<Setting> {
    OneOrMany::One(Setting::DesignBased)
}

fn default_replications() -> usize {
    1000
}

fn default_budget() -> u128 {
    crate::design::DEFAULT_ENUMERATION_BUDGET
}

fn default_mc_draws() -> u64 {
    100_000
}

/// A method, optionally pinned to a scheme with `"method:scheme"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodSpec {
    pub method: Method,
    pub scheme: Scheme,
}

impl MethodSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let (m, s) = match text.split_once(':') {
            Some((m, s)) => (m, Some(s)),
            None => (text, None),
        };
        let method: Method = m.trim().parse()?;
        let scheme = match s {
            Some(s) => s.trim().parse()?,
            None => method.default_scheme(),
        };
        Ok(Self { method, scheme })
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.method, self.scheme)
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        MethodSpec::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub grid: Grid,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    /// Designs whose estimator is studied by the RMSE experiment.
    #[serde(default)]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_dgp")]
    pub dgp: DgpSpec,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_setting")]
    pub setting: OneOrMany<Setting>,
    #[serde(default)]
    pub clip: bool,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default)]
    pub scale_rule: ScaleRule,
    /// Largest configuration space the equivalence experiment enumerates.
    #[serde(default = "default_budget")]
    pub enumeration_budget: u128,
    /// Draws for the approximate check used when enumeration is refused.
    #[serde(default = "default_mc_draws")]
    pub monte_carlo_draws: u64,
}

fn default_dgp() -> DgpSpec {
    DgpSpec::fig2a()
}

/// One `(n, n1?, π)` point of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignPoint {
    pub n: usize,
    /// Integral treated count, when `nπ` is (numerically) an integer.
    pub n1: Option<usize>,
    pub pi: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        // serde_json messages already end with "at line L column C"
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn settings(&self) -> Vec<Setting> {
        let mut s = self.setting.to_vec();
        s.dedup();
        s
    }

    pub fn options(&self) -> IntervalOptions {
        IntervalOptions {
            lambda_rule: self.lambda_rule,
            scale_rule: self.scale_rule,
            clip: self.clip,
        }
    }

    /// Grid points in configuration order (n outermost).
    pub fn design_points(&self) -> Vec<DesignPoint> {
        let mut points = Vec::new();
        for &n in &self.grid.n {
            if let Some(n1s) = &self.grid.n1 {
                for &n1 in n1s {
                    points.push(DesignPoint {
                        n,
                        n1: Some(n1),
                        pi: n1 as f64 / n as f64,
                    });
                }
            } else if let Some(pis) = &self.grid.pi {
                for &pi in pis {
                    let raw = n as f64 * pi;
                    let rounded = raw.round();
                    let n1 = ((raw - rounded).abs() <= 1e-9 * raw.max(1.0) && rounded >= 1.0)
                        .then_some(rounded as usize);
                    // keep π exact for integral cells
                    let pi = n1.map_or(pi, |k| k as f64 / n as f64);
                    points.push(DesignPoint { n, n1, pi });
                }
            }
        }
        points
    }

    /// Checks everything that can be checked without running replications.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &str, msg: String| Err(HarnessError::Config(format!("{field}: {msg}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!(
                    "unsupported version {} (this build reads {SCHEMA_VERSION})",
                    self.schema_version
                ),
            );
        }
        if self.grid.n.is_empty() || self.grid.n.contains(&0) {
            return bad(
                "grid.n",
                "must be a non-empty list of positive integers".into(),
            );
        }
        match (&self.grid.pi, &self.grid.n1) {
            (Some(_), Some(_)) => return bad("grid", "give either 'pi' or 'n1', not both".into()),
            (None, None) => return bad("grid", "one of 'pi' or 'n1' is required".into()),
            (Some(p), None) => {
                if p.is_empty() {
                    return bad("grid.pi", "must not be empty".into());
                }
                if let Some(&x) = p.iter().find(|&&x| !(x > 0.0 && x <= 0.5)) {
                    return bad("grid.pi", format!("{x} is outside (0, 1/2]; relabel the arms if treatment is the majority"));
                }
            }
            (None, Some(k)) => {
                if k.is_empty() {
                    return bad("grid.n1", "must not be empty".into());
                }
                for &n in &self.grid.n {
                    if let Some(&x) = k.iter().find(|&&x| x < 1 || 2 * x > n) {
                        return bad("grid.n1", format!("{x} is outside [1, n/2] for n={n}"));
                    }
                }
            }
        }
        if self.grid.alpha.is_empty() {
            return bad("grid.alpha", "must not be empty".into());
        }
        if let Some(&a) = self.grid.alpha.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return bad("grid.alpha", format!("{a} is outside (0, 1)"));
        }
        if self.replications == 0 {
            return bad("replications", "must be at least 1".into());
        }
        self.dgp
            .validate()
            .map_err(|e| HarnessError::Config(format!("dgp: {e}")))?;
        if let DgpSpec::FixedTable { path } = &self.dgp {
            if !path.is_file() {
                return bad("dgp.path", format!("{} does not exist", path.display()));
            }
            if self.settings().contains(&Setting::Superpopulation) {
                return bad(
                    "setting",
                    "a fixed table has no superpopulation; use design-based".into(),
                );
            }
        }
        match self.experiment {
            Experiment::Coverage | Experiment::WidthScaling => {
                if self.methods.is_empty() {
                    return bad("methods", "at least one method is required".into());
                }
                for spec in &self.methods {
                    // layout-free compatibility (Bernoulli misuse, Studentized on complete)
                    if let Err(e) = check_compatible(spec.method, spec.scheme, None) {
                        let layout_dependent = spec.scheme == Scheme::Complete
                            && matches!(spec.method, Method::HoeffMbcr | Method::SubBernoulliMbcr);
                        if !layout_dependent {
                            return bad("methods", e.to_string());
                        }
                    }
                }
            }
            Experiment::Rmse => {}
            Experiment::Equivalence => {
                for p in self.design_points() {
                    if p.n1.is_none() {
                        return bad(
                            "grid",
                            format!(
                                "n={n}, pi={pi} does not give an integral n1",
                                n = p.n,
                                pi = p.pi
                            ),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    /// Schemes studied by the RMSE experiment.
    pub fn rmse_schemes(&self) -> Vec<Scheme> {
        if self.schemes.is_empty() {
            vec![Scheme::Mbcr, Scheme::Bernoulli]
        } else {
            self.schemes.clone()
        }
    }
}

/// Reason a method cannot run at a design point, if any.
pub fn precondition_failure(
    spec: &MethodSpec,
    point: &DesignPoint,
    options: &IntervalOptions,
) -> Option<String> {
    let needs_count = spec.scheme != Scheme::Bernoulli;
    let n1 = match (needs_count, point.n1) {
        (true, None) => {
            return Some(format!(
                "{} randomization needs an integral treated count; n*pi = {}",
                spec.scheme,
                point.n as f64 * point.pi
            ))
        }
        (_, n1) => n1,
    };
    let layout = match (spec.scheme, n1) {
        (Scheme::Bernoulli, _) | (_, None) => None,
        (_, Some(k)) => match compute_layout(point.n, k) {
            Ok(l) => Some(l),
            Err(e) if spec.scheme == Scheme::Mbcr => return Some(e.to_string()),
            Err(_) => None,
        },
    };
    if let Err(e) = check_compatible(spec.method, spec.scheme, layout.as_ref()) {
        return Some(e.to_string());
    }
    if spec.method == Method::Studentized {
        let groups = layout.as_ref().map_or(point.n, |l| l.group_count());
        if groups < 4 {
            return Some(format!(
                "insufficient groups for cross-fitting: need at least 4, have {groups}"
            ));
        }
        if options.scale_rule == ScaleRule::Literal {
            let g = layout
                .as_ref()
                .map_or(1.0 / point.pi, |l| l.group_size() as f64);
            if 1.0 / (1.0 - g) + 1.0 <= 0.0 {
                return Some("literal scale constant is not positive for this design".into());
            }
        }
    }
    None
}
