//! Randomization designs: Bernoulli, complete, and mini-batch complete
//! randomization (MBCR), plus exact enumeration of the MBCR assignment law.
//!
//! Index conventions (all 0-based):
//! * a *position* `i ∈ 0..n` is a slot of the allocation vector `a`; positions
//!   are cut into `T` full groups of `G` consecutive slots followed by one
//!   final group of `Ḡ` slots;
//! * `eta[j]` is the position assigned to unit `j`, so `eta⁻¹(i)` is the unit
//!   sitting at position `i`;
//! * `beta[i]` is the allocation slot read by position `i`; it maps every group
//!   onto itself;
//! * unit `j` receives `z[j] = a[beta[eta[j]]]`.
//!
//! Conditional on `eta`, every unit in a full group is treated with
//! probability `1/G` and every unit in the final group with `n̄₁/Ḡ`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perm::{factorial, invert, is_permutation, next_permutation};

/// Default cap on the size of the discrete space walked by exact enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("the experiment needs at least one unit")]
    EmptyPopulation,
    #[error(
        "treated count n1={n1} must satisfy 1 <= n1 <= n/2 for n={n}; \
         if more than half the units are treated, relabel the arms"
    )]
    TreatedCount { n: usize, n1: usize },
    #[error(
        "propensity {pi} must lie in (0, 1/2]; if treatment is the majority arm, relabel the arms"
    )]
    Propensity { pi: f64 },
    #[error("n={n}, n1={n1} admits no mini-batch layout: {reason}")]
    UnsupportedLayout { n: usize, n1: usize, reason: String },
    #[error("enumeration space of {size} configurations exceeds the budget of {budget}")]
    BudgetExceeded { size: String, budget: u128 },
    #[error("exact enumeration supports at most 64 units, got {0}")]
    TooManyUnits(usize),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Bernoulli,
    Complete,
    Mbcr,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Bernoulli => "bernoulli",
            Scheme::Complete => "complete",
            Scheme::Mbcr => "mbcr",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "bern" => Ok(Scheme::Bernoulli),
            "complete" | "cr" => Ok(Scheme::Complete),
            "mbcr" | "mini-batch" => Ok(Scheme::Mbcr),
            other => Err(format!(
                "unknown scheme '{other}' (expected bernoulli, complete or mbcr)"
            )),
        }
    }
}

/// Size and propensity of an experiment.
///
/// For complete and mini-batch designs `n1` is required and `pi = n1 / n`
/// exactly; Bernoulli designs carry only `pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub n: usize,
    pub n1: Option<usize>,
    pub pi: f64,
}

impl DesignParams {
    pub fn bernoulli(n: usize, pi: f64) -> Result<Self, DesignError> {
        if n == 0 {
            return Err(DesignError::EmptyPopulation);
        }
        check_propensity(pi)?;
        Ok(Self { n, n1: None, pi })
    }

    pub fn complete(n: usize, n1: usize) -> Result<Self, DesignError> {
        check_treated_count(n, n1)?;
        Ok(Self {
            n,
            n1: Some(n1),
            pi: n1 as f64 / n as f64,
        })
    }

    pub fn n0(&self) -> Option<usize> {
        self.n1.map(|n1| self.n - n1)
    }
}

fn check_propensity(pi: f64) -> Result<(), DesignError> {
    if pi.is_finite() && pi > 0.0 && pi <= 0.5 {
        Ok(())
    } else {
        Err(DesignError::Propensity { pi })
    }
}

fn check_treated_count(n: usize, n1: usize) -> Result<(), DesignError> {
    if n == 0 {
        return Err(DesignError::EmptyPopulation);
    }
    if n1 < 1 || 2 * n1 > n {
        return Err(DesignError::TreatedCount { n, n1 });
    }
    Ok(())
}

/// Batching arithmetic of mini-batch complete randomization for `(n, n1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MbcrLayout {
    n: usize,
    n1: usize,
    group_size: usize,
    full_groups: usize,
    final_size: usize,
    final_treated: usize,
    #[serde(skip)]
    allocation: Vec<bool>,
}

/// Computes the mini-batch layout for `n` units of which `n1` are treated.
///
/// `G = ⌈n/n1⌉`; the number of full groups `T` and the final-group treated
/// count `n̄₁ ∈ {0, 1, 2}` follow the three-case rule (exact division, final
/// group of at least two units with one treated, otherwise two treated in
/// the final group).
///
/// Pairs for which the three-case rule does not yield a usable final group
/// are rejected: the final group must hold at least two units and strictly
/// more units than treated ones, otherwise its units would have conditional
/// propensity one and the Horvitz-Thompson weights would be undefined. For
/// non-integral `n/n1` this happens exactly when `n1·G − n ≥ 2G − 2`.
pub fn compute_layout(n: usize, n1: usize) -> Result<MbcrLayout, DesignError> {
    check_treated_count(n, n1)?;
    let g = n.div_ceil(n1);
    let (full_groups, final_treated) = if n.is_multiple_of(n1) {
        (n1, 0)
    } else if n as i128 - (n1 as i128 - 1) * g as i128 >= 2 {
        (n1 - 1, 1)
    } else {
        (n1 - 2, 2)
    };
    let used = full_groups * g;
    if used > n {
        return Err(DesignError::UnsupportedLayout {
            n,
            n1,
            reason: format!("{full_groups} groups of size {g} exceed the population"),
        });
    }
    let final_size = n - used;
    if final_treated > 0 && (final_size < 2 || final_size <= final_treated) {
        return Err(DesignError::UnsupportedLayout {
            n,
            n1,
            reason: format!(
                "final group of {final_size} units cannot hold {final_treated} treated units \
                 alongside at least one control; use complete randomization with \
                 sub-Bernoulli intervals instead"
            ),
        });
    }
    let mut allocation = Vec::with_capacity(n);
    for _ in 0..full_groups {
        allocation.push(true);
        allocation.extend(std::iter::repeat_n(false, g - 1));
    }
    allocation.extend(std::iter::repeat_n(true, final_treated));
    allocation.extend(std::iter::repeat_n(false, final_size - final_treated));
    Ok(MbcrLayout {
        n,
        n1,
        group_size: g,
        full_groups,
        final_size,
        final_treated,
        allocation,
    })
}

impl MbcrLayout {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// Propensity `n1 / n`.
    pub fn pi(&self) -> f64 {
        self.n1 as f64 / self.n as f64
    }

    /// Full-group size `G`.
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Number of full groups `T`.
    pub fn full_groups(&self) -> usize {
        self.full_groups
    }

    /// Final-group size `Ḡ`.
    pub fn final_size(&self) -> usize {
        self.final_size
    }

    /// Treated units in the final group, `n̄₁`.
    pub fn final_treated(&self) -> usize {
        self.final_treated
    }

    /// `G̃ = Ḡ / n̄₁`, defined when the final group has treated units.
    pub fn gtilde(&self) -> Option<f64> {
        (self.final_treated > 0).then(|| self.final_size as f64 / self.final_treated as f64)
    }

    /// Pre-randomization allocation vector `a`.
    pub fn allocation(&self) -> &[bool] {
        &self.allocation
    }

    /// True when `n1` divides `n`, i.e. `π = 1/K` and there is no final group.
    pub fn is_exact(&self) -> bool {
        self.final_treated == 0
    }

    /// Total group count `T̄ = T + 1{Ḡ > 0}`.
    pub fn group_count(&self) -> usize {
        self.full_groups + usize::from(self.final_size > 0)
    }

    /// Positions covered by group `t` (0-based, `t < group_count()`).
    pub fn group_positions(&self, t: usize) -> Range<usize> {
        assert!(t < self.group_count(), "group index {t} out of range");
        if t < self.full_groups {
            t * self.group_size..(t + 1) * self.group_size
        } else {
            self.full_groups * self.group_size..self.n
        }
    }

    /// Conditional treatment probability of every unit in group `t`.
    pub fn group_propensity(&self, t: usize) -> f64 {
        if t < self.full_groups {
            1.0 / self.group_size as f64
        } else {
            self.final_treated as f64 / self.final_size as f64
        }
    }

    /// Group index of position `i`.
    pub fn group_of_position(&self, i: usize) -> usize {
        (i / self.group_size).min(self.group_count() - 1)
    }
}

/// Permutations drawn by one run of mini-batch complete randomization.
#[derive(Debug, Clone, PartialEq)]
pub struct MbcrDetail {
    layout: MbcrLayout,
    beta: Vec<usize>,
    eta: Vec<usize>,
    eta_inv: Vec<usize>,
}

impl MbcrDetail {
    /// Validates that `eta` permutes `0..n` and `beta` permutes every group
    /// of positions onto itself.
    pub fn new(layout: MbcrLayout, beta: Vec<usize>, eta: Vec<usize>) -> Result<Self, DesignError> {
        let n = layout.n();
        if beta.len() != n || eta.len() != n {
            return Err(DesignError::InvalidAssignment(format!(
                "beta and eta must both have length {n}"
            )));
        }
        if !is_permutation(&eta) {
            return Err(DesignError::InvalidAssignment(
                "eta is not a permutation of the units".into(),
            ));
        }
        if !is_permutation(&beta) {
            return Err(DesignError::InvalidAssignment(
                "beta is not a permutation of the positions".into(),
            ));
        }
        for t in 0..layout.group_count() {
            let range = layout.group_positions(t);
            if beta[range.clone()].iter().any(|b| !range.contains(b)) {
                return Err(DesignError::InvalidAssignment(format!(
                    "beta moves a position out of group {t}"
                )));
            }
        }
        let eta_inv = invert(&eta);
        Ok(Self {
            layout,
            beta,
            eta,
            eta_inv,
        })
    }

    pub fn layout(&self) -> &MbcrLayout {
        &self.layout
    }

    pub fn beta(&self) -> &[usize] {
        &self.beta
    }

    pub fn eta(&self) -> &[usize] {
        &self.eta
    }

    pub fn eta_inv(&self) -> &[usize] {
        &self.eta_inv
    }

    /// Unit at position `i`, i.e. `η⁻¹(i)`.
    pub fn unit_at(&self, i: usize) -> usize {
        self.eta_inv[i]
    }

    /// Treatment handed to position `i`, `a[β(i)]`.
    pub fn treatment_at(&self, i: usize) -> bool {
        self.layout.allocation[self.beta[i]]
    }

    /// Treatment vector indexed by unit.
    pub fn treatment_vector(&self) -> Vec<bool> {
        (0..self.layout.n)
            .map(|j| self.treatment_at(self.eta[j]))
            .collect()
    }

    /// Unit index sets `g_1 … g_T` followed by `ḡ` when present.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        (0..self.layout.group_count())
            .map(|t| {
                self.layout
                    .group_positions(t)
                    .map(|i| self.eta_inv[i])
                    .collect()
            })
            .collect()
    }
}

/// A realized treatment vector together with the design that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    z: Vec<bool>,
    scheme: Scheme,
    pi: f64,
    mbcr: Option<MbcrDetail>,
}

impl Assignment {
    /// Bernoulli assignment from an explicit treatment vector.
    pub fn bernoulli(z: Vec<bool>, pi: f64) -> Result<Self, DesignError> {
        if z.is_empty() {
            return Err(DesignError::EmptyPopulation);
        }
        check_propensity(pi)?;
        Ok(Self {
            z,
            scheme: Scheme::Bernoulli,
            pi,
            mbcr: None,
        })
    }

    /// Complete-randomization assignment; `n1` is read off `z`.
    pub fn complete(z: Vec<bool>) -> Result<Self, DesignError> {
        let n1 = z.iter().filter(|&&b| b).count();
        let params = DesignParams::complete(z.len(), n1)?;
        Ok(Self {
            z,
            scheme: Scheme::Complete,
            pi: params.pi,
            mbcr: None,
        })
    }

    /// Mini-batch assignment; the treatment vector is derived from the detail.
    pub fn mbcr(detail: MbcrDetail) -> Self {
        let z = detail.treatment_vector();
        let pi = detail.layout.pi();
        Self {
            z,
            scheme: Scheme::Mbcr,
            pi,
            mbcr: Some(detail),
        }
    }

    /// Mini-batch assignment with an observed treatment vector that must agree
    /// with the permutations.
    pub fn mbcr_with_observed(detail: MbcrDetail, z: &[bool]) -> Result<Self, DesignError> {
        let a = Self::mbcr(detail);
        if a.z != z {
            let j = a.z.iter().zip(z).position(|(x, y)| x != y).unwrap_or(0);
            return Err(DesignError::InvalidAssignment(format!(
                "observed treatment of unit {j} disagrees with the permutations (a[beta[eta[{j}]]])"
            )));
        }
        Ok(a)
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn n1(&self) -> usize {
        self.z.iter().filter(|&&b| b).count()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Marginal propensity.
    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn mbcr_detail(&self) -> Option<&MbcrDetail> {
        self.mbcr.as_ref()
    }
}

/// Draws `n` independent Bernoulli(π) treatments.
pub fn draw_bernoulli<R: Rng + ?Sized>(
    n: usize,
    pi: f64,
    rng: &mut R,
) -> Result<Assignment, DesignError> {
    let params = DesignParams::bernoulli(n, pi)?;
    let z = (0..params.n).map(|_| rng.gen_bool(pi)).collect();
    Assignment::bernoulli(z, pi)
}

/// Uniformly shuffles `n1` ones and `n - n1` zeros.
pub fn draw_complete<R: Rng + ?Sized>(
    n: usize,
    n1: usize,
    rng: &mut R,
) -> Result<Assignment, DesignError> {
    check_treated_count(n, n1)?;
    let mut z = vec![false; n];
    z[..n1].fill(true);
    z.shuffle(rng);
    Assignment::complete(z)
}

/// Runs mini-batch complete randomization.
///
/// Draws `β_1 … β_T` uniformly on each full group, `β̄` on the final group
/// when `Ḡ ≥ 2`, then `η` uniformly on all units, in that order.
pub fn draw_mbcr<R: Rng + ?Sized>(layout: &MbcrLayout, rng: &mut R) -> Assignment {
    let mut beta: Vec<usize> = (0..layout.n).collect();
    for t in 0..layout.group_count() {
        let range = layout.group_positions(t);
        if range.len() >= 2 {
            beta[range].shuffle(rng);
        }
    }
    let mut eta: Vec<usize> = (0..layout.n).collect();
    eta.shuffle(rng);
    let eta_inv = invert(&eta);
    Assignment::mbcr(MbcrDetail {
        layout: layout.clone(),
        beta,
        eta,
        eta_inv,
    })
}

/// Size of the space `S(G)^T × S(Ḡ) × S(n)` walked by exact enumeration,
/// or `None` on overflow.
pub fn enumeration_size(layout: &MbcrLayout) -> Option<u128> {
    let per_group = factorial(layout.group_size)?;
    let mut size = 1u128;
    for _ in 0..layout.full_groups {
        size = size.checked_mul(per_group)?;
    }
    size.checked_mul(factorial(layout.final_size)?)?
        .checked_mul(factorial(layout.n)?)
}

/// Number of within-group permutation tuples `S(G)^T × S(Ḡ)`.
pub fn within_group_size(layout: &MbcrLayout) -> Option<u128> {
    let per_group = factorial(layout.group_size)?;
    let mut size = factorial(layout.final_size)?;
    for _ in 0..layout.full_groups {
        size = size.checked_mul(per_group)?;
    }
    Some(size)
}

/// Calls `visit` once for every within-group permutation `β` of the layout,
/// in odometer order over groups.
pub(crate) fn for_each_beta(layout: &MbcrLayout, mut visit: impl FnMut(&[usize])) {
    let mut beta: Vec<usize> = (0..layout.n).collect();
    let groups: Vec<Range<usize>> = (0..layout.group_count())
        .map(|t| layout.group_positions(t))
        .collect();
    loop {
        visit(&beta);
        // advance the odometer; a group that wraps resets to identity and
        // carries into the next one
        let mut carried = true;
        for range in &groups {
            if next_permutation(&mut beta[range.clone()]) {
                carried = false;
                break;
            }
        }
        if carried {
            return;
        }
    }
}

/// Exact law of the MBCR treatment vector, as integer counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MbcrDistribution {
    n: usize,
    n1: usize,
    counts: BTreeMap<u64, u64>,
    total: u64,
}

fn encode(z: &[bool]) -> u64 {
    z.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
}

fn decode(mask: u64, n: usize) -> Vec<bool> {
    (0..n).map(|j| mask >> (n - 1 - j) & 1 == 1).collect()
}

impl MbcrDistribution {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// Number of `(β, η)` configurations walked.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Number of distinct treatment vectors reached.
    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    /// `(z, count)` pairs ordered by `z` read as a binary string.
    pub fn rows(&self) -> impl Iterator<Item = (Vec<bool>, u64)> + '_ {
        self.counts.iter().map(|(&m, &c)| (decode(m, self.n), c))
    }

    pub fn count(&self, z: &[bool]) -> u64 {
        if z.len() != self.n {
            return 0;
        }
        self.counts.get(&encode(z)).copied().unwrap_or(0)
    }

    /// Exact probability of `z`.
    pub fn probability(&self, z: &[bool]) -> Ratio<u64> {
        Ratio::new(self.count(z), self.total)
    }

    /// True when every one of the `C(n, n1)` vectors with `n1` ones has
    /// probability exactly `1 / C(n, n1)` and nothing else is reachable.
    pub fn is_complete_randomization(&self) -> bool {
        let arrangements: u64 = num_integer::binomial(self.n as u64, self.n1 as u64);
        if self.counts.len() as u64 != arrangements {
            return false;
        }
        let uniform = Ratio::new(1, arrangements);
        self.counts.iter().all(|(&mask, &c)| {
            mask.count_ones() as usize == self.n1 && Ratio::new(c, self.total) == uniform
        })
    }
}

/// Enumerates every `(β_1, …, β_T, β̄, η)` and counts the treatment vectors
/// they produce. Refuses (never samples) when the space exceeds `budget`.
pub fn enumerate_mbcr_distribution(
    layout: &MbcrLayout,
    budget: u128,
) -> Result<MbcrDistribution, DesignError> {
    let n = layout.n;
    if n > 64 {
        return Err(DesignError::TooManyUnits(n));
    }
    let size = enumeration_size(layout);
    match size {
        Some(s) if s <= budget => {}
        _ => {
            return Err(DesignError::BudgetExceeded {
                size: size.map_or_else(|| "more than 2^128".to_string(), |s| s.to_string()),
                budget,
            })
        }
    }
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    let mut total = 0u64;
    let a = &layout.allocation;
    let mut by_position = vec![false; n];
    for_each_beta(layout, |beta| {
        for (i, slot) in by_position.iter_mut().enumerate() {
            *slot = a[beta[i]];
        }
        let mut eta: Vec<usize> = (0..n).collect();
        loop {
            let mask = eta
                .iter()
                .fold(0u64, |acc, &pos| (acc << 1) | u64::from(by_position[pos]));
            *counts.entry(mask).or_insert(0) += 1;
            total += 1;
            if !next_permutation(&mut eta) {
                break;
            }
        }
    });
    Ok(MbcrDistribution {
        n,
        n1: layout.n1,
        counts,
        total,
    })
}
