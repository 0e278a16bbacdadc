//! Horvitz-Thompson pseudo-outcomes and estimators.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{
    for_each_beta, within_group_size, Assignment, DesignError, MbcrLayout, Scheme,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("outcome {value} of unit {index} lies outside [0, 1]")]
    OutcomeRange { index: usize, value: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("propensity {0} must lie strictly between 0 and 1")]
    Propensity(f64),
    #[error("the mini-batch estimator needs the permutations (beta, eta) of the assignment")]
    MissingMbcrDetail,
    #[error("{0} assignments without mini-batch permutations carry no group structure")]
    NoGroups(Scheme),
    #[error("potential-outcome table: {0}")]
    Table(String),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Whether a potential-outcome table is held fixed or was drawn from a
/// superpopulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Fixed,
    Sampled,
}

/// Per-unit potential outcomes `(y_i(0), y_i(1))`, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTable {
    y0: Vec<f64>,
    y1: Vec<f64>,
    provenance: Provenance,
}

fn check_unit_range(values: &[f64]) -> Result<(), EstimatorError> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(EstimatorError::OutcomeRange {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

#[derive(Deserialize)]
struct TableRow {
    y0: f64,
    y1: f64,
}

impl PotentialTable {
    pub fn new(y0: Vec<f64>, y1: Vec<f64>, provenance: Provenance) -> Result<Self, EstimatorError> {
        if y0.len() != y1.len() {
            return Err(EstimatorError::LengthMismatch {
                expected: y0.len(),
                got: y1.len(),
            });
        }
        if y0.is_empty() {
            return Err(DesignError::EmptyPopulation.into());
        }
        check_unit_range(&y0)?;
        check_unit_range(&y1)?;
        Ok(Self { y0, y1, provenance })
    }

    /// Reads a CSV with header `y0,y1`, one row per unit.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, EstimatorError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| EstimatorError::Table(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["y0", "y1"] {
            return Err(EstimatorError::Table(format!(
                "expected header 'y0,y1', found '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let (mut y0, mut y1) = (Vec::new(), Vec::new());
        for (line, row) in rdr.deserialize::<TableRow>().enumerate() {
            let row = row.map_err(|e| EstimatorError::Table(format!("row {}: {e}", line + 1)))?;
            y0.push(row.y0);
            y1.push(row.y1);
        }
        Self::new(y0, y1, Provenance::Fixed)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, EstimatorError> {
        let file = std::fs::File::open(path)
            .map_err(|e| EstimatorError::Table(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    pub fn n(&self) -> usize {
        self.y0.len()
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Sample average treatment effect `ψ_DB`.
    pub fn psi_db(&self) -> f64 {
        let total: f64 = self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).sum();
        total / self.n() as f64
    }

    /// Outcomes revealed by `z`.
    pub fn reveal(&self, z: &[bool]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, &t)| if t { self.y1[j] } else { self.y0[j] })
            .collect()
    }

    /// Observed data produced by running `assignment` on this table.
    pub fn observe(&self, assignment: Assignment) -> Result<ObservedData, EstimatorError> {
        let y = self.reveal(assignment.z());
        ObservedData::new(y, assignment)
    }
}

/// Realized outcomes together with the assignment that revealed them.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    y: Vec<f64>,
    assignment: Assignment,
}

impl ObservedData {
    pub fn new(y: Vec<f64>, assignment: Assignment) -> Result<Self, EstimatorError> {
        if y.len() != assignment.n() {
            return Err(EstimatorError::LengthMismatch {
                expected: assignment.n(),
                got: y.len(),
            });
        }
        check_unit_range(&y)?;
        Ok(Self { y, assignment })
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &[bool] {
        self.assignment.z()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateVariant {
    /// `y · w`, used for the lower confidence bound.
    Standard,
    /// `(y − 1) · w`, used for the upper confidence bound.
    Mirrored,
}

#[inline]
fn ipw(z: bool, prop: f64) -> f64 {
    if z {
        1.0 / prop
    } else {
        -1.0 / (1.0 - prop)
    }
}

/// Horvitz-Thompson pseudo-outcome of a single unit with treatment
/// probability `prop`.
pub fn pseudo_outcome(
    y: f64,
    z: bool,
    prop: f64,
    variant: EstimateVariant,
) -> Result<f64, EstimatorError> {
    if !(prop > 0.0 && prop < 1.0) {
        return Err(EstimatorError::Propensity(prop));
    }
    let base = match variant {
        EstimateVariant::Standard => y,
        EstimateVariant::Mirrored => y - 1.0,
    };
    Ok(base * ipw(z, prop))
}

/// `(1/n) Σ y_i (z_i/π − (1 − z_i)/(1 − π))`.
pub fn ht_standard(data: &ObservedData, prop: f64) -> Result<f64, EstimatorError> {
    if !(prop > 0.0 && prop < 1.0) {
        return Err(EstimatorError::Propensity(prop));
    }
    let total: f64 = data
        .y
        .iter()
        .zip(data.z())
        .map(|(&y, &z)| y * ipw(z, prop))
        .sum();
    Ok(total / data.n() as f64)
}

/// Mini-batch Horvitz-Thompson estimator `ψ̂′`.
///
/// Walks positions `i`; the outcome is that of unit `η⁻¹(i)` and the
/// treatment is `a[β(i)]`. Full groups use propensity `1/G`, the final group
/// `1/G̃`.
pub fn ht_mbcr(data: &ObservedData) -> Result<f64, EstimatorError> {
    let detail = data
        .assignment
        .mbcr_detail()
        .ok_or(EstimatorError::MissingMbcrDetail)?;
    let layout = detail.layout();
    let mut total = 0.0;
    for t in 0..layout.group_count() {
        let prop = layout.group_propensity(t);
        for i in layout.group_positions(t) {
            total += data.y[detail.unit_at(i)] * ipw(detail.treatment_at(i), prop);
        }
    }
    Ok(total / data.n() as f64)
}

/// Group-wise sums `θ̂_t` of pseudo-outcomes, `t = 1 … T̄`.
///
/// Mini-batch assignments yield one sum per group (final group last);
/// Bernoulli assignments degenerate to singleton groups with propensity π.
pub fn groupwise_sums(
    data: &ObservedData,
    variant: EstimateVariant,
) -> Result<Vec<f64>, EstimatorError> {
    let a = &data.assignment;
    match (a.scheme(), a.mbcr_detail()) {
        (_, Some(detail)) => {
            let layout = detail.layout();
            (0..layout.group_count())
                .map(|t| {
                    let prop = layout.group_propensity(t);
                    layout.group_positions(t).try_fold(0.0, |acc, i| {
                        let y = data.y[detail.unit_at(i)];
                        Ok(acc + pseudo_outcome(y, detail.treatment_at(i), prop, variant)?)
                    })
                })
                .collect()
        }
        (Scheme::Bernoulli, None) => data
            .y
            .iter()
            .zip(a.z())
            .map(|(&y, &z)| pseudo_outcome(y, z, a.pi(), variant))
            .collect(),
        (scheme, None) => Err(EstimatorError::NoGroups(scheme)),
    }
}

/// Exact `E[ψ̂′ | η]`: averages the mini-batch estimator over every
/// within-group permutation `β` with the unit-wide permutation held at `eta`.
pub fn conditional_mean_given_eta(
    table: &PotentialTable,
    layout: &MbcrLayout,
    eta: &[usize],
    budget: u128,
) -> Result<f64, EstimatorError> {
    let n = layout.n();
    if table.n() != n || eta.len() != n {
        return Err(EstimatorError::LengthMismatch {
            expected: n,
            got: if table.n() != n { table.n() } else { eta.len() },
        });
    }
    // validates eta as a side effect
    crate::design::MbcrDetail::new(layout.clone(), (0..n).collect(), eta.to_vec())?;
    let size = within_group_size(layout);
    match size {
        Some(s) if s <= budget => {}
        _ => {
            return Err(DesignError::BudgetExceeded {
                size: size.map_or_else(|| "more than 2^128".into(), |s| s.to_string()),
                budget,
            }
            .into())
        }
    }
    let eta_inv = crate::perm::invert(eta);
    let a = layout.allocation();
    let props: Vec<f64> = (0..n)
        .map(|i| layout.group_propensity(layout.group_of_position(i)))
        .collect();
    let mut sum = 0.0;
    let mut count = 0u64;
    for_each_beta(layout, |beta| {
        let mut est = 0.0;
        for i in 0..n {
            let unit = eta_inv[i];
            let z = a[beta[i]];
            let y = if z { table.y1[unit] } else { table.y0[unit] };
            est += y * ipw(z, props[i]);
        }
        sum += est / n as f64;
        count += 1;
    });
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        compute_layout, draw_bernoulli, draw_complete, draw_mbcr, MbcrDetail,
        DEFAULT_ENUMERATION_BUDGET,
    };
    use crate::rng::seeded;
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_table(n: usize, rng: &mut impl Rng) -> PotentialTable {
        let y0 = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y1 = (0..n).map(|_| rng.gen::<f64>()).collect();
        PotentialTable::new(y0, y1, Provenance::Fixed).unwrap()
    }

    #[test]
    fn pseudo_outcome_examples() {
        assert_eq!(
            pseudo_outcome(1.0, true, 0.1, EstimateVariant::Standard).unwrap(),
            10.0
        );
        assert_eq!(
            pseudo_outcome(1.0, true, 0.1, EstimateVariant::Mirrored).unwrap(),
            0.0
        );
        assert_relative_eq!(
            pseudo_outcome(0.5, false, 0.2, EstimateVariant::Standard).unwrap(),
            -0.625
        );
        assert!(pseudo_outcome(0.5, false, 0.0, EstimateVariant::Standard).is_err());
        assert!(pseudo_outcome(0.5, false, 1.0, EstimateVariant::Standard).is_err());
    }

    #[test]
    fn ht_standard_examples() {
        let a = Assignment::complete(vec![true, false]).unwrap();
        let d = ObservedData::new(vec![1.0, 0.0], a.clone()).unwrap();
        assert_eq!(ht_standard(&d, 0.5).unwrap(), 1.0);
        let d = ObservedData::new(vec![1.0, 1.0], a.clone()).unwrap();
        assert_eq!(ht_standard(&d, 0.5).unwrap(), 0.0);
        let d = ObservedData::new(vec![0.0, 0.0], a).unwrap();
        assert_eq!(ht_standard(&d, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn observed_data_validation() {
        let a = Assignment::complete(vec![true, false]).unwrap();
        assert!(matches!(
            ObservedData::new(vec![1.5, 0.0], a.clone()),
            Err(EstimatorError::OutcomeRange { index: 0, .. })
        ));
        assert!(matches!(
            ObservedData::new(vec![0.5], a),
            Err(EstimatorError::LengthMismatch { .. })
        ));
        assert!(PotentialTable::new(vec![0.1], vec![-0.1], Provenance::Fixed).is_err());
    }

    #[test]
    fn table_csv() {
        let t = PotentialTable::from_csv_reader("y0,y1\n0.1,0.6\n0.2, 0.2\n".as_bytes()).unwrap();
        assert_eq!(t.n(), 2);
        assert_relative_eq!(t.psi_db(), 0.25);
        assert!(PotentialTable::from_csv_reader("a,b\n0,0\n".as_bytes()).is_err());
        assert!(PotentialTable::from_csv_reader("y0,y1\n0,1.2\n".as_bytes()).is_err());
        assert!(PotentialTable::from_csv_reader("y0,y1\n0,x\n".as_bytes()).is_err());
    }

    #[test]
    fn mbcr_equals_standard_when_exact() {
        let layout = compute_layout(100, 10).unwrap();
        let mut rng = seeded(11);
        let table = random_table(100, &mut rng);
        for _ in 0..50 {
            let d = table.observe(draw_mbcr(&layout, &mut rng)).unwrap();
            assert_relative_eq!(
                ht_mbcr(&d).unwrap(),
                ht_standard(&d, 0.1).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn constant_table_gives_zero() {
        let layout = compute_layout(30, 5).unwrap();
        let table = PotentialTable::new(vec![0.4; 30], vec![0.4; 30], Provenance::Fixed).unwrap();
        let mut rng = seeded(2);
        for _ in 0..20 {
            let d = table.observe(draw_mbcr(&layout, &mut rng)).unwrap();
            assert!(ht_mbcr(&d).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn ht_mbcr_hand_expanded() {
        let layout = compute_layout(9, 4).unwrap();
        let beta = vec![2, 0, 1, 4, 3, 5, 8, 6, 7];
        let eta = vec![4, 7, 0, 2, 8, 1, 6, 3, 5];
        let detail = MbcrDetail::new(layout, beta.clone(), eta.clone()).unwrap();
        let y: Vec<f64> = (0..9).map(|j| (j as f64 + 1.0) / 10.0).collect();
        let d = ObservedData::new(y.clone(), Assignment::mbcr(detail)).unwrap();
        let a = [1, 0, 0, 1, 0, 0, 1, 1, 0];
        let mut inv = [0usize; 9];
        for (j, &p) in eta.iter().enumerate() {
            inv[p] = j;
        }
        let mut expected = 0.0;
        for i in 0..9 {
            let p = if i < 6 { 1.0 / 3.0 } else { 2.0 / 3.0 };
            let z = a[beta[i]] as f64;
            expected += y[inv[i]] * (z / p - (1.0 - z) / (1.0 - p));
        }
        expected /= 9.0;
        assert_relative_eq!(ht_mbcr(&d).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn groupwise_bounds_attained() {
        let layout = compute_layout(5, 1).unwrap();
        let detail = MbcrDetail::new(layout, (0..5).collect(), (0..5).collect()).unwrap();
        let assignment = Assignment::mbcr(detail);
        // unit 0 is treated
        let d = ObservedData::new(vec![1.0, 0.0, 0.0, 0.0, 0.0], assignment.clone()).unwrap();
        assert_relative_eq!(
            groupwise_sums(&d, EstimateVariant::Standard).unwrap()[0],
            5.0
        );
        let d = ObservedData::new(vec![0.0, 1.0, 1.0, 1.0, 1.0], assignment).unwrap();
        assert_relative_eq!(
            groupwise_sums(&d, EstimateVariant::Standard).unwrap()[0],
            -5.0
        );
    }

    #[test]
    fn groupwise_full_groups_within_range() {
        let mut rng = seeded(8);
        for &(n, n1) in &[(100, 10), (97, 13), (50, 7), (9, 4)] {
            let layout = compute_layout(n, n1).unwrap();
            let g = layout.group_size() as f64;
            for _ in 0..30 {
                let table = random_table(n, &mut rng);
                let d = table.observe(draw_mbcr(&layout, &mut rng)).unwrap();
                let sums = groupwise_sums(&d, EstimateVariant::Standard).unwrap();
                assert_eq!(sums.len(), layout.group_count());
                for s in &sums[..layout.full_groups()] {
                    assert!(s.abs() <= g + 1e-12);
                }
            }
        }
    }

    #[test]
    fn mirrored_identity() {
        let mut rng = seeded(21);
        for &(n, n1) in &[(100, 10), (97, 13), (9, 4), (7, 2)] {
            let layout = compute_layout(n, n1).unwrap();
            for _ in 0..30 {
                let table = random_table(n, &mut rng);
                let d = table.observe(draw_mbcr(&layout, &mut rng)).unwrap();
                let lower: f64 = groupwise_sums(&d, EstimateVariant::Standard)
                    .unwrap()
                    .iter()
                    .sum();
                let upper: f64 = groupwise_sums(&d, EstimateVariant::Mirrored)
                    .unwrap()
                    .iter()
                    .sum();
                let direct = ht_mbcr(&d).unwrap();
                assert_relative_eq!(lower / n as f64, direct, epsilon = 1e-12);
                assert_relative_eq!(upper / n as f64, direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bernoulli_groups_are_singletons() {
        let mut rng = seeded(4);
        let table = random_table(20, &mut rng);
        let d = table
            .observe(draw_bernoulli(20, 0.3, &mut rng).unwrap())
            .unwrap();
        let sums = groupwise_sums(&d, EstimateVariant::Standard).unwrap();
        assert_eq!(sums.len(), 20);
        assert_relative_eq!(
            sums.iter().sum::<f64>() / 20.0,
            ht_standard(&d, 0.3).unwrap(),
            epsilon = 1e-12
        );
        let c = table
            .observe(draw_complete(20, 5, &mut rng).unwrap())
            .unwrap();
        assert!(matches!(
            groupwise_sums(&c, EstimateVariant::Standard),
            Err(EstimatorError::NoGroups(Scheme::Complete))
        ));
    }

    #[test]
    fn ht_mbcr_needs_detail() {
        let a = Assignment::complete(vec![true, false]).unwrap();
        let d = ObservedData::new(vec![1.0, 0.0], a).unwrap();
        assert!(matches!(
            ht_mbcr(&d),
            Err(EstimatorError::MissingMbcrDetail)
        ));
    }

    #[test]
    fn conditional_unbiasedness_small() {
        let mut rng = seeded(99);
        for &(n, n1) in &[(6, 2), (7, 2), (7, 3), (9, 4)] {
            let layout = compute_layout(n, n1).unwrap();
            for _ in 0..5 {
                let table = random_table(n, &mut rng);
                let mut eta: Vec<usize> = (0..n).collect();
                eta.shuffle(&mut rng);
                let m =
                    conditional_mean_given_eta(&table, &layout, &eta, DEFAULT_ENUMERATION_BUDGET)
                        .unwrap();
                assert_relative_eq!(m, table.psi_db(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conditional_mean_trivial_tables() {
        let layout = compute_layout(6, 2).unwrap();
        let eta = vec![5, 3, 1, 0, 2, 4];
        let shifted = PotentialTable::new(vec![0.2; 6], vec![0.5; 6], Provenance::Fixed).unwrap();
        assert_relative_eq!(
            conditional_mean_given_eta(&shifted, &layout, &eta, DEFAULT_ENUMERATION_BUDGET)
                .unwrap(),
            0.3,
            epsilon = 1e-12
        );
        let null = PotentialTable::new(
            vec![0.7, 0.1, 0.3, 0.9, 0.0, 1.0],
            vec![0.7, 0.1, 0.3, 0.9, 0.0, 1.0],
            Provenance::Fixed,
        )
        .unwrap();
        assert!(
            conditional_mean_given_eta(&null, &layout, &eta, DEFAULT_ENUMERATION_BUDGET)
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!(conditional_mean_given_eta(&null, &layout, &eta, 10).is_err());
    }
}
