//! Target-variable discretization, condition vectors with null tokens,
//! conditional dropout, and the multi-condition guided score combination.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CoreError;
use crate::tensor::Matrix;

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// How a condition's split thresholds are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Percentiles in (0, 100), resolved against training metric values.
    Percentiles(Vec<f64>),
    /// Raw metric-unit thresholds (e.g. a latency constraint).
    Absolute(Vec<f64>),
}

/// A condition before calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    pub direction: Direction,
    pub splits: SplitSpec,
}

/// A calibrated condition: d classes separated by d-1 ascending thresholds
/// in raw metric units. Class 0 is always the best class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub name: String,
    pub d: usize,
    pub direction: Direction,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ConditionSchema {
    pub conditions: Vec<ConditionEntry>,
}

impl ConditionSchema {
    pub fn check(&self) -> Result<(), CoreError> {
        if self.conditions.is_empty() {
            return Err(CoreError::InvalidSchema("no conditions".into()));
        }
        for c in &self.conditions {
            if c.d < 2 {
                return Err(CoreError::InvalidSchema(format!(
                    "condition '{}' needs d >= 2",
                    c.name
                )));
            }
            if c.thresholds.len() != c.d - 1 {
                return Err(CoreError::InvalidSchema(format!(
                    "condition '{}' needs d-1 thresholds",
                    c.name
                )));
            }
            if c.thresholds.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CoreError::InvalidSchema(format!(
                    "condition '{}' thresholds not strictly ascending",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.conditions.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, CoreError> {
        self.conditions
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| CoreError::UnknownCondition {
                name: name.to_string(),
                known: self
                    .conditions
                    .iter()
                    .map(|c| c.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    /// Stable digest of the calibrated schema; checkpoints embed it so that
    /// sampling can refuse a mismatched manifest.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One class index per schema condition; `None` is the null token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub classes: Vec<Option<usize>>,
}

impl ConditionVector {
    pub fn all_null(k: usize) -> Self {
        ConditionVector {
            classes: vec![None; k],
        }
    }

    pub fn is_all_null(&self) -> bool {
        self.classes.iter().all(Option::is_none)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineSpace {
    LogProbability,
    Probability,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub combine_space: CombineSpace,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma: -4.0,
            epsilon: 0.1,
            combine_space: CombineSpace::LogProbability,
        }
    }
}

/// Empirical percentile thresholds with linear interpolation.
pub fn calibrate_splits(values: &[f64], percentiles: &[f64]) -> Result<Vec<f64>, CoreError> {
    if values.len() < 2 {
        return Err(CoreError::EmptyInput(
            "calibrate_splits needs at least 2 values".into(),
        ));
    }
    if percentiles.is_empty()
        || percentiles.iter().any(|&p| !(0.0 < p && p < 100.0))
        || percentiles.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(CoreError::InvalidSchema(
            "percentiles must be ascending within (0, 100)".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    Ok(percentiles
        .iter()
        .map(|&p| {
            let rank = p / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect())
}

/// Resolve a pre-calibration spec into a calibrated entry using the
/// training metric values for that condition.
pub fn calibrate_condition(
    spec: &ConditionSpec,
    metric_values: &[f64],
) -> Result<ConditionEntry, CoreError> {
    let thresholds = match &spec.splits {
        SplitSpec::Percentiles(p) => calibrate_splits(metric_values, p)?,
        SplitSpec::Absolute(t) => t.clone(),
    };
    let entry = ConditionEntry {
        name: spec.name.clone(),
        d: thresholds.len() + 1,
        direction: spec.direction,
        thresholds,
    };
    Ok(entry)
}

/// Class 0 is the best class; ties at a threshold go to the better class.
pub fn discretize(value: f64, entry: &ConditionEntry) -> usize {
    match entry.direction {
        Direction::HigherIsBetter => entry.thresholds.iter().filter(|&&t| t > value).count(),
        Direction::LowerIsBetter => entry.thresholds.iter().filter(|&&t| t < value).count(),
    }
}

/// Joint conditional dropout: with probability epsilon the whole vector is
/// replaced by all-null; a vector is never partially nulled.
pub fn drop_conditions(
    cond: &ConditionVector,
    epsilon: f64,
    rng: &mut impl Rng,
) -> ConditionVector {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        ConditionVector::all_null(cond.classes.len())
    } else {
        cond.clone()
    }
}

/// Classifier-free score combination, row by row. gamma=0 and gamma=1
/// short-circuit to the unconditional / conditional input unchanged.
/// Returns the combined distributions plus the count of probability-space
/// entries that had to be floored at zero.
pub fn combine_rows(
    p_u: &Matrix,
    p_c: &Matrix,
    gamma: f64,
    space: CombineSpace,
) -> Result<(Matrix, u64), CoreError> {
    assert_eq!((p_u.rows, p_u.cols), (p_c.rows, p_c.cols));
    if gamma == 0.0 {
        return Ok((p_u.clone(), 0));
    }
    if gamma == 1.0 {
        return Ok((p_c.clone(), 0));
    }
    let mut out = Matrix::zeros(p_u.rows, p_u.cols);
    let mut floored = 0u64;
    for r in 0..p_u.rows {
        match space {
            CombineSpace::LogProbability => {
                let logits: Vec<f64> = (0..p_u.cols)
                    .map(|c| {
                        (1.0 - gamma) * p_u.get(r, c).max(LOG_FLOOR).ln()
                            + gamma * p_c.get(r, c).max(LOG_FLOOR).ln()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut norm = 0.0;
                for (c, &l) in logits.iter().enumerate() {
                    let v = (l - max).exp();
                    out.set(r, c, v);
                    norm += v;
                }
                if norm == 0.0 || !norm.is_finite() {
                    return Err(CoreError::ZeroCombined { row: r });
                }
                for c in 0..p_u.cols {
                    out.set(r, c, out.get(r, c) / norm);
                }
            }
            CombineSpace::Probability => {
                let mut norm = 0.0;
                for c in 0..p_u.cols {
                    let mut v = (1.0 - gamma) * p_u.get(r, c) + gamma * p_c.get(r, c);
                    if v < 0.0 {
                        v = 0.0;
                        floored += 1;
                    }
                    out.set(r, c, v);
                    norm += v;
                }
                if norm == 0.0 {
                    return Err(CoreError::ZeroCombined { row: r });
                }
                for c in 0..p_u.cols {
                    out.set(r, c, out.get(r, c) / norm);
                }
            }
        }
    }
    Ok((out, floored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn acc_entry(thresholds: Vec<f64>) -> ConditionEntry {
        ConditionEntry {
            name: "acc".into(),
            d: thresholds.len() + 1,
            direction: Direction::HigherIsBetter,
            thresholds,
        }
    }

    #[test]
    fn calibrate_matches_sort_interpolate_oracle() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let t = calibrate_splits(&values, &[95.0]).unwrap();
        assert!((t[0] - 95.05).abs() < 1e-9, "got {}", t[0]);
        // against an independent shuffled-input check
        let mut shuffled = values.clone();
        shuffled.reverse();
        let t2 = calibrate_splits(&shuffled, &[95.0]).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn calibrate_constant_sample() {
        let values = vec![7.0; 10];
        let t = calibrate_splits(&values, &[95.0]).unwrap();
        assert_eq!(t[0], 7.0);
    }

    #[test]
    fn calibrate_rejects_bad_input() {
        assert!(calibrate_splits(&[], &[95.0]).is_err());
        assert!(calibrate_splits(&[1.0], &[95.0]).is_err());
        assert!(calibrate_splits(&[1.0, 2.0], &[0.0]).is_err());
        assert!(calibrate_splits(&[1.0, 2.0], &[50.0, 50.0]).is_err());
    }

    #[test]
    fn discretize_higher_is_better() {
        let entry = acc_entry(vec![95.0]);
        assert_eq!(discretize(97.0, &entry), 0);
        assert_eq!(discretize(50.0, &entry), 1);
        assert_eq!(discretize(95.0, &entry), 0); // tie goes to the better class
    }

    #[test]
    fn discretize_latency_constraint() {
        let entry = ConditionEntry {
            name: "latency".into(),
            d: 2,
            direction: Direction::LowerIsBetter,
            thresholds: vec![2.0],
        };
        assert_eq!(discretize(1.5, &entry), 0); // feasible
        assert_eq!(discretize(2.5, &entry), 1);
        assert_eq!(discretize(2.0, &entry), 0);
    }

    #[test]
    fn discretize_monotone_multiclass() {
        let entry = acc_entry(vec![30.0, 50.0, 80.0, 95.0]);
        let mut last = usize::MAX;
        for v in 0..=100 {
            let class = discretize(v as f64, &entry);
            assert!(class <= last, "class increased with better value");
            last = class;
        }
        assert_eq!(discretize(100.0, &entry), 0);
        assert_eq!(discretize(0.0, &entry), 4);
    }

    #[test]
    fn drop_conditions_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cond = ConditionVector {
            classes: vec![Some(0), Some(1)],
        };
        for _ in 0..100 {
            assert_eq!(drop_conditions(&cond, 0.0, &mut rng), cond);
            assert!(drop_conditions(&cond, 1.0, &mut rng).is_all_null());
        }
    }

    #[test]
    fn drop_conditions_rate_and_all_or_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = ConditionVector {
            classes: vec![Some(0), Some(1)],
        };
        let mut nulls = 0usize;
        let draws = 100_000;
        for _ in 0..draws {
            let dropped = drop_conditions(&cond, 0.1, &mut rng);
            let null_count = dropped.classes.iter().filter(|c| c.is_none()).count();
            assert!(null_count == 0 || null_count == 2, "partial null vector");
            if null_count == 2 {
                nulls += 1;
            }
        }
        let frac = nulls as f64 / draws as f64;
        assert!((0.094..=0.106).contains(&frac), "frac = {frac}");
    }

    #[test]
    fn combine_gamma_identities_bitwise() {
        let p_u = Matrix::from_vec(1, 2, vec![0.8, 0.2]);
        let p_c = Matrix::from_vec(1, 2, vec![0.2, 0.8]);
        for space in [CombineSpace::LogProbability, CombineSpace::Probability] {
            let (at_one, _) = combine_rows(&p_u, &p_c, 1.0, space).unwrap();
            assert_eq!(at_one, p_c);
            let (at_zero, _) = combine_rows(&p_u, &p_c, 0.0, space).unwrap();
            assert_eq!(at_zero, p_u);
        }
    }

    #[test]
    fn combine_log_space_geometric_mean() {
        // gamma = 0.5 on [0.8, 0.2] vs [0.2, 0.8]: the normalized elementwise
        // geometric mean is uniform.
        let p_u = Matrix::from_vec(1, 2, vec![0.8, 0.2]);
        let p_c = Matrix::from_vec(1, 2, vec![0.2, 0.8]);
        let (out, _) = combine_rows(&p_u, &p_c, 0.5, CombineSpace::LogProbability).unwrap();
        assert!((out.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((out.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn combine_log_space_valid_for_signed_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for gamma in [-4.0, -2.0, 0.0, 0.5, 1.0, 2.0, 4.0] {
            for _ in 0..50 {
                let mk = |rng: &mut ChaCha8Rng| {
                    let mut v: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() + 1e-6).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    Matrix::from_vec(1, 4, v)
                };
                let p_u = mk(&mut rng);
                let p_c = mk(&mut rng);
                let (out, _) =
                    combine_rows(&p_u, &p_c, gamma, CombineSpace::LogProbability).unwrap();
                let s: f64 = out.row(0).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(out.row(0).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn combine_probability_space_floors_negatives() {
        let p_u = Matrix::from_vec(1, 2, vec![0.9, 0.1]);
        let p_c = Matrix::from_vec(1, 2, vec![0.1, 0.9]);
        // gamma = -4: (1-γ) p_u + γ p_c = 5 p_u - 4 p_c, second entry negative
        let (out, floored) = combine_rows(&p_u, &p_c, -4.0, CombineSpace::Probability).unwrap();
        assert!(floored >= 1);
        let s: f64 = out.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combine_log_space_commutes_with_permutation() {
        let p_u = Matrix::from_vec(1, 3, vec![0.5, 0.3, 0.2]);
        let p_c = Matrix::from_vec(1, 3, vec![0.1, 0.6, 0.3]);
        let perm = [2usize, 0, 1];
        let permute = |m: &Matrix| {
            Matrix::from_vec(1, 3, perm.iter().map(|&i| m.get(0, i)).collect::<Vec<_>>())
        };
        let gamma = -2.0;
        let (base, _) = combine_rows(&p_u, &p_c, gamma, CombineSpace::LogProbability).unwrap();
        let (permed, _) = combine_rows(
            &permute(&p_u),
            &permute(&p_c),
            gamma,
            CombineSpace::LogProbability,
        )
        .unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert!((permed.get(0, i) - base.get(0, pi)).abs() < 1e-12);
        }
    }

    #[test]
    fn schema_hash_stable_and_sensitive() {
        let schema = ConditionSchema {
            conditions: vec![acc_entry(vec![95.0])],
        };
        assert_eq!(schema.hash(), schema.hash());
        let mut other = schema.clone();
        other.conditions[0].thresholds[0] = 94.0;
        assert_ne!(schema.hash(), other.hash());
    }

    #[test]
    fn unknown_condition_lists_schema_names() {
        let schema = ConditionSchema {
            conditions: vec![acc_entry(vec![95.0])],
        };
        let err = schema.index_of("latency").unwrap_err();
        assert!(err.to_string().contains("acc"));
    }
}
