//! Synthetic spurious-correlation data, a desk-scale stand-in for
//! last-layer DNN embeddings.
//!
//! Groups are the four (label, attribute) cells. The feature vector is an
//! intercept column, a core block whose mean tracks the label, and a
//! spurious block whose mean tracks the attribute. In training the
//! attribute agrees with the label except in two small minority cells, so a
//! classifier that leans on the spurious block fails exactly there; the
//! test distribution weighs all four cells equally.

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;
use crate::weights::ShiftSpec;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Configuration of the synthetic generator.
///
/// `minority_fraction` is the training probability of each of the two
/// minority (label != attribute) cells. Groups are numbered
/// 1: (y=0, a=0), 2: (y=0, a=1), 3: (y=1, a=0), 4: (y=1, a=1); cells 2 and
/// 3 are the minorities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftSpec<T> {
    pub n: usize,
    /// Feature dimension excluding the intercept; split evenly between the
    /// core and spurious blocks (core gets the extra odd column).
    pub d: usize,
    pub class_balance: T,
    pub spurious_strength: T,
    pub core_strength: T,
    pub minority_fraction: T,
    pub noise_sd: T,
    pub seed: u64,
}

impl<T: Scalar> SyntheticShiftSpec<T> {
    /// Imbalance comparable to the bird-photo benchmark this generator
    /// stands in for: two ~1.2% minority cells.
    pub fn waterbirds_like(n: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            class_balance: T::of(0.25),
            spurious_strength: T::of(1.5),
            core_strength: T::of(1.0),
            minority_fraction: T::of(0.012),
            noise_sd: T::one(),
            seed,
        }
    }

    /// Training probabilities of the four (label, attribute) cells.
    pub fn cell_probabilities(&self) -> Result<[T; 4]> {
        let cb = self.class_balance;
        let mf = self.minority_fraction;
        if !(mf > T::zero()) || mf >= T::of(0.5) {
            return Err(Error::Domain("minority_fraction must lie in (0, 0.5)".into()));
        }
        let cells = [T::one() - cb - mf, mf, mf, cb - mf];
        if cells.iter().any(|&c| c <= T::zero()) {
            return Err(Error::Domain(
                "class_balance and minority_fraction leave a cell non-positive".into(),
            ));
        }
        Ok(cells)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Size(
                "need d >= 2 (at least one core and one spurious column)".into(),
            ));
        }
        if self.n < 4 {
            return Err(Error::Size("need at least one observation per cell".into()));
        }
        if !(self.noise_sd > T::zero()) {
            return Err(Error::Domain("noise_sd must be positive".into()));
        }
        self.cell_probabilities().map(|_| ())
    }

    fn core_columns(&self) -> usize {
        self.d - self.d / 2
    }
}

fn cell_of(y: usize, a: usize) -> usize {
    1 + 2 * y + a
}

fn label_of_group(group: usize) -> (usize, usize) {
    let z = group - 1;
    (z / 2, z % 2)
}

fn draw_features<T: Scalar>(
    spec: &SyntheticShiftSpec<T>,
    y: usize,
    a: usize,
    rng: &mut ChaCha8Rng,
    row: &mut [T],
) {
    let d_core = spec.core_columns();
    let sy = T::of(2.0 * y as f64 - 1.0);
    let sa = T::of(2.0 * a as f64 - 1.0);
    row[0] = T::one();
    for (j, slot) in row.iter_mut().skip(1).enumerate() {
        let mean = if j < d_core {
            spec.core_strength * sy
        } else {
            spec.spurious_strength * sa
        };
        *slot = mean + spec.noise_sd * T::of(rng.sample::<f64, _>(StandardNormal));
    }
}

/// Draw a training set from the configured cell probabilities along with
/// the shift specification (training marginals as configured, uniform test
/// marginals). Cell counts are multinomial; an empty cell is an error since
/// every downstream weight needs all four groups.
pub fn generate_spurious<T: Scalar>(
    spec: &SyntheticShiftSpec<T>,
) -> Result<(GroupedDataset<T>, ShiftSpec<T>)> {
    spec.validate()?;
    let cells = spec.cell_probabilities()?;
    let mut rng = rng_from_seed(spec.seed);
    let dim = spec.d + 1;
    let mut features = Array2::<T>::zeros((spec.n, dim));
    let mut targets = Array1::<T>::zeros(spec.n);
    let mut groups = Vec::with_capacity(spec.n);
    let mut row_buf = vec![T::zero(); dim];
    for i in 0..spec.n {
        let u = T::of(rng.random::<f64>());
        let mut acc = T::zero();
        let mut cell = 4;
        for (k, &p) in cells.iter().enumerate() {
            acc += p;
            if u < acc {
                cell = k + 1;
                break;
            }
        }
        let (y, a) = label_of_group(cell);
        draw_features(spec, y, a, &mut rng, &mut row_buf);
        for (j, &v) in row_buf.iter().enumerate() {
            features[[i, j]] = v;
        }
        targets[i] = T::from_count(y);
        groups.push(cell);
    }
    let data = GroupedDataset::new(features, targets, groups, 4)?;
    for g in 1..=4 {
        if data.group_count(g) == 0 {
            return Err(Error::Size(format!("synthetic cell {g} is empty; increase n")));
        }
    }
    let p_train: Vec<T> = cells.to_vec();
    let p_test = vec![T::of(0.25); 4];
    Ok((data, ShiftSpec::new(p_train, p_test)?))
}

/// Group-balanced evaluation set with exactly `n_per_group` rows per cell,
/// drawn from the same conditional distributions as the training data.
pub fn generate_balanced_test<T: Scalar>(
    spec: &SyntheticShiftSpec<T>,
    n_per_group: usize,
    seed: u64,
) -> Result<GroupedDataset<T>> {
    spec.validate()?;
    if n_per_group == 0 {
        return Err(Error::Size("need at least one test row per group".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n = 4 * n_per_group;
    let dim = spec.d + 1;
    let mut features = Array2::<T>::zeros((n, dim));
    let mut targets = Array1::<T>::zeros(n);
    let mut groups = Vec::with_capacity(n);
    let mut row_buf = vec![T::zero(); dim];
    let mut i = 0;
    for y in 0..2 {
        for a in 0..2 {
            for _ in 0..n_per_group {
                draw_features(spec, y, a, &mut rng, &mut row_buf);
                for (j, &v) in row_buf.iter().enumerate() {
                    features[[i, j]] = v;
                }
                targets[i] = T::from_count(y);
                groups.push(cell_of(y, a));
                i += 1;
            }
        }
    }
    GroupedDataset::new(features, targets, groups, 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::likelihood_ratios;

    fn spec(n: usize, mf: f64, seed: u64) -> SyntheticShiftSpec<f64> {
        SyntheticShiftSpec {
            n,
            d: 6,
            class_balance: 0.5,
            spurious_strength: 1.2,
            core_strength: 0.8,
            minority_fraction: mf,
            noise_sd: 1.0,
            seed,
        }
    }

    #[test]
    fn balanced_cells_mean_no_shift() {
        let (_, shift) = generate_spurious(&spec(400, 0.25, 1)).unwrap();
        let r = likelihood_ratios(&shift).unwrap();
        for &v in r.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate_spurious(&spec(300, 0.1, 9)).unwrap();
        let (b, _) = generate_spurious(&spec(300, 0.1, 9)).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_spurious(&spec(300, 0.1, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cell_counts_match_multinomial_expectations() {
        // pooled over seeds, each cell count stays within 4 sigma
        let mf = 0.05;
        let n = 2000;
        let probs = [0.45, 0.05, 0.05, 0.45];
        for seed in 0..6 {
            let (data, _) = generate_spurious(&spec(n, mf, 100 + seed)).unwrap();
            for (g, &p) in probs.iter().enumerate() {
                let expected = n as f64 * p;
                let sd = (n as f64 * p * (1.0 - p)).sqrt();
                let got = data.group_counts()[g] as f64;
                assert!(
                    (got - expected).abs() <= 4.0 * sd,
                    "seed {seed} cell {} count {got} vs {expected} (sd {sd})",
                    g + 1
                );
            }
        }
    }

    #[test]
    fn zero_spurious_strength_removes_the_attribute_signal() {
        let mut s = spec(4000, 0.25, 3);
        s.spurious_strength = 0.0;
        let (data, _) = generate_spurious(&s).unwrap();
        // spurious block columns (last d/2) have mean ~0 in every cell;
        // core columns have mean +-core_strength by label
        let d_core = s.d - s.d / 2;
        for g in 1..=4 {
            let rows = data.group_rows(g);
            let (y, _) = label_of_group(g);
            let sy = 2.0 * y as f64 - 1.0;
            let ng = rows.len() as f64;
            for j in 0..s.d {
                let mean: f64 =
                    rows.iter().map(|&i| data.features()[[i, j + 1]]).sum::<f64>() / ng;
                let expect = if j < d_core { s.core_strength * sy } else { 0.0 };
                assert!(
                    (mean - expect).abs() < 5.0 / ng.sqrt(),
                    "cell {g} column {j}: mean {mean} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn empty_cell_is_an_error() {
        // 8 rows with 1% minorities will almost surely leave a cell empty
        let err = generate_spurious(&spec(8, 0.01, 2)).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
    }

    #[test]
    fn balanced_test_set_has_exact_counts() {
        let data = generate_balanced_test(&spec(100, 0.1, 5), 25, 77).unwrap();
        assert_eq!(data.group_counts(), &[25, 25, 25, 25]);
        // labels match the cell definition
        for (i, &g) in data.groups().iter().enumerate() {
            let (y, _) = label_of_group(g);
            assert_eq!(data.targets()[i], y as f64);
        }
    }
}
