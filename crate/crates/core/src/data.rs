//! Grouped datasets and train/validation splitting.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;

/// A feature matrix with targets and per-observation group labels.
///
/// Group indices are 1-based dense integers in `1..=num_groups`; groups
/// absent from the data (count zero) are allowed so that small subsamples
/// can lose a group without invalidating the container. Column 0 of the
/// feature matrix may be a constant intercept column. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset<T> {
    features: Array2<T>,
    targets: Array1<T>,
    groups: Vec<usize>,
    group_counts: Vec<usize>,
}

impl<T: Scalar> GroupedDataset<T> {
    /// Build a dataset and validate its invariants: equal lengths, `n >= 1`,
    /// `d >= 1`, finite entries, and group labels in `1..=num_groups`.
    pub fn new(
        features: Array2<T>,
        targets: Array1<T>,
        groups: Vec<usize>,
        num_groups: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::Size("dataset must contain at least one row".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::Size("dataset must have at least one feature column".into()));
        }
        if targets.len() != n || groups.len() != n {
            return Err(Error::Size(format!(
                "length mismatch: {} rows, {} targets, {} group labels",
                n,
                targets.len(),
                groups.len()
            )));
        }
        if num_groups == 0 {
            return Err(Error::Size("num_groups must be at least 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in features or targets".into()));
        }
        let mut group_counts = vec![0usize; num_groups];
        for (i, &g) in groups.iter().enumerate() {
            if g == 0 || g > num_groups {
                return Err(Error::Domain(format!(
                    "group label {} at row {} outside 1..={}",
                    g, i, num_groups
                )));
            }
            group_counts[g - 1] += 1;
        }
        Ok(Self { features, targets, groups, group_counts })
    }

    /// Build a dataset inferring `num_groups` as the maximum group label.
    pub fn with_inferred_groups(
        features: Array2<T>,
        targets: Array1<T>,
        groups: Vec<usize>,
    ) -> Result<Self> {
        let num_groups = groups.iter().copied().max().unwrap_or(0);
        Self::new(features, targets, groups, num_groups)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_groups(&self) -> usize {
        self.group_counts.len()
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn targets(&self) -> &Array1<T> {
        &self.targets
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Observations per group, indexed by `group - 1`.
    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    /// Count of one group (1-based label).
    pub fn group_count(&self, group: usize) -> usize {
        self.group_counts[group - 1]
    }

    /// Row indices belonging to one group (1-based label), in row order.
    pub fn group_rows(&self, group: usize) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| (g == group).then_some(i))
            .collect()
    }

    /// True when the targets are binary 0/1 labels.
    pub fn has_binary_targets(&self) -> bool {
        self.targets.iter().all(|&y| y == T::zero() || y == T::one())
    }

    /// New dataset holding the given rows, preserving `num_groups`.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Size("subset must contain at least one row".into()));
        }
        let d = self.dim();
        let mut features = Array2::<T>::zeros((rows.len(), d));
        let mut targets = Array1::<T>::zeros(rows.len());
        let mut groups = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            features.row_mut(out).assign(&self.features.row(r));
            targets[out] = self.targets[r];
            groups.push(self.groups[r]);
        }
        Self::new(features, targets, groups, self.num_groups())
    }

    /// Copy of this dataset with the group labels replaced (used by group
    /// inference, which must not read the original training labels).
    pub fn with_groups(&self, groups: Vec<usize>, num_groups: usize) -> Result<Self> {
        Self::new(self.features.clone(), self.targets.clone(), groups, num_groups)
    }
}

/// Estimated model coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T> {
    theta: Array1<T>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn new(theta: Array1<T>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite coefficient".into()));
        }
        Ok(Self { theta })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { theta: Array1::zeros(dim) }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn coefficients(&self) -> &Array1<T> {
        &self.theta
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.theta.view()
    }

    pub fn into_inner(self) -> Array1<T> {
        self.theta
    }
}

/// The two halves of a train/validation split.
#[derive(Debug, Clone)]
pub struct Split<T> {
    pub train: GroupedDataset<T>,
    pub val: GroupedDataset<T>,
    /// Row indices (into the source dataset) of the training half.
    pub train_rows: Vec<usize>,
    /// Row indices of the validation half.
    pub val_rows: Vec<usize>,
}

/// Disjoint uniformly random partition into `n_train` training rows and
/// `n - n_train` validation rows. Deterministic for a fixed seed; the union
/// of the halves is the input multiset.
pub fn split_train_val<T: Scalar>(
    data: &GroupedDataset<T>,
    n_train: usize,
    seed: u64,
) -> Result<Split<T>> {
    let n = data.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::Size(format!(
            "n_train must satisfy 1 <= n_train < n; got n_train={}, n={}",
            n_train, n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    order.shuffle(&mut rng);
    let mut train_rows: Vec<usize> = order[..n_train].to_vec();
    let mut val_rows: Vec<usize> = order[n_train..].to_vec();
    train_rows.sort_unstable();
    val_rows.sort_unstable();
    Ok(Split {
        train: data.subset(&train_rows)?,
        val: data.subset(&val_rows)?,
        train_rows,
        val_rows,
    })
}

/// Stratified variant: allocates each group's rows proportionally so the
/// training half holds `n_train` rows in total. Off by default everywhere;
/// exposed for datasets whose smallest groups would otherwise be lost.
pub fn split_train_val_stratified<T: Scalar>(
    data: &GroupedDataset<T>,
    n_train: usize,
    seed: u64,
) -> Result<Split<T>> {
    let n = data.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::Size(format!(
            "n_train must satisfy 1 <= n_train < n; got n_train={}, n={}",
            n_train, n
        )));
    }
    let mut rng = rng_from_seed(seed);
    let frac = n_train as f64 / n as f64;
    // Largest-remainder rounding of per-group quotas to hit n_train exactly.
    let mut quotas: Vec<(usize, usize, f64)> = Vec::new(); // (group, floor, remainder)
    let mut assigned = 0usize;
    for g in 1..=data.num_groups() {
        let ng = data.group_count(g);
        let exact = ng as f64 * frac;
        let fl = exact.floor() as usize;
        assigned += fl;
        quotas.push((g, fl.min(ng), exact - exact.floor()));
    }
    let mut leftover = n_train.saturating_sub(assigned);
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut take = vec![0usize; data.num_groups() + 1];
    for &(g, fl, _) in &quotas {
        take[g] = fl;
    }
    for &(g, fl, _) in &quotas {
        if leftover == 0 {
            break;
        }
        if fl < data.group_count(g) {
            take[g] += 1;
            leftover -= 1;
        }
    }
    let mut train_rows = Vec::with_capacity(n_train);
    let mut val_rows = Vec::with_capacity(n - n_train);
    for g in 1..=data.num_groups() {
        let mut rows = data.group_rows(g);
        rows.shuffle(&mut rng);
        let k = take[g].min(rows.len());
        train_rows.extend_from_slice(&rows[..k]);
        val_rows.extend_from_slice(&rows[k..]);
    }
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::Size("stratified split produced an empty half".into()));
    }
    train_rows.sort_unstable();
    val_rows.sort_unstable();
    Ok(Split {
        train: data.subset(&train_rows)?,
        val: data.subset(&val_rows)?,
        train_rows,
        val_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn toy(n: usize) -> GroupedDataset<f64> {
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let targets = Array1::from_shape_fn(n, |i| i as f64);
        let groups = (0..n).map(|i| 1 + (i % 2)).collect();
        GroupedDataset::new(features, targets, groups, 2).unwrap()
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let features = Array2::<f64>::zeros((3, 2));
        let targets = array![0.0, 1.0];
        let err = GroupedDataset::new(features, targets, vec![1, 1, 1], 1).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
    }

    #[test]
    fn rejects_out_of_range_group() {
        let features = Array2::<f64>::zeros((2, 1));
        let err =
            GroupedDataset::new(features, array![0.0, 1.0], vec![1, 3], 2).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn rejects_non_finite() {
        let features = array![[1.0, f64::NAN]];
        let err = GroupedDataset::new(features, array![0.0], vec![1], 1).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn counts_groups_and_allows_absent_group() {
        let d = toy(5);
        assert_eq!(d.group_counts(), &[3, 2]);
        let features = Array2::<f64>::zeros((2, 1));
        let d = GroupedDataset::new(features, array![0.0, 1.0], vec![1, 1], 3).unwrap();
        assert_eq!(d.group_counts(), &[2, 0, 0]);
    }

    #[test]
    fn split_rejects_empty_validation() {
        let d = toy(10);
        assert!(split_train_val(&d, 10, 7).is_err());
        assert!(split_train_val(&d, 0, 7).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let d = toy(100);
        let a = split_train_val(&d, 80, 7).unwrap();
        let b = split_train_val(&d, 80, 7).unwrap();
        assert_eq!(a.train_rows, b.train_rows);
        assert_eq!(a.val_rows, b.val_rows);
        let c = split_train_val(&d, 80, 8).unwrap();
        assert_ne!(a.train_rows, c.train_rows);
    }

    #[test]
    fn split_partitions_the_rows() {
        let d = toy(100);
        let s = split_train_val(&d, 80, 7).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.val.len(), 20);
        let mut all: Vec<usize> = s.train_rows.iter().chain(&s.val_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // multiset equality of rows: targets here uniquely identify rows
        let mut targets: Vec<f64> = s
            .train
            .targets()
            .iter()
            .chain(s.val.targets().iter())
            .copied()
            .collect();
        targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(targets, (0..100).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_split_respects_group_quotas() {
        let d = toy(100); // groups of 50/50
        let s = split_train_val_stratified(&d, 80, 3).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.train.group_counts(), &[40, 40]);
    }
}
