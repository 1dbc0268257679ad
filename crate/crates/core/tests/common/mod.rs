//! Shared fixtures for integration tests: a seeded grouped logistic
//! problem with a sub-population shift, plus small statistical helpers.

use groupshift::seed::rng_from_seed;
use groupshift::{Dataset, Shift};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Grouped binary-classification data. Groups are drawn from `p_train`,
/// features are an intercept column plus `d` standard normals, and labels
/// follow a logistic model whose intercept depends on the group, so the
/// group weights genuinely matter. The returned shift has uniform test
/// marginals.
pub fn logistic_problem(n: usize, d: usize, num_groups: usize, seed: u64) -> (Dataset, Shift) {
    // training marginals proportional to (G, G-1, .., 1)
    let raw: Vec<f64> = (0..num_groups).map(|g| (num_groups - g) as f64).collect();
    let z: f64 = raw.iter().sum();
    let p_train: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let p_test = vec![1.0 / num_groups as f64; num_groups];

    let mut rng = rng_from_seed(seed);
    let mut x = Array2::<f64>::zeros((n, d + 1));
    let mut y = Array1::<f64>::zeros(n);
    let mut groups = Vec::with_capacity(n);
    let slopes: Vec<f64> = (0..d).map(|j| 0.8 - 0.25 * j as f64).collect();
    for i in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut g = num_groups;
        for (k, &pk) in p_train.iter().enumerate() {
            acc += pk;
            if u < acc {
                g = k + 1;
                break;
            }
        }
        groups.push(g);
        x[[i, 0]] = 1.0;
        let mut lin = 0.6 * (g as f64 - 1.5); // group-dependent intercept
        for j in 0..d {
            let v: f64 = rng.sample(StandardNormal);
            x[[i, j + 1]] = v;
            lin += slopes[j] * v;
        }
        let p = 1.0 / (1.0 + (-lin as f64).exp());
        y[i] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
    let data = Dataset::new(x, y, groups, num_groups).expect("valid dataset");
    let shift = Shift::new(p_train, p_test).expect("valid shift");
    (data, shift)
}

/// Bootstrap standard deviation of a statistic of row indices, resampling
/// rows with replacement within each group.
#[allow(dead_code)]
pub fn bootstrap_sd<F>(data: &Dataset, statistic: F, replicates: usize, seed: u64) -> f64
where
    F: Fn(&Dataset) -> f64,
{
    let mut rng = rng_from_seed(seed);
    let mut values = Vec::with_capacity(replicates);
    let per_group: Vec<Vec<usize>> =
        (1..=data.num_groups()).map(|g| data.group_rows(g)).collect();
    for _ in 0..replicates {
        let mut rows = Vec::with_capacity(data.len());
        for group_rows in &per_group {
            for _ in 0..group_rows.len() {
                let k = (rng.random::<f64>() * group_rows.len() as f64) as usize;
                rows.push(group_rows[k.min(group_rows.len() - 1)]);
            }
        }
        rows.sort_unstable();
        values.push(statistic(&data.subset(&rows).unwrap()));
    }
    let mean: f64 = values.iter().sum::<f64>() / replicates as f64;
    let var: f64 =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (replicates - 1) as f64;
    var.sqrt()
}
