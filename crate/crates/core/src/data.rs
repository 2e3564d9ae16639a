//! Synthetic Gaussian-blob classification data and client splits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;

pub const TEST_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Class means drawn as `mean_scale · N(0, I_m)`.
pub fn class_means(num_classes: usize, dim: usize, mean_scale: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|_| (0..dim).map(|_| mean_scale * rng.standard_normal()).collect())
        .collect()
}

/// Gaussian blobs around seeded random class means with a stratified 70/30
/// train/test split.
pub fn generate(
    num_classes: usize,
    per_class_count: usize,
    dim: usize,
    noise_scale: f64,
    rng: &mut RngStream,
) -> Result<SyntheticDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 classes, got {num_classes}")));
    }
    let means = class_means(num_classes, dim, 1.0, rng);
    generate_from_means(means, per_class_count, noise_scale, rng)
}

/// Fresh samples around fixed class means.
pub fn generate_from_means(
    class_means: Vec<Vec<f64>>,
    per_class_count: usize,
    noise_scale: f64,
    rng: &mut RngStream,
) -> Result<SyntheticDataset> {
    let num_classes = class_means.len();
    let dim = class_means.first().map_or(0, Vec::len);
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 classes, got {num_classes}")));
    }
    if per_class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need >= 2 samples per class, got {per_class_count}"
        )));
    }
    if dim == 0 || class_means.iter().any(|m| m.len() != dim) {
        return Err(Error::InvalidArgument("class means must share a positive dimension".into()));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_scale must be >= 0, got {noise_scale}")));
    }
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            if class_means[a] == class_means[b] {
                return Err(Error::InvalidArgument(format!("classes {a} and {b} share a mean")));
            }
        }
    }

    let n_test = ((per_class_count as f64) * TEST_FRACTION).round() as usize;
    let n_test = n_test.clamp(1, per_class_count - 1);
    let mut train = Vec::with_capacity(num_classes * (per_class_count - n_test));
    let mut test = Vec::with_capacity(num_classes * n_test);
    for (y, mean) in class_means.iter().enumerate() {
        for i in 0..per_class_count {
            let x = mean.iter().map(|&mu| mu + noise_scale * rng.standard_normal()).collect();
            let s = Sample { x, y };
            if i < n_test {
                test.push(s);
            } else {
                train.push(s);
            }
        }
    }
    Ok(SyntheticDataset {
        num_classes,
        dim,
        class_means,
        noise_scale,
        train,
        test,
    })
}

impl SyntheticDataset {
    pub fn train_counts(&self) -> Vec<usize> {
        counts(&self.train, self.num_classes)
    }

    pub fn test_counts(&self) -> Vec<usize> {
        counts(&self.test, self.num_classes)
    }
}

fn counts(samples: &[Sample], c: usize) -> Vec<usize> {
    let mut out = vec![0; c];
    for s in samples {
        out[s.y] += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitScheme {
    Pathological { classes_per_client: usize },
    Dirichlet { alpha: f64 },
}

/// Assignment of training samples to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub num_clients: usize,
    /// Client of each training sample; `None` for classes no client owns.
    pub assignment: Vec<Option<usize>>,
    /// Per-client class set, sorted.
    pub local_classes: Vec<Vec<usize>>,
}

impl SplitPlan {
    /// Training-sample indices of each client, ascending.
    pub fn shards(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clients];
        for (idx, a) in self.assignment.iter().enumerate() {
            if let Some(c) = a {
                out[*c].push(idx);
            }
        }
        out
    }
}

/// Disjoint class sets; each client gets every training sample of its classes.
pub fn pathological_split(
    ds: &SyntheticDataset,
    num_clients: usize,
    classes_per_client: usize,
    rng: &mut RngStream,
) -> Result<SplitPlan> {
    if num_clients == 0 || classes_per_client == 0 {
        return Err(Error::InvalidArgument("need >= 1 client and >= 1 class per client".into()));
    }
    if num_clients * classes_per_client > ds.num_classes {
        return Err(Error::InvalidArgument(format!(
            "{num_clients} clients x {classes_per_client} classes exceeds {} classes",
            ds.num_classes
        )));
    }
    let mut perm: Vec<usize> = (0..ds.num_classes).collect();
    rng.shuffle(&mut perm);
    let mut owner = vec![None; ds.num_classes];
    let mut local_classes = Vec::with_capacity(num_clients);
    for c in 0..num_clients {
        let mut set: Vec<usize> = perm[c * classes_per_client..(c + 1) * classes_per_client].to_vec();
        set.sort_unstable();
        for &k in &set {
            owner[k] = Some(c);
        }
        local_classes.push(set);
    }
    let assignment = ds.train.iter().map(|s| owner[s.y]).collect();
    Ok(SplitPlan {
        scheme: SplitScheme::Pathological { classes_per_client },
        num_clients,
        assignment,
        local_classes,
    })
}

/// Per-class Dirichlet(α·1_N) proportions with largest-remainder rounding.
///
/// A client's local classes are those where it holds at least one sample.
pub fn dirichlet_split(ds: &SyntheticDataset, num_clients: usize, alpha: f64, rng: &mut RngStream) -> Result<SplitPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    if num_clients < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 clients, got {num_clients}")));
    }
    let mut assignment = vec![None; ds.train.len()];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, s) in ds.train.iter().enumerate() {
        by_class[s.y].push(i);
    }
    let mut local: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_clients];
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let props = dirichlet(num_clients, alpha, rng)?;
        let alloc = largest_remainder(&props, idx.len());
        rng.shuffle(&mut idx);
        let mut cursor = 0;
        for (client, &n) in alloc.iter().enumerate() {
            for &sample in &idx[cursor..cursor + n] {
                assignment[sample] = Some(client);
            }
            if n > 0 {
                local[client].insert(class);
            }
            cursor += n;
        }
    }
    Ok(SplitPlan {
        scheme: SplitScheme::Dirichlet { alpha },
        num_clients,
        assignment,
        local_classes: local.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

fn dirichlet(n: usize, alpha: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let draws = (0..n).map(|_| rng.gamma(alpha)).collect::<Result<Vec<_>>>()?;
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        // every gamma draw underflowed: put the whole class on one client
        let mut out = vec![0.0; n];
        out[rng.below(n)] = 1.0;
        Ok(out)
    }
}

/// Integer allocation of `total` proportional to `props`, summing exactly to `total`.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    // largest fractional part first, ties by index
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Test-set indices for one client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSets {
    /// Test samples of the client's own classes.
    pub local: Vec<usize>,
    /// Test samples of classes owned by other clients.
    pub neighbor: Vec<usize>,
}

pub fn eval_sets(plan: &SplitPlan, ds: &SyntheticDataset) -> Vec<EvalSets> {
    (0..plan.num_clients)
        .map(|c| {
            let own: BTreeSet<usize> = plan.local_classes[c].iter().copied().collect();
            let others: BTreeSet<usize> = plan
                .local_classes
                .iter()
                .enumerate()
                .filter(|&(o, _)| o != c)
                .flat_map(|(_, set)| set.iter().copied())
                .filter(|k| !own.contains(k))
                .collect();
            let mut sets = EvalSets {
                local: Vec::new(),
                neighbor: Vec::new(),
            };
            for (i, s) in ds.test.iter().enumerate() {
                if own.contains(&s.y) {
                    sets.local.push(i);
                } else if others.contains(&s.y) {
                    sets.neighbor.push(i);
                }
            }
            sets
        })
        .collect()
}

/// Mean over clients of the largest single-class share of the client's shard.
pub fn heterogeneity(plan: &SplitPlan, ds: &SyntheticDataset) -> f64 {
    let shards = plan.shards();
    let mut total = 0.0;
    let mut n = 0usize;
    for shard in shards.iter().filter(|s| !s.is_empty()) {
        let mut counts = vec![0usize; ds.num_classes];
        for &i in shard {
            counts[ds.train[i].y] += 1;
        }
        total += *counts.iter().max().unwrap() as f64 / shard.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(c: usize, per: usize, seed: u64) -> SyntheticDataset {
        generate(c, per, 6, 0.5, &mut RngStream::new(seed, 1)).unwrap()
    }

    #[test]
    fn zero_noise_collapses_to_means() {
        let ds = generate(3, 10, 4, 0.0, &mut RngStream::new(1, 1)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert_eq!(s.x, ds.class_means[s.y]);
        }
    }

    #[test]
    fn degenerate_parameters_rejected() {
        let mut rng = RngStream::new(1, 1);
        assert!(generate(1, 10, 4, 0.1, &mut rng).is_err());
        assert!(generate(3, 1, 4, 0.1, &mut rng).is_err());
        assert!(generate(3, 10, 4, -0.1, &mut rng).is_err());
        assert!(generate_from_means(vec![vec![1.0], vec![1.0]], 5, 0.1, &mut rng).is_err());
    }

    #[test]
    fn nearest_mean_separates_two_far_blobs() {
        let mut rng = RngStream::new(2, 1);
        let means = vec![vec![5.0; 4], vec![-5.0; 4]];
        let ds = generate_from_means(means, 50, 0.5, &mut rng).unwrap();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let correct = ds
            .test
            .iter()
            .filter(|s| {
                let pred = (0..2)
                    .min_by(|&a, &b| dist(&s.x, &ds.class_means[a]).total_cmp(&dist(&s.x, &ds.class_means[b])))
                    .unwrap();
                pred == s.y
            })
            .count();
        assert_eq!(correct, ds.test.len());
    }

    #[test]
    fn stratified_thirty_percent_test() {
        let ds = blobs(5, 37, 3);
        for (tr, te) in ds.train_counts().iter().zip(ds.test_counts()) {
            let frac_target = 0.3 * 37.0;
            assert!((te as f64 - frac_target).abs() <= 1.0);
            assert_eq!(tr + te, 37);
        }
    }

    #[test]
    fn pathological_one_class_each_is_permutation() {
        let ds = blobs(10, 10, 4);
        let plan = pathological_split(&ds, 10, 1, &mut RngStream::new(4, 3)).unwrap();
        let mut all: Vec<usize> = plan.local_classes.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn pathological_partition_and_counts() {
        let ds = blobs(9, 20, 5);
        let plan = pathological_split(&ds, 4, 2, &mut RngStream::new(5, 3)).unwrap();
        let counts = ds.train_counts();
        let shards = plan.shards();
        for (a, set_a) in plan.local_classes.iter().enumerate() {
            for set_b in plan.local_classes.iter().skip(a + 1) {
                assert!(set_a.iter().all(|k| !set_b.contains(k)));
            }
            let expected: usize = set_a.iter().map(|&k| counts[k]).sum();
            assert_eq!(shards[a].len(), expected);
        }
        // the one unassigned class stays unassigned
        let unassigned = plan.assignment.iter().filter(|a| a.is_none()).count();
        assert_eq!(unassigned, ds.train.len() - shards.iter().map(Vec::len).sum::<usize>());
        assert!(pathological_split(&ds, 5, 2, &mut RngStream::new(5, 3)).is_err());
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        let ds = blobs(4, 400, 6);
        let plan = dirichlet_split(&ds, 4, 1e6, &mut RngStream::new(6, 3)).unwrap();
        let shards = plan.shards();
        for class in 0..4 {
            let total = ds.train_counts()[class] as f64;
            for shard in &shards {
                let n = shard.iter().filter(|&&i| ds.train[i].y == class).count() as f64;
                assert!((n / total - 0.25).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn dirichlet_small_alpha_is_heterogeneous_and_conserves_counts() {
        let ds = blobs(10, 100, 7);
        let plan = dirichlet_split(&ds, 25, 0.3, &mut RngStream::new(7, 3)).unwrap();
        assert!(plan.assignment.iter().all(Option::is_some));
        let shards = plan.shards();
        for class in 0..10 {
            let assigned: usize = shards
                .iter()
                .map(|s| s.iter().filter(|&&i| ds.train[i].y == class).count())
                .sum();
            assert_eq!(assigned, ds.train_counts()[class]);
        }
        let uniform = dirichlet_split(&ds, 25, 1e6, &mut RngStream::new(7, 3)).unwrap();
        assert!(heterogeneity(&plan, &ds) > heterogeneity(&uniform, &ds));
        for (c, set) in plan.local_classes.iter().enumerate() {
            let held: BTreeSet<usize> = shards[c].iter().map(|&i| ds.train[i].y).collect();
            assert_eq!(set, &held.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn largest_remainder_conserves_total() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10).iter().sum::<usize>(), 10);
        assert_eq!(largest_remainder(&[1.0, 0.0], 0), vec![0, 0]);
    }

    #[test]
    fn eval_sets_partition_test_samples() {
        let ds = blobs(4, 20, 8);
        let plan = SplitPlan {
            scheme: SplitScheme::Pathological { classes_per_client: 2 },
            num_clients: 2,
            assignment: ds.train.iter().map(|s| Some(s.y / 2)).collect(),
            local_classes: vec![vec![0, 1], vec![2, 3]],
        };
        let sets = eval_sets(&plan, &ds);
        let neighbor_labels: BTreeSet<usize> = sets[0].neighbor.iter().map(|&i| ds.test[i].y).collect();
        assert_eq!(neighbor_labels, [2, 3].into_iter().collect());
        for s in &sets {
            assert_eq!(s.local.len() + s.neighbor.len(), ds.test.len());
            assert!(s.local.iter().all(|i| !s.neighbor.contains(i)));
        }
    }

    #[test]
    fn splits_are_reproducible() {
        let ds = blobs(10, 30, 9);
        let a = dirichlet_split(&ds, 5, 0.3, &mut RngStream::new(1, 3)).unwrap();
        let b = dirichlet_split(&ds, 5, 0.3, &mut RngStream::new(1, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_test_means_agree() {
        let ds = blobs(3, 600, 10);
        for class in 0..3 {
            for k in 0..ds.dim {
                let mean = |set: &[Sample]| {
                    let v: Vec<f64> = set.iter().filter(|s| s.y == class).map(|s| s.x[k]).collect();
                    (v.iter().sum::<f64>() / v.len() as f64, v.len() as f64)
                };
                let (mtr, ntr) = mean(&ds.train);
                let (mte, nte) = mean(&ds.test);
                let se = ds.noise_scale * (1.0 / ntr + 1.0 / nte).sqrt();
                assert!((mtr - mte).abs() <= 3.0 * se, "class {class} dim {k}");
            }
        }
    }
}
