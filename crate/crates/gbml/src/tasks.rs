//! Synthetic N-way K-shot episode generation.
//!
//! A pool holds Gaussian class generators split into disjoint train/val/test
//! sets. Sampling an episode picks classes without replacement *and* assigns
//! episode labels through a fresh uniform permutation, so a pool class never
//! carries a stable label across episodes — the model can only solve a task
//! from its support set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Layout of a synthetic pool; fully determines the pool together with a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub dim: usize,
    /// Isotropic standard deviation of every class.
    pub std: f64,
    /// Class means are rejected until all pairwise distances reach
    /// `separation * std`.
    pub separation: f64,
    /// Means are drawn uniformly from `[-range, range]^dim`.
    pub range: f64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
            dim: 16,
            std: 1.0,
            separation: 4.0,
            range: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
struct ClassGen {
    mean: Vec<f64>,
    std: f64,
}

/// Per-class Gaussian generators with disjoint split membership.
#[derive(Debug, Clone)]
pub struct ClassPool {
    spec: PoolSpec,
    classes: Vec<ClassGen>,
}

impl ClassPool {
    /// Draws class means by rejection until the separation constraint holds.
    pub fn generate(spec: &PoolSpec, rng: &mut SplitRng) -> Result<ClassPool> {
        let total = spec.train_classes + spec.val_classes + spec.test_classes;
        if total == 0 || spec.dim == 0 {
            return Err(Error::InvalidConfig {
                reason: "pool needs at least one class and one dimension".into(),
            });
        }
        if spec.std <= 0.0 || spec.range <= 0.0 {
            return Err(Error::InvalidConfig {
                reason: "pool std and range must be positive".into(),
            });
        }
        let min_dist = spec.separation * spec.std;
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while means.len() < total {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidConfig {
                    reason: format!(
                        "could not place {total} class means at separation {min_dist} in [-{r}, {r}]^{d}",
                        r = spec.range,
                        d = spec.dim
                    ),
                });
            }
            let candidate: Vec<f64> = (0..spec.dim)
                .map(|_| rng.gen_range(-spec.range..spec.range))
                .collect();
            let ok = means.iter().all(|m| {
                let d2: f64 = m
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 >= min_dist * min_dist
            });
            if ok {
                means.push(candidate);
            }
        }
        Ok(ClassPool {
            spec: spec.clone(),
            classes: means
                .into_iter()
                .map(|mean| ClassGen {
                    mean,
                    std: spec.std,
                })
                .collect(),
        })
    }

    pub fn spec(&self) -> &PoolSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Pool-level class ids belonging to a split. Splits are contiguous,
    /// disjoint index ranges.
    pub fn split_classes(&self, split: Split) -> std::ops::Range<usize> {
        let t = self.spec.train_classes;
        let v = self.spec.val_classes;
        match split {
            Split::Train => 0..t,
            Split::Val => t..t + v,
            Split::Test => t + v..t + v + self.spec.test_classes,
        }
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.classes[class].mean
    }

    fn sample_points(&self, class: usize, count: usize, rng: &mut SplitRng) -> Vec<Vec<f64>> {
        let gen = &self.classes[class];
        (0..count)
            .map(|_| {
                gen.mean
                    .iter()
                    .map(|m| m + gen.std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

/// Episode shape: way count, shots per class, queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

/// One few-shot task: labeled support and query sets plus the permutation
/// that assigned episode labels to the sampled pool classes.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// Sampled pool classes, in draw order.
    pub pool_classes: Vec<usize>,
    /// `label_perm[i]` is the episode label assigned to `pool_classes[i]`.
    pub label_perm: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.pool_classes.len()
    }

    /// Copy with query labels replaced by an out-of-range sentinel. Any code
    /// path that reads a query label will fail loudly on such an episode;
    /// label-free paths must be unaffected.
    pub fn poison_query_labels(&self) -> Episode {
        let mut e = self.clone();
        for y in &mut e.query_y {
            *y = usize::MAX;
        }
        e
    }
}

/// Samples an episode: `n_way` classes without replacement, a fresh label
/// permutation, and i.i.d. Gaussian draws for `k_shot` support and `q_query`
/// query points per class.
pub fn sample_episode(
    pool: &ClassPool,
    split: Split,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut SplitRng,
) -> Result<Episode> {
    let class_range = pool.split_classes(split);
    let available: Vec<usize> = class_range.collect();
    if available.len() < n_way {
        return Err(Error::InsufficientClasses {
            split: split.to_string(),
            needed: n_way,
            available: available.len(),
        });
    }
    if n_way == 0 || k_shot == 0 || q_query == 0 {
        return Err(Error::InvalidConfig {
            reason: "n_way, k_shot and q_query must be positive".into(),
        });
    }

    // classes without replacement
    let mut chosen = available;
    chosen.partial_shuffle(rng, n_way);
    chosen.truncate(n_way);

    // fresh uniform permutation of episode labels
    let mut label_perm: Vec<usize> = (0..n_way).collect();
    label_perm.shuffle(rng);

    let d = pool.dim();
    let mut support_rows: Vec<Vec<f64>> = vec![Vec::new(); n_way * k_shot];
    let mut support_y = vec![0usize; n_way * k_shot];
    let mut query_rows: Vec<Vec<f64>> = vec![Vec::new(); n_way * q_query];
    let mut query_y = vec![0usize; n_way * q_query];

    for (i, &class) in chosen.iter().enumerate() {
        let label = label_perm[i];
        let s = pool.sample_points(class, k_shot, rng);
        for (j, row) in s.into_iter().enumerate() {
            support_rows[label * k_shot + j] = row;
            support_y[label * k_shot + j] = label;
        }
        let q = pool.sample_points(class, q_query, rng);
        for (j, row) in q.into_iter().enumerate() {
            query_rows[label * q_query + j] = row;
            query_y[label * q_query + j] = label;
        }
    }

    debug_assert!(support_rows.iter().all(|r| r.len() == d));
    Ok(Episode {
        support_x: Tensor::from_rows(&support_rows)?,
        support_y,
        query_x: Tensor::from_rows(&query_rows)?,
        query_y,
        pool_classes: chosen,
        label_perm,
    })
}

/// Adds i.i.d. Gaussian noise of the given standard deviation. A zero std is
/// an exact identity and draws nothing from the rng.
pub fn augment(points: &Tensor, rng: &mut SplitRng, noise_std: f64) -> Result<Tensor> {
    if noise_std < 0.0 {
        return Err(Error::NegativeNoiseStd { got: noise_std });
    }
    if noise_std == 0.0 {
        return Ok(points.clone());
    }
    let data: Vec<f64> = points
        .data()
        .iter()
        .map(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(points.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pool(rng: &mut SplitRng) -> ClassPool {
        let spec = PoolSpec {
            train_classes: 12,
            val_classes: 4,
            test_classes: 4,
            dim: 8,
            ..PoolSpec::default()
        };
        ClassPool::generate(&spec, rng).unwrap()
    }

    #[test]
    fn episode_counts_and_labels() {
        let mut rng = SplitRng::from_seed(1);
        let pool = small_pool(&mut rng.split("pool"));
        let mut erng = rng.split("episodes");
        let ep = sample_episode(&pool, Split::Train, 2, 1, 1, &mut erng).unwrap();
        assert_eq!(ep.support_x.shape(), &[2, 8]);
        assert_eq!(ep.query_x.shape(), &[2, 8]);
        let mut sy = ep.support_y.clone();
        sy.sort_unstable();
        assert_eq!(sy, vec![0, 1]);
        let mut qy = ep.query_y.clone();
        qy.sort_unstable();
        assert_eq!(qy, vec![0, 1]);
    }

    #[test]
    fn same_rng_state_same_episode() {
        let mut rng = SplitRng::from_seed(2);
        let pool = small_pool(&mut rng.split("pool"));
        let mut a = rng.split("episodes");
        let mut b = rng.split("episodes");
        let ea = sample_episode(&pool, Split::Train, 5, 2, 3, &mut a).unwrap();
        let eb = sample_episode(&pool, Split::Train, 5, 2, 3, &mut b).unwrap();
        assert!(ea.support_x.bitwise_eq(&eb.support_x));
        assert!(ea.query_x.bitwise_eq(&eb.query_x));
        assert_eq!(ea.pool_classes, eb.pool_classes);
        assert_eq!(ea.label_perm, eb.label_perm);
    }

    #[test]
    fn insufficient_classes_is_error() {
        let mut rng = SplitRng::from_seed(3);
        let pool = small_pool(&mut rng.split("pool"));
        assert!(matches!(
            sample_episode(&pool, Split::Val, 5, 1, 1, &mut rng),
            Err(Error::InsufficientClasses { .. })
        ));
    }

    #[test]
    fn splits_are_disjoint() {
        let mut rng = SplitRng::from_seed(4);
        let pool = small_pool(&mut rng);
        let train = pool.split_classes(Split::Train);
        let val = pool.split_classes(Split::Val);
        let test = pool.split_classes(Split::Test);
        assert_eq!(train.end, val.start);
        assert_eq!(val.end, test.start);
    }

    #[test]
    fn class_separation_holds() {
        let mut rng = SplitRng::from_seed(5);
        let pool = small_pool(&mut rng);
        let n = pool.spec().train_classes + pool.spec().val_classes + pool.spec().test_classes;
        let min = pool.spec().separation * pool.spec().std;
        for i in 0..n {
            for j in (i + 1)..n {
                let d2: f64 = pool
                    .class_mean(i)
                    .iter()
                    .zip(pool.class_mean(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2.sqrt() >= min);
            }
        }
    }

    #[test]
    fn label_permutation_is_uniform() {
        // frequency-count oracle: episode labels assigned to one fixed pool
        // class over many episodes, chi-squared against uniform.
        let mut rng = SplitRng::from_seed(6);
        let pool = small_pool(&mut rng.split("pool"));
        let mut erng = rng.split("episodes");
        let n_way = 4;
        let mut counts = [0usize; 4];
        let mut hits = 0usize;
        for _ in 0..10_000 {
            let ep = sample_episode(&pool, Split::Train, n_way, 1, 1, &mut erng).unwrap();
            if let Some(pos) = ep.pool_classes.iter().position(|&c| c == 0) {
                counts[ep.label_perm[pos]] += 1;
                hits += 1;
            }
        }
        assert!(hits > 1000, "class 0 sampled too rarely: {hits}");
        let expected = hits as f64 / n_way as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-squared critical value, df = 3, p = 0.01
        assert!(chi2 < 11.345, "chi2 {chi2} with counts {counts:?}");
    }

    #[test]
    fn augment_zero_std_is_identity() {
        let mut rng = SplitRng::from_seed(7);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = augment(&x, &mut rng, 0.0).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn augment_preserves_shape_and_rejects_negative() {
        let mut rng = SplitRng::from_seed(8);
        let x = Tensor::zeros(&[3, 5]);
        let y = augment(&x, &mut rng, 0.5).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(matches!(
            augment(&x, &mut rng, -0.1),
            Err(Error::NegativeNoiseStd { .. })
        ));
    }

    #[test]
    fn augment_noise_variance_matches() {
        let mut rng = SplitRng::from_seed(9);
        let n = 100_000;
        let x = Tensor::zeros(&[n]);
        let std = 0.25;
        let y = augment(&x, &mut rng, std).unwrap();
        let var = y.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let rel = (var - std * std).abs() / (std * std);
        assert!(rel < 0.05, "relative variance error {rel}");
    }

    #[test]
    fn poisoned_query_labels_are_sentinels() {
        let mut rng = SplitRng::from_seed(10);
        let pool = small_pool(&mut rng.split("pool"));
        let ep = sample_episode(&pool, Split::Train, 2, 1, 1, &mut rng).unwrap();
        let poisoned = ep.poison_query_labels();
        assert!(poisoned.query_y.iter().all(|&y| y == usize::MAX));
        assert_eq!(poisoned.support_y, ep.support_y);
        assert!(poisoned.query_x.bitwise_eq(&ep.query_x));
    }
}
