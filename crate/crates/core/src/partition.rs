//! Non-IID client splits: Dirichlet quantity skew and per-client task masks.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSample;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Seeded partition of all tasks into `K` disjoint non-empty sets.
    ExclusiveExhaustive,
    /// Explicit task set per client; overlap allowed.
    Custom(Vec<Vec<usize>>),
    /// Every client keeps every task.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub clients: usize,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            clients: 8,
            mask_mode: MaskMode::ExclusiveExhaustive,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if let MaskMode::Custom(sets) = &self.mask_mode {
            if sets.len() != self.clients {
                return Err(Error::Config(format!(
                    "{} custom task sets for {} clients",
                    sets.len(),
                    self.clients
                )));
            }
        }
        Ok(())
    }
}

/// Per-client sample counts from a Dirichlet(α·1) draw.
///
/// Largest-remainder rounding, then clients left empty take one sample
/// each from the currently largest client.
pub fn dirichlet_counts(n: usize, cfg: &PartitionConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let k = cfg.clients;
    if n < k {
        return Err(Error::Config(format!(
            "{n} samples cannot cover {k} clients"
        )));
    }
    let mut r = rng::stream(cfg.seed, rng::GLOBAL, 0, Purpose::Partition);
    let gamma = Gamma::new(cfg.alpha, 1.0)
        .map_err(|e| Error::Config(format!("gamma({}): {e}", cfg.alpha)))?;
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(&mut r)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        for v in &mut p {
            *v /= total;
        }
    } else {
        // every draw underflowed; fall back to the symmetric point
        p.fill(1.0 / k as f64);
    }
    let exact: Vec<f64> = p.iter().map(|v| v * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..k)
            .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
            .unwrap_or(0);
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Deals `samples` to clients with Dirichlet counts after a seeded shuffle.
pub fn dirichlet_quantity_split(
    samples: &[GraphSample],
    cfg: &PartitionConfig,
) -> Result<Vec<Vec<GraphSample>>> {
    let counts = dirichlet_counts(samples.len(), cfg)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(
        cfg.seed,
        rng::GLOBAL,
        1,
        Purpose::Partition,
    ));
    let mut out = Vec::with_capacity(counts.len());
    let mut next = 0;
    for c in counts {
        out.push(
            order[next..next + c]
                .iter()
                .map(|&i| samples[i].clone())
                .collect(),
        );
        next += c;
    }
    Ok(out)
}

pub fn assign_task_masks(cfg: &PartitionConfig, s_global: usize) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let k = cfg.clients;
    match &cfg.mask_mode {
        MaskMode::None => Ok(vec![(0..s_global).collect(); k]),
        MaskMode::Custom(sets) => {
            let mut out = Vec::with_capacity(k);
            for (c, set) in sets.iter().enumerate() {
                let mut s = set.clone();
                s.sort_unstable();
                s.dedup();
                if s.is_empty() {
                    return Err(Error::Config(format!("client {c} has an empty task set")));
                }
                if let Some(&bad) = s.iter().find(|&&t| t >= s_global) {
                    return Err(Error::Config(format!(
                        "client {c} task {bad} outside {s_global} tasks"
                    )));
                }
                out.push(s);
            }
            Ok(out)
        }
        MaskMode::ExclusiveExhaustive => {
            if k > s_global {
                return Err(Error::Config(format!(
                    "{k} clients cannot hold disjoint non-empty sets of {s_global} tasks"
                )));
            }
            let mut tasks: Vec<usize> = (0..s_global).collect();
            tasks.shuffle(&mut rng::stream(
                cfg.seed,
                rng::GLOBAL,
                0,
                Purpose::TaskMask,
            ));
            let base = s_global / k;
            let extra = s_global % k;
            let mut out = Vec::with_capacity(k);
            let mut next = 0;
            for c in 0..k {
                let len = base + usize::from(c < extra);
                let mut set = tasks[next..next + len].to_vec();
                set.sort_unstable();
                out.push(set);
                next += len;
            }
            Ok(out)
        }
    }
}

/// One client's training data after masking.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub samples: Vec<GraphSample>,
    pub task_set: Vec<usize>,
    /// No sample keeps any labelled task.
    pub degenerate: bool,
}

/// ANDs every label mask with membership in `task_set`.
pub fn apply_mask(samples: Vec<GraphSample>, task_set: &[usize]) -> ClientDataset {
    let mut samples = samples;
    for s in &mut samples {
        for (t, m) in s.label_mask.iter_mut().enumerate() {
            *m = *m && task_set.binary_search(&t).is_ok();
        }
    }
    let degenerate = !samples.iter().any(GraphSample::has_any_label);
    if degenerate {
        log::warn!("client with tasks {task_set:?} has no labelled sample after masking");
    }
    let mut task_set = task_set.to_vec();
    task_set.sort_unstable();
    ClientDataset {
        samples,
        task_set,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn cfg(k: usize, alpha: f64, seed: u64) -> PartitionConfig {
        PartitionConfig {
            alpha,
            clients: k,
            mask_mode: MaskMode::ExclusiveExhaustive,
            seed,
        }
    }

    #[test]
    fn large_alpha_gives_even_counts() {
        let counts = dirichlet_counts(100, &cfg(4, 1e6, 1)).unwrap();
        assert!(counts.iter().all(|&c| (24..=26).contains(&c)), "{counts:?}");
    }

    #[test]
    fn counts_sum_and_repeat() {
        let a = dirichlet_counts(100, &cfg(4, 0.5, 11)).unwrap();
        assert_eq!(a, dirichlet_counts(100, &cfg(4, 0.5, 11)).unwrap());
        assert_eq!(a.iter().sum::<usize>(), 100);
        assert!(a.iter().all(|&c| c >= 1));
    }

    #[test]
    fn tiny_alpha_still_fills_every_client() {
        for seed in 0..20 {
            let c = dirichlet_counts(10, &cfg(8, 0.01, seed)).unwrap();
            assert_eq!(c.iter().sum::<usize>(), 10);
            assert!(c.iter().all(|&v| v >= 1), "{c:?}");
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            dirichlet_counts(3, &cfg(4, 0.5, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exclusive_masks_partition_tasks() {
        let sets = assign_task_masks(&cfg(4, 0.5, 2), 27).unwrap();
        let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..27).collect::<Vec<_>>());
        assert!(sets.iter().all(|s| !s.is_empty()));
        assert_eq!(
            assign_task_masks(&cfg(1, 0.5, 2), 5).unwrap(),
            vec![vec![0, 1, 2, 3, 4]]
        );
        assert!(matches!(
            assign_task_masks(&cfg(5, 0.5, 2), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn custom_masks_keep_overlap() {
        let c = PartitionConfig {
            mask_mode: MaskMode::Custom(vec![vec![0, 1], vec![1, 2]]),
            ..cfg(2, 0.5, 0)
        };
        assert_eq!(
            assign_task_masks(&c, 3).unwrap(),
            vec![vec![0, 1], vec![1, 2]]
        );
    }

    fn sample(mask: Vec<bool>) -> GraphSample {
        GraphSample {
            node_features: Matrix::zeros(1, 1),
            edges: vec![],
            edge_features: Matrix::zeros(0, 0),
            label: vec![0.0; mask.len()],
            label_mask: mask,
        }
    }

    #[test]
    fn masking_ands_and_flags_degenerate() {
        let d = apply_mask(vec![sample(vec![true, true, false])], &[0, 1, 2]);
        assert_eq!(d.samples[0].label_mask, vec![true, true, false]);
        let d = apply_mask(vec![sample(vec![true, false, true])], &[1, 2]);
        assert_eq!(d.samples[0].label_mask, vec![false, false, true]);
        assert!(!d.degenerate);
        let d = apply_mask(vec![sample(vec![true, false, false])], &[1]);
        assert!(d.degenerate);
    }

    #[test]
    fn split_deals_every_sample_once() {
        let samples: Vec<GraphSample> = (0..30)
            .map(|i| {
                let mut s = sample(vec![true]);
                s.label[0] = i as f64;
                s
            })
            .collect();
        let parts = dirichlet_quantity_split(&samples, &cfg(5, 0.5, 4)).unwrap();
        let mut seen: Vec<f64> = parts.iter().flatten().map(|s| s.label[0]).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, (0..30).map(|i| i as f64).collect::<Vec<_>>());
    }
}
