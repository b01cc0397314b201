//! Client partitioning: stratified IID and Dirichlet non-IID splits.
//!
//! alpha = 0 is the IID sentinel (a Dirichlet parameter of zero is not
//! defined); any alpha > 0 draws one class-prior vector per client from
//! Dirichlet(alpha * 1) and fills equal-size client quotas from per-class
//! pools without replacement.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    pub clients: usize,
    /// 0 selects the stratified IID split.
    pub alpha: f64,
    pub seed: u64,
}

const MAX_ATTEMPTS: usize = 20;

pub fn partition(labels: &[usize], n_classes: usize, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if spec.clients == 0 {
        return Err(Error::Invalid("partition needs at least one client".into()));
    }
    if spec.clients > labels.len() {
        return Err(Error::Invalid(format!(
            "cannot split {} samples across {} clients",
            labels.len(),
            spec.clients
        )));
    }
    if !spec.alpha.is_finite() || spec.alpha < 0.0 {
        return Err(Error::Invalid(format!("alpha must be finite and >= 0, got {}", spec.alpha)));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = RngStream::new(spec.seed).derive("partition", attempt as u64);
        let shards = if spec.alpha == 0.0 {
            stratified(labels, n_classes, spec.clients, &mut rng)
        } else {
            dirichlet_split(labels, n_classes, spec.clients, spec.alpha, &mut rng)
        };
        if shards.iter().all(|s| !s.indices.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::Job(format!(
        "partition produced an empty shard {MAX_ATTEMPTS} times in a row"
    )))
}

fn class_pools(labels: &[usize], n_classes: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for pool in pools.iter_mut() {
        rng.shuffle(pool);
    }
    pools
}

fn make_shards(assignments: Vec<Vec<usize>>, labels: &[usize], n_classes: usize) -> Vec<ClientShard> {
    assignments
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            let mut hist = vec![0usize; n_classes];
            for &i in &indices {
                hist[labels[i]] += 1;
            }
            ClientShard {
                client_id,
                indices,
                label_histogram: hist,
            }
        })
        .collect()
}

/// Each class pool is dealt to clients in near-equal contiguous chunks, so
/// every client's class proportions match the global ones up to rounding.
fn stratified(labels: &[usize], n_classes: usize, clients: usize, rng: &mut RngStream) -> Vec<ClientShard> {
    let pools = class_pools(labels, n_classes, rng);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for pool in &pools {
        let len = pool.len();
        let mut start = 0;
        for k in 0..clients {
            let end = len * (k + 1) / clients;
            assignments[k].extend_from_slice(&pool[start..end]);
            start = end;
        }
    }
    make_shards(assignments, labels, n_classes)
}

fn dirichlet_split(
    labels: &[usize],
    n_classes: usize,
    clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Vec<ClientShard> {
    let mut pools = class_pools(labels, n_classes, rng);
    let n = labels.len();
    // Equal sample quotas; the remainder goes to the first clients.
    let quotas: Vec<usize> = (0..clients)
        .map(|k| n / clients + usize::from(k < n % clients))
        .collect();
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for k in 0..clients {
        let priors = rng.dirichlet(alpha, n_classes);
        let avail: Vec<usize> = pools.iter().map(Vec::len).collect();
        let take = allocate_by_prior(quotas[k], &priors, &avail);
        for (c, &count) in take.iter().enumerate() {
            for _ in 0..count {
                assignments[k].push(pools[c].pop().expect("allocation within pool size"));
            }
        }
    }
    make_shards(assignments, labels, n_classes)
}

/// Integer class counts proportional to `priors` (largest-remainder rounding),
/// capped by pool availability. Overflow spills to the classes with the
/// largest remainders that still have capacity, so the allocation always
/// sums to `quota` as long as total availability covers it.
fn allocate_by_prior(quota: usize, priors: &[f64], avail: &[usize]) -> Vec<usize> {
    let n_classes = priors.len();
    let mass: f64 = (0..n_classes)
        .filter(|&c| avail[c] > 0)
        .map(|c| priors[c])
        .sum();
    let targets: Vec<f64> = (0..n_classes)
        .map(|c| {
            if avail[c] == 0 {
                0.0
            } else if mass > 0.0 {
                quota as f64 * priors[c] / mass
            } else {
                quota as f64 * avail[c] as f64 / avail.iter().sum::<usize>() as f64
            }
        })
        .collect();
    let mut take: Vec<usize> = targets
        .iter()
        .zip(avail)
        .map(|(&t, &a)| (t.floor() as usize).min(a))
        .collect();
    let mut remaining = quota - take.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).expect("finite targets").then(a.cmp(&b))
    });
    let mut idx = 0;
    while remaining > 0 {
        let c = order[idx % n_classes];
        if take[c] < avail[c] {
            take[c] += 1;
            remaining -= 1;
        }
        idx += 1;
    }
    take
}

/// Audit export: one `client_id<TAB>sample_index` row per assignment.
pub fn export_partition(shards: &[ClientShard], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "client_id\tsample_index").map_err(io)?;
    for shard in shards {
        for &i in &shard.indices {
            writeln!(w, "{}\t{}", shard.client_id, i).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Total-variation distance between a shard's class distribution and the
/// global one.
pub fn shard_tv_distance(shard: &ClientShard, global_hist: &[usize], total: usize) -> f64 {
    let shard_total: usize = shard.label_histogram.iter().sum();
    0.5 * shard
        .label_histogram
        .iter()
        .zip(global_hist)
        .map(|(&s, &g)| (s as f64 / shard_total as f64 - g as f64 / total as f64).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(per_class: usize, classes: usize) -> Vec<usize> {
        (0..classes)
            .flat_map(|c| std::iter::repeat(c).take(per_class))
            .collect()
    }

    fn assert_disjoint_cover(shards: &[ClientShard], n: usize) {
        let mut seen = vec![false; n];
        for s in shards {
            for &i in &s.indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&x| x), "not all indices covered");
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(10, 2);
        let shards = partition(&labels, 2, &PartitionSpec { clients: 1, alpha: 0.0, seed: 1 }).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices.len(), 20);
    }

    #[test]
    fn stratified_is_balanced() {
        let labels = balanced_labels(50, 2); // 50/50 over 2 classes
        let shards = partition(&labels, 2, &PartitionSpec { clients: 10, alpha: 0.0, seed: 3 }).unwrap();
        assert_disjoint_cover(&shards, 100);
        for s in &shards {
            assert_eq!(s.indices.len(), 10);
            for &count in &s.label_histogram {
                assert!((count as i64 - 5).abs() <= 1, "hist {:?}", s.label_histogram);
            }
        }
    }

    #[test]
    fn near_uniform_dirichlet_close_to_global() {
        let labels = balanced_labels(250, 4);
        let shards = partition(&labels, 4, &PartitionSpec { clients: 10, alpha: 1e6, seed: 4 }).unwrap();
        assert_disjoint_cover(&shards, 1000);
        let global = [250usize, 250, 250, 250];
        for s in &shards {
            let tv = shard_tv_distance(s, &global, 1000);
            assert!(tv < 0.05, "client {} tv {tv}", s.client_id);
        }
    }

    #[test]
    fn tiny_alpha_concentrates_classes() {
        let labels = balanced_labels(100, 4);
        let shards = partition(&labels, 4, &PartitionSpec { clients: 8, alpha: 1e-3, seed: 5 }).unwrap();
        assert_disjoint_cover(&shards, 400);
        // At alpha=1e-3 most clients should be dominated by few classes.
        let dominated = shards
            .iter()
            .filter(|s| {
                let max = *s.label_histogram.iter().max().unwrap();
                max as f64 >= 0.7 * s.indices.len() as f64
            })
            .count();
        assert!(dominated >= shards.len() / 2, "only {dominated} dominated shards");
    }

    #[test]
    fn partition_is_deterministic_per_seed() {
        let labels = balanced_labels(30, 3);
        let spec = PartitionSpec { clients: 5, alpha: 0.1, seed: 9 };
        let a = partition(&labels, 3, &spec).unwrap();
        let b = partition(&labels, 3, &spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
        }
    }

    #[test]
    fn too_many_clients_rejected() {
        let labels = balanced_labels(2, 2);
        assert!(partition(&labels, 2, &PartitionSpec { clients: 5, alpha: 0.0, seed: 1 }).is_err());
    }

    #[test]
    fn export_writes_rows() {
        let labels = balanced_labels(3, 2);
        let shards = partition(&labels, 2, &PartitionSpec { clients: 2, alpha: 0.0, seed: 1 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.tsv");
        export_partition(&shards, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("client_id\tsample_index\n"));
        assert_eq!(text.lines().count(), 1 + 6);
    }
}
