//! Label-skewed client partitioning.
//!
//! Splits a labeled set across simulated clients. Every sample is assigned to
//! exactly one client, so global class totals are fixed by construction and
//! the per-class routing only decides *where* each sample lands.

use crate::datamodel::LabeledEmbeddingSet;
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};

/// Partitioning scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Per class, client proportions drawn from `Dir(alpha * 1_U)` and the
    /// class's samples routed multinomially. Smaller alpha means stronger
    /// label skew.
    Dirichlet { alpha: f64 },
    /// Each client owns `m` classes (round-robin over a seeded shuffle);
    /// every class's samples are split evenly among its owners.
    ClassesPerClient { m: usize },
    /// Seeded shuffle dealt into near-equal contiguous chunks.
    Iid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub min_per_class_per_client: usize,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, scheme: Scheme, seed: u64) -> Self {
        PartitionSpec {
            num_clients,
            scheme,
            seed,
            min_per_class_per_client: 0,
        }
    }
}

/// Split `set` into one index set per client. Deterministic given the spec.
pub fn make_partition(set: &LabeledEmbeddingSet, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = set.len();
    let u = spec.num_clients;
    if u == 0 {
        return Err(Error::InvalidParameter("num_clients must be >= 1".into()));
    }
    if u > n {
        return Err(Error::InvalidParameter(format!(
            "more clients ({u}) than samples ({n})"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut assignment = match spec.scheme {
        Scheme::Iid => iid_partition(n, u, &mut rng),
        Scheme::Dirichlet { alpha } => {
            if alpha <= 0.0 || !alpha.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "dirichlet alpha must be positive, got {alpha}"
                )));
            }
            dirichlet_partition(set, u, alpha, &mut rng)
        }
        Scheme::ClassesPerClient { m } => {
            if m == 0 || m > set.class_count() {
                return Err(Error::InvalidParameter(format!(
                    "classes per client must be in 1..={}, got {m}",
                    set.class_count()
                )));
            }
            classes_per_client_partition(set, u, m, &mut rng)
        }
    };
    if spec.min_per_class_per_client > 0 {
        rebalance_minimum(set, &mut assignment, spec.min_per_class_per_client)?;
    }
    Ok(assignment)
}

fn iid_partition(n: usize, u: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / u;
    let extra = n % u;
    let mut out = Vec::with_capacity(u);
    let mut cursor = 0;
    for client in 0..u {
        let take = base + usize::from(client < extra);
        out.push(order[cursor..cursor + take].to_vec());
        cursor += take;
    }
    out
}

fn dirichlet_partition(
    set: &LabeledEmbeddingSet,
    u: usize,
    alpha: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<usize>> {
    let c = set.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in set.labels().iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); u];
    for class_rows in by_class {
        // Dir(alpha 1_U) via normalized gammas; a degenerate all-zero draw
        // (possible for tiny alpha at f64 precision) falls back to uniform.
        let mut props: Vec<f64> = (0..u).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            props = vec![1.0 / u as f64; u];
        } else {
            for p in &mut props {
                *p /= total;
            }
        }
        let mut cdf = props.clone();
        for i in 1..u {
            cdf[i] += cdf[i - 1];
        }
        for &row in &class_rows {
            let draw: f64 = rng.random();
            let client = cdf.partition_point(|&p| p < draw).min(u - 1);
            out[client].push(row);
        }
    }
    out
}

fn classes_per_client_partition(
    set: &LabeledEmbeddingSet,
    u: usize,
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<usize>> {
    let c = set.class_count();
    let mut class_order: Vec<usize> = (0..c).collect();
    class_order.shuffle(rng);
    // Client `v` takes slots [v*m, (v+1)*m) of the repeated shuffled class list.
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); c];
    for slot in 0..u * m {
        let class = class_order[slot % c];
        let client = slot / m;
        if !owners[class].contains(&client) {
            owners[class].push(client);
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in set.labels().iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); u];
    for (class, rows) in by_class.iter_mut().enumerate() {
        if owners[class].is_empty() {
            // A class no client owns (u * m < c): deal it round-robin so the
            // result stays a partition.
            for (j, &row) in rows.iter().enumerate() {
                out[j % u].push(row);
            }
            continue;
        }
        rows.shuffle(rng);
        let k = owners[class].len();
        let base = rows.len() / k;
        let extra = rows.len() % k;
        let mut cursor = 0;
        for (idx, &client) in owners[class].iter().enumerate() {
            let take = base + usize::from(idx < extra);
            out[client].extend_from_slice(&rows[cursor..cursor + take]);
            cursor += take;
        }
    }
    out
}

/// Move samples from the largest holder of each class to those below the
/// minimum, deterministically. Only clients already holding the class are
/// considered (so class-restricted schemes keep their support).
fn rebalance_minimum(
    set: &LabeledEmbeddingSet,
    assignment: &mut [Vec<usize>],
    min: usize,
) -> Result<()> {
    let c = set.class_count();
    let u = assignment.len();
    for class in 0..c {
        let mut holders: Vec<usize> = (0..u)
            .filter(|&v| {
                assignment[v]
                    .iter()
                    .any(|&i| set.labels()[i] as usize == class)
            })
            .collect();
        if holders.is_empty() {
            continue;
        }
        let count_of = |assignment: &[Vec<usize>], v: usize| {
            assignment[v]
                .iter()
                .filter(|&&i| set.labels()[i] as usize == class)
                .count()
        };
        let total: usize = holders.iter().map(|&v| count_of(assignment, v)).sum();
        if total < min * holders.len() {
            return Err(Error::InsufficientData(format!(
                "class {class}: {total} samples cannot give {} holders {min} each",
                holders.len()
            )));
        }
        holders.sort_unstable();
        for &needy in &holders {
            while count_of(assignment, needy) < min {
                let donor = *holders
                    .iter()
                    .max_by_key(|&&v| count_of(assignment, v))
                    .unwrap();
                let pos = assignment[donor]
                    .iter()
                    .position(|&i| set.labels()[i] as usize == class)
                    .unwrap();
                let row = assignment[donor].remove(pos);
                assignment[needy].push(row);
            }
        }
    }
    Ok(())
}

/// Serialize a partition as a JSON array of index arrays, for audit.
pub fn partition_to_json(partition: &[Vec<usize>]) -> String {
    serde_json::to_string(partition).expect("vec of usize always serializes")
}

/// Hash of the partition layout, used in run reports.
pub fn partition_fingerprint(partition: &[Vec<usize>]) -> u64 {
    let mut h = crate::prng::Fnv64::new();
    h.write_u64(partition.len() as u64);
    for client in partition {
        h.write_u64(client.len() as u64);
        for &i in client {
            h.write_u64(i as u64);
        }
    }
    h.finish()
}
