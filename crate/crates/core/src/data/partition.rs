//! Dirichlet (non-IID) and uniform (IID) client partitioning.
//!
//! Both partitioners produce an exact cover of the dataset and are
//! byte-identical across runs for the same `(dataset, n_clients, alpha,
//! seed)` arguments: class proportions come from one sequential Dirichlet
//! stream and index order from one sequential shuffle stream, with all ties
//! broken toward the lower client id.

use rand_distr::{Distribution, Gamma};

use crate::params::{derive_rng, seeded_shuffle, SeedSpec, StreamTag};

use super::{DataError, Dataset, PartitionMap};

/// Groups sample indices by class, preserving dataset order within a class.
fn indices_by_class(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.n_classes()];
    for i in 0..dataset.n_samples() {
        by_class[dataset.label(i)].push(i);
    }
    by_class
}

/// Splits `total` into integer counts proportional to `props` using
/// largest-remainder rounding; remainder ties go to the lower client id.
fn largest_remainder_counts(props: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = props.iter().sum();
    let mut counts: Vec<usize> = Vec::with_capacity(props.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(props.len());
    let mut assigned = 0usize;
    for (client, &p) in props.iter().enumerate() {
        let share = if sum > 0.0 {
            p / sum * total as f64
        } else {
            total as f64 / props.len() as f64
        };
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fracs.push((client, share - floor as f64));
    }
    let mut remaining = total - assigned;
    // Stable order: larger fraction first, lower client id on ties.
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (client, _) in fracs {
        if remaining == 0 {
            break;
        }
        counts[client] += 1;
        remaining -= 1;
    }
    counts
}

/// Moves single samples from the largest clients (ties toward the lower id)
/// until no client is empty. Errors when there are more clients than samples.
fn fix_empty_clients(
    assignments: &mut [Vec<usize>],
    n_samples: usize,
) -> Result<(), DataError> {
    let n_clients = assignments.len();
    if n_samples < n_clients {
        return Err(DataError::TooFewSamples {
            clients: n_clients,
            samples: n_samples,
        });
    }
    for empty in 0..n_clients {
        if !assignments[empty].is_empty() {
            continue;
        }
        let donor = (0..n_clients)
            .max_by(|&a, &b| {
                assignments[a]
                    .len()
                    .cmp(&assignments[b].len())
                    // max_by keeps the later element on Equal, so order the
                    // comparison to prefer the lower id.
                    .then(b.cmp(&a))
            })
            .expect("at least one client");
        let moved = assignments[donor]
            .pop()
            .expect("donor has at least two samples when any client is empty");
        assignments[empty].push(moved);
    }
    Ok(())
}

/// Non-IID partition: for every class, client proportions are drawn from
/// `Dirichlet(alpha)` and the class's (seed-shuffled) indices are dealt out
/// by largest-remainder rounding. With `allow_empty = false`, clients that
/// end up with zero samples receive one sample taken from the largest
/// client.
pub fn partition_dirichlet(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
    allow_empty: bool,
) -> Result<PartitionMap, DataError> {
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be >= 1".into()));
    }
    if alpha <= 0.0 {
        return Err(DataError::AlphaNonPositive(alpha));
    }
    let mut dir_rng = derive_rng(SeedSpec {
        master_seed: seed,
        round: 0,
        client_id: 0,
        stream_tag: StreamTag::Dirichlet,
    });
    let mut shuffle_rng = derive_rng(SeedSpec {
        master_seed: seed,
        round: 0,
        client_id: 0,
        stream_tag: StreamTag::Shuffle,
    });
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| DataError::InvalidArgument(format!("bad alpha {alpha}: {e}")))?;

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for mut class_indices in indices_by_class(dataset) {
        if class_indices.is_empty() {
            continue;
        }
        seeded_shuffle(&mut class_indices, &mut shuffle_rng);
        // Dirichlet(alpha) via normalized Gamma(alpha, 1) draws.
        let props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut dir_rng)).collect();
        let counts = largest_remainder_counts(&props, class_indices.len());
        let mut cursor = 0usize;
        for (client, count) in counts.into_iter().enumerate() {
            assignments[client].extend_from_slice(&class_indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    if !allow_empty {
        fix_empty_clients(&mut assignments, dataset.n_samples())?;
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    let map = PartitionMap::new(assignments, Some(alpha));
    map.validate_exact_cover(dataset.n_samples())?;
    Ok(map)
}

/// IID partition: per class, a seed-shuffled deal so that each client's
/// per-class count differs by at most one from any other client's.
pub fn partition_uniform(
    dataset: &Dataset,
    n_clients: usize,
    seed: u64,
) -> Result<PartitionMap, DataError> {
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be >= 1".into()));
    }
    let mut shuffle_rng = derive_rng(SeedSpec {
        master_seed: seed,
        round: 0,
        client_id: 0,
        stream_tag: StreamTag::Shuffle,
    });
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (class, mut class_indices) in indices_by_class(dataset).into_iter().enumerate() {
        seeded_shuffle(&mut class_indices, &mut shuffle_rng);
        // Rotate the dealing start by class so leftovers spread evenly.
        for (j, idx) in class_indices.into_iter().enumerate() {
            assignments[(class + j) % n_clients].push(idx);
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    let map = PartitionMap::new(assignments, None);
    map.validate_exact_cover(dataset.n_samples())?;
    Ok(map)
}
