//! Identity-aware batch sampling and FCL triplet sampling. Every draw is
//! seeded from `(seed, step)` so a step can be replayed in isolation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthetic::dataset::group_by_identity;
use crate::synthetic::render::splitmix64;

const STREAM_BATCH: u64 = 0x6261_7463;
const STREAM_TRIPLET: u64 = 0x7472_6970;

pub(crate) fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ stream) ^ step))
}

/// Record indices of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Optimizer steps per epoch: whole batches of source records.
pub fn steps_per_epoch(n_source: usize, batch_size: usize) -> usize {
    (n_source / batch_size).max(1)
}

/// Draws `n` source records grouped by identity and `n` target records.
///
/// Up to `ceil(n/2)` source identities with at least two frames are picked
/// uniformly without replacement, and their shuffled frames are dealt
/// round-robin until `n` records are chosen. At least `ceil(n/4)` identities
/// must appear twice, so the FCL triplet set is never empty.
pub fn sample_batch(
    source_ids: &[u32],
    n_target: usize,
    n: usize,
    seed: u64,
    step: u64,
) -> Result<BatchIndices> {
    let mut rng = step_rng(seed, step, STREAM_BATCH);
    let mut groups: Vec<Vec<usize>> = group_by_identity(source_ids)
        .into_values()
        .filter(|g| g.len() >= 2)
        .collect();
    let need = n.div_ceil(4);
    if groups.len() < need || source_ids.len() < n {
        return Err(Error::DatasetTooSmall(format!(
            "batch of {n} needs {need} source identities with two or more frames \
             and {n} records; have {} and {}",
            groups.len(),
            source_ids.len()
        )));
    }
    if n_target < n {
        return Err(Error::DatasetTooSmall(format!(
            "batch of {n} needs {n} target records, have {n_target}"
        )));
    }
    groups.shuffle(&mut rng);
    groups.truncate(n.div_ceil(2));
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let mut source = Vec::with_capacity(n);
    let mut round = 0;
    while source.len() < n {
        let before = source.len();
        for g in &groups {
            if source.len() == n {
                break;
            }
            if let Some(&i) = g.get(round) {
                source.push(i);
            }
        }
        if source.len() == before {
            return Err(Error::DatasetTooSmall(format!("ran out of source frames at {before} of {n}")));
        }
        round += 1;
    }
    let mut target: Vec<usize> = (0..n_target).collect();
    target.shuffle(&mut rng);
    target.truncate(n);
    Ok(BatchIndices { source, target })
}

/// Triplets `(i, j, k)` with `ids[i] == ids[j] != ids[k]`, `i != j`.
///
/// For each anchor at most `per_anchor` distinct `(j, k)` combinations are
/// drawn uniformly; `None` keeps all of them.
pub fn sample_fcl_triplets(
    ids: &[u32],
    per_anchor: Option<usize>,
    seed: u64,
    step: u64,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut rng = step_rng(seed, step, STREAM_TRIPLET);
    let mut out = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        let mut combos: Vec<(usize, usize, usize)> = Vec::new();
        for (j, &jd) in ids.iter().enumerate() {
            if j == i || jd != id {
                continue;
            }
            for (k, &kd) in ids.iter().enumerate() {
                if kd != id {
                    combos.push((i, j, k));
                }
            }
        }
        match per_anchor {
            Some(m) if combos.len() > m => {
                out.extend(combos.choose_multiple(&mut rng, m).copied());
            }
            _ => out.extend(combos),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyTripletSet);
    }
    Ok(out)
}
