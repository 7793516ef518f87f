//! Identity-balanced batches: `P` identities with `A` instances each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result};

/// One epoch of batches over sample indices grouped by `labels`.
///
/// Each identity's samples are shuffled and cut into chunks of `A`; short
/// chunks are topped up by resampling that identity. Every batch takes one
/// chunk from each of the `P` identities with the most chunks left (random
/// order among equals), so all identities are visited before any is
/// revisited and the epoch ends when fewer than `P` remain. If some identity
/// was never visited by then, one last batch takes a chunk from each
/// leftover identity and fills up with fresh chunks of random others.
pub fn pk_batches(labels: &[usize], p: usize, a: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if p < 2 || a < 2 {
        return Err(Error::Batch(format!("need P >= 2 and A >= 2, got P={p} A={a}")));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_id.entry(y).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Batch(format!("{} identities cannot fill P={p}", by_id.len())));
    }
    let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = by_id
        .into_values()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.shuffle(rng);
            let mut cs: Vec<Vec<usize>> = idx.chunks(a).map(<[usize]>::to_vec).collect();
            let last = cs.last_mut().expect("identity has samples");
            while last.len() < a {
                last.push(idx[rng.random_range(0..idx.len())]);
            }
            (k, cs)
        })
        .collect();
    let all: Vec<Vec<usize>> = {
        let mut v = vec![Vec::new(); chunks.len()];
        for (k, cs) in &chunks {
            v[*k] = cs.concat();
        }
        v
    };
    let full = chunks.iter().map(|(_, cs)| cs.len()).collect::<Vec<_>>();
    let mut batches = Vec::new();
    loop {
        chunks.shuffle(rng);
        chunks.sort_by_key(|(_, cs)| std::cmp::Reverse(cs.len()));
        if chunks[p - 1].1.is_empty() {
            break;
        }
        let batch: Vec<usize> = chunks[..p].iter_mut().flat_map(|(_, cs)| cs.pop().expect("non-empty")).collect();
        batches.push(batch);
    }
    let unvisited = chunks.iter().any(|(k, cs)| cs.len() == full[*k]);
    if unvisited {
        let mut batch = Vec::with_capacity(p * a);
        let leftover: Vec<usize> = chunks.iter().filter(|(_, cs)| !cs.is_empty()).map(|(k, _)| *k).collect();
        for (_, cs) in chunks.iter_mut().filter(|(_, cs)| !cs.is_empty()) {
            batch.extend(cs.pop().expect("non-empty"));
        }
        let mut others: Vec<usize> = (0..all.len()).filter(|k| !leftover.contains(k)).collect();
        others.shuffle(rng);
        for &k in &others[..p - leftover.len()] {
            batch.extend((0..a).map(|_| all[k][rng.random_range(0..all[k].len())]));
        }
        batches.push(batch);
    }
    Ok(batches)
}
