//! Pair construction, query-level folds and batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqo_core::plan::CandidatePlanSet;

use crate::error::{Error, Result};

/// Every unordered pair `(i, j)`, `i < j`, of `n` candidates.
pub fn make_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// `(train, test)` query indices for each of `folds` folds.
pub fn kfold(num_queries: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::Config("at least two folds are required".into()));
    }
    if num_queries < folds {
        return Err(Error::Config(format!(
            "{num_queries} queries cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..num_queries).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|f| {
            let mut test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            test.sort_unstable();
            let train = (0..num_queries)
                .filter(|q| test.binary_search(q).is_err())
                .collect();
            (train, test)
        })
        .collect())
}

/// Splits `indices` into `(kept, held_out)` with about `fraction` held out.
pub fn holdout(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((indices.len() as f64) * fraction).round() as usize;
    let n = n.min(indices.len().saturating_sub(1));
    let mut held = order[..n].to_vec();
    let mut kept = order[n..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    (kept, held)
}

/// Groups whole candidate sets, visited in `order`, until each group holds at
/// least `batch_plans` plans. `plan_counts[i]` is the size of set `i`.
pub fn batches(plan_counts: &[usize], order: &[usize], batch_plans: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut plans = 0;
    for &i in order {
        cur.push(i);
        plans += plan_counts[i];
        if plans >= batch_plans {
            out.push(std::mem::take(&mut cur));
            plans = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn select<'a>(sets: &'a [CandidatePlanSet], idx: &[usize]) -> Vec<&'a CandidatePlanSet> {
    idx.iter().map(|&i| &sets[i]).collect()
}
