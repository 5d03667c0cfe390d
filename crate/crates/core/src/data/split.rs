use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
}

/// Shuffles `ids` by `seed` and cuts them into `k` validation folds whose
/// sizes differ by at most one; each fold trains on the rest.
pub fn kfold_split<T: Clone>(ids: &[T], k: usize, seed: u64) -> Result<Vec<Fold<T>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold split needs k ≥ 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!("{k} folds requested for {} ids", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let val = &order[start..start + size];
        let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
        let train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        folds.push(Fold {
            train: pick(&train),
            validation: pick(val),
        });
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn hundred_into_five() {
        let ids: Vec<u32> = (0..100).collect();
        let folds = kfold_split(&ids, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = HashSet::new();
        for f in &folds {
            assert_eq!((f.validation.len(), f.train.len()), (20, 80));
            for v in &f.validation {
                assert!(seen.insert(*v));
                assert!(!f.train.contains(v));
            }
        }
        assert_eq!(seen.len(), 100);
        assert_eq!(folds, kfold_split(&ids, 5, 3).unwrap());
        assert_ne!(folds, kfold_split(&ids, 5, 4).unwrap());
    }

    #[test]
    fn uneven_sizes_and_errors() {
        let ids: Vec<u32> = (0..7).collect();
        let sizes: Vec<usize> = kfold_split(&ids, 3, 0).unwrap().iter().map(|f| f.validation.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert!(kfold_split(&ids, 8, 0).is_err());
        assert!(kfold_split(&ids, 1, 0).is_err());
    }
}
