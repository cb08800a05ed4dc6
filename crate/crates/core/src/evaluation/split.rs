use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FOLDS: usize = 5;
const PARTS: usize = FOLDS + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Fold(usize),
    Test,
}

/// Per-sample assignment to one of five folds or the test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub assignment: Vec<Split>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    fn indices(&self, pred: impl Fn(Split) -> bool) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| pred(self.assignment[i])).collect()
    }

    /// Validation portion of fold `k`.
    pub fn fold(&self, k: usize) -> Vec<usize> {
        self.indices(|s| s == Split::Fold(k))
    }

    /// Training portion of fold `k`: every other fold.
    pub fn train(&self, k: usize) -> Vec<usize> {
        self.indices(|s| matches!(s, Split::Fold(j) if j != k))
    }

    pub fn test(&self) -> Vec<usize> {
        self.indices(|s| s == Split::Test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (0..FOLDS).map(|k| self.fold(k).len()).collect()
    }

    /// One `sample,split` line per sample.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample", "split"])?;
        for (i, s) in self.assignment.iter().enumerate() {
            let label = match s {
                Split::Fold(k) => format!("fold{k}"),
                Split::Test => "test".into(),
            };
            w.write_record([i.to_string(), label])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<SplitPlan> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut assignment = Vec::new();
        for (expected, row) in r.records().enumerate() {
            let row = row?;
            let (Some(sample), Some(split)) = (row.get(0), row.get(1)) else {
                return Err(Error::Malformed("split rows need two columns".into()));
            };
            if sample.parse::<usize>().ok() != Some(expected) {
                return Err(Error::Malformed(format!("split row {expected} names sample `{sample}`")));
            }
            assignment.push(match split {
                "test" => Split::Test,
                f => Split::Fold(
                    f.strip_prefix("fold")
                        .and_then(|k| k.parse().ok())
                        .filter(|&k| k < FOLDS)
                        .ok_or_else(|| Error::Malformed(format!("unknown split `{f}`")))?,
                ),
            });
        }
        Ok(SplitPlan { assignment })
    }
}

/// Distributes groups over six bins. Groups are shuffled with `seed`, then
/// stably sorted largest first. Phase one deals them round-robin while the
/// next group fits under `ceil(total / 6)` (an empty bin always accepts);
/// phase two hands the rest, smallest first, to the currently smallest bin.
/// Returns the bin of every group.
pub fn bin_cover(sizes: &[usize], seed: u64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let cap = total.div_ceil(PARTS);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));

    let mut fill = [0usize; PARTS];
    let mut bin_of = vec![0usize; sizes.len()];
    let mut next = 0;
    let mut bin = 0;
    while next < order.len() {
        let g = order[next];
        if fill[bin] != 0 && fill[bin] + sizes[g] > cap {
            break;
        }
        fill[bin] += sizes[g];
        bin_of[g] = bin;
        bin = (bin + 1) % PARTS;
        next += 1;
    }
    for &g in order[next..].iter().rev() {
        let smallest = (0..PARTS).min_by_key(|&b| (fill[b], b)).expect("six bins");
        fill[smallest] += sizes[g];
        bin_of[g] = smallest;
    }
    bin_of
}

/// Five folds plus a test split. Without groups: a seeded permutation,
/// folds of `floor(n / 6)` and the remainder as test. With per-sample group
/// ids: bin covering over the group sizes, the largest bin becomes the test
/// split and the others become folds in ascending size.
pub fn split_dataset(n: usize, groups: Option<&[usize]>, seed: u64) -> Result<SplitPlan> {
    if n < PARTS {
        return Err(Error::InvalidConfig(format!("cannot split {n} samples into six parts")));
    }
    let Some(groups) = groups else {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let per = n / PARTS;
        let mut assignment = vec![Split::Test; n];
        for (pos, &i) in perm.iter().enumerate().take(per * FOLDS) {
            assignment[i] = Split::Fold(pos / per);
        }
        return Ok(SplitPlan { assignment });
    };
    if groups.len() != n {
        return Err(Error::shape("split_dataset", format!("{} group ids for {n} samples", groups.len())));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let sizes: Vec<usize> = ids.iter().map(|g| groups.iter().filter(|x| *x == g).count()).collect();
    let bin_of = bin_cover(&sizes, seed);
    let mut fill = [0usize; PARTS];
    for (g, &b) in bin_of.iter().enumerate() {
        fill[b] += sizes[g];
    }
    // Largest bin (last on ties) is the test split.
    let test_bin = (0..PARTS).max_by_key(|&b| (fill[b], b)).expect("six bins");
    let mut fold_bins: Vec<usize> = (0..PARTS).filter(|&b| b != test_bin).collect();
    fold_bins.sort_by_key(|&b| (fill[b], b));
    let mut split_of_bin = [Split::Test; PARTS];
    for (k, &b) in fold_bins.iter().enumerate() {
        split_of_bin[b] = Split::Fold(k);
    }
    let assignment = groups
        .iter()
        .map(|g| split_of_bin[bin_of[ids.binary_search(g).expect("known group")]])
        .collect();
    Ok(SplitPlan { assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ungrouped_folds_have_floor_size() {
        let p = split_dataset(612, None, 3).unwrap();
        assert_eq!(p.fold_sizes(), vec![102; 5]);
        assert_eq!(p.test().len(), 102);
        let p = split_dataset(20, None, 3).unwrap();
        assert_eq!(p.fold_sizes(), vec![3; 5]);
        assert_eq!(p.test().len(), 5);
    }

    #[test]
    fn equal_groups_get_one_bin_each() {
        let groups: Vec<usize> = (0..30).map(|i| i / 5).collect();
        let p = split_dataset(30, Some(&groups), 0).unwrap();
        assert_eq!(p.fold_sizes(), vec![5; 5]);
        assert_eq!(p.test().len(), 5);
        let bins = bin_cover(&[5; 6], 0);
        let mut sorted = bins.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn groups_are_never_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let count = rng.gen_range(6..30);
            let mut groups = Vec::new();
            for g in 0..count {
                for _ in 0..rng.gen_range(1..12) {
                    groups.push(g * 7 + 3);
                }
            }
            groups.shuffle(&mut rng);
            let p = split_dataset(groups.len(), Some(&groups), trial).unwrap();
            for i in 0..groups.len() {
                for j in 0..groups.len() {
                    if groups[i] == groups[j] {
                        assert_eq!(p.assignment[i], p.assignment[j]);
                    }
                }
            }
            let sizes = p.fold_sizes();
            assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
            assert!(p.test().len() >= *sizes.last().unwrap());
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(split_dataset(5, None, 0).is_err());
    }

    #[test]
    fn plan_round_trips_through_csv() {
        let p = split_dataset(40, None, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        p.write(&path).unwrap();
        assert_eq!(SplitPlan::read(&path).unwrap(), p);
    }

    #[test]
    fn train_and_validation_are_disjoint() {
        let p = split_dataset(60, None, 1).unwrap();
        let train = p.train(2);
        let val = p.fold(2);
        assert!(val.iter().all(|v| !train.contains(v)));
        assert!(p.test().iter().all(|t| !train.contains(t)));
        assert_eq!(train.len() + val.len() + p.test().len(), 60);
    }
}
