use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TaskSpec;
use crate::error::{Error, Result};
use crate::rng;

/// Train/validation/test task ids of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSplit {
    pub fold_index: usize,
    pub train_tasks: Vec<String>,
    pub val_tasks: Vec<String>,
    pub test_tasks: Vec<String>,
}

impl SuiteSplit {
    pub fn is_disjoint(&self) -> bool {
        let all: Vec<&String> = self
            .train_tasks
            .iter()
            .chain(&self.val_tasks)
            .chain(&self.test_tasks)
            .collect();
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        dedup.len() == all.len()
    }
}

/// Randomly partitions the tasks into `n_folds` groups of near-equal size.
/// Fold `i` tests on group `i`, validates on group `i+1 mod n` and trains on
/// the rest. Tasks sharing a similarity group are kept together.
pub fn make_folds(tasks: &[TaskSpec], n_folds: usize, seed: u64) -> Result<Vec<SuiteSplit>> {
    if n_folds < 3 {
        return Err(Error::config(format!("need at least 3 folds, got {n_folds}")));
    }
    let mut units: Vec<(String, Vec<String>)> = Vec::new();
    for t in tasks {
        match units.iter_mut().find(|(g, _)| *g == t.group) {
            Some((_, ids)) => ids.push(t.task_id.clone()),
            None => units.push((t.group.clone(), vec![t.task_id.clone()])),
        }
    }
    if units.len() < n_folds {
        return Err(Error::config(format!(
            "{} task groups cannot fill {n_folds} folds",
            units.len()
        )));
    }
    units.shuffle(&mut rng::stream(seed, "folds", 0));

    let mut groups: Vec<Vec<String>> = vec![Vec::new(); n_folds];
    for (_, ids) in units {
        let target = (0..n_folds)
            .min_by_key(|&i| groups[i].len())
            .expect("n_folds > 0");
        groups[target].extend(ids);
    }
    for g in groups.iter_mut() {
        g.sort();
    }

    Ok((0..n_folds)
        .map(|i| {
            let val = (i + 1) % n_folds;
            let mut train: Vec<String> = (0..n_folds)
                .filter(|&j| j != i && j != val)
                .flat_map(|j| groups[j].iter().cloned())
                .collect();
            train.sort();
            SuiteSplit {
                fold_index: i,
                train_tasks: train,
                val_tasks: groups[val].clone(),
                test_tasks: groups[i].clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_relation_suite, RelationSuiteConfig};
    use std::collections::BTreeSet;

    fn tasks(n: usize) -> Vec<TaskSpec> {
        gen_relation_suite(
            0,
            &RelationSuiteConfig {
                n_tasks: n,
                n_examples: 6,
                entity_vocab_size: 10,
                max_task_input_len: 8,
            },
        )
        .unwrap()
        .tasks
    }

    #[test]
    fn eight_fold_partition_properties() {
        for n in [8, 9, 29, 30, 64] {
            let ts = tasks(n);
            let folds = make_folds(&ts, 8, 17).unwrap();
            assert_eq!(folds.len(), 8);
            let mut union = BTreeSet::new();
            let mut sizes = Vec::new();
            for f in &folds {
                assert!(f.is_disjoint());
                assert_eq!(f.train_tasks.len() + f.val_tasks.len() + f.test_tasks.len(), n);
                for id in &f.test_tasks {
                    assert!(union.insert(id.clone()), "test sets overlap at {id}");
                }
                sizes.push(f.test_tasks.len());
            }
            assert_eq!(union.len(), n);
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            assert!(spread <= 1, "n={n} sizes={sizes:?}");
            // validation of fold i is the test group of fold i+1
            for i in 0..8 {
                assert_eq!(folds[i].val_tasks, folds[(i + 1) % 8].test_tasks);
            }
        }
    }

    #[test]
    fn groups_stay_together() {
        let mut ts = tasks(16);
        for (i, t) in ts.iter_mut().enumerate() {
            t.group = format!("g{}", i / 2);
        }
        for f in make_folds(&ts, 4, 3).unwrap() {
            for part in [&f.train_tasks, &f.val_tasks, &f.test_tasks] {
                for t in ts.iter().filter(|t| part.contains(&t.task_id)) {
                    let mates = ts.iter().filter(|u| u.group == t.group);
                    assert!(mates.into_iter().all(|u| part.contains(&u.task_id)));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(make_folds(&tasks(8), 2, 0).is_err());
        assert!(make_folds(&tasks(5), 8, 0).is_err());
    }
}
