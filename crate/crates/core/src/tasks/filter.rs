use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Suite, TaskSpec};
use crate::error::{Error, Result};
use crate::lm::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub task_id: String,
    pub reason: String,
    pub pool_after: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FilterOutcome {
    Kept { task: TaskSpec, removed: usize },
    Dropped(DropRecord),
}

/// Prunes examples until every answer's relative frequency is strictly below
/// `threshold`.
///
/// Removal is greedy and deterministic: the currently most frequent answer
/// (lowest token id on ties) loses its oldest remaining example, repeated until
/// the bound holds. A task is dropped if the bound is unreachable or fewer
/// than `min_pool` examples survive.
pub fn majority_label_filter(task: &TaskSpec, threshold: f64, min_pool: usize) -> Result<FilterOutcome> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!("filter threshold {threshold} outside (0, 1]")));
    }
    let mut alive = vec![true; task.examples.len()];
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for e in &task.examples {
        *counts.entry(e.answer).or_default() += 1;
    }
    let mut total = task.examples.len();
    let mut removed = 0;

    let dropped = |reason: String, pool_after: usize| {
        Ok(FilterOutcome::Dropped(DropRecord {
            task_id: task.task_id.clone(),
            reason,
            pool_after,
        }))
    };

    loop {
        if total == 0 {
            return dropped("empty pool".into(), 0);
        }
        // first maximum in token order
        let (&answer, &max) = counts
            .iter()
            .fold(None, |best: Option<(&TokenId, &usize)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("nonempty counts");
        if (max as f64) / (total as f64) < threshold {
            break;
        }
        if max <= 1 {
            return dropped(
                format!("frequency bound {threshold} unreachable with {total} distinct answers"),
                total,
            );
        }
        let idx = task
            .examples
            .iter()
            .enumerate()
            .position(|(i, e)| alive[i] && e.answer == answer)
            .expect("counted answer is alive");
        alive[idx] = false;
        *counts.get_mut(&answer).expect("present") -= 1;
        total -= 1;
        removed += 1;
    }

    if total < min_pool {
        return dropped(format!("pool {total} below minimum {min_pool} after filtering"), total);
    }
    let mut kept = task.clone();
    kept.examples = task
        .examples
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(FilterOutcome::Kept {
        task: kept,
        removed,
    })
}

/// Drops a task whose longest input exceeds `max_len`.
pub fn input_length_filter(task: &TaskSpec, max_len: usize) -> Option<DropRecord> {
    let longest = task.max_input_len();
    (longest > max_len).then(|| DropRecord {
        task_id: task.task_id.clone(),
        reason: format!("task input length {longest} exceeds cap {max_len}"),
        pool_after: task.examples.len(),
    })
}

/// Outcome counts of suite-level filtering, persisted in the suite manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: Option<f64>,
    pub max_task_input_len: usize,
    pub min_pool: usize,
    pub tasks_in: usize,
    pub tasks_kept: usize,
    pub examples_removed: usize,
    pub dropped: Vec<DropRecord>,
}

impl Suite {
    /// Applies the input-length cap, then (if `threshold` is set) the majority
    /// label filter, to every task.
    pub fn filtered(&self, threshold: Option<f64>, max_input_len: usize, min_pool: usize) -> Result<(Suite, FilterReport)> {
        let mut report = FilterReport {
            threshold,
            max_task_input_len: max_input_len,
            min_pool,
            tasks_in: self.tasks.len(),
            ..Default::default()
        };
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for task in &self.tasks {
            if let Some(d) = input_length_filter(task, max_input_len) {
                report.dropped.push(d);
                continue;
            }
            let Some(th) = threshold else {
                if task.examples.len() < min_pool {
                    report.dropped.push(DropRecord {
                        task_id: task.task_id.clone(),
                        reason: format!("pool {} below minimum {min_pool}", task.examples.len()),
                        pool_after: task.examples.len(),
                    });
                } else {
                    tasks.push(task.clone());
                }
                continue;
            };
            match majority_label_filter(task, th, min_pool)? {
                FilterOutcome::Kept { task, removed } => {
                    report.examples_removed += removed;
                    tasks.push(task);
                }
                FilterOutcome::Dropped(d) => {
                    log::warn!("dropping task {}: {}", d.task_id, d.reason);
                    report.dropped.push(d);
                }
            }
        }
        report.tasks_kept = tasks.len();
        Ok((
            Suite {
                vocab: self.vocab,
                tasks,
            },
            report,
        ))
    }
}
