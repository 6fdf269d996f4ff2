//! Episodic task construction: known and unknown task sampling from a
//! dataset split, and the balanced evaluation stream.
//!
//! A task holds dataset indices rather than copies of the vectors; samplers
//! draw classes first, then items, so class frequencies are uniform
//! regardless of per-class item counts.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSplit, SplitSide};
use crate::error::{Error, Result};
use crate::numeric::Prng;

/// Episode shape: K-way, N-shot, and which split side to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k_way: usize,
    pub n_shot: usize,
    pub split_side: SplitSide,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_way < 2 {
            return Err(Error::Config(format!(
                "k_way must be >= 2, got {}",
                self.k_way
            )));
        }
        if self.n_shot < 1 {
            return Err(Error::Config(format!(
                "n_shot must be >= 1, got {}",
                self.n_shot
            )));
        }
        Ok(())
    }
}

/// One episodic task. `support[c]` holds the N dataset indices of support
/// class c; `support_labels[c]` its dataset label. `query_target` is the
/// support-class position of the query when it is known, `None` when the
/// query's class lies outside the support set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTask {
    pub support: Vec<Vec<usize>>,
    pub support_labels: Vec<usize>,
    pub query: usize,
    pub query_target: Option<usize>,
}

impl EpisodeTask {
    pub fn is_known(&self) -> bool {
        self.query_target.is_some()
    }

    pub fn k_way(&self) -> usize {
        self.support.len()
    }
}

/// Check every structural task invariant against the dataset. Used by the
/// fuzz suites and debug assertions, not on the hot path.
pub fn validate_task(ds: &Dataset, task: &EpisodeTask, spec: &EpisodeSpec) -> Result<()> {
    let fail = |msg: String| Err(Error::Config(msg));
    if task.support.len() != spec.k_way || task.support_labels.len() != spec.k_way {
        return fail(format!("task has {} support classes", task.support.len()));
    }
    let mut labels = task.support_labels.clone();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != spec.k_way {
        return fail("support labels not distinct".into());
    }
    for (c, shots) in task.support.iter().enumerate() {
        if shots.len() != spec.n_shot {
            return fail(format!("class {c} has {} shots", shots.len()));
        }
        for &i in shots {
            if ds.get(i).label != task.support_labels[c] {
                return fail(format!("shot {i} label mismatch in class {c}"));
            }
            if i == task.query {
                return fail("query leaked into support set".into());
            }
        }
    }
    let q = ds.get(task.query);
    match task.query_target {
        Some(t) => {
            if t >= spec.k_way {
                return fail(format!("query_target {t} out of range"));
            }
            if q.label != task.support_labels[t] {
                return fail("known query label does not match its target class".into());
            }
        }
        None => {
            if task.support_labels.contains(&q.label) {
                return fail("unknown query label appears in support set".into());
            }
        }
    }
    Ok(())
}

fn pick_support_classes(
    classes: &[usize],
    spec: &EpisodeSpec,
    extra_needed: usize,
    what: &str,
    rng: &mut Prng,
) -> Result<Vec<usize>> {
    let needed = spec.k_way + extra_needed;
    if classes.len() < needed {
        let side = match spec.split_side {
            SplitSide::Train => "train",
            SplitSide::Test => "test",
        };
        return Err(Error::InsufficientClasses {
            side: side.into(),
            needed,
            available: classes.len(),
            what: what.into(),
        });
    }
    let picks = rng.sample_distinct(classes.len(), spec.k_way);
    Ok(picks.into_iter().map(|i| classes[i]).collect())
}

fn sample_shots(
    ds: &Dataset,
    label: usize,
    count: usize,
    what: &str,
    rng: &mut Prng,
) -> Result<Vec<usize>> {
    let items = ds.items_of(label);
    if items.len() < count {
        return Err(Error::InsufficientItems {
            label,
            available: items.len(),
            needed: count,
            what: what.into(),
        });
    }
    let picks = rng.sample_distinct(items.len(), count);
    Ok(picks.into_iter().map(|i| items[i]).collect())
}

/// Sample a known task: the query is drawn from one of the K support
/// classes and excluded from that class's shots.
pub fn sample_known_task(
    ds: &Dataset,
    split: &LabelSplit,
    spec: &EpisodeSpec,
    rng: &mut Prng,
) -> Result<EpisodeTask> {
    spec.validate()?;
    let classes = split.side(spec.split_side);
    let support_labels = pick_support_classes(classes, spec, 0, "known-task support", rng)?;
    let query_slot = rng.gen_range(spec.k_way);

    let mut support = Vec::with_capacity(spec.k_way);
    let mut query = usize::MAX;
    for (c, &label) in support_labels.iter().enumerate() {
        if c == query_slot {
            let mut picked =
                sample_shots(ds, label, spec.n_shot + 1, "shots plus known query", rng)?;
            query = picked.pop().unwrap();
            support.push(picked);
        } else {
            support.push(sample_shots(ds, label, spec.n_shot, "support shots", rng)?);
        }
    }
    let task = EpisodeTask {
        support,
        support_labels,
        query,
        query_target: Some(query_slot),
    };
    debug_assert!(validate_task(ds, &task, spec).is_ok());
    Ok(task)
}

/// Sample an unknown task: the query class is drawn uniformly from the
/// split classes outside the support set, then an item uniformly within it.
pub fn sample_unknown_task(
    ds: &Dataset,
    split: &LabelSplit,
    spec: &EpisodeSpec,
    rng: &mut Prng,
) -> Result<EpisodeTask> {
    spec.validate()?;
    let classes = split.side(spec.split_side);
    let support_labels = pick_support_classes(classes, spec, 1, "unknown query pool", rng)?;

    let complement: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|l| !support_labels.contains(l))
        .collect();
    let query_label = complement[rng.gen_range(complement.len())];
    let query = sample_shots(ds, query_label, 1, "unknown query item", rng)?[0];

    let mut support = Vec::with_capacity(spec.k_way);
    for &label in &support_labels {
        support.push(sample_shots(ds, label, spec.n_shot, "support shots", rng)?);
    }
    let task = EpisodeTask {
        support,
        support_labels,
        query,
        query_target: None,
    };
    debug_assert!(validate_task(ds, &task, spec).is_ok());
    Ok(task)
}

/// Exactly `n_pairs` known and `n_pairs` unknown tasks, interleaved
/// known-first, for balanced evaluation.
pub fn sample_balanced_eval(
    ds: &Dataset,
    split: &LabelSplit,
    spec: &EpisodeSpec,
    n_pairs: usize,
    rng: &mut Prng,
) -> Result<Vec<EpisodeTask>> {
    let mut tasks = Vec::with_capacity(2 * n_pairs);
    for _ in 0..n_pairs {
        tasks.push(sample_known_task(ds, split, spec, rng)?);
        tasks.push(sample_unknown_task(ds, split, spec, rng)?);
    }
    Ok(tasks)
}
