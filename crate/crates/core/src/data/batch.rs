use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Label, TokenizedExample};
use crate::error::{bail, Result};
use crate::tokenize::Encoding;

/// One task's examples split into units that must land in the same batch:
/// single examples, or whole candidate groups for ranking tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskUnits {
    pub task: usize,
    pub units: Vec<Vec<usize>>,
}

impl TaskUnits {
    pub fn singles(task: usize, n: usize) -> Self {
        Self {
            task,
            units: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// Groups example indices by group id, in order of first appearance.
    pub fn grouped(task: usize, groups: &[u64]) -> Self {
        let mut slot: HashMap<u64, usize> = HashMap::new();
        let mut units: Vec<Vec<usize>> = Vec::new();
        for (i, &g) in groups.iter().enumerate() {
            let k = *slot.entry(g).or_insert_with(|| {
                units.push(Vec::new());
                units.len() - 1
            });
            units[k].push(i);
        }
        Self { task, units }
    }

    /// Units for a tokenized dataset: grouped when examples carry group ids.
    pub fn for_examples(task: usize, examples: &[TokenizedExample]) -> Self {
        if examples.iter().all(|e| e.group.is_some()) && !examples.is_empty() {
            let g: Vec<u64> = examples.iter().map(|e| e.group.unwrap_or(0)).collect();
            Self::grouped(task, &g)
        } else {
            Self::singles(task, examples.len())
        }
    }

    pub fn len(&self) -> usize {
        self.units.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Which examples of which task form one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub task: usize,
    pub indices: Vec<usize>,
}

/// Builds one epoch's schedule: each task's units are shuffled and packed
/// greedily into batches of at most `batch_size` examples (the last may be
/// smaller), then the merged batch list is shuffled.
pub fn pack_epoch<R: Rng>(tasks: &[TaskUnits], batch_size: usize, rng: &mut R) -> Result<Vec<BatchPlan>> {
    if batch_size < 1 {
        bail!(Data, "batch_size must be at least 1");
    }
    let mut plans = Vec::new();
    for t in tasks {
        if t.is_empty() {
            bail!(Data, "task {} has an empty training set", t.task);
        }
        if let Some(u) = t.units.iter().find(|u| u.len() > batch_size) {
            bail!(
                Data,
                "task {}: a group of {} candidates does not fit in batch_size {batch_size}",
                t.task,
                u.len()
            );
        }
        let mut order: Vec<&Vec<usize>> = t.units.iter().collect();
        order.shuffle(rng);
        let mut cur: Vec<usize> = Vec::with_capacity(batch_size);
        for u in order {
            if cur.len() + u.len() > batch_size {
                plans.push(BatchPlan {
                    task: t.task,
                    indices: std::mem::take(&mut cur),
                });
            }
            cur.extend_from_slice(u);
        }
        if !cur.is_empty() {
            plans.push(BatchPlan {
                task: t.task,
                indices: cur,
            });
        }
    }
    plans.shuffle(rng);
    Ok(plans)
}

/// Model input for one task-homogeneous batch. Carries no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub task: usize,
    pub example_ids: Vec<usize>,
    pub encodings: Vec<Encoding>,
    pub groups: Vec<Option<u64>>,
}

/// Row-major padded view of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    /// True at real tokens, false at padding.
    pub mask: Vec<bool>,
}

impl BatchInput {
    pub fn gather(plan: &BatchPlan, examples: &[TokenizedExample]) -> Self {
        let picked: Vec<&TokenizedExample> = plan.indices.iter().map(|&i| &examples[i]).collect();
        Self {
            task: plan.task,
            example_ids: picked.iter().map(|e| e.id).collect(),
            encodings: picked.iter().map(|e| e.encoding.clone()).collect(),
            groups: picked.iter().map(|e| e.group).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    /// Pads every sequence with `pad_id` to the longest length (at least
    /// `min_len`).
    pub fn padded(&self, pad_id: u32, min_len: usize) -> Padded {
        let len = self
            .encodings
            .iter()
            .map(Encoding::len)
            .max()
            .unwrap_or(0)
            .max(min_len);
        let b = self.encodings.len();
        let mut tokens = vec![pad_id; b * len];
        let mut segments = vec![0u8; b * len];
        let mut mask = vec![false; b * len];
        for (r, e) in self.encodings.iter().enumerate() {
            let n = e.len();
            tokens[r * len..r * len + n].copy_from_slice(&e.token_ids);
            segments[r * len..r * len + n].copy_from_slice(&e.segment_ids);
            mask[r * len..r * len + n].fill(true);
        }
        Padded {
            batch: b,
            len,
            tokens,
            segments,
            mask,
        }
    }

    /// Row ranges of each candidate group, in order of first appearance.
    pub fn group_spans(&self) -> Result<Vec<Vec<usize>>> {
        let mut ids = Vec::with_capacity(self.len());
        for (i, g) in self.groups.iter().enumerate() {
            match g {
                Some(g) => ids.push(*g),
                None => bail!(Data, "batch row {i} has no ranking group"),
            }
        }
        Ok(TaskUnits::grouped(self.task, &ids).units)
    }
}

/// A batch with its gold labels, for supervised training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn gather(plan: &BatchPlan, examples: &[TokenizedExample]) -> Self {
        Self {
            input: BatchInput::gather(plan, examples),
            labels: plan.indices.iter().map(|&i| examples[i].label).collect(),
        }
    }
}
