//! Teacher logits cached per (task, example).

use std::collections::BTreeMap;
use std::path::Path;

use super::Unlabeled;
use crate::data::Task;
use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::io::Checkpoint;
use crate::model::TaskModel;
use crate::teacher::Teacher;
use crate::tensor::Tensor;
use crate::tokenize::Encoding;

/// One logits vector per (task index, example id). Read-only once built, so
/// any number of readers may share it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogitsStore {
    tasks: Vec<String>,
    widths: Vec<usize>,
    records: BTreeMap<(usize, usize), Vec<f32>>,
}

fn key(task: &str, example: usize) -> String {
    format!("task/{task}/example/{example}")
}

impl LogitsStore {
    pub fn new(tasks: &[Task]) -> Self {
        Self {
            tasks: tasks.iter().map(|t| t.name.clone()).collect(),
            widths: tasks.iter().map(Task::output_dim).collect(),
            records: BTreeMap::new(),
        }
    }

    /// Runs the teacher in evaluation mode over every example of every task.
    pub fn compute(teacher: &Teacher<f32>, data: &[Vec<Unlabeled>], batch_size: usize, exec: Exec) -> Result<Self> {
        if data.len() != teacher.tasks.len() {
            bail!(
                Distill,
                "{} datasets supplied for a teacher with {} tasks",
                data.len(),
                teacher.tasks.len()
            );
        }
        let mut store = Self::new(&teacher.tasks);
        for (t, examples) in data.iter().enumerate() {
            let encodings: Vec<Encoding> = examples.iter().map(|e| e.encoding.clone()).collect();
            let rows = teacher.predict(t, &encodings, batch_size, exec)?;
            for (e, z) in examples.iter().zip(rows) {
                store.insert(t, e.id, z.iter().map(|&v| v as f32).collect())?;
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, task: usize, example: usize, z: Vec<f32>) -> Result<()> {
        let Some(name) = self.tasks.get(task) else {
            bail!(Distill, "logits record for unknown task index {task}");
        };
        if z.len() != self.widths[task] {
            bail!(
                Distill,
                "task {name}, example {example}: logits width {} differs from head width {}",
                z.len(),
                self.widths[task]
            );
        }
        if z.iter().any(|v| !v.is_finite()) {
            bail!(Distill, "task {name}, example {example}: non-finite teacher logits");
        }
        if self.records.contains_key(&(task, example)) {
            bail!(Distill, "duplicate logits record for task {name}, example {example}");
        }
        self.records.insert((task, example), z);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, task: usize, example: usize) -> Result<&[f32]> {
        match self.records.get(&(task, example)) {
            Some(z) => Ok(z),
            None => {
                let name = self.tasks.get(task).map_or("?", String::as_str);
                bail!(Distill, "no cached teacher logits for task {name}, example {example}")
            }
        }
    }

    /// Logits of the given examples stacked as (B, width).
    pub fn batch(&self, task: usize, examples: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(examples.len() * self.widths.get(task).copied().unwrap_or(0));
        for &e in examples {
            data.extend_from_slice(self.get(task, e)?);
        }
        Tensor::new(vec![examples.len(), self.widths[task]], data)
    }

    /// Errors if the store was built for other tasks or lacks a record for
    /// any example of `data`.
    pub fn check_covers(&self, tasks: &[Task], data: &[Vec<Unlabeled>]) -> Result<()> {
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        if names != self.tasks.iter().map(String::as_str).collect::<Vec<_>>() {
            bail!(Distill, "logits store tasks {:?} do not match {names:?}", self.tasks);
        }
        for (t, examples) in data.iter().enumerate() {
            for e in examples {
                self.get(t, e.id)?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (&(t, e), z) in &self.records {
            c.push(&key(&self.tasks[t], e), vec![z.len()], z.clone())?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint, tasks: &[Task]) -> Result<Self> {
        let mut store = Self::new(tasks);
        for a in c.arrays() {
            let parsed = a
                .name
                .strip_prefix("task/")
                .and_then(|rest| rest.rsplit_once("/example/"))
                .and_then(|(t, e)| Some((t, e.parse::<usize>().ok()?)));
            let Some((name, example)) = parsed else {
                bail!(Distill, "malformed logits record name {:?}", a.name);
            };
            let Some(t) = store.tasks.iter().position(|n| n == name) else {
                bail!(Distill, "logits record {:?} names an unknown task", a.name);
            };
            if a.shape.len() != 1 {
                bail!(Distill, "logits record {:?} is not a vector", a.name);
            }
            store.insert(t, example, a.data.clone())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, tasks: &[Task]) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, tasks)
    }
}
