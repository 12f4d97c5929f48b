//! Multi-task distillation on logits.
//!
//! Each step takes one task-homogeneous batch, obtains the teacher's logits
//! (from the cache or an evaluation-mode forward), and moves the student's
//! shared body and that task's layer toward them under the mean squared L2
//! distance. Labels never reach this code path: the student only sees
//! [`Unlabeled`] inputs.

mod cache;
mod finetune;

use serde::Serialize;

pub use cache::LogitsStore;
pub use finetune::{finetune, FinetuneCandidate, FinetuneConfig, FinetuneOutcome, FINETUNE_LEARNING_RATES};

use crate::data::{pack_epoch, BatchInput, BatchPlan, Task, TaskUnits, TokenizedExample};
use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::model::TaskModel;
use crate::seed;
use crate::student::Student;
use crate::teacher::Teacher;
use crate::tensor::{Graph, Optimizer, OptimizerConfig, Real, Tensor, Var};
use crate::tokenize::Encoding;

/// A distillation input: an example's text without its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Unlabeled {
    pub id: usize,
    pub encoding: Encoding,
    pub group: Option<u64>,
}

pub fn strip_labels(examples: &[TokenizedExample]) -> Vec<Unlabeled> {
    examples
        .iter()
        .map(|e| Unlabeled {
            id: e.id,
            encoding: e.encoding.clone(),
            group: e.group,
        })
        .collect()
}

fn gather(plan: &BatchPlan, examples: &[Unlabeled]) -> BatchInput {
    let picked: Vec<&Unlabeled> = plan.indices.iter().map(|&i| &examples[i]).collect();
    BatchInput {
        task: plan.task,
        example_ids: picked.iter().map(|e| e.id).collect(),
        encodings: picked.iter().map(|e| e.encoding.clone()).collect(),
        groups: picked.iter().map(|e| e.group).collect(),
    }
}

fn units(task: usize, examples: &[Unlabeled]) -> TaskUnits {
    match examples.iter().map(|e| e.group).collect::<Option<Vec<u64>>>() {
        Some(g) if !g.is_empty() => TaskUnits::grouped(task, &g),
        _ => TaskUnits::singles(task, examples.len()),
    }
}

/// Mean over the batch of `‖z_T − z_S‖²`.
pub fn distill_loss_task<T: Real>(g: &mut Graph<T>, z_teacher: Var, z_student: Var) -> Result<Var> {
    let (st, ss) = (g.shape(z_teacher).to_vec(), g.shape(z_student).to_vec());
    if st != ss {
        bail!(Distill, "teacher logits {st:?} and student logits {ss:?} differ in shape");
    }
    if st.len() != 2 || st[0] == 0 {
        bail!(Distill, "logits must be a non-empty (batch, width) matrix, got {st:?}");
    }
    let d = g.sub(z_teacher, z_student)?;
    let sq = g.mul(d, d)?;
    let total = g.sum_all(sq)?;
    g.scale(total, 1.0 / st[0] as f64)
}

/// Epoch objective: the sum of per-task mean losses.
pub fn epoch_distill_loss(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        bail!(Distill, "epoch loss needs at least one task loss");
    }
    Ok(per_task.iter().sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub epoch_max: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub cache_teacher_logits: bool,
    /// Policy for computing teacher logits ahead of training.
    pub exec: Exec,
}

impl DistillConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch_max: 16,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(5e-4).with_clip(1.0),
            seed,
            cache_teacher_logits: true,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epoch_max < 1 {
            bail!(Distill, "epoch_max must be at least 1");
        }
        if self.batch_size < 1 {
            bail!(Distill, "batch_size must be at least 1");
        }
        self.optimizer.validate()
    }
}

/// Per-epoch loss curves of a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillReport {
    pub tasks: Vec<String>,
    /// `per_task[epoch][task]`: mean batch loss of the task in that epoch.
    pub per_task: Vec<Vec<f64>>,
    /// Sum over tasks of `per_task[epoch]`.
    pub totals: Vec<f64>,
    pub steps: usize,
}

/// Errors unless teacher heads and student task layers cover the same tasks
/// in the same order with the same output widths.
pub fn check_task_sets(teacher: &[Task], student: &[Task]) -> Result<()> {
    let names = |ts: &[Task]| ts.iter().map(|t| t.name.clone()).collect::<Vec<_>>();
    if teacher.len() != student.len() || teacher.iter().zip(student).any(|(a, b)| a.name != b.name) {
        bail!(
            Distill,
            "teacher tasks {:?} do not match student tasks {:?}",
            names(teacher),
            names(student)
        );
    }
    for (a, b) in teacher.iter().zip(student) {
        if a.kind != b.kind || a.output_dim() != b.output_dim() {
            bail!(
                Distill,
                "task {}: teacher head ({}, width {}) does not match student layer ({}, width {})",
                a.name,
                a.kind.as_str(),
                a.output_dim(),
                b.kind.as_str(),
                b.output_dim()
            );
        }
    }
    Ok(())
}

fn teacher_logits(teacher: &Teacher<f32>, cache: Option<&LogitsStore>, input: &BatchInput) -> Result<Tensor<f32>> {
    match cache {
        Some(c) => c.batch(input.task, &input.example_ids),
        None => teacher.logits(input),
    }
}

/// Distills `teacher` into `student` over `data[t]`, the (augmented) inputs
/// of task `t`. Uses `cache` if given, builds one when
/// `cfg.cache_teacher_logits` is set, and otherwise runs the teacher on every
/// batch.
pub fn run_distillation(
    teacher: &Teacher<f32>,
    student: &mut Student<f32>,
    data: &[Vec<Unlabeled>],
    cfg: &DistillConfig,
    cache: Option<&LogitsStore>,
) -> Result<DistillReport> {
    cfg.validate()?;
    check_task_sets(&teacher.tasks, &student.tasks)?;
    if data.len() != student.tasks.len() {
        bail!(
            Distill,
            "{} datasets supplied for {} tasks",
            data.len(),
            student.tasks.len()
        );
    }
    for (t, d) in data.iter().enumerate() {
        if d.is_empty() {
            bail!(Distill, "task {} has no distillation data", student.tasks[t].name);
        }
    }
    let built;
    let cache = match cache {
        Some(c) => Some(c),
        None if cfg.cache_teacher_logits => {
            built = LogitsStore::compute(teacher, data, cfg.batch_size, cfg.exec)?;
            Some(&built)
        }
        None => None,
    };
    if let Some(c) = cache {
        c.check_covers(&teacher.tasks, data)?;
    }

    let units: Vec<TaskUnits> = data.iter().enumerate().map(|(t, d)| units(t, d)).collect();
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = seed::rng_for(cfg.seed, "distill-schedule");
    let n_tasks = data.len();
    let mut report = DistillReport {
        tasks: student.tasks.iter().map(|t| t.name.clone()).collect(),
        per_task: Vec::with_capacity(cfg.epoch_max),
        totals: Vec::with_capacity(cfg.epoch_max),
        steps: 0,
    };
    for epoch in 0..cfg.epoch_max {
        let plans = pack_epoch(&units, cfg.batch_size, &mut rng)?;
        let mut sums = vec![0.0; n_tasks];
        let mut counts = vec![0usize; n_tasks];
        for plan in &plans {
            let input = gather(plan, &data[plan.task]);
            let target = teacher_logits(teacher, cache, &input)?;
            let (loss, grads) = {
                let mut g = Graph::with_params(&student.store);
                let zt = g.constant(target);
                let zs = student.forward(&mut g, &input, None)?;
                let loss = distill_loss_task(&mut g, zt, zs)?;
                let value = f64::from(g.value(loss).item()?);
                (value, g.backward(loss)?)
            };
            if !loss.is_finite() {
                bail!(Distill, "non-finite loss on task {}", student.tasks[plan.task].name);
            }
            let params = student.trainable(plan.task);
            student.store.accumulate(&grads)?;
            opt.step(&mut student.store, &params)?;
            sums[plan.task] += loss;
            counts[plan.task] += 1;
            report.steps += 1;
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(&s, &c)| s / c as f64).collect();
        let total = epoch_distill_loss(&means)?;
        log::info!("distill epoch {}: loss {total:.6} {means:?}", epoch + 1);
        report.per_task.push(means);
        report.totals.push(total);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(zt: &[&[f64]], zs: &[&[f64]]) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(zt)?);
        let b = g.constant(Tensor::matrix(zs)?);
        let l = distill_loss_task(&mut g, a, b)?;
        g.value(l).item()
    }

    #[test]
    fn distill_loss_values() {
        assert_eq!(loss_of(&[&[1.0, 2.0]], &[&[0.0, 0.0]]).unwrap(), 5.0);
        assert_eq!(loss_of(&[&[1.0, 2.0], &[1.0, 0.0]], &[&[0.0, 0.0], &[0.0, 0.0]]).unwrap(), 3.0);
        assert_eq!(loss_of(&[&[0.3, -2.0]], &[&[0.3, -2.0]]).unwrap(), 0.0);
        assert!(loss_of(&[&[1.0, 2.0]], &[&[1.0]]).is_err());
    }

    #[test]
    fn epoch_loss_is_a_sum() {
        assert_eq!(epoch_distill_loss(&[1.0, 2.0]).unwrap(), 3.0);
        assert_eq!(epoch_distill_loss(&[0.25]).unwrap(), 0.25);
        assert_eq!(epoch_distill_loss(&[2.0, 1.0]).unwrap(), 3.0);
        assert!(epoch_distill_loss(&[]).is_err());
    }

    #[test]
    fn task_set_mismatch_detected() {
        let a = vec![Task::classification("a", false, &["x", "y"]).unwrap()];
        let b = vec![Task::classification("b", false, &["x", "y"]).unwrap()];
        let c = vec![Task::classification("a", false, &["x", "y", "z"]).unwrap()];
        assert!(check_task_sets(&a, &a).is_ok());
        assert!(check_task_sets(&a, &b).is_err());
        assert!(check_task_sets(&a, &c).is_err());
    }
}
