//! What the training loops need from a multi-task model, and the loops
//! shared by teacher refinement and student fine-tuning.

use crate::data::{pack_epoch, Batch, BatchInput, BatchPlan, Label, Task, TaskKind, TaskUnits, TokenizedExample};
use crate::error::{bail, Error, Result};
use crate::exec::Exec;
use crate::seed::{self, Rng};
use crate::tensor::{Graph, Optimizer, OptimizerConfig, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenize::Encoding;

/// A shared network with one output head per task.
pub trait TaskModel<T: Real>: Sync {
    fn tasks(&self) -> &[Task];

    fn store(&self) -> &ParamStore<T>;

    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// Logits (B, output_dim) for a batch of the input's task. `rng` enables
    /// training-time stochasticity (dropout) where the model has any.
    fn forward(&self, g: &mut Graph<T>, input: &BatchInput, rng: Option<&mut Rng>) -> Result<Var>;

    /// Shared parameters plus the given task's head.
    fn trainable(&self, task: usize) -> Vec<ParamId>;

    /// Shared parameters only.
    fn shared(&self) -> Vec<ParamId>;

    fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks()
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("model has no task named {name:?}")))
    }

    /// Evaluation-mode logits.
    fn logits(&self, input: &BatchInput) -> Result<Tensor<T>> {
        let mut g = Graph::inference(self.store());
        let z = self.forward(&mut g, input, None)?;
        Ok(g.value(z).clone())
    }

    /// Evaluation-mode logits for every encoding, batched in order. Batches
    /// fan out under `exec`; each row depends only on its own input, so the
    /// result is independent of the policy.
    fn predict(&self, task: usize, encodings: &[Encoding], batch_size: usize, exec: Exec) -> Result<Vec<Vec<f64>>> {
        if batch_size == 0 {
            bail!(Data, "batch_size must be at least 1");
        }
        let starts: Vec<usize> = (0..encodings.len()).step_by(batch_size).collect();
        let per_batch = exec.try_map(&starts, |&s| {
            let e = (s + batch_size).min(encodings.len());
            let input = BatchInput {
                task,
                example_ids: (s..e).collect(),
                encodings: encodings[s..e].to_vec(),
                groups: vec![None; e - s],
            };
            let z = self.logits(&input)?;
            let w = z.shape()[1];
            Ok(z.to_f64_vec().chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>())
        })?;
        Ok(per_batch.into_iter().flatten().collect())
    }
}

/// Mean true-label loss of a batch: squared error on normalized scores for
/// regression, cross-entropy for classification, and the negative log
/// likelihood of each group's positive candidate for ranking.
pub fn task_loss<T: Real>(g: &mut Graph<T>, logits: Var, task: &Task, batch: &Batch) -> Result<Var> {
    let n = batch.labels.len();
    let shape = g.shape(logits).to_vec();
    if shape != [n, task.output_dim()] {
        bail!(
            Teacher,
            "task {}: logits of shape {shape:?} do not match {n} examples of width {}",
            task.name,
            task.output_dim()
        );
    }
    match task.kind {
        TaskKind::PairRegression => {
            let mut y = Vec::with_capacity(n);
            for l in &batch.labels {
                match l {
                    Label::Score(s) => y.push(task.normalize_score(*s)),
                    other => bail!(Teacher, "task {}: expected a score label, got {other:?}", task.name),
                }
            }
            let y = g.constant(Tensor::from_f64(&[n, 1], &y)?);
            let d = g.sub(logits, y)?;
            let sq = g.mul(d, d)?;
            g.mean_all(sq)
        }
        TaskKind::SingleClassification | TaskKind::PairClassification => {
            let c = task.output_dim();
            let mut onehot = vec![0.0; n * c];
            for (i, l) in batch.labels.iter().enumerate() {
                match l {
                    Label::Class(k) if *k < c => onehot[i * c + k] = 1.0,
                    other => bail!(Teacher, "task {}: invalid class label {other:?}", task.name),
                }
            }
            let onehot = g.constant(Tensor::from_f64(&[n, c], &onehot)?);
            let lp = g.log_softmax(logits, 1)?;
            let picked = g.mul(lp, onehot)?;
            let total = g.sum_all(picked)?;
            g.scale(total, -1.0 / n as f64)
        }
        TaskKind::RelevanceRanking => {
            let spans = batch.input.group_spans()?;
            let scores = g.reshape(logits, &[n])?;
            let mut terms = Vec::with_capacity(spans.len());
            for rows in &spans {
                let start = rows[0];
                if rows.iter().enumerate().any(|(k, &r)| r != start + k) {
                    bail!(Teacher, "task {}: ranking group rows are not contiguous", task.name);
                }
                let positives: Vec<usize> = rows
                    .iter()
                    .enumerate()
                    .filter(|(_, &r)| batch.labels[r] == Label::Relevant(true))
                    .map(|(k, _)| k)
                    .collect();
                if positives.len() != 1 {
                    bail!(
                        Teacher,
                        "task {}: ranking group has {} positive candidates, expected exactly 1",
                        task.name,
                        positives.len()
                    );
                }
                let s = g.slice(scores, 0, start, start + rows.len())?;
                let lp = g.log_softmax(s, 0)?;
                terms.push(g.slice(lp, 0, positives[0], positives[0] + 1)?);
            }
            let all = g.concat(&terms, 0)?;
            let total = g.sum_all(all)?;
            g.scale(total, -1.0 / spans.len() as f64)
        }
    }
}

/// Settings for supervised training with true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// One gradient step on `batch` with its task's true-label loss. Returns the
/// batch loss.
pub fn supervised_step<T: Real, M: TaskModel<T>>(
    model: &mut M,
    opt: &mut Optimizer,
    batch: &Batch,
    rng: Option<&mut Rng>,
) -> Result<f64> {
    let task = batch.input.task;
    let (loss, grads) = {
        let mut g = Graph::with_params(model.store());
        let z = model.forward(&mut g, &batch.input, rng)?;
        let loss = task_loss(&mut g, z, &model.tasks()[task], batch)?;
        let value = g.value(loss).item()?.as_f64();
        (value, g.backward(loss)?)
    };
    if !loss.is_finite() {
        bail!(Teacher, "non-finite loss {loss} on task {}", model.tasks()[task].name);
    }
    let params = model.trainable(task);
    model.store_mut().accumulate(&grads)?;
    opt.step(model.store_mut(), &params)?;
    Ok(loss)
}

/// Multi-task supervised training over task-homogeneous batches, reshuffled
/// every epoch. `datasets[i]` holds the examples of task `i`; empty datasets
/// are skipped. Returns the mean batch loss per epoch per task (NaN for tasks
/// without batches).
pub fn train_supervised<T: Real, M: TaskModel<T>>(
    model: &mut M,
    datasets: &[Vec<TokenizedExample>],
    cfg: &TrainConfig,
    dropout: bool,
) -> Result<Vec<Vec<f64>>> {
    if datasets.len() != model.tasks().len() {
        bail!(
            Teacher,
            "{} datasets supplied for a model with {} tasks",
            datasets.len(),
            model.tasks().len()
        );
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let units: Vec<TaskUnits> = datasets
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_empty())
        .map(|(t, d)| TaskUnits::for_examples(t, d))
        .collect();
    let mut sched_rng = seed::rng_for(cfg.seed, "schedule");
    let mut drop_rng = seed::rng_for(cfg.seed, "dropout");
    let mut curves = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let plans = pack_epoch(&units, cfg.batch_size, &mut sched_rng)?;
        let mut sums = vec![0.0; datasets.len()];
        let mut counts = vec![0usize; datasets.len()];
        for plan in &plans {
            let batch = Batch::gather(plan, &datasets[plan.task]);
            let rng = if dropout { Some(&mut drop_rng) } else { None };
            let loss = supervised_step(model, &mut opt, &batch, rng)?;
            sums[plan.task] += loss;
            counts[plan.task] += 1;
        }
        curves.push(
            sums.iter()
                .zip(&counts)
                .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
                .collect(),
        );
    }
    Ok(curves)
}

/// Mean true-label loss over a dataset in evaluation mode, batch-weighted by
/// example count.
pub fn dataset_loss<T: Real, M: TaskModel<T>>(
    model: &M,
    task: usize,
    examples: &[TokenizedExample],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        bail!(Eval, "cannot compute a loss over an empty dataset");
    }
    let units = TaskUnits::for_examples(task, examples);
    // Deterministic order: units packed as they come.
    let mut plans: Vec<BatchPlan> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for u in &units.units {
        if !cur.is_empty() && cur.len() + u.len() > batch_size {
            plans.push(BatchPlan {
                task,
                indices: std::mem::take(&mut cur),
            });
        }
        cur.extend_from_slice(u);
    }
    if !cur.is_empty() {
        plans.push(BatchPlan { task, indices: cur });
    }
    let ranking = model.tasks()[task].kind == TaskKind::RelevanceRanking;
    let mut total = 0.0;
    let mut weight = 0.0;
    for plan in &plans {
        let batch = Batch::gather(plan, examples);
        let mut g = Graph::inference(model.store());
        let z = model.forward(&mut g, &batch.input, None)?;
        let loss = task_loss(&mut g, z, &model.tasks()[task], &batch)?;
        let w = if ranking {
            batch.input.group_spans()?.len() as f64
        } else {
            plan.indices.len() as f64
        };
        total += g.value(loss).item()?.as_f64() * w;
        weight += w;
    }
    Ok(total / weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(task: usize, labels: Vec<Label>, groups: Vec<Option<u64>>) -> Batch {
        let n = labels.len();
        Batch {
            input: BatchInput {
                task,
                example_ids: (0..n).collect(),
                encodings: vec![Encoding { token_ids: vec![], segment_ids: vec![] }; n],
                groups,
            },
            labels,
        }
    }

    fn loss(task: &Task, logits: &[f64], width: usize, b: &Batch) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[logits.len() / width, width], logits)?);
        let l = task_loss(&mut g, z, task, b)?;
        g.value(l).item()
    }

    #[test]
    fn uniform_logits_cost_log_of_class_count() {
        let t = Task::classification("c", false, &["a", "b"]).unwrap();
        let b = batch(0, vec![Label::Class(0), Label::Class(1)], vec![None; 2]);
        assert!((loss(&t, &[0.0; 4], 2, &b).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn equal_scores_in_a_group_of_four_cost_ln4() {
        let t = Task::ranking("r").unwrap();
        let labels = [false, true, false, false, true, false, false, false]
            .into_iter()
            .map(Label::Relevant)
            .collect();
        let groups = [0, 0, 0, 0, 1, 1, 1, 1].into_iter().map(Some).collect();
        let b = batch(0, labels, groups);
        assert!((loss(&t, &[0.0; 8], 1, &b).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn regression_compares_against_normalized_score() {
        let t = Task::regression("s", (0.0, 5.0)).unwrap();
        let b = batch(0, vec![Label::Score(2.5), Label::Score(5.0)], vec![None; 2]);
        assert_eq!(loss(&t, &[0.5, 1.0], 1, &b).unwrap(), 0.0);
        assert!((loss(&t, &[0.0, 0.0], 1, &b).unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let t = Task::ranking("r").unwrap();
        let two_positives = batch(0, vec![Label::Relevant(true); 2], vec![Some(0); 2]);
        assert!(loss(&t, &[0.0; 2], 1, &two_positives).is_err());
        let c = Task::classification("c", false, &["a", "b"]).unwrap();
        let bad_class = batch(0, vec![Label::Class(2)], vec![None]);
        assert!(loss(&c, &[0.0; 2], 2, &bad_class).is_err());
        assert!(loss(&c, &[0.0; 3], 3, &batch(0, vec![Label::Class(0)], vec![None])).is_err());
    }
}
