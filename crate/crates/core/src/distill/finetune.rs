//! Supervised fine-tuning of a distilled student on one task, with the
//! learning rate selected by dev loss.

use crate::data::{pack_epoch, Batch, TaskUnits, TokenizedExample};
use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::model::{dataset_loss, supervised_step};
use crate::seed;
use crate::student::Student;
use crate::tensor::{Optimizer, OptimizerConfig};

pub const FINETUNE_LEARNING_RATES: [f64; 3] = [1e-5, 1.5e-5, 5e-5];

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Candidate learning rates, each one of [`FINETUNE_LEARNING_RATES`].
    pub learning_rates: Vec<f64>,
    /// Upper bound on epochs; training stops at the first epoch whose dev
    /// loss does not improve.
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Policy for training the candidates side by side.
    pub exec: Exec,
}

impl FinetuneConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            learning_rates: FINETUNE_LEARNING_RATES.to_vec(),
            epochs: 4,
            batch_size: 32,
            clip_norm: 1.0,
            seed,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() {
            bail!(Distill, "fine-tuning needs at least one learning rate");
        }
        for &lr in &self.learning_rates {
            if !FINETUNE_LEARNING_RATES.iter().any(|&a| (lr - a).abs() <= 1e-12 * a) {
                bail!(Distill, "fine-tuning learning rate {lr:e} is not one of 1e-5, 1.5e-5, 5e-5");
            }
        }
        if self.batch_size < 1 {
            bail!(Distill, "batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Dev losses of one learning rate; `dev_losses[0]` is the untouched model.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FinetuneCandidate {
    pub learning_rate: f64,
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub student: Student<f32>,
    pub learning_rate: f64,
    /// Epochs of training behind the returned model (0 = unchanged).
    pub epochs: usize,
    pub dev_loss: f64,
    pub initial_dev_loss: f64,
    pub candidates: Vec<FinetuneCandidate>,
}

fn train_candidate(
    start: &Student<f32>,
    task: usize,
    train: &[TokenizedExample],
    dev: &[TokenizedExample],
    lr: f64,
    initial: f64,
    cfg: &FinetuneConfig,
) -> Result<(FinetuneCandidate, Student<f32>)> {
    let mut student = start.clone();
    let mut best = student.clone();
    let mut cand = FinetuneCandidate {
        learning_rate: lr,
        dev_losses: vec![initial],
        best_epoch: 0,
    };
    let mut opt = Optimizer::new(OptimizerConfig::adam(lr).with_clip(cfg.clip_norm))?;
    let mut rng = seed::rng_for(cfg.seed, "finetune-schedule");
    let units = [TaskUnits::for_examples(task, train)];
    for epoch in 1..=cfg.epochs {
        for plan in pack_epoch(&units, cfg.batch_size, &mut rng)? {
            supervised_step(&mut student, &mut opt, &Batch::gather(&plan, train), None)?;
        }
        let loss = dataset_loss(&student, task, dev, cfg.batch_size)?;
        cand.dev_losses.push(loss);
        if loss < cand.dev_losses[cand.best_epoch] {
            cand.best_epoch = epoch;
            best = student.clone();
        } else {
            break;
        }
    }
    Ok((cand, best))
}

/// Fine-tunes the shared body and `task`'s layer on the task's original
/// training split for each candidate learning rate, and returns the model
/// with the lowest dev loss. The unchanged model competes as epoch 0, so the
/// result never has a higher dev loss than the input.
pub fn finetune(
    student: &Student<f32>,
    task: usize,
    train: &[TokenizedExample],
    dev: Option<&[TokenizedExample]>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let Some(t) = student.tasks.get(task) else {
        bail!(Distill, "student has no task layer with index {task}");
    };
    let Some(dev) = dev.filter(|d| !d.is_empty()) else {
        bail!(Distill, "task {}: fine-tuning needs a dev split", t.name);
    };
    if train.is_empty() {
        bail!(Distill, "task {}: empty training split", t.name);
    }
    let initial = dataset_loss(student, task, dev, cfg.batch_size)?;
    let runs = cfg.exec.try_map(&cfg.learning_rates, |&lr| {
        train_candidate(student, task, train, dev, lr, initial, cfg)
    })?;
    let mut pick = 0;
    for (i, (c, _)) in runs.iter().enumerate() {
        if c.dev_losses[c.best_epoch] < runs[pick].0.dev_losses[runs[pick].0.best_epoch] {
            pick = i;
        }
    }
    let candidates: Vec<FinetuneCandidate> = runs.iter().map(|(c, _)| c.clone()).collect();
    let (chosen, model) = runs.into_iter().nth(pick).expect("at least one candidate");
    Ok(FinetuneOutcome {
        student: model,
        learning_rate: chosen.learning_rate,
        epochs: chosen.best_epoch,
        dev_loss: chosen.dev_losses[chosen.best_epoch],
        initial_dev_loss: initial,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Task};
    use crate::student::{BiattConfig, StudentConfig};
    use crate::tokenize::{Encoding, CLS_ID, SEP_ID};
    use rand::Rng;

    fn data(n: usize, seed: u64) -> Vec<TokenizedExample> {
        let mut rng = crate::seed::rng(seed);
        (0..n)
            .map(|id| {
                let a: u32 = rng.gen_range(5..15);
                let b: u32 = rng.gen_range(5..15);
                let token_ids = vec![CLS_ID, a, SEP_ID, b, SEP_ID];
                TokenizedExample {
                    id,
                    task: 0,
                    encoding: Encoding {
                        token_ids,
                        segment_ids: vec![0, 0, 0, 1, 1],
                    },
                    label: Label::Score(if a == b { 5.0 } else { f64::from(a.abs_diff(b)) / 2.0 }),
                    group: None,
                }
            })
            .collect()
    }

    fn student() -> Student<f32> {
        let cfg = StudentConfig::Biatt(BiattConfig {
            vocab_size: 15,
            embed_dim: 4,
            lstm_hidden: 3,
            task_layer_dim: 4,
        });
        Student::new(cfg, vec![Task::regression("sim", (0.0, 5.0)).unwrap()], 2).unwrap()
    }

    #[test]
    fn never_worse_than_the_input() {
        let (train, dev) = (data(40, 1), data(20, 2));
        let mut cfg = FinetuneConfig::new(3);
        cfg.epochs = 2;
        cfg.batch_size = 8;
        let out = finetune(&student(), 0, &train, Some(&dev), &cfg).unwrap();
        assert_eq!(out.candidates.len(), 3);
        assert!(FINETUNE_LEARNING_RATES.contains(&out.learning_rate));
        assert!(out.dev_loss <= out.initial_dev_loss);
        let again = dataset_loss(&out.student, 0, &dev, cfg.batch_size).unwrap();
        assert_eq!(again, out.dev_loss);
    }

    #[test]
    fn zero_epochs_return_the_input() {
        let s = student();
        let mut cfg = FinetuneConfig::new(3);
        cfg.epochs = 0;
        let out = finetune(&s, 0, &data(10, 1), Some(&data(10, 2)), &cfg).unwrap();
        assert_eq!(out.epochs, 0);
        assert_eq!(out.dev_loss, out.initial_dev_loss);
        assert!(out.student.store.same_values(&s.store));
    }

    #[test]
    fn rejects_bad_settings() {
        let s = student();
        let (train, dev) = (data(10, 1), data(10, 2));
        let mut cfg = FinetuneConfig::new(0);
        cfg.learning_rates = vec![1e-3];
        assert!(finetune(&s, 0, &train, Some(&dev), &cfg).is_err());
        let cfg = FinetuneConfig::new(0);
        assert!(finetune(&s, 0, &train, None, &cfg).is_err());
        assert!(finetune(&s, 0, &[], Some(&dev), &cfg).is_err());
        assert!(finetune(&s, 1, &train, Some(&dev), &cfg).is_err());
    }
}
