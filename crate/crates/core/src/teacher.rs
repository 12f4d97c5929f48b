//! Multi-task teacher: a shared transformer encoder whose `[CLS]` vector feeds
//! one head per task.
//!
//! Heads by task kind: classification is a linear map with bias to the class
//! logits; regression is the weight vector `W_STS` with `Sim = W_STSᵀ x`;
//! ranking is a scoring vector producing one score per candidate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{BatchInput, Task, TokenizedExample};
use crate::error::{bail, Result};
use crate::model::{train_supervised, TaskModel, TrainConfig};
use crate::nn::{first_position, Encoder, EncoderConfig, Linear};
use crate::seed::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};
use crate::tokenize::PAD_ID;

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub encoder: EncoderConfig,
    /// Dropout on the `[CLS]` vector during refinement.
    pub dropout: f64,
}

impl TeacherConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                vocab_size,
                layers: 2,
                width: 64,
                heads: 4,
                ffn_width: 256,
                max_seq_len: 128,
            },
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Teacher<T> {
    pub cfg: TeacherConfig,
    pub tasks: Arc<Vec<Task>>,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub heads: Vec<Linear>,
}

impl<T: Real> Teacher<T> {
    pub fn new(cfg: TeacherConfig, tasks: Vec<Task>, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            bail!(Teacher, "teacher needs at least one task");
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            bail!(Teacher, "dropout must lie in [0, 1), got {}", cfg.dropout);
        }
        let mut rng = seed::rng_for(seed, "teacher-init");
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", cfg.encoder, &mut rng)?;
        let d = cfg.encoder.width;
        let mut heads = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let bias = t.kind.is_classification();
            heads.push(Linear::new(&mut store, &format!("head.{}", t.name), d, t.output_dim(), bias, &mut rng)?);
        }
        Ok(Self {
            cfg,
            tasks: Arc::new(tasks),
            store,
            encoder,
            heads,
        })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Teacher<U> {
        Teacher {
            cfg: self.cfg,
            tasks: self.tasks.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            heads: self.heads.clone(),
        }
    }

    /// The `[CLS]` contextual embedding x, (B, width).
    pub fn cls(&self, g: &mut Graph<T>, input: &BatchInput) -> Result<Var> {
        let p = input.padded(PAD_ID, 0);
        let layers = self.encoder.forward(g, &p)?;
        first_position(g, *layers.last().expect("at least one layer"))
    }

    /// View restricted to some of the tasks, in the given order. Shares the
    /// encoder and the selected heads; other heads stay in the store unused.
    pub fn subset(&self, tasks: &[usize]) -> Result<Self> {
        if tasks.is_empty() {
            bail!(Teacher, "task subset is empty");
        }
        let mut seen = vec![false; self.tasks.len()];
        for &t in tasks {
            if t >= self.tasks.len() || std::mem::replace(&mut seen[t], true) {
                bail!(Teacher, "invalid task subset {tasks:?} for {} tasks", self.tasks.len());
            }
        }
        Ok(Self {
            cfg: self.cfg,
            tasks: Arc::new(tasks.iter().map(|&t| self.tasks[t].clone()).collect()),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            heads: tasks.iter().map(|&t| self.heads[t].clone()).collect(),
        })
    }

    pub fn head_ids(&self, task: usize) -> Vec<ParamId> {
        self.heads[task].ids()
    }

    /// Refines encoder and heads on the tasks' training sets; returns mean
    /// loss per epoch per task.
    pub fn refine(&mut self, datasets: &[Vec<TokenizedExample>], cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
        train_supervised(self, datasets, cfg, self.cfg.dropout > 0.0)
    }
}

impl<T: Real> TaskModel<T> for Teacher<T> {
    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph<T>, input: &BatchInput, rng: Option<&mut Rng>) -> Result<Var> {
        let Some(head) = self.heads.get(input.task) else {
            bail!(Teacher, "batch task {} has no teacher head", input.task);
        };
        let x = self.cls(g, input)?;
        let x = match rng {
            Some(rng) if self.cfg.dropout > 0.0 => g.dropout(x, self.cfg.dropout, rng)?,
            _ => x,
        };
        head.forward(g, x)
    }

    fn trainable(&self, task: usize) -> Vec<ParamId> {
        let mut v = self.shared();
        v.extend(self.head_ids(task));
        v
    }

    fn shared(&self) -> Vec<ParamId> {
        self.encoder.ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, Label};
    use crate::model::supervised_step;
    use crate::tensor::{Optimizer, OptimizerConfig, Tensor};
    use crate::tokenize::{Encoding, CLS_ID, SEP_ID};

    fn pair(x: &[u32], y: &[u32]) -> Encoding {
        let mut token_ids = vec![CLS_ID];
        token_ids.extend_from_slice(x);
        token_ids.push(SEP_ID);
        let mut segment_ids = vec![0u8; token_ids.len()];
        token_ids.extend_from_slice(y);
        token_ids.push(SEP_ID);
        segment_ids.resize(token_ids.len(), 1);
        Encoding {
            token_ids,
            segment_ids,
        }
    }

    fn small() -> Teacher<f64> {
        let mut cfg = TeacherConfig::new(20);
        cfg.encoder.width = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.ffn_width = 16;
        cfg.encoder.max_seq_len = 16;
        cfg.dropout = 0.0;
        let tasks = vec![
            Task::classification("nli", true, &["a", "b", "c"]).unwrap(),
            Task::regression("sts", (0.0, 5.0)).unwrap(),
        ];
        Teacher::new(cfg, tasks, 3).unwrap()
    }

    fn input(task: usize) -> BatchInput {
        BatchInput {
            task,
            example_ids: vec![0, 1],
            encodings: vec![pair(&[5, 6, 7], &[8]), pair(&[9], &[10, 11])],
            groups: vec![None; 2],
        }
    }

    #[test]
    fn zero_regression_head_gives_zero_scores() {
        let mut t = small();
        let w = t.heads[1].w;
        t.store.set_value(w, Tensor::zeros(&[8, 1])).unwrap();
        let z = t.logits(&input(1)).unwrap();
        assert_eq!(z.shape(), &[2, 1]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_regression_weight_reads_first_cls_coordinate() {
        let mut t = small();
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        t.store.set_value(t.heads[1].w, Tensor::from_f64(&[8, 1], &e1).unwrap()).unwrap();
        let mut g = Graph::inference(&t.store);
        let x = t.cls(&mut g, &input(1)).unwrap();
        let cls = g.value(x).clone();
        let z = t.logits(&input(1)).unwrap();
        for r in 0..2 {
            assert_eq!(z.at(&[r, 0]), cls.at(&[r, 0]));
        }
    }

    #[test]
    fn classification_head_has_bias_and_regression_does_not() {
        let t = small();
        assert!(t.heads[0].b.is_some());
        assert!(t.heads[1].b.is_none());
        assert_eq!(t.logits(&input(0)).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn step_on_one_task_leaves_other_heads_alone() {
        let mut t = small();
        let before = t.clone();
        let batch = Batch {
            input: input(0),
            labels: vec![Label::Class(2), Label::Class(0)],
        };
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2)).unwrap();
        supervised_step(&mut t, &mut opt, &batch, None).unwrap();
        for id in t.head_ids(1) {
            assert_eq!(t.store.value(id), before.store.value(id));
        }
        for id in t.head_ids(0).into_iter().chain(t.shared()) {
            if t.store.value(id) != before.store.value(id) {
                return;
            }
        }
        panic!("no trained parameter changed");
    }

    #[test]
    fn subset_keeps_selected_heads() {
        let t = small();
        let s = t.subset(&[1]).unwrap();
        assert_eq!(s.tasks.len(), 1);
        assert_eq!(s.tasks[0].name, "sts");
        assert_eq!(s.logits(&input(0)).unwrap(), t.logits(&input(1)).unwrap());
        assert!(t.subset(&[]).is_err());
        assert!(t.subset(&[0, 0]).is_err());
        assert!(t.subset(&[2]).is_err());
    }

    #[test]
    fn rejects_bad_dropout_and_unknown_task() {
        let mut cfg = small().cfg;
        cfg.dropout = 1.0;
        assert!(Teacher::<f64>::new(cfg, vec![Task::ranking("r").unwrap()], 0).is_err());
        assert!(small().logits(&input(5)).is_err());
    }
}
