//! Student models: the bi-attentive BiLSTM and a small transformer, each
//! topped by one task layer per task (`h = ReLU(W₁r + b₁)`, `z = W₂h + b₂`).

mod biatt;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use biatt::{segments, Biatt, BiattActivations, BiattConfig};

use crate::data::{BatchInput, Task};
use crate::error::{bail, Result};
use crate::model::TaskModel;
use crate::nn::{first_position, Encoder, EncoderConfig, Linear};
use crate::seed::{self, Rng};
use crate::teacher::Teacher;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};
use crate::tokenize::PAD_ID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerStudentConfig {
    pub encoder: EncoderConfig,
    pub task_layer_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum StudentConfig {
    Biatt(BiattConfig),
    Transformer(TransformerStudentConfig),
}

impl StudentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StudentConfig::Biatt(_) => "biatt",
            StudentConfig::Transformer(_) => "transformer",
        }
    }

    fn task_layer_dim(&self) -> usize {
        match self {
            StudentConfig::Biatt(c) => c.task_layer_dim,
            StudentConfig::Transformer(c) => c.task_layer_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Body {
    Biatt(Biatt),
    Transformer(Encoder),
}

/// ReLU hidden layer followed by a linear map to the task's logits.
#[derive(Clone, Debug)]
pub struct TaskLayer {
    pub hidden: Linear,
    pub output: Linear,
}

impl TaskLayer {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, r: Var) -> Result<Var> {
        let h = self.hidden.forward(g, r)?;
        let h = g.relu(h)?;
        self.output.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.hidden.ids();
        v.extend(self.output.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Student<T> {
    pub cfg: StudentConfig,
    pub tasks: Arc<Vec<Task>>,
    pub store: ParamStore<T>,
    pub body: Body,
    pub layers: Vec<TaskLayer>,
}

impl<T: Real> Student<T> {
    pub fn new(cfg: StudentConfig, tasks: Vec<Task>, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            bail!(Student, "student needs at least one task");
        }
        let mut rng = seed::rng_for(seed, "student-init");
        let mut store = ParamStore::new();
        let body = match cfg {
            StudentConfig::Biatt(c) => Body::Biatt(Biatt::new(&mut store, c, &mut rng)?),
            StudentConfig::Transformer(c) => {
                if c.task_layer_dim < 1 {
                    bail!(Student, "task_layer_dim must be at least 1");
                }
                Body::Transformer(Encoder::new(&mut store, "student.encoder", c.encoder, &mut rng)?)
            }
        };
        let hidden = cfg.task_layer_dim();
        let mut layers = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let input = match &body {
                Body::Biatt(b) => b.output_width(t.kind.is_pair()),
                Body::Transformer(e) => e.cfg.width,
            };
            let p = format!("task.{}", t.name);
            layers.push(TaskLayer {
                hidden: Linear::new(&mut store, &format!("{p}.hidden"), input, hidden, true, &mut rng)?,
                output: Linear::new(&mut store, &format!("{p}.output"), hidden, t.output_dim(), true, &mut rng)?,
            });
        }
        Ok(Self {
            cfg,
            tasks: Arc::new(tasks),
            store,
            body,
            layers,
        })
    }

    pub fn cast<U: Real>(&self) -> Student<U> {
        Student {
            cfg: self.cfg,
            tasks: self.tasks.clone(),
            store: self.store.cast(),
            body: self.body.clone(),
            layers: self.layers.clone(),
        }
    }

    /// Sequence representation fed to the task layers.
    pub fn represent(&self, g: &mut Graph<T>, input: &BatchInput) -> Result<Var> {
        match &self.body {
            Body::Biatt(b) => Ok(b.encode(g, input)?.pooled),
            Body::Transformer(enc) => {
                let p = input.padded(PAD_ID, 0);
                let outs = enc.forward(g, &p)?;
                let mut acc = first_position(g, outs[0])?;
                for &o in &outs[1..] {
                    let c = first_position(g, o)?;
                    acc = g.add(acc, c)?;
                }
                if outs.len() == 1 {
                    Ok(acc)
                } else {
                    g.scale(acc, 1.0 / outs.len() as f64)
                }
            }
        }
    }

    /// Scalar parameter count; embedding tables are skipped unless asked for.
    pub fn count_parameters(&self, include_embeddings: bool) -> usize {
        self.store.count(include_embeddings)
    }

    /// Copies the teacher's embedding block and first `n` encoder layers into
    /// a transformer student. Every copied array must match in shape.
    pub fn load_teacher_layers(&mut self, teacher: &Teacher<T>, n: usize) -> Result<()> {
        let Body::Transformer(enc) = &self.body else {
            bail!(Student, "only the transformer student can load teacher layers");
        };
        if n > enc.layers.len() || n > teacher.encoder.layers.len() {
            bail!(
                Student,
                "cannot copy {n} layers between encoders of {} and {} layers",
                teacher.encoder.layers.len(),
                enc.layers.len()
            );
        }
        let src = teacher.encoder.prefix_ids(n);
        let dst = enc.prefix_ids(n);
        for (&s, &d) in src.iter().zip(&dst) {
            let value = teacher.store.value(s);
            if value.shape() != self.store.value(d).shape() {
                bail!(
                    Student,
                    "teacher array {} has shape {:?}, student array {} has {:?}",
                    teacher.store.get(s).name,
                    value.shape(),
                    self.store.get(d).name,
                    self.store.value(d).shape()
                );
            }
        }
        for (&s, &d) in src.iter().zip(&dst) {
            self.store.set_value(d, teacher.store.value(s).clone())?;
        }
        Ok(())
    }
}

impl<T: Real> TaskModel<T> for Student<T> {
    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph<T>, input: &BatchInput, _rng: Option<&mut Rng>) -> Result<Var> {
        let Some(layer) = self.layers.get(input.task) else {
            bail!(Student, "batch task {} has no student task layer", input.task);
        };
        let r = self.represent(g, input)?;
        layer.forward(g, r)
    }

    fn trainable(&self, task: usize) -> Vec<ParamId> {
        let mut v = self.shared();
        v.extend(self.layers[task].ids());
        v
    }

    fn shared(&self) -> Vec<ParamId> {
        match &self.body {
            Body::Biatt(b) => b.ids(),
            Body::Transformer(e) => e.ids(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::TeacherConfig;
    use crate::tokenize::{Encoding, CLS_ID, SEP_ID};

    fn single(x: &[u32]) -> Encoding {
        let mut token_ids = vec![CLS_ID];
        token_ids.extend_from_slice(x);
        token_ids.push(SEP_ID);
        Encoding {
            segment_ids: vec![0; token_ids.len()],
            token_ids,
        }
    }

    fn input(encodings: Vec<Encoding>) -> BatchInput {
        BatchInput {
            task: 0,
            example_ids: (0..encodings.len()).collect(),
            groups: vec![None; encodings.len()],
            encodings,
        }
    }

    fn encoder_cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            layers,
            width: 8,
            heads: 2,
            ffn_width: 16,
            max_seq_len: 16,
        }
    }

    fn transformer(layers: usize) -> Student<f64> {
        let cfg = StudentConfig::Transformer(TransformerStudentConfig {
            encoder: encoder_cfg(layers),
            task_layer_dim: 4,
        });
        Student::new(cfg, vec![Task::classification("c", false, &["a", "b"]).unwrap()], 1).unwrap()
    }

    fn cls_rows(s: &Student<f64>, inp: &BatchInput) -> (Vec<Vec<f64>>, Vec<f64>) {
        let Body::Transformer(enc) = &s.body else { unreachable!() };
        let mut g = Graph::inference(&s.store);
        let outs = enc.forward(&mut g, &inp.padded(PAD_ID, 0)).unwrap();
        let per_layer = outs
            .iter()
            .map(|&o| {
                let c = first_position(&mut g, o).unwrap();
                g.value(c).to_f64_vec()
            })
            .collect();
        let r = s.represent(&mut g, inp).unwrap();
        (per_layer, g.value(r).to_f64_vec())
    }

    #[test]
    fn single_layer_transformer_uses_its_cls_vector() {
        let s = transformer(1);
        let inp = input(vec![single(&[5, 6]), single(&[7])]);
        let (layers, r) = cls_rows(&s, &inp);
        assert_eq!(r, layers[0]);
    }

    #[test]
    fn transformer_averages_cls_over_layers() {
        let s = transformer(3);
        let inp = input(vec![single(&[5, 6, 9]), single(&[7])]);
        let (layers, r) = cls_rows(&s, &inp);
        for (k, v) in r.iter().enumerate() {
            let mean = layers.iter().map(|l| l[k]).sum::<f64>() / 3.0;
            assert!((v - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn parameter_count_separates_embeddings() {
        let cfg = BiattConfig {
            vocab_size: 20,
            embed_dim: 5,
            lstm_hidden: 3,
            task_layer_dim: 4,
        };
        let s = Student::<f32>::new(StudentConfig::Biatt(cfg), vec![Task::classification("c", false, &["a", "b", "c"]).unwrap()], 0).unwrap();
        assert_eq!(s.count_parameters(true) - s.count_parameters(false), 20 * 5);
        // Single-sentence task layer: 18 -> 4 -> 3, with biases.
        let task: usize = s.layers[0].ids().iter().map(|&id| s.store.value(id).len()).sum();
        assert_eq!(task, 18 * 4 + 4 + 4 * 3 + 3);
    }

    #[test]
    fn pair_tasks_see_both_pooled_sentences() {
        let cfg = BiattConfig {
            vocab_size: 20,
            embed_dim: 4,
            lstm_hidden: 2,
            task_layer_dim: 3,
        };
        let tasks = vec![
            Task::classification("single", false, &["a", "b"]).unwrap(),
            Task::classification("pair", true, &["a", "b"]).unwrap(),
        ];
        let s = Student::<f32>::new(StudentConfig::Biatt(cfg), tasks, 0).unwrap();
        assert_eq!(s.store.value(s.layers[0].hidden.w).shape(), &[12, 3]);
        assert_eq!(s.store.value(s.layers[1].hidden.w).shape(), &[24, 3]);
    }

    #[test]
    fn loads_teacher_layers() {
        let mut tc = TeacherConfig::new(20);
        tc.encoder = encoder_cfg(2);
        let teacher = Teacher::<f64>::new(tc, vec![Task::ranking("r").unwrap()], 9).unwrap();
        let mut s = transformer(3);
        s.load_teacher_layers(&teacher, 1).unwrap();
        let Body::Transformer(enc) = &s.body else { unreachable!() };
        for (&a, &b) in teacher.encoder.prefix_ids(1).iter().zip(&enc.prefix_ids(1)) {
            assert_eq!(teacher.store.value(a), s.store.value(b));
        }
        assert!(s.load_teacher_layers(&teacher, 3).is_err());

        let mut wide = tc;
        wide.encoder.width = 12;
        wide.encoder.heads = 3;
        let other = Teacher::<f64>::new(wide, vec![Task::ranking("r").unwrap()], 9).unwrap();
        assert!(s.load_teacher_layers(&other, 1).is_err());
    }
}
