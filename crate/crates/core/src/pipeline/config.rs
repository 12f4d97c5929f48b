//! Run configuration: a flat UTF-8 file of `key = value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Relative paths resolve against the config file's
//! directory. Every key must be known; repeating a key is an error.
//!
//! ```text
//! seed = 1
//! tasks = sent, sim
//! task.sent.kind = single_classification
//! task.sent.labels = negative, positive
//! task.sent.train = data/sent_train.tsv
//! task.sim.kind = pair_regression
//! task.sim.range = 0, 5
//! task.sim.train = data/sim_train.tsv
//! task.sim.dev = data/sim_dev.tsv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{Schema, Task, TaskKind};
use crate::distill::{FinetuneConfig, FINETUNE_LEARNING_RATES};
use crate::error::{bail, Error, Result};
use crate::eval::BenchConfig;
use crate::exec::Exec;
use crate::nn::EncoderConfig;
use crate::student::{BiattConfig, StudentConfig, TransformerStudentConfig};
use crate::teacher::{TeacherConfig, DEFAULT_DROPOUT};
use crate::tensor::OptimizerConfig;
use crate::tokenize::TokenizerMode;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task: Task,
    pub schema: Schema,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    /// Augmentation multiplier for this task.
    pub multiplier: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSettings {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentArch {
    Biatt,
    Transformer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentSettings {
    pub arch: StudentArch,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub task_layer_dim: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Teacher layers copied into a transformer student before distillation.
    pub init_from_teacher: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillSettings {
    pub epoch_max: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub cache: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub task: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lrs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory of the config file; relative paths resolve against it.
    pub base_dir: PathBuf,
    pub tasks: Vec<TaskSpec>,
    pub tokenizer_mode: TokenizerMode,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub p_mask: f64,
    pub teacher: TeacherSettings,
    pub student: StudentSettings,
    pub distill: DistillSettings,
    pub finetune: FinetuneSettings,
    pub bench: BenchConfig,
    pub bench_task: usize,
    pub exec: Exec,
    entries: BTreeMap<String, String>,
}

/// Parsed entries still waiting to be consumed; whatever is left at the end
/// is an unknown key.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected `key = value`, got {line:?}", i + 1);
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                bail!(Config, "line {}: empty key", i + 1);
            }
            if map.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                bail!(Config, "line {}: duplicate key {k}", i + 1);
            }
        }
        Ok(Self { map })
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}"))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        match self.get(key)? {
            Some(v) => Ok(v),
            None => bail!(Config, "missing required key {key}"),
        }
    }

    fn list(&mut self, key: &str) -> Option<Vec<String>> {
        self.take_raw(key).map(|(_, v)| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    fn numbers(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some((line, v)) = self.take_raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {line}: invalid number {s:?} in {key}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.map.iter().min_by_key(|(_, (l, _))| *l) {
            bail!(Config, "line {line}: unknown key {k}");
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &str) -> Result<PathBuf> {
    let path = base.join(p);
    if !path.is_file() {
        bail!(Config, "referenced file {} does not exist", path.display());
    }
    Ok(path)
}

/// Column layout from a list naming each column in order, e.g.
/// `sentence1, sentence2, label`; `_` skips a column.
fn parse_columns(names: &[String], header: bool, task: &str) -> Result<Schema> {
    let (mut s1, mut s2, mut label, mut group) = (None, None, None, None);
    for (i, n) in names.iter().enumerate() {
        let slot = match n.as_str() {
            "sentence1" => &mut s1,
            "sentence2" => &mut s2,
            "label" => &mut label,
            "group" => &mut group,
            "_" => continue,
            other => bail!(Config, "task {task}: unknown column name {other:?}"),
        };
        if slot.replace(i).is_some() {
            bail!(Config, "task {task}: column {n} listed twice");
        }
    }
    let (Some(sentence1), Some(label)) = (s1, label) else {
        bail!(Config, "task {task}: columns must include sentence1 and label");
    };
    Ok(Schema {
        sentence1,
        sentence2: s2,
        label,
        group,
        header,
    })
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        bail!(Config, "{key} must be at least 1");
    }
    Ok(v)
}

fn positive_real(key: &str, v: f64) -> Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        bail!(Config, "{key} must be a positive number, got {v}");
    }
    Ok(v)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, if base.as_os_str().is_empty() { Path::new(".") } else { base })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let entries: BTreeMap<String, String> = e.map.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect();

        let seed: u64 = e.required("seed")?;
        let default_mult = positive("augment.multiplier", e.or("augment.multiplier", 10)?)?;
        let Some(names) = e.list("tasks") else {
            bail!(Config, "missing required key tasks");
        };
        if names.is_empty() {
            bail!(Config, "tasks lists no task");
        }
        let mut tasks: Vec<TaskSpec> = Vec::with_capacity(names.len());
        for name in &names {
            if tasks.iter().any(|t| &t.task.name == name) {
                bail!(Config, "task {name} listed twice");
            }
            let p = format!("task.{name}");
            let kind: TaskKind = e.required(&format!("{p}.kind"))?;
            let labels = e.list(&format!("{p}.labels")).unwrap_or_default();
            let range = match e.numbers(&format!("{p}.range"))? {
                None => (0.0, 5.0),
                Some(v) if v.len() == 2 => (v[0], v[1]),
                Some(_) => bail!(Config, "{p}.range must be two numbers `lo, hi`"),
            };
            let task = Task::new(name, kind, labels, range)?;
            let header = e.or(&format!("{p}.header"), false)?;
            let schema = match e.list(&format!("{p}.columns")) {
                Some(cols) => parse_columns(&cols, header, name)?,
                None => Schema {
                    header,
                    ..Schema::for_kind(kind)
                },
            };
            schema.validate(kind)?;
            let train: String = e.required(&format!("{p}.train"))?;
            let dev: Option<String> = e.get(&format!("{p}.dev"))?;
            let multiplier = positive(&format!("{p}.multiplier"), e.or(&format!("{p}.multiplier"), default_mult)?)?;
            tasks.push(TaskSpec {
                task,
                schema,
                train: resolve(base_dir, &train)?,
                dev: dev.map(|d| resolve(base_dir, &d)).transpose()?,
                multiplier,
            });
        }

        let tokenizer_mode: TokenizerMode = e.or("tokenizer.mode", TokenizerMode::WordPiece)?;
        let vocab_size = e.or("tokenizer.vocab_size", 1000)?;
        let max_seq_len = e.or("tokenizer.max_seq_len", 128)?;
        let p_mask = e.or("augment.p_mask", 0.1)?;
        if !(0.0..=1.0).contains(&p_mask) {
            bail!(Config, "augment.p_mask must lie in [0, 1], got {p_mask}");
        }

        let t_default = TeacherConfig::new(1).encoder;
        let teacher = TeacherSettings {
            layers: positive("encoder.layers", e.or("encoder.layers", t_default.layers)?)?,
            width: positive("encoder.width", e.or("encoder.width", t_default.width)?)?,
            heads: positive("encoder.heads", e.or("encoder.heads", t_default.heads)?)?,
            ffn_width: positive("encoder.ffn_width", e.or("encoder.ffn_width", t_default.ffn_width)?)?,
            max_seq_len: positive("encoder.max_seq_len", e.or("encoder.max_seq_len", max_seq_len)?)?,
            dropout: e.or("teacher.dropout", DEFAULT_DROPOUT)?,
            epochs: e.or("teacher.epochs", 3)?,
            batch_size: positive("teacher.batch_size", e.or("teacher.batch_size", 32)?)?,
            lr: positive_real("teacher.lr", e.or("teacher.lr", 5e-5)?)?,
            clip: positive_real("teacher.clip", e.or("teacher.clip", 1.0)?)?,
        };
        if teacher.max_seq_len < max_seq_len {
            bail!(
                Config,
                "encoder.max_seq_len ({}) is below tokenizer.max_seq_len ({max_seq_len})",
                teacher.max_seq_len
            );
        }

        let arch = match e.or("student.arch", "biatt".to_string())?.as_str() {
            "biatt" => StudentArch::Biatt,
            "transformer" => StudentArch::Transformer,
            other => bail!(Config, "unknown student.arch {other:?} (expected biatt or transformer)"),
        };
        let student = StudentSettings {
            arch,
            embed_dim: positive("student.embed_dim", e.or("student.embed_dim", 300)?)?,
            lstm_hidden: positive("student.lstm_hidden", e.or("student.lstm_hidden", 300)?)?,
            task_layer_dim: positive("student.task_layer_dim", e.or("student.task_layer_dim", 300)?)?,
            layers: positive("student.layers", e.or("student.layers", 3)?)?,
            width: positive("student.width", e.or("student.width", teacher.width)?)?,
            heads: positive("student.heads", e.or("student.heads", teacher.heads)?)?,
            ffn_width: positive("student.ffn_width", e.or("student.ffn_width", teacher.ffn_width)?)?,
            init_from_teacher: e.or("student.init_from_teacher", 0)?,
        };
        if student.arch == StudentArch::Biatt && student.init_from_teacher > 0 {
            bail!(Config, "student.init_from_teacher applies only to the transformer student");
        }

        let distill = DistillSettings {
            epoch_max: e.or("distill.epoch_max", 16)?,
            batch_size: positive("distill.batch_size", e.or("distill.batch_size", 128)?)?,
            lr: positive_real("distill.lr", e.or("distill.lr", 5e-4)?)?,
            clip: positive_real("distill.clip", e.or("distill.clip", 1.0)?)?,
            cache: e.or("distill.cache", true)?,
        };

        let ft_default = FinetuneConfig::new(seed);
        let finetune = FinetuneSettings {
            task: e.get("finetune.task")?,
            epochs: e.or("finetune.epochs", ft_default.epochs)?,
            batch_size: positive("finetune.batch_size", e.or("finetune.batch_size", ft_default.batch_size)?)?,
            lrs: e.numbers("finetune.lrs")?.unwrap_or_else(|| FINETUNE_LEARNING_RATES.to_vec()),
        };
        if let Some(t) = &finetune.task {
            if !names.contains(t) {
                bail!(Config, "finetune.task {t} is not in tasks");
            }
        }

        let bd = BenchConfig::default();
        let bench = BenchConfig {
            batches: positive("bench.batches", e.or("bench.batches", bd.batches)?)?,
            batch_size: positive("bench.batch_size", e.or("bench.batch_size", bd.batch_size)?)?,
            seq_len: e.or("bench.seq_len", bd.seq_len)?,
            warmup: e.or("bench.warmup", bd.warmup)?,
        };
        let bench_task = match e.get::<String>("bench.task")? {
            None => 0,
            Some(t) => match names.iter().position(|n| *n == t) {
                Some(i) => i,
                None => bail!(Config, "bench.task {t} is not in tasks"),
            },
        };
        let exec = match e.or("exec", "parallel".to_string())?.as_str() {
            "parallel" => Exec::Parallel,
            "sequential" => Exec::Sequential,
            other => bail!(Config, "unknown exec {other:?} (expected parallel or sequential)"),
        };
        e.finish()?;

        Ok(Self {
            seed,
            base_dir: base_dir.to_path_buf(),
            tasks,
            tokenizer_mode,
            vocab_size,
            max_seq_len,
            p_mask,
            teacher,
            student,
            distill,
            finetune,
            bench,
            bench_task,
            exec,
            entries,
        })
    }

    /// Replaces the seed, as the `--seed` flag does.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.entries.insert("seed".into(), seed.to_string());
    }

    /// SHA-256 over the canonical `key = value` listing (sorted keys), hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(format!("{k} = {v}\n"));
        }
        hex(&h.finalize())
    }

    pub fn task_defs(&self) -> Vec<Task> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        match self.tasks.iter().position(|t| t.task.name == name) {
            Some(i) => Ok(i),
            None => bail!(Config, "unknown task {name}"),
        }
    }

    pub fn teacher_config(&self, vocab_size: usize) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            encoder: EncoderConfig {
                vocab_size,
                layers: t.layers,
                width: t.width,
                heads: t.heads,
                ffn_width: t.ffn_width,
                max_seq_len: t.max_seq_len,
            },
            dropout: t.dropout,
        }
    }

    pub fn student_config(&self, vocab_size: usize) -> StudentConfig {
        let s = &self.student;
        match s.arch {
            StudentArch::Biatt => StudentConfig::Biatt(BiattConfig {
                vocab_size,
                embed_dim: s.embed_dim,
                lstm_hidden: s.lstm_hidden,
                task_layer_dim: s.task_layer_dim,
            }),
            StudentArch::Transformer => StudentConfig::Transformer(TransformerStudentConfig {
                encoder: EncoderConfig {
                    vocab_size,
                    layers: s.layers,
                    width: s.width,
                    heads: s.heads,
                    ffn_width: s.ffn_width,
                    max_seq_len: self.teacher.max_seq_len,
                },
                task_layer_dim: s.task_layer_dim,
            }),
        }
    }

    pub fn teacher_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::adam(self.teacher.lr).with_clip(self.teacher.clip)
    }

    pub fn distill_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::adam(self.distill.lr).with_clip(self.distill.clip)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with(files: &[&str]) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        for f in files {
            fs::write(d.path().join(f), "x\t1\n").unwrap();
        }
        d
    }

    const MINIMAL: &str = "seed = 3\ntasks = s\ntask.s.kind = single_classification\ntask.s.labels = 0, 1\ntask.s.train = s.tsv\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let d = dir_with(&["s.tsv"]);
        let c = RunConfig::parse(MINIMAL, d.path()).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.tasks[0].train, d.path().join("s.tsv"));
        assert_eq!(c.tasks[0].multiplier, 10);
        assert_eq!(c.distill.epoch_max, 16);
        assert_eq!(c.distill.batch_size, 128);
        assert_eq!(c.distill.lr, 5e-4);
        assert_eq!(c.finetune.lrs, FINETUNE_LEARNING_RATES.to_vec());
        assert_eq!(c.teacher.layers, 2);
    }

    #[test]
    fn unknown_duplicate_and_missing_keys_rejected() {
        let d = dir_with(&["s.tsv"]);
        let err = RunConfig::parse(&format!("{MINIMAL}distill.epochs = 3\n"), d.path()).unwrap_err();
        assert!(err.to_string().contains("unknown key distill.epochs"), "{err}");
        assert!(RunConfig::parse(&format!("{MINIMAL}seed = 4\n"), d.path()).is_err());
        assert!(RunConfig::parse(&MINIMAL.replace("seed = 3\n", ""), d.path()).is_err());
        assert!(RunConfig::parse(&MINIMAL.replace("s.tsv", "absent.tsv"), d.path()).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}task.t.kind = pair_regression\n"), d.path()).is_err());
    }

    #[test]
    fn hash_tracks_content_not_layout() {
        let d = dir_with(&["s.tsv"]);
        let a = RunConfig::parse(MINIMAL, d.path()).unwrap();
        let reordered = format!("# comment\n\n{}", MINIMAL.lines().rev().collect::<Vec<_>>().join("\n"));
        let b = RunConfig::parse(&reordered, d.path()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.set_seed(4);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn columns_map_to_schema() {
        let s = parse_columns(&["_".into(), "label".into(), "sentence1".into()], true, "t").unwrap();
        assert_eq!((s.sentence1, s.label, s.sentence2, s.header), (2, 1, None, true));
        assert!(parse_columns(&["label".into()], false, "t").is_err());
    }
}
