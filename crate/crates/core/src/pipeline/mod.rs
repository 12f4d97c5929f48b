//! Reproducible runs driven by one config file: the work behind each CLI
//! subcommand.
//!
//! Every command reads its prerequisites from the output directory, writes
//! its artifacts there under fixed names and records a manifest entry with
//! the config hash, the seed and content hashes of inputs and outputs.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    DistillSettings, FinetuneSettings, RunConfig, StudentArch, StudentSettings, TaskSpec, TeacherSettings,
};

use crate::data::{build_augmented_dataset, format_tsv, load_tsv, tokenize_examples, AugmentConfig, RawExample, TokenizedExample};
use crate::distill::{
    finetune, run_distillation, strip_labels, DistillConfig, FinetuneCandidate, FinetuneConfig, LogitsStore, Unlabeled,
};
use crate::error::{bail, Error, Result};
use crate::eval::{bench_inference, compute_metrics, label_agreement, write_json_lines, MetricReport};
use crate::io::Checkpoint;
use crate::model::{dataset_loss, TaskModel, TrainConfig};
use crate::seed;
use crate::student::Student;
use crate::teacher::Teacher;
use crate::tokenize::{Encoding, Tokenizer, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TEACHER_FILE: &str = "teacher.mkd1";
pub const TEACHER_LOG_FILE: &str = "teacher_loss.jsonl";
pub const STUDENT_FILE: &str = "student.mkd1";
pub const LOGITS_FILE: &str = "logits.mkd1";
pub const DISTILL_LOG_FILE: &str = "distill_report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BENCH_FILE: &str = "bench.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn augmented_file(task: &str) -> String {
    format!("aug_{task}.tsv")
}

pub fn finetuned_file(task: &str) -> String {
    format!("finetuned_{task}.mkd1")
}

fn finetune_log_file(task: &str) -> String {
    format!("finetune_{task}.json")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    BuildVocab,
    Augment,
    TrainTeacher,
    Distill,
    Finetune,
    Eval,
    Bench,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::BuildVocab,
        Command::Augment,
        Command::TrainTeacher,
        Command::Distill,
        Command::Finetune,
        Command::Eval,
        Command::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::BuildVocab => "build-vocab",
            Command::Augment => "augment",
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Bench => "bench",
        }
    }
}

/// Content hash in git's object style: SHA-256 of `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    config::hex(&h.finalize())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Latest entry per command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: invalid manifest: {e}", path.display())))
    }
}

/// One model's metrics on one task and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Serialize)]
struct LossEntry<'a> {
    epoch: usize,
    task: &'a str,
    loss: f64,
}

#[derive(Serialize)]
struct FinetuneLog<'a> {
    task: &'a str,
    learning_rate: f64,
    epochs: usize,
    dev_loss: f64,
    initial_dev_loss: f64,
    candidates: &'a [FinetuneCandidate],
}

/// Files read and written by one command, tracked for the manifest.
#[derive(Default)]
struct Record {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub dry_run: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>, dry_run: bool) -> Self {
        Self {
            cfg,
            out: out.into(),
            dry_run,
        }
    }

    /// Runs one command and returns human-readable summary lines.
    pub fn run(&self, cmd: Command) -> Result<Vec<String>> {
        let mut rec = Record::default();
        let lines = match cmd {
            Command::BuildVocab => self.build_vocab(&mut rec)?,
            Command::Augment => self.augment(&mut rec)?,
            Command::TrainTeacher => self.train_teacher(&mut rec)?,
            Command::Distill => self.distill(&mut rec)?,
            Command::Finetune => self.finetune(&mut rec)?,
            Command::Eval => self.eval(&mut rec)?,
            Command::Bench => self.bench(&mut rec)?,
        };
        if self.dry_run {
            return Ok(lines);
        }
        let path = self.out.join(MANIFEST_FILE);
        let mut manifest = Manifest::load(&path)?;
        manifest.commands.insert(
            cmd.name().to_string(),
            ManifestEntry {
                config_hash: self.cfg.hash(),
                seed: self.cfg.seed,
                inputs: rec.inputs,
                outputs: rec.outputs,
            },
        );
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
        write_file(&path, format!("{text}\n").as_bytes())?;
        Ok(lines)
    }

    /// Runs every command in order.
    pub fn run_all(&self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        for cmd in Command::ALL {
            if cmd == Command::Finetune && self.cfg.finetune.task.is_none() {
                continue;
            }
            lines.extend(self.run(cmd)?.into_iter().map(|l| format!("[{}] {l}", cmd.name())));
        }
        Ok(lines)
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of an artifact produced by an earlier command; errors naming
    /// that command when the artifact is missing.
    fn prerequisite(&self, name: &str, producer: Command) -> Result<PathBuf> {
        let p = self.out_path(name);
        if !p.is_file() {
            bail!(
                Config,
                "{} not found; run `mtkd {} --config <file> --out {}` first",
                p.display(),
                producer.name(),
                self.out.display()
            );
        }
        Ok(p)
    }

    fn display_name(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .or_else(|_| path.strip_prefix(&self.cfg.base_dir))
            .unwrap_or(path)
            .display()
            .to_string()
    }

    fn read_input(&self, rec: &mut Record, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        rec.inputs.insert(self.display_name(path), content_hash(&bytes));
        Ok(bytes)
    }

    fn write_output(&self, rec: &mut Record, name: &str, bytes: &[u8]) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::file(&self.out, e))?;
        write_file(&self.out_path(name), bytes)?;
        rec.outputs.insert(name.to_string(), content_hash(bytes));
        Ok(())
    }

    fn load_split(&self, rec: &mut Record, spec: &TaskSpec, path: &Path) -> Result<Vec<RawExample>> {
        self.read_input(rec, path)?;
        Ok(load_tsv(path, &spec.task, &spec.schema)?.examples)
    }

    fn tokenizer(&self, rec: &mut Record) -> Result<Tokenizer> {
        let path = self.prerequisite(VOCAB_FILE, Command::BuildVocab)?;
        let bytes = self.read_input(rec, &path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Tokenize(format!("{}: not UTF-8", path.display())))?;
        let vocab = Vocabulary::parse(&text)?;
        Tokenizer::new(Arc::new(vocab), self.cfg.tokenizer_mode, self.cfg.max_seq_len)
    }

    fn tokenize(&self, examples: &[RawExample], task: usize, tok: &Tokenizer) -> Result<Vec<TokenizedExample>> {
        tokenize_examples(examples, task, tok, self.cfg.exec)
    }

    fn load_teacher(&self, rec: &mut Record, vocab_size: usize) -> Result<Teacher<f32>> {
        let path = self.prerequisite(TEACHER_FILE, Command::TrainTeacher)?;
        let bytes = self.read_input(rec, &path)?;
        let mut teacher = Teacher::new(self.cfg.teacher_config(vocab_size), self.cfg.task_defs(), self.cfg.seed)?;
        Checkpoint::from_bytes(&bytes)
            .and_then(|c| c.load_into(&mut teacher.store))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(teacher)
    }

    fn load_student(&self, rec: &mut Record, path: &Path, vocab_size: usize) -> Result<Student<f32>> {
        let bytes = self.read_input(rec, path)?;
        let mut student = Student::new(self.cfg.student_config(vocab_size), self.cfg.task_defs(), self.cfg.seed)?;
        Checkpoint::from_bytes(&bytes)
            .and_then(|c| c.load_into(&mut student.store))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(student)
    }

    /// Tokenizer over the vocabulary in the output directory.
    pub fn load_tokenizer(&self) -> Result<Tokenizer> {
        self.tokenizer(&mut Record::default())
    }

    /// The trained teacher from the output directory.
    pub fn load_trained_teacher(&self, vocab_size: usize) -> Result<Teacher<f32>> {
        self.load_teacher(&mut Record::default(), vocab_size)
    }

    /// A student checkpoint from the output directory, e.g. [`STUDENT_FILE`].
    pub fn load_student_file(&self, name: &str, vocab_size: usize) -> Result<Student<f32>> {
        let path = self.prerequisite(name, Command::Distill)?;
        self.load_student(&mut Record::default(), &path, vocab_size)
    }

    /// Augmented inputs of every task, labels removed.
    pub fn distill_data(&self, tok: &Tokenizer) -> Result<Vec<Vec<Unlabeled>>> {
        let mut rec = Record::default();
        let mut data = Vec::with_capacity(self.cfg.tasks.len());
        for (t, spec) in self.cfg.tasks.iter().enumerate() {
            let path = self.prerequisite(&augmented_file(&spec.task.name), Command::Augment)?;
            let raw = self.load_split(&mut rec, spec, &path)?;
            data.push(strip_labels(&self.tokenize(&raw, t, tok)?));
        }
        Ok(data)
    }

    /// Tokenized dev split of task `t`.
    pub fn dev_data(&self, t: usize, tok: &Tokenizer) -> Result<Vec<TokenizedExample>> {
        let spec = &self.cfg.tasks[t];
        let Some(path) = &spec.dev else {
            bail!(Config, "task {} has no dev split", spec.task.name);
        };
        let raw = self.load_split(&mut Record::default(), spec, path)?;
        self.tokenize(&raw, t, tok)
    }

    /// Tokenized training split of task `t`.
    pub fn train_data(&self, t: usize, tok: &Tokenizer) -> Result<Vec<TokenizedExample>> {
        let spec = &self.cfg.tasks[t];
        let raw = self.load_split(&mut Record::default(), spec, &spec.train)?;
        self.tokenize(&raw, t, tok)
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            epoch_max: self.cfg.distill.epoch_max,
            batch_size: self.cfg.distill.batch_size,
            optimizer: self.cfg.distill_optimizer(),
            seed: self.cfg.seed,
            cache_teacher_logits: self.cfg.distill.cache,
            exec: self.cfg.exec,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            learning_rates: self.cfg.finetune.lrs.clone(),
            epochs: self.cfg.finetune.epochs,
            batch_size: self.cfg.finetune.batch_size,
            clip_norm: self.cfg.distill.clip,
            seed: self.cfg.seed,
            exec: self.cfg.exec,
        }
    }

    fn build_vocab(&self, rec: &mut Record) -> Result<Vec<String>> {
        let mut corpus = Vec::new();
        for spec in &self.cfg.tasks {
            for ex in self.load_split(rec, spec, &spec.train)? {
                corpus.push(ex.sentence1);
                corpus.extend(ex.sentence2);
            }
        }
        let vocab = Vocabulary::build(&corpus, self.cfg.vocab_size, self.cfg.tokenizer_mode)?;
        if self.dry_run {
            return Ok(vec![format!("would write {VOCAB_FILE} with {} tokens", vocab.len())]);
        }
        self.write_output(rec, VOCAB_FILE, vocab.to_text().as_bytes())?;
        Ok(vec![format!("vocabulary of {} tokens from {} sentences", vocab.len(), corpus.len())])
    }

    fn augment(&self, rec: &mut Record) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        for spec in &self.cfg.tasks {
            let name = &spec.task.name;
            let examples = self.load_split(rec, spec, &spec.train)?;
            let ac = AugmentConfig::new(
                self.cfg.p_mask,
                spec.multiplier,
                seed::derive(self.cfg.seed, &format!("augment/{name}")),
            )?;
            let file = augmented_file(name);
            let total = examples.len() * spec.multiplier;
            if self.dry_run {
                lines.push(format!("would write {file}: {} x {} = {total}", examples.len(), spec.multiplier));
                continue;
            }
            let aug = build_augmented_dataset(&examples, &ac, self.cfg.exec);
            let text = format_tsv(&aug, &spec.task, &spec.schema, Some(&ac));
            self.write_output(rec, &file, text.as_bytes())?;
            lines.push(format!("{name}: original {}, multiplier {}, total {}", examples.len(), spec.multiplier, aug.len()));
        }
        Ok(lines)
    }

    fn train_teacher(&self, rec: &mut Record) -> Result<Vec<String>> {
        let tok = self.tokenizer(rec)?;
        let mut teacher = Teacher::<f32>::new(self.cfg.teacher_config(tok.vocab().len()), self.cfg.task_defs(), self.cfg.seed)?;
        let train_cfg = TrainConfig {
            epochs: self.cfg.teacher.epochs,
            batch_size: self.cfg.teacher.batch_size,
            optimizer: self.cfg.teacher_optimizer(),
            seed: self.cfg.seed,
        };
        let mut data = Vec::with_capacity(self.cfg.tasks.len());
        for (t, spec) in self.cfg.tasks.iter().enumerate() {
            let raw = self.load_split(rec, spec, &spec.train)?;
            data.push(self.tokenize(&raw, t, &tok)?);
        }
        if self.dry_run {
            return Ok(vec![format!(
                "would train a teacher of {} parameters for {} epochs and write {TEACHER_FILE}",
                teacher.store.count(false),
                train_cfg.epochs
            )]);
        }
        let curves = teacher.refine(&data, &train_cfg)?;
        let mut log = Vec::new();
        for (e, means) in curves.iter().enumerate() {
            for (spec, &loss) in self.cfg.tasks.iter().zip(means) {
                log.push(LossEntry {
                    epoch: e + 1,
                    task: &spec.task.name,
                    loss,
                });
            }
        }
        let mut text = Vec::new();
        write_json_lines(&mut text, &log)?;
        self.write_output(rec, TEACHER_FILE, &Checkpoint::from_store(&teacher.store)?.to_bytes())?;
        self.write_output(rec, TEACHER_LOG_FILE, &text)?;
        let last = curves.last().map(|m| format!("{m:.4?}")).unwrap_or_else(|| "none".into());
        Ok(vec![format!("teacher trained for {} epochs, last per-task loss {last}", curves.len())])
    }

    fn distill(&self, rec: &mut Record) -> Result<Vec<String>> {
        let tok = self.tokenizer(rec)?;
        let teacher = self.load_teacher(rec, tok.vocab().len())?;
        let mut data = Vec::with_capacity(self.cfg.tasks.len());
        for (t, spec) in self.cfg.tasks.iter().enumerate() {
            let path = self.prerequisite(&augmented_file(&spec.task.name), Command::Augment)?;
            let raw = self.load_split(rec, spec, &path)?;
            data.push(strip_labels(&self.tokenize(&raw, t, &tok)?));
        }
        let mut student = Student::<f32>::new(self.cfg.student_config(tok.vocab().len()), self.cfg.task_defs(), self.cfg.seed)?;
        if self.cfg.student.init_from_teacher > 0 {
            student.load_teacher_layers(&teacher, self.cfg.student.init_from_teacher)?;
        }
        let dc = self.distill_config();
        dc.validate()?;
        if self.dry_run {
            return Ok(vec![format!(
                "would distill into a {} student of {} parameters for {} epochs and write {STUDENT_FILE}",
                student.cfg.name(),
                student.count_parameters(false),
                dc.epoch_max
            )]);
        }
        let cache = if dc.cache_teacher_logits {
            let store = LogitsStore::compute(&teacher, &data, dc.batch_size, dc.exec)?;
            self.write_output(rec, LOGITS_FILE, &store.to_checkpoint()?.to_bytes())?;
            Some(store)
        } else {
            None
        };
        let report = run_distillation(&teacher, &mut student, &data, &dc, cache.as_ref())?;
        self.write_output(rec, STUDENT_FILE, &Checkpoint::from_store(&student.store)?.to_bytes())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Distill(format!("cannot serialize report: {e}")))?;
        self.write_output(rec, DISTILL_LOG_FILE, format!("{json}\n").as_bytes())?;
        let last = report.totals.last().copied().unwrap_or(f64::NAN);
        Ok(vec![format!(
            "distilled {} student over {} steps, final epoch loss {last:.6}",
            student.cfg.name(),
            report.steps
        )])
    }

    fn finetune(&self, rec: &mut Record) -> Result<Vec<String>> {
        let Some(name) = self.cfg.finetune.task.clone() else {
            bail!(Config, "finetune needs finetune.task in the config");
        };
        let t = self.cfg.task_index(&name)?;
        let spec = &self.cfg.tasks[t];
        let Some(dev_path) = spec.dev.clone() else {
            bail!(Config, "task {name} has no dev split; fine-tuning selects on dev loss");
        };
        let tok = self.tokenizer(rec)?;
        let student_path = self.prerequisite(STUDENT_FILE, Command::Distill)?;
        let student = self.load_student(rec, &student_path, tok.vocab().len())?;
        let train = self.tokenize(&self.load_split(rec, spec, &spec.train)?, t, &tok)?;
        let dev = self.tokenize(&self.load_split(rec, spec, &dev_path)?, t, &tok)?;
        let fc = self.finetune_config();
        fc.validate()?;
        let file = finetuned_file(&name);
        if self.dry_run {
            return Ok(vec![format!("would fine-tune task {name} and write {file}")]);
        }
        let outcome = finetune(&student, t, &train, Some(&dev), &fc)?;
        self.write_output(rec, &file, &Checkpoint::from_store(&outcome.student.store)?.to_bytes())?;
        let log = FinetuneLog {
            task: &name,
            learning_rate: outcome.learning_rate,
            epochs: outcome.epochs,
            dev_loss: outcome.dev_loss,
            initial_dev_loss: outcome.initial_dev_loss,
            candidates: &outcome.candidates,
        };
        let json = serde_json::to_string_pretty(&log).map_err(|e| Error::Distill(format!("cannot serialize report: {e}")))?;
        self.write_output(rec, &finetune_log_file(&name), format!("{json}\n").as_bytes())?;
        Ok(vec![format!(
            "task {name}: learning rate {:e}, {} epochs, dev loss {:.6} -> {:.6}",
            outcome.learning_rate, outcome.epochs, outcome.initial_dev_loss, outcome.dev_loss
        )])
    }

    fn eval(&self, rec: &mut Record) -> Result<Vec<String>> {
        let tok = self.tokenizer(rec)?;
        let v = tok.vocab().len();
        let teacher = self.load_teacher(rec, v)?;
        let mut dev = Vec::new();
        for (t, spec) in self.cfg.tasks.iter().enumerate() {
            if let Some(p) = &spec.dev {
                dev.push((t, self.tokenize(&self.load_split(rec, spec, p)?, t, &tok)?));
            }
        }
        if dev.is_empty() {
            bail!(Config, "no task has a dev split to evaluate on");
        }
        let mut students = Vec::new();
        let student_path = self.out_path(STUDENT_FILE);
        if student_path.is_file() {
            students.push(("student".to_string(), self.load_student(rec, &student_path, v)?));
        }
        for spec in &self.cfg.tasks {
            let p = self.out_path(&finetuned_file(&spec.task.name));
            if p.is_file() {
                students.push((format!("finetuned_{}", spec.task.name), self.load_student(rec, &p, v)?));
            }
        }
        if self.dry_run {
            return Ok(vec![format!(
                "would evaluate {} models on {} dev splits and write {METRICS_FILE}",
                1 + students.len(),
                dev.len()
            )]);
        }
        let bs = self.cfg.distill.batch_size;
        let mut records = Vec::new();
        let mut teacher_logits = BTreeMap::new();
        for (t, examples) in &dev {
            let z = predict_all(&teacher, *t, examples, bs, self)?;
            records.push(self.eval_record("teacher", &teacher, *t, examples, &z, None)?);
            teacher_logits.insert(*t, z);
        }
        for (name, s) in &students {
            for (t, examples) in &dev {
                let z = predict_all(s, *t, examples, bs, self)?;
                records.push(self.eval_record(name, s, *t, examples, &z, Some(&teacher_logits[t]))?);
            }
        }
        let mut text = Vec::new();
        write_json_lines(&mut text, &records)?;
        self.write_output(rec, METRICS_FILE, &text)?;
        Ok(records
            .iter()
            .map(|r| format!("{} {} {}: {:.4?}", r.model, r.report.task, r.report.split, r.report.metrics))
            .collect())
    }

    fn eval_record<M: TaskModel<f32>>(
        &self,
        model_name: &str,
        model: &M,
        t: usize,
        examples: &[TokenizedExample],
        z: &[Vec<f64>],
        teacher_z: Option<&[Vec<f64>]>,
    ) -> Result<EvalRecord> {
        let task = &self.cfg.tasks[t].task;
        let labels: Vec<_> = examples.iter().map(|e| e.label).collect();
        let groups: Vec<_> = examples.iter().map(|e| e.group).collect();
        let mut report = compute_metrics(task, "dev", z, &labels, &groups)?;
        report
            .metrics
            .insert("loss".into(), dataset_loss(model, t, examples, self.cfg.distill.batch_size)?);
        if let (Some(tz), true) = (teacher_z, task.kind.is_classification()) {
            report.metrics.insert("teacher_agreement".into(), label_agreement(tz, z)?);
        }
        Ok(EvalRecord {
            model: model_name.to_string(),
            report,
        })
    }

    fn bench(&self, rec: &mut Record) -> Result<Vec<String>> {
        let tok = self.tokenizer(rec)?;
        let v = tok.vocab().len();
        let student_path = self.prerequisite(STUDENT_FILE, Command::Distill)?;
        let student = self.load_student(rec, &student_path, v)?;
        let teacher = self.load_teacher(rec, v)?;
        let t = self.cfg.bench_task;
        let spec = &self.cfg.tasks[t];
        let encodings: Vec<Encoding> = self
            .tokenize(&self.load_split(rec, spec, &spec.train)?, t, &tok)?
            .into_iter()
            .map(|e| e.encoding)
            .collect();
        if self.cfg.bench.seq_len > self.cfg.teacher.max_seq_len {
            bail!(
                Config,
                "bench.seq_len {} exceeds encoder.max_seq_len {}",
                self.cfg.bench.seq_len,
                self.cfg.teacher.max_seq_len
            );
        }
        if self.dry_run {
            return Ok(vec![format!(
                "would time {} batches of {} x {} tokens on the student and the teacher and write {BENCH_FILE}",
                self.cfg.bench.batches, self.cfg.bench.batch_size, self.cfg.bench.seq_len
            )]);
        }
        let reports = vec![
            bench_inference(&student, student.cfg.name(), t, &encodings, &self.cfg.bench)?,
            bench_inference(&teacher, "teacher", t, &encodings, &self.cfg.bench)?,
        ];
        let mut text = Vec::new();
        write_json_lines(&mut text, &reports)?;
        self.write_output(rec, BENCH_FILE, &text)?;
        Ok(reports
            .iter()
            .map(|r| format!("{}: mean {:.3} ms per batch (std {:.3})", r.model, r.mean_ms, r.std_ms))
            .collect())
    }
}

fn predict_all<M: TaskModel<f32>>(
    model: &M,
    t: usize,
    examples: &[TokenizedExample],
    batch_size: usize,
    p: &Pipeline,
) -> Result<Vec<Vec<f64>>> {
    let enc: Vec<Encoding> = examples.iter().map(|e| e.encoding.clone()).collect();
    model.predict(t, &enc, batch_size, p.cfg.exec)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}
