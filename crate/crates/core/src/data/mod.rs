//! Task definitions, TSV ingestion, masking augmentation and the
//! task-homogeneous batch schedule.

mod augment;
mod batch;
pub mod synthetic;
mod tsv;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::exec::Exec;
use crate::tokenize::{Encoding, Tokenizer};

pub use augment::{
    build_augmented_dataset, mask_augment, mask_words, read_provenance, AugmentConfig,
    PROVENANCE_PREFIX,
};
pub use batch::{pack_epoch, Batch, BatchInput, BatchPlan, Padded, TaskUnits};
pub use tsv::{format_tsv, load_tsv, parse_tsv, LoadReport, Malformed, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleClassification,
    PairClassification,
    PairRegression,
    RelevanceRanking,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SingleClassification => "single_classification",
            TaskKind::PairClassification => "pair_classification",
            TaskKind::PairRegression => "pair_regression",
            TaskKind::RelevanceRanking => "relevance_ranking",
        }
    }

    pub fn is_pair(self) -> bool {
        self != TaskKind::SingleClassification
    }

    pub fn is_classification(self) -> bool {
        matches!(
            self,
            TaskKind::SingleClassification | TaskKind::PairClassification
        )
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single_classification" => TaskKind::SingleClassification,
            "pair_classification" => TaskKind::PairClassification,
            "pair_regression" => TaskKind::PairRegression,
            "relevance_ranking" => TaskKind::RelevanceRanking,
            other => bail!(Data, "unknown task kind {other:?}"),
        })
    }
}

/// A task's definition: what it predicts and how labels are spelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    /// Class label strings in class-index order (classification only).
    pub labels: Vec<String>,
    /// Range regression targets are normalized from, mapping to [0, 1].
    pub label_range: (f64, f64),
}

impl Task {
    pub fn classification(name: &str, pair: bool, labels: &[&str]) -> Result<Self> {
        let kind = if pair {
            TaskKind::PairClassification
        } else {
            TaskKind::SingleClassification
        };
        Self::new(name, kind, labels.iter().map(|s| s.to_string()).collect(), (0.0, 5.0))
    }

    pub fn regression(name: &str, label_range: (f64, f64)) -> Result<Self> {
        Self::new(name, TaskKind::PairRegression, Vec::new(), label_range)
    }

    pub fn ranking(name: &str) -> Result<Self> {
        Self::new(name, TaskKind::RelevanceRanking, Vec::new(), (0.0, 5.0))
    }

    pub fn new(name: &str, kind: TaskKind, labels: Vec<String>, label_range: (f64, f64)) -> Result<Self> {
        if name.is_empty() || name.contains(|c: char| c == '/' || c.is_whitespace()) {
            bail!(Data, "invalid task name {name:?}");
        }
        if kind.is_classification() {
            if labels.len() < 2 {
                bail!(Data, "task {name}: classification needs at least 2 labels, got {}", labels.len());
            }
            let mut sorted = labels.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != labels.len() {
                bail!(Data, "task {name}: duplicate class labels");
            }
        } else if !labels.is_empty() {
            bail!(Data, "task {name}: only classification tasks take a label list");
        }
        let (lo, hi) = label_range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            bail!(Data, "task {name}: invalid label range {lo}..{hi}");
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            labels,
            label_range,
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.kind.is_classification().then_some(self.labels.len())
    }

    /// Width of the task's logit vector.
    pub fn output_dim(&self) -> usize {
        self.num_classes().unwrap_or(1)
    }

    pub fn normalize_score(&self, score: f64) -> f64 {
        let (lo, hi) = self.label_range;
        (score - lo) / (hi - lo)
    }

    pub fn denormalize_score(&self, unit: f64) -> f64 {
        let (lo, hi) = self.label_range;
        lo + unit * (hi - lo)
    }

    pub fn parse_label(&self, text: &str) -> Result<Label> {
        let text = text.trim();
        match self.kind {
            TaskKind::SingleClassification | TaskKind::PairClassification => self
                .labels
                .iter()
                .position(|l| l == text)
                .map(Label::Class)
                .ok_or_else(|| Error::Data(format!("unknown class label {text:?}"))),
            TaskKind::PairRegression => match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Label::Score(v)),
                _ => bail!(Data, "invalid regression label {text:?}"),
            },
            TaskKind::RelevanceRanking => match text {
                "1" => Ok(Label::Relevant(true)),
                "0" => Ok(Label::Relevant(false)),
                _ => bail!(Data, "ranking label must be 0 or 1, got {text:?}"),
            },
        }
    }

    pub fn format_label(&self, label: &Label) -> String {
        match label {
            Label::Class(c) => self.labels.get(*c).cloned().unwrap_or_else(|| c.to_string()),
            Label::Score(v) => v.to_string(),
            Label::Relevant(r) => if *r { "1" } else { "0" }.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Score(f64),
    /// Whether a ranking candidate is the group's positive.
    Relevant(bool),
}

/// One labeled text example before tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawExample {
    pub sentence1: String,
    pub sentence2: Option<String>,
    pub label: Label,
    /// Candidate group for ranking tasks.
    pub group: Option<u64>,
}

/// A tokenized example. `id` is its index within its dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedExample {
    pub id: usize,
    pub task: usize,
    pub encoding: Encoding,
    pub label: Label,
    pub group: Option<u64>,
}

pub fn tokenize_examples(
    examples: &[RawExample],
    task: usize,
    tokenizer: &Tokenizer,
    exec: Exec,
) -> Result<Vec<TokenizedExample>> {
    let indexed: Vec<(usize, &RawExample)> = examples.iter().enumerate().collect();
    exec.try_map(&indexed, |&(id, ex)| {
        let encoding = tokenizer
            .encode(&ex.sentence1, ex.sentence2.as_deref())
            .map_err(|e| Error::Data(format!("example {id}: {e}")))?;
        Ok(TokenizedExample {
            id,
            task,
            encoding,
            label: ex.label,
            group: ex.group,
        })
    })
}

/// Checks the ranking invariant: every group has exactly one positive.
pub fn check_groups(examples: &[RawExample]) -> Result<()> {
    let mut positives: std::collections::BTreeMap<u64, usize> = Default::default();
    for (i, ex) in examples.iter().enumerate() {
        let Some(g) = ex.group else {
            bail!(Data, "ranking example {i} has no group");
        };
        let p = positives.entry(g).or_default();
        if ex.label == Label::Relevant(true) {
            *p += 1;
        }
    }
    for (g, n) in positives {
        if n != 1 {
            bail!(Data, "ranking group {g} has {n} positive candidates, expected exactly 1");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_validation() {
        assert!(Task::classification("t", false, &["a"]).is_err());
        assert!(Task::classification("t", false, &["a", "a"]).is_err());
        assert!(Task::classification("a/b", false, &["x", "y"]).is_err());
        assert!(Task::regression("s", (5.0, 0.0)).is_err());
        let t = Task::classification("t", true, &["no", "yes"]).unwrap();
        assert_eq!(t.num_classes(), Some(2));
        assert_eq!(Task::ranking("r").unwrap().num_classes(), None);
    }

    #[test]
    fn label_parsing() {
        let t = Task::regression("sts", (0.0, 5.0)).unwrap();
        assert_eq!(t.parse_label("3.8").unwrap(), Label::Score(3.8));
        assert!(t.parse_label("nan").is_err());
        assert!((t.normalize_score(3.8) - 0.76).abs() < 1e-15);
        let c = Task::classification("c", false, &["0", "1"]).unwrap();
        assert_eq!(c.parse_label("1").unwrap(), Label::Class(1));
        assert!(c.parse_label("2").is_err());
    }

    #[test]
    fn kind_round_trip() {
        for k in [
            TaskKind::SingleClassification,
            TaskKind::PairClassification,
            TaskKind::PairRegression,
            TaskKind::RelevanceRanking,
        ] {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
        }
    }
}
