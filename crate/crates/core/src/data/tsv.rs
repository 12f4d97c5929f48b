use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::PROVENANCE_PREFIX;
use super::{AugmentConfig, Label, RawExample, Task, TaskKind};
use crate::error::{bail, Error, Result};

/// Share of malformed rows above which a file is rejected outright.
const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// Zero-based column positions of each field in a TSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub sentence1: usize,
    pub sentence2: Option<usize>,
    pub label: usize,
    pub group: Option<usize>,
    pub header: bool,
}

impl Schema {
    /// Default layout for a task kind: sentences first, then label, then group.
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::SingleClassification => Self {
                sentence1: 0,
                sentence2: None,
                label: 1,
                group: None,
                header: false,
            },
            TaskKind::PairClassification | TaskKind::PairRegression => Self {
                sentence1: 0,
                sentence2: Some(1),
                label: 2,
                group: None,
                header: false,
            },
            TaskKind::RelevanceRanking => Self {
                sentence1: 0,
                sentence2: Some(1),
                label: 2,
                group: Some(3),
                header: false,
            },
        }
    }

    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        if kind.is_pair() != self.sentence2.is_some() {
            bail!(
                Data,
                "schema for a {} task must {}name a sentence2 column",
                kind.as_str(),
                if kind.is_pair() { "" } else { "not " }
            );
        }
        if (kind == TaskKind::RelevanceRanking) != self.group.is_some() {
            bail!(Data, "a group column is required for ranking tasks and only for them");
        }
        let mut cols = vec![self.sentence1, self.label];
        cols.extend(self.sentence2);
        cols.extend(self.group);
        let n = cols.len();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != n {
            bail!(Data, "schema maps two fields to the same column");
        }
        Ok(())
    }

    fn width(&self) -> usize {
        [Some(self.sentence1), self.sentence2, Some(self.label), self.group]
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
            + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Malformed {
    /// One-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub examples: Vec<RawExample>,
    pub malformed: Vec<Malformed>,
    pub rows: usize,
}

pub fn load_tsv(path: &Path, task: &Task, schema: &Schema) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_tsv(&text, task, schema, &path.display().to_string())
}

fn parse_row(fields: &[&str], task: &Task, schema: &Schema) -> Result<RawExample, String> {
    let get = |i: usize, what: &str| -> Result<&str, String> {
        fields
            .get(i)
            .copied()
            .ok_or_else(|| format!("missing {what} column {i}"))
    };
    let s1 = get(schema.sentence1, "sentence1")?.trim();
    if s1.is_empty() {
        return Err("empty sentence1".into());
    }
    let s2 = match schema.sentence2 {
        Some(i) => {
            let s = get(i, "sentence2")?.trim();
            if s.is_empty() {
                return Err("empty sentence2".into());
            }
            Some(s.to_string())
        }
        None => None,
    };
    let label = task
        .parse_label(get(schema.label, "label")?)
        .map_err(|e| e.to_string())?;
    let group = match schema.group {
        Some(i) => {
            let g = get(i, "group")?.trim();
            Some(g.parse::<u64>().map_err(|_| format!("invalid group id {g:?}"))?)
        }
        None => None,
    };
    Ok(RawExample {
        sentence1: s1.to_string(),
        sentence2: s2,
        label,
        group,
    })
}

/// Parses TSV text. Malformed rows are skipped and listed in the report;
/// `source` names the input in messages.
pub fn parse_tsv(text: &str, task: &Task, schema: &Schema, source: &str) -> Result<LoadReport> {
    schema.validate(task.kind)?;
    let mut parsed: Vec<(usize, RawExample)> = Vec::new();
    let mut malformed = Vec::new();
    let mut rows = 0usize;
    let mut header_pending = schema.header;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with(PROVENANCE_PREFIX) || line.trim().is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        rows += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        match parse_row(&fields, task, schema) {
            Ok(ex) => parsed.push((line_no, ex)),
            Err(reason) => malformed.push(Malformed {
                line: line_no,
                reason,
            }),
        }
    }
    if task.kind == TaskKind::RelevanceRanking {
        let mut positives: BTreeMap<u64, usize> = BTreeMap::new();
        for (_, ex) in &parsed {
            *positives.entry(ex.group.unwrap_or(0)).or_default() +=
                usize::from(ex.label == Label::Relevant(true));
        }
        parsed.retain(|(line, ex)| {
            let n = positives[&ex.group.unwrap_or(0)];
            if n != 1 {
                malformed.push(Malformed {
                    line: *line,
                    reason: format!("group has {n} positives, expected 1"),
                });
            }
            n == 1
        });
        malformed.sort_by_key(|m| m.line);
    }
    if rows > 0 && malformed.len() as f64 > MAX_MALFORMED_FRACTION * rows as f64 {
        let first = &malformed[0];
        bail!(
            Data,
            "{source}: {} of {rows} rows malformed (first at line {}: {}); check the column schema",
            malformed.len(),
            first.line,
            first.reason
        );
    }
    if parsed.is_empty() {
        bail!(Data, "{source}: no examples");
    }
    if !malformed.is_empty() {
        log::warn!(
            "{source}: skipped {} malformed rows (first at line {}: {})",
            malformed.len(),
            malformed[0].line,
            malformed[0].reason
        );
    }
    Ok(LoadReport {
        examples: parsed.into_iter().map(|(_, ex)| ex).collect(),
        malformed,
        rows,
    })
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Serializes examples in `schema`'s column layout, optionally preceded by the
/// augmentation provenance line.
pub fn format_tsv(
    examples: &[RawExample],
    task: &Task,
    schema: &Schema,
    provenance: Option<&AugmentConfig>,
) -> String {
    let width = schema.width();
    let mut out = String::new();
    if let Some(cfg) = provenance {
        out.push_str(&cfg.provenance_line());
        out.push('\n');
    }
    let mut row = vec![String::new(); width];
    if schema.header {
        row[schema.sentence1] = "sentence1".into();
        if let Some(i) = schema.sentence2 {
            row[i] = "sentence2".into();
        }
        row[schema.label] = "label".into();
        if let Some(i) = schema.group {
            row[i] = "group".into();
        }
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    for ex in examples {
        row.iter_mut().for_each(String::clear);
        row[schema.sentence1] = clean(&ex.sentence1);
        if let (Some(i), Some(s)) = (schema.sentence2, &ex.sentence2) {
            row[i] = clean(s);
        }
        row[schema.label] = task.format_label(&ex.label);
        if let (Some(i), Some(g)) = (schema.group, ex.group) {
            row[i] = g.to_string();
        }
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> (Task, Schema) {
        let t = Task::classification("s", false, &["0", "1"]).unwrap();
        let s = Schema::for_kind(t.kind);
        (t, s)
    }

    #[test]
    fn three_line_file() {
        let (t, s) = single();
        let r = parse_tsv("a b\t0\nc\t1\nd e f\t1\n", &t, &s, "x").unwrap();
        assert_eq!(r.examples.len(), 3);
        assert_eq!(r.examples[2].label, Label::Class(1));
    }

    #[test]
    fn regression_label_parses_as_real() {
        let t = Task::regression("sts", (0.0, 5.0)).unwrap();
        let r = parse_tsv("a\tb\t3.8\n", &t, &Schema::for_kind(t.kind), "x").unwrap();
        assert_eq!(r.examples[0].label, Label::Score(3.8));
    }

    #[test]
    fn missing_column_is_skipped_and_reported() {
        let (t, s) = single();
        let mut text = String::new();
        for i in 0..20 {
            text.push_str(&format!("w{i}\t{}\n", i % 2));
        }
        text.push_str("lonely\n");
        let r = parse_tsv(&text, &t, &s, "x").unwrap();
        assert_eq!(r.examples.len(), 20);
        assert_eq!(r.malformed.len(), 1);
        assert_eq!(r.malformed[0].line, 21);
        assert!(r.malformed[0].reason.contains("label"));
    }

    #[test]
    fn too_many_malformed_rows_is_an_error() {
        let (t, s) = single();
        let err = parse_tsv("a\t0\nb\nc\n", &t, &s, "x").unwrap_err();
        assert!(err.to_string().contains("malformed"));
    }

    #[test]
    fn header_and_custom_columns() {
        let t = Task::classification("s", false, &["neg", "pos"]).unwrap();
        let s = Schema {
            sentence1: 2,
            sentence2: None,
            label: 0,
            group: None,
            header: true,
        };
        let r = parse_tsv("label\tid\ttext\npos\t7\thello there\n", &t, &s, "x").unwrap();
        assert_eq!(r.examples.len(), 1);
        assert_eq!(r.examples[0].sentence1, "hello there");
        assert_eq!(r.examples[0].label, Label::Class(1));
    }

    #[test]
    fn ranking_groups_need_one_positive() {
        let t = Task::ranking("r").unwrap();
        let s = Schema::for_kind(t.kind);
        let mut text = String::new();
        for g in 0..10 {
            text.push_str(&format!("q\tp\t1\t{g}\nq\tn\t0\t{g}\n"));
        }
        text.push_str("q\tx\t0\t99\n");
        let r = parse_tsv(&text, &t, &s, "x").unwrap();
        assert_eq!(r.examples.len(), 20);
        assert_eq!(r.malformed.len(), 1);
    }

    #[test]
    fn format_then_parse_round_trips() {
        let t = Task::ranking("r").unwrap();
        let s = Schema {
            header: true,
            ..Schema::for_kind(t.kind)
        };
        let exs = vec![
            RawExample {
                sentence1: "q one".into(),
                sentence2: Some("c one".into()),
                label: Label::Relevant(true),
                group: Some(4),
            },
            RawExample {
                sentence1: "q one".into(),
                sentence2: Some("c two".into()),
                label: Label::Relevant(false),
                group: Some(4),
            },
        ];
        let cfg = AugmentConfig::new(0.1, 2, 9).unwrap();
        let text = format_tsv(&exs, &t, &s, Some(&cfg));
        assert!(text.starts_with("#mtkd-aug seed=9 p=0.1 mult=2\n"));
        assert_eq!(parse_tsv(&text, &t, &s, "x").unwrap().examples, exs);
    }

    #[test]
    fn schema_must_fit_kind() {
        let s = Schema::for_kind(TaskKind::SingleClassification);
        assert!(s.validate(TaskKind::PairRegression).is_err());
        let mut s = Schema::for_kind(TaskKind::PairRegression);
        s.label = 0;
        assert!(s.validate(TaskKind::PairRegression).is_err());
    }
}
