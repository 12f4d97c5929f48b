//! Generator for the bundled four-task synthetic suite.
//!
//! Every sentence mentions a topic noun and a polarity adjective. The tasks
//! read different facets of that structure:
//!
//! * `sent`: single-sentence polarity classification.
//! * `para`: whether two sentences share a topic.
//! * `sim`: similarity score `2.5·[same topic] + 2.5·[same polarity]` in 0–5,
//!   with deliberately few training examples.
//! * `rank`: pick the one candidate (out of four) on the query's topic.
//!
//! `sim` needs both facets, which the larger tasks teach.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{format_tsv, Label, RawExample, Schema, Task};
use crate::error::{Error, Result};
use crate::seed;

const TOPICS: [[&str; 3]; 6] = [
    ["pizza", "soup", "cake"],
    ["song", "album", "concert"],
    ["match", "team", "stadium"],
    ["hotel", "flight", "beach"],
    ["laptop", "phone", "camera"],
    ["storm", "rain", "snow"],
];
const POSITIVE: [&str; 8] = [
    "great", "wonderful", "excellent", "lovely", "fantastic", "superb", "delightful", "brilliant",
];
const NEGATIVE: [&str; 8] = [
    "awful", "terrible", "dreadful", "horrible", "poor", "boring", "disappointing", "bad",
];
const DETERMINERS: [&str; 6] = ["the", "this", "that", "a", "our", "my"];
const VERBS: [&str; 5] = ["was", "is", "seemed", "felt", "looked"];
const ADVERBS: [&str; 6] = ["really", "quite", "very", "truly", "rather", "somewhat"];
const ENDINGS: [&str; 3] = [".", "!", ""];

/// Split sizes: (train, dev) in examples; ranking counts groups of four.
pub const SIZES: [(&str, usize, usize); 4] = [("sent", 200, 100), ("para", 1000, 100), ("sim", 24, 100), ("rank", 200, 40)];

pub const RANK_CANDIDATES: usize = 4;

fn sentence<R: Rng>(rng: &mut R, topic: usize, positive: bool) -> String {
    let pick = |rng: &mut R, xs: &[&'static str]| *xs.choose(rng).expect("non-empty list");
    let adjs: &[&str] = if positive { &POSITIVE } else { &NEGATIVE };
    let mut s = format!(
        "{} {} {} {} {}",
        pick(rng, &DETERMINERS),
        pick(rng, &TOPICS[topic]),
        pick(rng, &VERBS),
        pick(rng, &ADVERBS),
        pick(rng, adjs)
    );
    if rng.gen_bool(0.3) {
        s.push_str(&format!(
            " and the {} {} {}",
            pick(rng, &TOPICS[topic]),
            pick(rng, &VERBS),
            pick(rng, adjs)
        ));
    }
    s.push_str(pick(rng, &ENDINGS));
    s
}

fn other_topic<R: Rng>(rng: &mut R, t: usize) -> usize {
    (t + rng.gen_range(1..TOPICS.len())) % TOPICS.len()
}

/// One synthetic task with both splits.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub task: Task,
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
}

fn split<R: Rng>(rng: &mut R, name: &str, n: usize, group_base: u64) -> Vec<RawExample> {
    let mut out = Vec::new();
    for i in 0..n {
        match name {
            "sent" => {
                let pos = rng.gen_bool(0.5);
                let t = rng.gen_range(0..TOPICS.len());
                out.push(RawExample {
                    sentence1: sentence(rng, t, pos),
                    sentence2: None,
                    label: Label::Class(usize::from(pos)),
                    group: None,
                });
            }
            "para" => {
                let t1 = rng.gen_range(0..TOPICS.len());
                let same = rng.gen_bool(0.5);
                let t2 = if same { t1 } else { other_topic(rng, t1) };
                let (p1, p2) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
                out.push(RawExample {
                    sentence1: sentence(rng, t1, p1),
                    sentence2: Some(sentence(rng, t2, p2)),
                    label: Label::Class(usize::from(same)),
                    group: None,
                });
            }
            "sim" => {
                let t1 = rng.gen_range(0..TOPICS.len());
                let same_t = rng.gen_bool(0.5);
                let t2 = if same_t { t1 } else { other_topic(rng, t1) };
                let p1 = rng.gen_bool(0.5);
                let same_p = rng.gen_bool(0.5);
                let p2 = if same_p { p1 } else { !p1 };
                out.push(RawExample {
                    sentence1: sentence(rng, t1, p1),
                    sentence2: Some(sentence(rng, t2, p2)),
                    label: Label::Score(2.5 * f64::from(u8::from(same_t)) + 2.5 * f64::from(u8::from(same_p))),
                    group: None,
                });
            }
            "rank" => {
                let t = rng.gen_range(0..TOPICS.len());
                let qpos = rng.gen_bool(0.5);
                let query = sentence(rng, t, qpos);
                let mut others: Vec<usize> = (0..TOPICS.len()).filter(|&o| o != t).collect();
                others.shuffle(rng);
                let mut cands: Vec<(usize, bool)> = vec![(t, true)];
                cands.extend(others.iter().take(RANK_CANDIDATES - 1).map(|&o| (o, false)));
                cands.shuffle(rng);
                for (topic, positive) in cands {
                    let pol = rng.gen_bool(0.5);
                    out.push(RawExample {
                        sentence1: query.clone(),
                        sentence2: Some(sentence(rng, topic, pol)),
                        label: Label::Relevant(positive),
                        group: Some(group_base + i as u64),
                    });
                }
            }
            other => unreachable!("unknown synthetic task {other}"),
        }
    }
    out
}

fn task_def(name: &str) -> Result<Task> {
    match name {
        "sent" => Task::classification("sent", false, &["negative", "positive"]),
        "para" => Task::classification("para", true, &["different", "same"]),
        "sim" => Task::regression("sim", (0.0, 5.0)),
        "rank" => Task::ranking("rank"),
        other => Err(Error::Data(format!("unknown synthetic task {other}"))),
    }
}

pub fn generate(seed: u64) -> Result<Vec<SyntheticTask>> {
    SIZES
        .iter()
        .map(|&(name, n_train, n_dev)| {
            let mut rng = seed::rng_for(seed, name);
            let train = split(&mut rng, name, n_train, 0);
            let dev = split(&mut rng, name, n_dev, n_train as u64);
            Ok(SyntheticTask {
                task: task_def(name)?,
                train,
                dev,
            })
        })
        .collect()
}

/// Writes `<task>_train.tsv` and `<task>_dev.tsv` for every task into `dir`
/// using each kind's default column layout.
pub fn write_suite(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    for t in generate(seed)? {
        let schema = Schema::for_kind(t.task.kind);
        for (split, rows) in [("train", &t.train), ("dev", &t.dev)] {
            let path = dir.join(format!("{}_{split}.tsv", t.task.name));
            std::fs::write(&path, format_tsv(rows, &t.task, &schema, None)).map_err(|e| Error::file(&path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{check_groups, parse_tsv};

    #[test]
    fn sizes_and_groups() {
        let suite = generate(1).unwrap();
        assert_eq!(suite.len(), 4);
        let rank = &suite[3];
        assert_eq!(rank.train.len(), 200 * RANK_CANDIDATES);
        check_groups(&rank.train).unwrap();
        check_groups(&rank.dev).unwrap();
        assert_eq!(suite[2].train.len(), 24);
    }

    #[test]
    fn generated_rows_parse_back() {
        for t in generate(3).unwrap() {
            let schema = Schema::for_kind(t.task.kind);
            let text = format_tsv(&t.dev, &t.task, &schema, None);
            let r = parse_tsv(&text, &t.task, &schema, "gen").unwrap();
            assert_eq!(r.examples, t.dev, "{}", t.task.name);
        }
    }
}
